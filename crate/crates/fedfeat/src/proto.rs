//! Federated protocol: client local training with privacy-perturbed features,
//! dataset-size-weighted parameter averaging, feature aggregation, server-side
//! classifier retraining, and the global round loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{partition_iid, partition_shard_noniid, Dataset, PartitionPlan};
use crate::dp::{
    clip_backward, clip_features_with_cache, noise_scale, perturb_features, NoiseScale,
    PrivacyBudget,
};
use crate::error::{Error, Result};
use crate::metrics::{metric_report, MetricConfig, MetricReport};
use crate::nn::{
    adam_step, backward_classifier, backward_extractor, classify, extract_features,
    init_params_with_dims, softmax_cross_entropy, ArchDims, ArchId, GradSet, InitConfig,
    InputShape, ModelParams, OptimState,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

const PURPOSE_INIT: u64 = 1;
const PURPOSE_PARTITION: u64 = 2;
const PURPOSE_CLIENT: u64 = 3;
const PURPOSE_RETRAIN: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-purpose stream seeds derived from one experiment seed.
pub fn derive_seed(root: u64, purpose: u64, a: u64, b: u64) -> u64 {
    splitmix64(root ^ splitmix64(purpose ^ splitmix64(a ^ splitmix64(b))))
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FedAvg,
    FedFeatPlus,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::FedAvg => write!(f, "fedavg"),
            Mode::FedFeatPlus => write!(f, "fedfeatplus"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Iid,
    ShardNonIid {
        shard_size: usize,
        shards_per_client: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: ArchId,
    pub dims: ArchDims,
    pub n_clients: usize,
    pub local_epochs: usize,
    pub global_rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub partition: PartitionKind,
    /// `None` disables clipping and noise entirely (the zero-noise limit).
    pub dp: Option<PrivacyBudget>,
    pub feature_share_fraction: f64,
    pub retrain_epochs: usize,
    /// Server-side retraining step size; usually smaller than the client lr
    /// so retraining refines rather than overwrites the averaged classifier.
    pub retrain_lr: f64,
    pub seed: u64,
    pub init_sigma: f64,
    pub metric_cfg: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: ArchId::Mlp,
            dims: ArchDims::default(),
            n_clients: 5,
            local_epochs: 5,
            global_rounds: 10,
            lr: 0.01,
            batch_size: 64,
            partition: PartitionKind::Iid,
            dp: None,
            feature_share_fraction: 0.1,
            retrain_epochs: 2,
            retrain_lr: 0.001,
            seed: 0,
            init_sigma: 0.05,
            metric_cfg: MetricConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.retrain_lr > 0.0) {
            return Err(Error::Config(format!(
                "retrain_lr must be positive, got {}",
                self.retrain_lr
            )));
        }
        if !(self.feature_share_fraction > 0.0 && self.feature_share_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "feature_share_fraction must be in (0, 1], got {}",
                self.feature_share_fraction
            )));
        }
        if let Some(b) = &self.dp {
            b.validate()?;
        }
        self.metric_cfg.validate()?;
        Ok(())
    }

    fn noise(&self) -> Result<Option<NoiseScale>> {
        self.dp.as_ref().map(|b| noise_scale(b)).transpose()
    }
}

/// Perturbed feature rows plus labels a client ships for retraining.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePacket {
    pub client_id: usize,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub round: usize,
}

impl FeaturePacket {
    pub fn empty(client_id: usize, round: usize) -> FeaturePacket {
        FeaturePacket {
            client_id,
            features: Tensor::zeros(&[0, 0]),
            labels: Vec::new(),
            round,
        }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

/// Server-side concatenation of all client packets, in client-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub per_client_offsets: Vec<usize>,
}

impl FeatureStore {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

/// Everything a client reports back from one round of local work.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub params: ModelParams,
    pub packet: FeaturePacket,
    /// The packet's rows before noise was added (after clipping, if any) —
    /// the reference side of the privacy metrics.
    pub fresh_features: Tensor,
    pub mean_train_loss: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub global_test_loss: f64,
    pub mean_client_train_loss: f64,
    pub metrics: MetricReport,
    pub wall_ms: u64,
}

pub const ROUNDS_CSV_HEADER: &str = "round,acc,loss,train_loss,mi,ed,kl,fc,wall_ms";

impl RoundReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.global_test_accuracy,
            self.global_test_loss,
            self.mean_client_train_loss,
            self.metrics.mi,
            self.metrics.ed,
            self.metrics.kl,
            self.metrics.fc,
            self.wall_ms
        )
    }
}

/// Render reports as the rounds.csv text (header + one line per round).
pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Client side
// ---------------------------------------------------------------------------

struct DpStep {
    scale: NoiseScale,
    budget: PrivacyBudget,
}

/// One forward/backward pass over a batch. With privacy enabled the loss sees
/// clipped-and-perturbed features and the gradient flows through the true
/// clipping Jacobian (noise addition is identity in the backward pass).
fn batch_loss_and_grads(
    model: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    dp: Option<&DpStep>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradSet, Tensor)> {
    let (feat, ecache) = extract_features(model, batch)?;
    let (clipped, clip_cache) = match dp {
        Some(step) => {
            let (c, cache) =
                clip_features_with_cache(&feat, step.budget.sensitivity, step.budget.kind);
            (c, Some(cache))
        }
        None => (feat, None),
    };
    let seen = match dp {
        Some(step) => perturb_features(&clipped, &step.scale, rng),
        None => clipped.clone(),
    };
    let (logits, ccache) = classify(model, &seen)?;
    let (loss, glogits) = softmax_cross_entropy(&logits, labels)?;
    let (gfeat, classifier) = backward_classifier(model, &ccache, &glogits);
    let gfeat = match &clip_cache {
        Some(cache) => clip_backward(&gfeat, cache),
        None => gfeat,
    };
    let extractor = backward_extractor(model, &ecache, &gfeat);
    Ok((
        loss,
        GradSet {
            extractor,
            classifier,
        },
        clipped,
    ))
}

/// Local training: E epochs of minibatch Adam on the client's shard, starting
/// from the distributed global model (which is not mutated). The feature
/// packet holds clipped features from the final epoch, subsampled to the
/// configured share fraction and perturbed with an independent noise draw.
pub fn client_local_train(
    global_model: &ModelParams,
    data: &Dataset,
    shard: &[usize],
    cfg: &ExperimentConfig,
    round: usize,
    client_id: usize,
) -> Result<ClientOutcome> {
    if shard.is_empty() {
        return Err(Error::Protocol(format!("client {} has no data", client_id)));
    }
    let dp = match (cfg.dp.as_ref(), cfg.noise()?) {
        (Some(budget), Some(scale)) => Some(DpStep {
            scale,
            budget: *budget,
        }),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        PURPOSE_CLIENT,
        round as u64,
        client_id as u64,
    ));

    let mut model = global_model.clone();
    let mut opt = OptimState::new(&model, cfg.lr);
    let mut losses = Vec::new();
    let mut final_epoch_feats: Vec<Tensor> = Vec::new();
    let mut final_epoch_labels: Vec<usize> = Vec::new();

    let mut order = shard.to_vec();
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == cfg.local_epochs;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads, clipped) =
                batch_loss_and_grads(&model, &batch, &labels, dp.as_ref(), &mut rng)?;
            adam_step(&mut model, &grads, &mut opt, false)?;
            losses.push(loss);
            if last {
                final_epoch_feats.push(clipped);
                final_epoch_labels.extend_from_slice(&labels);
            }
        }
    }

    let (packet, fresh) = if final_epoch_labels.is_empty() {
        (FeaturePacket::empty(client_id, round), Tensor::zeros(&[0, 0]))
    } else {
        let all = Tensor::concat_rows(&final_epoch_feats.iter().collect::<Vec<_>>())?;
        let n = all.rows();
        let k = ((cfg.feature_share_fraction * n as f64).round() as usize).clamp(1, n);
        let mut pick: Vec<usize> = (0..n).collect();
        pick.shuffle(&mut rng);
        pick.truncate(k);
        let width = all.row_len();
        let mut fresh_data = Vec::with_capacity(k * width);
        let mut labels = Vec::with_capacity(k);
        for &i in &pick {
            fresh_data.extend_from_slice(all.row(i));
            labels.push(final_epoch_labels[i]);
        }
        let fresh = Tensor::from_vec(&[k, width], fresh_data)?;
        let shared = match &dp {
            Some(step) => perturb_features(&fresh, &step.scale, &mut rng),
            None => fresh.clone(),
        };
        (
            FeaturePacket {
                client_id,
                features: shared,
                labels,
                round,
            },
            fresh,
        )
    };

    let mean_train_loss = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok(ClientOutcome {
        params: model,
        packet,
        fresh_features: fresh,
        mean_train_loss,
        examples: shard.len(),
    })
}

// ---------------------------------------------------------------------------
// Server side
// ---------------------------------------------------------------------------

/// Dataset-size-weighted elementwise mean over both parameter groups.
pub fn fedavg_aggregate(params_and_sizes: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = params_and_sizes
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    if params_and_sizes.iter().any(|(_, s)| *s == 0) {
        return Err(Error::Protocol("client dataset sizes must be positive".into()));
    }
    let total: usize = params_and_sizes.iter().map(|(_, s)| s).sum();

    // Accumulate weighted deviations from the first model rather than the
    // weighted values themselves: identical inputs then aggregate to a
    // bit-exact copy instead of picking up rounding from Σ wᵢ·v.
    let base = (*first).clone();
    let mut out = base.clone();
    for (model, size) in params_and_sizes {
        let w = *size as f64 / total as f64;
        let triples = out
            .extractor
            .iter_mut()
            .zip(model.extractor.iter())
            .zip(base.extractor.iter())
            .chain(
                out.classifier
                    .iter_mut()
                    .zip(model.classifier.iter())
                    .zip(base.classifier.iter()),
            );
        for ((acc, src), b) in triples {
            if acc.value.shape() != src.value.shape() {
                return Err(Error::Protocol(format!(
                    "parameter {} shape mismatch across clients: {:?} vs {:?}",
                    src.name,
                    acc.value.shape(),
                    src.value.shape()
                )));
            }
            for ((a, s), base_v) in acc
                .value
                .data_mut()
                .iter_mut()
                .zip(src.value.data())
                .zip(b.value.data())
            {
                *a += w * (s - base_v);
            }
        }
    }
    Ok(out)
}

/// Concatenate packets in ascending client-id order, recording per-client row
/// offsets.
pub fn aggregate_features(packets: &[FeaturePacket]) -> Result<FeatureStore> {
    let mut ordered: Vec<&FeaturePacket> = packets.iter().filter(|p| p.rows() > 0).collect();
    ordered.sort_by_key(|p| p.client_id);
    if let Some(first) = ordered.first() {
        for p in &ordered {
            if p.features.row_len() != first.features.row_len() {
                return Err(Error::Protocol(format!(
                    "feature width mismatch: client {} sent {}, client {} sent {}",
                    first.client_id,
                    first.features.row_len(),
                    p.client_id,
                    p.features.row_len()
                )));
            }
            if p.round != first.round {
                return Err(Error::Protocol(format!(
                    "mixed rounds in aggregation: {} and {}",
                    first.round, p.round
                )));
            }
        }
    }
    let mut offsets = Vec::with_capacity(ordered.len());
    let mut labels = Vec::new();
    let mut rows = 0;
    for p in &ordered {
        offsets.push(rows);
        labels.extend_from_slice(&p.labels);
        rows += p.rows();
    }
    let features = Tensor::concat_rows(&ordered.iter().map(|p| &p.features).collect::<Vec<_>>())?;
    Ok(FeatureStore {
        features,
        labels,
        per_client_offsets: offsets,
    })
}

/// Retrain only the classifier on the aggregated feature store. The feature
/// extractor is never touched; an empty store is a warned no-op.
pub fn retrain_classifier(
    global_model: &ModelParams,
    store: &FeatureStore,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<ModelParams> {
    if store.rows() == 0 {
        log::warn!("round {}: empty feature store, skipping retraining", round);
        return Ok(global_model.clone());
    }
    let width = store.features.row_len();
    if width != global_model.feature_dim() {
        return Err(Error::Protocol(format!(
            "stored feature width {} does not match classifier input {}",
            width,
            global_model.feature_dim()
        )));
    }
    let mut model = global_model.clone();
    let mut opt = OptimState::new(&model, cfg.retrain_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        PURPOSE_RETRAIN,
        round as u64,
        0,
    ));
    let mut order: Vec<usize> = (0..store.rows()).collect();
    for _ in 0..cfg.retrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * width);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(store.features.row(i));
                labels.push(store.labels[i]);
            }
            let feats = Tensor::from_vec(&[chunk.len(), width], data)?;
            let (logits, ccache) = classify(&model, &feats)?;
            let (_, glogits) = softmax_cross_entropy(&logits, &labels)?;
            let (_, classifier) = backward_classifier(&model, &ccache, &glogits);
            let grads = GradSet {
                extractor: model
                    .extractor
                    .iter()
                    .map(|p| Tensor::zeros(p.value.shape()))
                    .collect(),
                classifier,
            };
            adam_step(&mut model, &grads, &mut opt, true)?;
        }
    }
    debug_assert!(model.extractor_eq(global_model));
    Ok(model)
}

/// Accuracy and mean loss of the clean (noise-free) forward pass on a test
/// set.
pub fn evaluate(model: &ModelParams, test: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Protocol("empty test set".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = test.batch(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| test.labels[i]).collect();
        let (feat, _) = extract_features(model, &batch)?;
        let (logits, _) = classify(model, &feat)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == y {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / test.len() as f64,
        loss_sum / test.len() as f64,
    ))
}

// ---------------------------------------------------------------------------
// Round loop
// ---------------------------------------------------------------------------

/// Per-round artifacts handed to an observer (checkpointing, feature dumps).
pub struct RoundArtifacts<'a> {
    pub round: usize,
    pub model: &'a ModelParams,
    pub fresh_features: &'a Tensor,
    pub noisy_features: &'a Tensor,
    pub feature_labels: &'a [usize],
}

pub fn make_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<PartitionPlan> {
    let seed = derive_seed(cfg.seed, PURPOSE_PARTITION, 0, 0);
    match cfg.partition {
        PartitionKind::Iid => partition_iid(train, cfg.n_clients, seed),
        PartitionKind::ShardNonIid {
            shard_size,
            shards_per_client,
        } => partition_shard_noniid(train, cfg.n_clients, shard_size, shards_per_client, seed),
    }
}

pub fn init_global_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelParams> {
    init_params_with_dims(
        cfg.arch,
        train.num_classes,
        InputShape::new(train.height(), train.width(), train.channels()),
        &InitConfig {
            mu: 0.0,
            sigma_init: cfg.init_sigma,
            seed: derive_seed(cfg.seed, PURPOSE_INIT, 0, 0),
        },
        &cfg.dims,
    )
}

/// Run the full experiment: T rounds of local training on every client,
/// weighted averaging, and — in FedFeatPlus mode — feature aggregation and
/// classifier retraining before redistribution. Deterministic given the seed.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: Mode,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<RoundReport>> {
    run_experiment_observed(cfg, mode, train, test, |_| Ok(()))
}

pub fn run_experiment_observed<F>(
    cfg: &ExperimentConfig,
    mode: Mode,
    train: &Dataset,
    test: &Dataset,
    mut observer: F,
) -> Result<Vec<RoundReport>>
where
    F: FnMut(&RoundArtifacts) -> Result<()>,
{
    cfg.validate()?;
    let plan = make_partition(cfg, train)?;
    let mut global = init_global_model(cfg, train)?;

    let mut reports = Vec::with_capacity(cfg.global_rounds);
    for round in 1..=cfg.global_rounds {
        let started = Instant::now();
        let step = |global: &mut ModelParams| -> Result<(RoundReport, Tensor, Tensor, Vec<usize>)> {
            let mut outcomes = Vec::with_capacity(cfg.n_clients);
            for (client_id, shard) in plan.assignments.iter().enumerate() {
                outcomes.push(client_local_train(
                    global, train, shard, cfg, round, client_id,
                )?);
            }

            let weighted: Vec<(&ModelParams, usize)> =
                outcomes.iter().map(|o| (&o.params, o.examples)).collect();
            let mut next = fedavg_aggregate(&weighted)?;

            let fresh = Tensor::concat_rows(
                &outcomes.iter().map(|o| &o.fresh_features).collect::<Vec<_>>(),
            )?;
            let noisy = Tensor::concat_rows(
                &outcomes.iter().map(|o| &o.packet.features).collect::<Vec<_>>(),
            )?;
            let labels: Vec<usize> = outcomes
                .iter()
                .flat_map(|o| o.packet.labels.iter().copied())
                .collect();
            let metrics = if fresh.rows() > 0 {
                metric_report(&fresh, &noisy, &cfg.metric_cfg)?
            } else {
                MetricReport::default()
            };

            if mode == Mode::FedFeatPlus {
                let store = aggregate_features(&outcomes.iter().map(|o| o.packet.clone()).collect::<Vec<_>>())?;
                let retrained = retrain_classifier(&next, &store, cfg, round)?;
                if !retrained.extractor_eq(&next) {
                    return Err(Error::Protocol(
                        "feature extractor changed during classifier retraining".into(),
                    ));
                }
                next = retrained;
            }

            *global = next;
            let (acc, loss) = evaluate(global, test, cfg.batch_size)?;
            let train_loss = outcomes.iter().map(|o| o.mean_train_loss).sum::<f64>()
                / outcomes.len() as f64;
            Ok((
                RoundReport {
                    round,
                    global_test_accuracy: acc,
                    global_test_loss: loss,
                    mean_client_train_loss: train_loss,
                    metrics,
                    wall_ms: 0,
                },
                fresh,
                noisy,
                labels,
            ))
        };
        let (mut report, fresh, noisy, labels) =
            step(&mut global).map_err(|e| e.in_round(round))?;
        report.wall_ms = started.elapsed().as_millis() as u64;
        observer(&RoundArtifacts {
            round,
            model: &global,
            fresh_features: &fresh,
            noisy_features: &noisy,
            feature_labels: &labels,
        })
        .map_err(|e| e.in_round(round))?;
        reports.push(report);
    }
    Ok(reports)
}
