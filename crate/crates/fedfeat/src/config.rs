//! Flat dotted-key experiment configuration files.
//!
//! ```text
//! # comment
//! dataset = synthetic
//! clients = 5
//! dp.kind = gaussian
//! dp.epsilon = 2.0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::dp::{NoiseKind, PrivacyBudget};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::nn::{ArchDims, ArchId};
use crate::proto::{ExperimentConfig, PartitionKind};

/// Environment variable that prefixes relative dataset paths.
pub const DATA_ROOT_ENV: &str = "FEDFEAT_DATA";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        coarse_labels: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub exp: ExperimentConfig,
    pub source: DataSource,
    /// 0 means "use everything".
    pub train_subset: usize,
    pub test_subset: usize,
}

struct Raw {
    values: BTreeMap<String, (String, usize)>,
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.values.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                Error::Config(format!("line {}: cannot parse `{}` for key `{}`", line, v, key))
            }),
        }
    }
}

fn root_relative(p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Path::new(&root).join(path),
        None => path,
    }
}

fn parse_list(v: &str) -> Vec<PathBuf> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(root_relative)
        .collect()
}

/// Parse a config file. Defaults mirror the standard experimental setup
/// (5 local epochs, Adam at 0.01, batch 64, 10% feature sharing, 2 retrain
/// epochs, delta 1e-5); unknown keys are rejected with their line number.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut values: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{}`", line_no, line))
        })?;
        let key = key.trim().to_string();
        if values.contains_key(&key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{}`",
                line_no, key
            )));
        }
        values.insert(key, (value.trim().to_string(), line_no));
    }
    let mut raw = Raw { values };

    // --- model -------------------------------------------------------------
    let arch = match raw.take("model.arch") {
        None => ArchId::Mlp,
        Some((v, line)) => match v.as_str() {
            "mlp" => ArchId::Mlp,
            "cnn" => ArchId::Cnn,
            other => {
                return Err(Error::Config(format!(
                    "line {}: model.arch must be `mlp` or `cnn`, got `{}`",
                    line, other
                )))
            }
        },
    };
    let mut dims = ArchDims::default();
    if let Some((v, line)) = raw.take("model.mlp_hidden") {
        let parts: Vec<usize> = v
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("line {}: bad model.mlp_hidden `{}`", line, v)))?;
        if parts.len() != 2 || parts.contains(&0) {
            return Err(Error::Config(format!(
                "line {}: model.mlp_hidden needs two positive widths",
                line
            )));
        }
        dims.mlp_hidden = [parts[0], parts[1]];
    }
    if let Some((v, line)) = raw.take("model.cnn_channels") {
        let parts: Vec<usize> = v
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("line {}: bad model.cnn_channels `{}`", line, v)))?;
        if parts.len() != 2 || parts.contains(&0) {
            return Err(Error::Config(format!(
                "line {}: model.cnn_channels needs two positive counts",
                line
            )));
        }
        dims.cnn_channels = [parts[0], parts[1]];
    }
    dims.cnn_fc = raw.parse("model.cnn_fc", dims.cnn_fc)?;
    dims.cnn_kernel = raw.parse("model.cnn_kernel", dims.cnn_kernel)?;

    // --- protocol ----------------------------------------------------------
    let n_clients = raw.parse("clients", 5usize)?;
    let local_epochs = raw.parse("local_epochs", 5usize)?;
    let global_rounds = raw.parse("rounds", 10usize)?;
    let lr = raw.parse("lr", 0.01f64)?;
    let batch_size = raw.parse("batch_size", 64usize)?;
    let feature_share_fraction = raw.parse("share_fraction", 0.1f64)?;
    let retrain_epochs = raw.parse("retrain_epochs", 2usize)?;
    let retrain_lr = raw.parse("retrain_lr", 0.001f64)?;
    let seed = raw.parse("seed", 0u64)?;
    let init_sigma = raw.parse("init_sigma", 0.05f64)?;

    let partition = match raw.take("partition") {
        None => PartitionKind::Iid,
        Some((v, line)) => match v.as_str() {
            "iid" => PartitionKind::Iid,
            "shard" => PartitionKind::ShardNonIid {
                shard_size: raw.parse("partition.shard_size", 300usize)?,
                shards_per_client: raw.parse("partition.shards_per_client", 2usize)?,
            },
            other => {
                return Err(Error::Config(format!(
                    "line {}: partition must be `iid` or `shard`, got `{}`",
                    line, other
                )))
            }
        },
    };

    // --- privacy -----------------------------------------------------------
    let dp_kind = raw.take("dp.kind");
    let dp = match dp_kind.as_ref().map(|(v, _)| v.as_str()) {
        None | Some("none") => {
            // stray dp.* keys with dp disabled would silently do nothing
            for k in ["dp.epsilon", "dp.delta", "dp.sensitivity"] {
                if let Some((_, line)) = raw.take(k) {
                    if dp_kind.is_some() {
                        return Err(Error::Config(format!(
                            "line {}: `{}` given but dp.kind = none",
                            line, k
                        )));
                    }
                    return Err(Error::Config(format!(
                        "line {}: `{}` given without dp.kind",
                        line, k
                    )));
                }
            }
            None
        }
        Some("gaussian") | Some("laplace") => {
            let kind = if dp_kind.as_ref().map(|(v, _)| v.as_str()) == Some("gaussian") {
                NoiseKind::Gaussian
            } else {
                NoiseKind::Laplace
            };
            let budget = PrivacyBudget {
                epsilon: raw.parse("dp.epsilon", 2.0f64)?,
                delta: match kind {
                    NoiseKind::Gaussian => Some(raw.parse("dp.delta", 1e-5f64)?),
                    NoiseKind::Laplace => {
                        raw.take("dp.delta");
                        None
                    }
                },
                sensitivity: raw.parse("dp.sensitivity", 1.0f64)?,
                kind,
            };
            budget.validate()?;
            Some(budget)
        }
        Some(other) => {
            let line = dp_kind.as_ref().map(|(_, l)| *l).unwrap_or(0);
            return Err(Error::Config(format!(
                "line {}: dp.kind must be none, gaussian, or laplace, got `{}`",
                line, other
            )));
        }
    };

    // --- metrics -----------------------------------------------------------
    let metric_cfg = MetricConfig {
        bins: raw.parse("metrics.bins", 32usize)?,
        eps1: raw.parse("metrics.eps1", 1e-9f64)?,
        eps2: raw.parse("metrics.eps2", 1e-9f64)?,
    };

    // --- dataset -----------------------------------------------------------
    let source = match raw.take("dataset") {
        None => return Err(Error::Config("missing required key `dataset`".into())),
        Some((v, line)) => match v.as_str() {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                spec.classes = raw.parse("synthetic.classes", spec.classes)?;
                spec.train = raw.parse("synthetic.train", spec.train)?;
                spec.test = raw.parse("synthetic.test", spec.test)?;
                spec.image_size = raw.parse("synthetic.image_size", spec.image_size)?;
                spec.channels = raw.parse("synthetic.channels", spec.channels)?;
                spec.noise = raw.parse("synthetic.noise", spec.noise)?;
                spec.max_shift = raw.parse("synthetic.max_shift", spec.max_shift)?;
                spec.seed = raw.parse("synthetic.seed", spec.seed)?;
                DataSource::Synthetic(spec)
            }
            "idx" => {
                let mut path_for = |k: &str| -> Result<PathBuf> {
                    match raw.take(k) {
                        Some((v, _)) => Ok(root_relative(&v)),
                        None => Err(Error::Config(format!(
                            "dataset = idx requires `{}`",
                            k
                        ))),
                    }
                };
                DataSource::Idx {
                    train_images: path_for("dataset.train_images")?,
                    train_labels: path_for("dataset.train_labels")?,
                    test_images: path_for("dataset.test_images")?,
                    test_labels: path_for("dataset.test_labels")?,
                }
            }
            "cifar10" | "cifar100" => {
                let train = match raw.take("dataset.train") {
                    Some((v, _)) => parse_list(&v),
                    None => return Err(Error::Config("cifar dataset requires `dataset.train`".into())),
                };
                let test = match raw.take("dataset.test") {
                    Some((v, _)) => parse_list(&v),
                    None => return Err(Error::Config("cifar dataset requires `dataset.test`".into())),
                };
                DataSource::Cifar {
                    train,
                    test,
                    coarse_labels: v == "cifar100",
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "line {}: dataset must be synthetic, idx, cifar10, or cifar100; got `{}`",
                    line, other
                )))
            }
        },
    };
    let train_subset = raw.parse("train_subset", 0usize)?;
    let test_subset = raw.parse("test_subset", 0usize)?;

    if let Some((key, (_, line))) = raw.values.into_iter().next() {
        return Err(Error::Config(format!("line {}: unknown key `{}`", line, key)));
    }

    let exp = ExperimentConfig {
        arch,
        dims,
        n_clients,
        local_epochs,
        global_rounds,
        lr,
        batch_size,
        partition,
        dp,
        feature_share_fraction,
        retrain_epochs,
        retrain_lr,
        seed,
        init_sigma,
        metric_cfg,
    };
    exp.validate()?;
    Ok(RunConfig {
        exp,
        source,
        train_subset,
        test_subset,
    })
}
