//! Dataset loading (IDX and CIFAR binary formats), a deterministic synthetic
//! benchmark for offline runs, and IID / shard-based non-IID client
//! partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images as an N x H x W x C tensor scaled to [0,1], with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    /// Copy the given examples into a channels-last batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Tensor::from_vec(
            &[indices.len(), self.height(), self.width(), self.channels()],
            data,
        )
        .expect("consistent dims")
    }

    /// Keep only the first `n` examples of a seeded shuffle. Used to carve
    /// desk-scale subsets out of full datasets.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let n = n.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(n * row);
        let mut labels = Vec::with_capacity(n);
        for &i in &order {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::from_vec(&[n, self.height(), self.width(), self.channels()], data)
                .expect("consistent dims"),
            labels,
            name: self.name.clone(),
            num_classes: self.num_classes,
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            msg: "truncated file".into(),
            offset: bytes.len() as u64,
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an IDX image/label file pair (the MNIST family's format).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            msg: format!("bad image magic 0x{:08x}", magic),
            offset: 0,
        });
    }
    let n = read_u32_be(&img_bytes, 4)? as usize;
    let h = read_u32_be(&img_bytes, 8)? as usize;
    let w = read_u32_be(&img_bytes, 12)? as usize;
    let want = 16 + n * h * w;
    if img_bytes.len() < want {
        return Err(Error::Format {
            msg: format!("image payload wants {} bytes", want),
            offset: img_bytes.len() as u64,
        });
    }

    let lmagic = read_u32_be(&lbl_bytes, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            msg: format!("bad label magic 0x{:08x}", lmagic),
            offset: 0,
        });
    }
    let ln = read_u32_be(&lbl_bytes, 4)? as usize;
    if ln != n {
        return Err(Error::Format {
            msg: format!("count mismatch: {} images vs {} labels", n, ln),
            offset: 4,
        });
    }
    if lbl_bytes.len() < 8 + ln {
        return Err(Error::Format {
            msg: format!("label payload wants {} bytes", 8 + ln),
            offset: lbl_bytes.len() as u64,
        });
    }

    let data: Vec<f64> = img_bytes[16..16 + n * h * w]
        .iter()
        .map(|b| *b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + ln].iter().map(|b| *b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(10, |m| (m + 1).max(10));

    Ok(Dataset {
        images: Tensor::from_vec(&[n, h, w, 1], data)?,
        labels,
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        num_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + 3072,
            CifarVariant::Cifar100 => 2 + 3072,
        }
    }

    fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Load CIFAR binary batch files (3073-byte records for CIFAR-10, 3074 for
/// CIFAR-100 whose fine label is the second byte). Pixels are stored
/// channel-planar in the file and re-laid-out channels-last here.
pub fn load_cifar_bin(paths: &[impl AsRef<Path>], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        if bytes.len() % rec != 0 {
            return Err(Error::Format {
                msg: format!("file length {} not divisible by record size {}", bytes.len(), rec),
                offset: (bytes.len() - bytes.len() % rec) as u64,
            });
        }
        for chunk in bytes.chunks_exact(rec) {
            let label = match variant {
                CifarVariant::Cifar10 => chunk[0] as usize,
                CifarVariant::Cifar100 => chunk[1] as usize,
            };
            labels.push(label);
            let pix = &chunk[rec - 3072..];
            // planar RGB -> interleaved HWC
            for i in 0..1024 {
                images.push(pix[i] as f64 / 255.0);
                images.push(pix[1024 + i] as f64 / 255.0);
                images.push(pix[2048 + i] as f64 / 255.0);
            }
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 32, 32, 3], images)?,
        labels,
        name: match variant {
            CifarVariant::Cifar10 => "cifar10".into(),
            CifarVariant::Cifar100 => "cifar100".into(),
        },
        num_classes: variant.num_classes(),
    })
}

/// Parameters of the deterministic synthetic benchmark. Each class is a fixed
/// mixture of Gaussian bumps; examples get a random shift, amplitude jitter,
/// and pixel noise, so the task is learnable but not trivial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Maximum per-example translation in pixels.
    pub max_shift: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            train: 4000,
            test: 1000,
            image_size: 28,
            channels: 1,
            noise: 0.25,
            max_shift: 4,
            seed: 0,
        }
    }
}

fn render_example<R: Rng>(
    spec: &SyntheticSpec,
    bumps: &[(f64, f64, f64, f64)],
    rng: &mut R,
) -> Vec<f64> {
    let s = spec.image_size as f64;
    let dx = rng.gen_range(-spec.max_shift..=spec.max_shift) as f64;
    let dy = rng.gen_range(-spec.max_shift..=spec.max_shift) as f64;
    let amp: f64 = rng.gen_range(0.6..1.0);
    let mut img = vec![0.0; spec.image_size * spec.image_size * spec.channels];
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            let mut v = 0.0;
            for &(bx, by, bw, ba) in bumps {
                let ddx = (x as f64 - (bx * s + dx)) / bw;
                let ddy = (y as f64 - (by * s + dy)) / bw;
                v += ba * (-0.5 * (ddx * ddx + ddy * ddy)).exp();
            }
            v = amp * v + spec.noise * rng.gen_range(-1.0..1.0);
            let v = v.clamp(0.0, 1.0);
            for c in 0..spec.channels {
                img[(y * spec.image_size + x) * spec.channels + c] = v;
            }
        }
    }
    img
}

/// Deterministic (train, test) pair generated from the spec's seed.
pub fn synthetic(spec: &SyntheticSpec) -> (Dataset, Dataset) {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x53_59_4e_54);
    let prototypes: Vec<Vec<(f64, f64, f64, f64)>> = (0..spec.classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (
                        proto_rng.gen_range(0.2..0.8),
                        proto_rng.gen_range(0.2..0.8),
                        proto_rng.gen_range(1.5..3.5),
                        proto_rng.gen_range(0.7..1.2),
                    )
                })
                .collect()
        })
        .collect();

    let make = |count: usize, stream: u64| -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(stream));
        let row = spec.image_size * spec.image_size * spec.channels;
        let mut data = Vec::with_capacity(count * row);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % spec.classes;
            labels.push(class);
            data.extend(render_example(spec, &prototypes[class], &mut rng));
        }
        Dataset {
            images: Tensor::from_vec(
                &[count, spec.image_size, spec.image_size, spec.channels],
                data,
            )
            .expect("consistent dims"),
            labels,
            name: "synthetic".into(),
            num_classes: spec.classes,
        }
    };
    (make(spec.train, 1), make(spec.test, 2))
}

/// Assignment of example indices to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub total: usize,
}

impl PartitionPlan {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.len()).collect()
    }

    pub fn assigned(&self) -> usize {
        self.assignments.iter().map(|a| a.len()).sum()
    }

    /// Per-client label histograms.
    pub fn label_histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|a| {
                let mut h = vec![0usize; num_classes];
                for &i in a {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }
}

/// Shuffle all indices with the seeded generator, then deal them round-robin.
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if n_clients > ds.len() {
        return Err(Error::Config(format!(
            "{} clients but only {} examples",
            n_clients,
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![Vec::with_capacity(ds.len() / n_clients + 1); n_clients];
    for (i, idx) in order.into_iter().enumerate() {
        assignments[i % n_clients].push(idx);
    }
    Ok(PartitionPlan {
        assignments,
        total: ds.len(),
    })
}

/// Sort examples by label (ties broken by original index), cut consecutive
/// shards of `shard_size`, and hand each client `shards_per_client` randomly
/// chosen distinct shards. Leftover shards stay unused for that run.
pub fn partition_shard_noniid(
    ds: &Dataset,
    n_clients: usize,
    shard_size: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 || shard_size == 0 || shards_per_client == 0 {
        return Err(Error::Config(
            "clients, shard size and shards per client must all be positive".into(),
        ));
    }
    let needed = n_clients * shards_per_client * shard_size;
    if needed > ds.len() {
        return Err(Error::Config(format!(
            "shard partition needs {} examples ({} clients x {} shards x {}), only {} available",
            needed,
            n_clients,
            shards_per_client,
            shard_size,
            ds.len()
        )));
    }

    let mut by_label: Vec<usize> = (0..ds.len()).collect();
    by_label.sort_by_key(|&i| ds.labels[i]); // stable: ties keep index order

    let num_shards = ds.len() / shard_size;
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assignments = Vec::with_capacity(n_clients);
    let mut next = 0;
    for _ in 0..n_clients {
        let mut mine = Vec::with_capacity(shards_per_client * shard_size);
        for _ in 0..shards_per_client {
            let s = shard_ids[next];
            next += 1;
            mine.extend_from_slice(&by_label[s * shard_size..(s + 1) * shard_size]);
        }
        assignments.push(mine);
    }
    Ok(PartitionPlan {
        assignments,
        total: ds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn labels_only(labels: Vec<usize>, num_classes: usize) -> Dataset {
        let n = labels.len();
        Dataset {
            images: Tensor::zeros(&[n, 1, 1, 1]),
            labels,
            name: "labels".into(),
            num_classes,
        }
    }

    fn write_idx_pair(dir: &Path, pixels: &[u8], n: u32, h: u32, w: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs");
        let lp = dir.join("lbls");
        let mut f = fs::File::create(&ip).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&h.to_be_bytes()).unwrap();
        f.write_all(&w.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = fs::File::create(&lp).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_round_trips_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..16u8).collect(); // 4 images of 2x2
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, 4, 2, 2, &[0, 1, 2, 3]);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.images.shape(), &[4, 2, 2, 1]);
        for (i, p) in pixels.iter().enumerate() {
            assert_eq!(ds.images.data()[i], *p as f64 / 255.0);
        }
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = vec![0u8; 10 * 4];
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, 10, 2, 2, &[0u8; 12]);
        match load_idx(&ip, &lp) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("count mismatch"), "{}", msg),
            other => panic!("expected format error, got {:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn idx_bad_magic_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("bad");
        fs::write(&ip, [0u8, 0, 8, 99, 0, 0, 0, 0]).unwrap();
        match load_idx(&ip, &ip) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn cifar_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for rec in 0..2u8 {
            bytes.push(rec + 3); // label
            for i in 0..3072u32 {
                bytes.push(((i + rec as u32) % 251) as u8);
            }
        }
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar_bin(&[&p], CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 4]);
        // first pixel of record 0: plane R index 0
        assert_eq!(ds.images.data()[0], 0.0 / 255.0);
        // G channel of the first pixel comes from plane offset 1024
        assert_eq!(ds.images.data()[1], (1024 % 251) as f64 / 255.0);
    }

    #[test]
    fn cifar_empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        fs::write(&p, []).unwrap();
        let ds = load_cifar_bin(&[&p], CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn cifar_bad_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, vec![0u8; 3072]).unwrap();
        assert!(matches!(
            load_cifar_bin(&[&p], CifarVariant::Cifar10),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn iid_divisible_gives_equal_sizes() {
        let ds = labels_only((0..100).map(|i| i % 10).collect(), 10);
        let plan = partition_iid(&ds, 10, 3).unwrap();
        assert!(plan.client_sizes().iter().all(|s| *s == 10));
    }

    #[test]
    fn iid_single_client_gets_permutation() {
        let ds = labels_only((0..17).map(|i| i % 3).collect(), 3);
        let plan = partition_iid(&ds, 1, 5).unwrap();
        let mut got = plan.assignments[0].clone();
        got.sort_unstable();
        assert_eq!(got, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn iid_deterministic() {
        let ds = labels_only((0..500).map(|i| i % 10).collect(), 10);
        assert_eq!(
            partition_iid(&ds, 7, 42).unwrap(),
            partition_iid(&ds, 7, 42).unwrap()
        );
    }

    #[test]
    fn iid_too_many_clients_rejected() {
        let ds = labels_only(vec![0, 1], 2);
        assert!(matches!(
            partition_iid(&ds, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shard_single_client_takes_sorted_shards() {
        let mut labels: Vec<usize> = (0..600).map(|i| i % 2).collect();
        labels.sort_unstable(); // make expectations easy: 300 zeros then 300 ones
        let ds = labels_only(labels, 2);
        let plan = partition_shard_noniid(&ds, 1, 300, 2, 11).unwrap();
        assert_eq!(plan.assignments[0].len(), 600);
        let mut got = plan.assignments[0].clone();
        got.sort_unstable();
        assert_eq!(got, (0..600).collect::<Vec<_>>());
    }

    #[test]
    fn shard_mnist_scale_statistics() {
        // 60000 examples, 6000 per class: every 300-shard is label-pure,
        // so each client sees at most 2 distinct labels.
        let labels: Vec<usize> = (0..60000).map(|i| i % 10).collect();
        let ds = labels_only(labels.clone(), 10);
        let plan = partition_shard_noniid(&ds, 10, 300, 2, 7).unwrap();
        assert!(plan.client_sizes().iter().all(|s| *s == 600));
        let hists = plan.label_histograms(&labels, 10);
        let mut distinct: Vec<usize> = hists
            .iter()
            .map(|h| h.iter().filter(|c| **c > 0).count())
            .collect();
        assert!(distinct.iter().all(|d| *d <= 4));
        distinct.sort_unstable();
        assert!(distinct[distinct.len() / 2] <= 2, "median {:?}", distinct);
    }

    #[test]
    fn shard_insufficient_examples_rejected_with_counts() {
        let ds = labels_only((0..100).map(|i| i % 5).collect(), 5);
        match partition_shard_noniid(&ds, 10, 300, 2, 0) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("6000"), "{}", msg);
                assert!(msg.contains("100"), "{}", msg);
            }
            other => panic!("expected config error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn shard_is_more_skewed_than_iid() {
        let labels: Vec<usize> = (0..60000).map(|i| i % 10).collect();
        let ds = labels_only(labels.clone(), 10);
        let mean_distinct = |plan: &PartitionPlan| {
            let hists = plan.label_histograms(&labels, 10);
            hists
                .iter()
                .map(|h| h.iter().filter(|c| **c > 0).count() as f64)
                .sum::<f64>()
                / hists.len() as f64
        };
        let shard = partition_shard_noniid(&ds, 10, 300, 2, 3).unwrap();
        let iid = partition_iid(&ds, 10, 3).unwrap();
        assert!(mean_distinct(&shard) < mean_distinct(&iid));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            train: 200,
            test: 50,
            ..Default::default()
        };
        let (tr1, te1) = synthetic(&spec);
        let (tr2, _) = synthetic(&spec);
        assert_eq!(tr1.images, tr2.images);
        assert_eq!(tr1.len(), 200);
        assert_eq!(te1.len(), 50);
        let mut hist = vec![0usize; 10];
        for &l in &tr1.labels {
            hist[l] += 1;
        }
        assert_eq!(hist, vec![20; 10]);
        assert!(tr1.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
