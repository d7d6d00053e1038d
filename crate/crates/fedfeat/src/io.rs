//! Binary artifacts: model checkpoints, per-round feature dumps, and the run
//! manifest. All multi-byte integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ArchId, InputShape, ModelParams, Param};
use crate::tensor::Tensor;

const PARAMS_MAGIC: &[u8; 6] = b"FFPAR\x01";
const FEATURES_MAGIC: &[u8; 6] = b"FFEAT\x01";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn fail<T>(&self, msg: &str) -> Result<T> {
        Err(Error::Format {
            msg: msg.into(),
            offset: self.pos as u64,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail("truncated file");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        if len > 1 << 20 {
            return self.fail("unreasonable string length");
        }
        let b = self.take(len)?;
        match std::str::from_utf8(b) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail("invalid utf-8"),
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.shape().len() as u64);
    for d in t.shape() {
        put_u64(out, *d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let ndim = r.u64()? as usize;
    if ndim > 8 {
        return r.fail("unreasonable tensor rank");
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 30 {
        return r.fail("unreasonable tensor size");
    }
    Tensor::from_vec(&shape, r.f64s(n)?)
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

pub fn save_params(path: &Path, model: &ModelParams) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.push(match model.arch {
        ArchId::Mlp => 0,
        ArchId::Cnn => 1,
    });
    put_u64(&mut out, model.num_classes as u64);
    put_u64(&mut out, model.input.height as u64);
    put_u64(&mut out, model.input.width as u64);
    put_u64(&mut out, model.input.channels as u64);
    for group in [&model.extractor, &model.classifier] {
        put_u64(&mut out, group.len() as u64);
        for p in group {
            put_string(&mut out, &p.name);
            put_tensor(&mut out, &p.value);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(6)? != PARAMS_MAGIC {
        return Err(Error::Format {
            msg: "not a parameter checkpoint".into(),
            offset: 0,
        });
    }
    let arch = match r.u8()? {
        0 => ArchId::Mlp,
        1 => ArchId::Cnn,
        other => return r.fail(&format!("unknown architecture tag {}", other)),
    };
    let num_classes = r.u64()? as usize;
    let input = InputShape::new(r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    let mut groups = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = r.u64()? as usize;
        if count > 64 {
            return r.fail("unreasonable parameter count");
        }
        let mut group = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            group.push(Param::new(&name, read_tensor(&mut r)?));
        }
        groups.push(group);
    }
    let classifier = groups.pop().expect("two groups");
    let extractor = groups.pop().expect("two groups");
    Ok(ModelParams {
        arch,
        num_classes,
        input,
        extractor,
        classifier,
    })
}

// ---------------------------------------------------------------------------
// Feature dumps
// ---------------------------------------------------------------------------

/// One round's shared features: the pre-noise (fresh) rows, the perturbed
/// rows actually shipped, and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub round: usize,
    pub fresh: Tensor,
    pub noisy: Tensor,
    pub labels: Vec<usize>,
}

pub fn save_features(path: &Path, dump: &FeatureDump) -> Result<()> {
    if dump.fresh.shape() != dump.noisy.shape() || dump.fresh.rows() != dump.labels.len() {
        return Err(Error::Dimension(format!(
            "inconsistent feature dump: fresh {:?}, noisy {:?}, {} labels",
            dump.fresh.shape(),
            dump.noisy.shape(),
            dump.labels.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    put_u64(&mut out, dump.round as u64);
    put_tensor(&mut out, &dump.fresh);
    put_tensor(&mut out, &dump.noisy);
    put_u64(&mut out, dump.labels.len() as u64);
    for l in &dump.labels {
        put_u64(&mut out, *l as u64);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureDump> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(6)? != FEATURES_MAGIC {
        return Err(Error::Format {
            msg: "not a feature dump".into(),
            offset: 0,
        });
    }
    let round = r.u64()? as usize;
    let fresh = read_tensor(&mut r)?;
    let noisy = read_tensor(&mut r)?;
    let count = r.u64()? as usize;
    if count != fresh.rows() {
        return r.fail("label count does not match feature rows");
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.u64()? as usize);
    }
    Ok(FeatureDump {
        round,
        fresh,
        noisy,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// SHA-256 over the dataset's pixel and label payload, hex-encoded.
pub fn dataset_checksum(ds: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for v in ds.images.data() {
        hasher.update(v.to_le_bytes());
    }
    for l in &ds.labels {
        hasher.update((*l as u64).to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

pub struct Manifest {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub dataset_checksum: String,
    pub config_snapshot: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    writeln!(f, "run_id: {}", m.run_id)?;
    writeln!(f, "mode: {}", m.mode)?;
    writeln!(f, "seed: {}", m.seed)?;
    writeln!(f, "dataset_checksum: {}", m.dataset_checksum)?;
    writeln!(f, "started_unix: {}", m.started_unix)?;
    writeln!(f, "finished_unix: {}", m.finished_unix)?;
    writeln!(f, "config:")?;
    for line in m.config_snapshot.lines() {
        writeln!(f, "  {}", line)?;
    }
    Ok(())
}

/// A completed run directory must hold a manifest with its required fields
/// and a rounds.csv with the expected header.
pub fn audit_run_dir(dir: &Path) -> Result<()> {
    let manifest = dir.join("manifest.txt");
    let rounds = dir.join("rounds.csv");
    if !manifest.is_file() {
        return Err(Error::Data(format!("{}: missing manifest.txt", dir.display())));
    }
    if !rounds.is_file() {
        return Err(Error::Data(format!("{}: missing rounds.csv", dir.display())));
    }
    let text = fs::read_to_string(&manifest)?;
    for field in ["run_id:", "mode:", "seed:", "dataset_checksum:"] {
        if !text.lines().any(|l| l.starts_with(field)) {
            return Err(Error::Data(format!(
                "{}: manifest missing field `{}`",
                dir.display(),
                field
            )));
        }
    }
    let csv = fs::read_to_string(&rounds)?;
    match csv.lines().next() {
        Some(h) if h == crate::proto::ROUNDS_CSV_HEADER => Ok(()),
        Some(h) => Err(Error::Data(format!(
            "{}: unexpected rounds.csv header `{}`",
            dir.display(),
            h
        ))),
        None => Err(Error::Data(format!("{}: empty rounds.csv", dir.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params_with_dims, ArchDims, InitConfig};

    fn small_model(arch: ArchId) -> ModelParams {
        let dims = ArchDims {
            mlp_hidden: [6, 5],
            cnn_channels: [2, 3],
            cnn_kernel: 3,
            cnn_fc: 7,
        };
        let input = InputShape::new(12, 12, 1);
        init_params_with_dims(arch, 4, input, &InitConfig::default(), &dims).unwrap()
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [ArchId::Mlp, ArchId::Cnn] {
            let model = small_model(arch);
            let p = dir.path().join("model.bin");
            save_params(&p, &model).unwrap();
            assert_eq!(load_params(&p).unwrap(), model);
        }
    }

    #[test]
    fn params_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        fs::write(&p, b"NOTFFP\x00\x00").unwrap();
        assert!(matches!(load_params(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn params_truncation_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(ArchId::Mlp);
        let p = dir.path().join("model.bin");
        save_params(&p, &model).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match load_params(&p) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dump = FeatureDump {
            round: 4,
            fresh: Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            noisy: Tensor::from_vec(&[3, 2], vec![1.5, 2.5, 3.5, 4.5, 5.5, 6.5]).unwrap(),
            labels: vec![0, 1, 2],
        };
        let p = dir.path().join("features_round_4.bin");
        save_features(&p, &dump).unwrap();
        assert_eq!(load_features(&p).unwrap(), dump);
    }

    #[test]
    fn features_inconsistent_shapes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dump = FeatureDump {
            round: 1,
            fresh: Tensor::zeros(&[2, 2]),
            noisy: Tensor::zeros(&[3, 2]),
            labels: vec![0, 1],
        };
        assert!(save_features(&dir.path().join("f.bin"), &dump).is_err());
    }

    #[test]
    fn manifest_audit_accepts_complete_dir_and_rejects_partial() {
        let dir = tempfile::tempdir().unwrap();
        assert!(audit_run_dir(dir.path()).is_err());
        let m = Manifest {
            run_id: "test".into(),
            mode: "fedavg".into(),
            seed: 1,
            dataset_checksum: "abc".into(),
            config_snapshot: "dataset = synthetic".into(),
            started_unix: 0,
            finished_unix: 0,
        };
        write_manifest(dir.path(), &m).unwrap();
        assert!(audit_run_dir(dir.path()).is_err()); // still no rounds.csv
        fs::write(
            dir.path().join("rounds.csv"),
            format!("{}\n", crate::proto::ROUNDS_CSV_HEADER),
        )
        .unwrap();
        audit_run_dir(dir.path()).unwrap();
    }

    #[test]
    fn checksum_distinguishes_datasets() {
        let (a, b) = crate::data::synthetic(&crate::data::SyntheticSpec {
            train: 20,
            test: 20,
            image_size: 8,
            ..Default::default()
        });
        assert_ne!(dataset_checksum(&a), dataset_checksum(&b));
        assert_eq!(dataset_checksum(&a), dataset_checksum(&a));
    }
}
