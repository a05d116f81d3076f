//! Binary checkpoints: `VELF`, a `u32` format version, a JSON metadata block,
//! then named sections of little-endian `f32` tensors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FieldLayout;
use crate::data::Schema;
use crate::diffgraph::Tensor;
use crate::varembed::FrequencyTable;

use super::{EpochRecord, TrainConfig, VelfModel};

pub const MAGIC: &[u8; 4] = b"VELF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {at}")]
    Truncated { at: usize },
    #[error("{0} trailing bytes after the last section")]
    TrailingBytes(usize),
    #[error("bad metadata: {0}")]
    Meta(String),
    #[error("section {name} has shape {got:?}, model expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("unexpected section {0}")]
    UnexpectedSection(String),
}

/// Everything except the parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub schema: Schema,
    pub layout: FieldLayout,
    pub user_freq: FrequencyTable,
    pub item_freq: FrequencyTable,
    pub epoch_log: Vec<EpochRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a model and its epoch log.
pub fn write_checkpoint(model: &VelfModel<f32>, epoch_log: &[EpochRecord]) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        schema: model.schema.clone(),
        layout: model.backbone.layout.clone(),
        user_freq: model.user_freq.clone(),
        item_freq: model.item_freq.clone(),
        epoch_log: epoch_log.to_vec(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated { at: self.buf.len() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse a checkpoint and rebuild the model it describes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(VelfModel<f32>, CheckpointMeta), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let mut sections: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..r.u32()? {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated { at: r.pos })?;
        let raw = r.take(count.checked_mul(4).ok_or(CheckpointError::Truncated { at: r.pos })?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        if sections.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::UnexpectedSection(name));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }

    // Build a skeleton of the right shapes, then overwrite every parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VelfModel::init(&mut rng, &meta.config, &meta.schema, meta.user_freq.clone(), meta.item_freq.clone())
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;
    if model.backbone.layout != meta.layout {
        return Err(CheckpointError::Meta("field layout disagrees with config and schema".into()));
    }
    for p in model.params_mut() {
        let t = sections.remove(&p.name).ok_or_else(|| CheckpointError::MissingSection(p.name.clone()))?;
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::Shape { name: p.name, expected: p.value.shape().to_vec(), got: t.shape().to_vec() });
        }
        *p.value = t;
    }
    if let Some(name) = sections.into_keys().next() {
        return Err(CheckpointError::UnexpectedSection(name));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &VelfModel<f32>, epoch_log: &[EpochRecord], path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, write_checkpoint(model, epoch_log)).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(VelfModel<f32>, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_frequency_tables, synth_coldstart, SynthConfig};

    fn model() -> VelfModel<f32> {
        let c = synth_coldstart(&SynthConfig { n_users: 20, n_items: 20, n_train: 200, n_test_new_items: 10, ..Default::default() });
        let (uf, itf) = build_frequency_tables(&c.splits.train);
        let cfg = TrainConfig { hidden: vec![7], prior_hidden: vec![5], dim: 4, ..Default::default() };
        VelfModel::init(&mut ChaCha8Rng::seed_from_u64(4), &cfg, &c.splits.schema, uf, itf).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let log = vec![EpochRecord {
            epoch: 1,
            log_loss: 0.5,
            kl_user_post: 0.1,
            kl_item_post: 0.2,
            kl_user_prior_reg: 0.0,
            kl_item_prior_reg: 0.0,
            alpha: 1.0,
            train_auc: None,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.velf");
        save_checkpoint(&m, &log, &path).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.epoch_log, log);
        let bits = |m: &VelfModel<f32>| -> Vec<(String, Vec<u32>)> {
            m.params().into_iter().map(|p| (p.name, p.value.data().iter().map(|x| x.to_bits()).collect())).collect()
        };
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back, &log), std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = write_checkpoint(&model(), &[]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_checkpoint(&long), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn dim_mismatch_is_a_shape_error() {
        // Tensors written at dim 4, metadata claiming dim 5.
        let m = model();
        let bytes = write_checkpoint(&m, &[]);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        meta.config.dim = 5;
        meta.layout.dim = 5;
        let new_meta = serde_json::to_vec(&meta).unwrap();
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(new_meta.len() as u32).to_le_bytes());
        forged.extend_from_slice(&new_meta);
        forged.extend_from_slice(&bytes[12 + meta_len..]);
        assert!(matches!(read_checkpoint(&forged), Err(CheckpointError::Shape { .. })));
    }
}
