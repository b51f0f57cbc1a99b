//! Versioned binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DLCK"                    magic
//! u32                       format version
//! u8                        stage (0 Fresh, 1 PostPretext, 2 PostTransfer)
//! u32                       input side
//! f32                       dropout rate
//! f32                       weight decay
//! f32                       input scale
//! u32 + bytes               rng state
//! u32                       tensor count
//! per tensor (input mean, then ClassifierModel::params order):
//!   u32 ndim, u32 * ndim dims, u32 element count, f32 * count
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierModel, InputNorm, NnError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingStage {
    Fresh,
    PostPretext,
    PostTransfer,
}

impl TrainingStage {
    fn to_byte(self) -> u8 {
        match self {
            TrainingStage::Fresh => 0,
            TrainingStage::PostPretext => 1,
            TrainingStage::PostTransfer => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(TrainingStage::Fresh),
            1 => Some(TrainingStage::PostPretext),
            2 => Some(TrainingStage::PostTransfer),
            _ => None,
        }
    }
}

/// Opaque snapshot of a ChaCha8 generator: seed, stream id and word position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RngState(pub Vec<u8>);

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let mut bytes = Vec::with_capacity(56);
        bytes.extend_from_slice(&rng.get_seed());
        bytes.extend_from_slice(&rng.get_stream().to_le_bytes());
        bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        Self(bytes)
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.0.len() != 56 {
            return None;
        }
        let seed: [u8; 32] = self.0[..32].try_into().ok()?;
        let stream = u64::from_le_bytes(self.0[32..40].try_into().ok()?);
        let pos = u128::from_le_bytes(self.0[40..56].try_into().ok()?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ClassifierModel,
    pub training_stage: TrainingStage,
    pub rng_state: RngState,
}

impl Checkpoint {
    pub fn new(model: ClassifierModel, training_stage: TrainingStage, rng_state: RngState) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model,
            training_stage,
            rng_state,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.push(self.training_stage.to_byte());
        out.extend_from_slice(&(self.model.input_side() as u32).to_le_bytes());
        out.extend_from_slice(&self.model.dropout_rate().to_le_bytes());
        out.extend_from_slice(&self.model.weight_decay().to_le_bytes());
        out.extend_from_slice(&self.model.input_norm().scale().to_le_bytes());
        out.extend_from_slice(&(self.rng_state.0.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng_state.0);
        let mut tensors = vec![self.model.input_norm().mean()];
        tensors.extend(self.model.params());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(NnError::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let stage_byte = r.take(1)?[0];
        let stage = TrainingStage::from_byte(stage_byte).ok_or_else(|| {
            NnError::CorruptCheckpoint(format!("unknown stage byte {stage_byte}"))
        })?;
        let input_side = r.u32()? as usize;
        let dropout = r.f32()?;
        let decay = r.f32()?;
        let input_scale = r.f32()?;
        let rng_len = r.u32()? as usize;
        let rng_state = RngState(r.take(rng_len)?.to_vec());
        let n_tensors = r.u32()? as usize;
        if n_tensors > 1024 {
            return Err(NnError::CorruptCheckpoint(format!(
                "implausible tensor count {n_tensors}"
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(NnError::CorruptCheckpoint(format!(
                    "implausible rank {ndim}"
                )));
            }
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count = r.u32()? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(NnError::CorruptCheckpoint(format!(
                    "tensor of shape {shape:?} claims {count} elements"
                )));
            }
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(NnError::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if tensors.is_empty() {
            return Err(NnError::CorruptCheckpoint("no tensors".into()));
        }
        let mean = tensors.remove(0);
        let model = InputNorm::new(mean, input_scale)
            .and_then(|norm| {
                ClassifierModel::from_params(input_side, dropout, decay, tensors)?
                    .with_input_norm(norm)
            })
            .map_err(|e| NnError::CorruptCheckpoint(e.to_string()))?;
        Ok(Self {
            format_version: version,
            model,
            training_stage: stage,
            rng_state,
        })
    }

    /// Bitwise equality including stage and rng state.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.format_version == other.format_version
            && self.training_stage == other.training_stage
            && self.rng_state == other.rng_state
            && self.model.bit_eq(&other.model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), NnError> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let bytes = fs::read(path).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::CorruptCheckpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, NnError> {
        Ok(f32::from_bits(self.u32()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::init_model;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        Checkpoint::new(
            init_model(2, 32, 1).unwrap(),
            TrainingStage::PostPretext,
            RngState::capture(&rng),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let r = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(r.bit_eq(&c));
        assert_eq!(r.training_stage, TrainingStage::PostPretext);
    }

    #[test]
    fn input_norm_survives_round_trip() {
        let c = sample();
        let mean =
            Tensor::new(vec![32, 32], (0..1024).map(|i| i as f32 / 1024.0).collect()).unwrap();
        let model = c
            .model
            .with_input_norm(InputNorm::new(mean, 4.0).unwrap())
            .unwrap();
        let c = Checkpoint::new(model, c.training_stage, c.rng_state);
        let r = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(r.bit_eq(&c));
        assert_eq!(r.model.input_norm().scale(), 4.0);
        let px = vec![0.3; 1024];
        assert_eq!(r.model.predict(&px).unwrap(), c.model.predict(&px).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&c));
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"DLCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1);
    }

    #[test]
    fn future_version_is_unsupported() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(NnError::UnsupportedVersion {
                found: 2,
                supported: 1
            })
        ));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample().to_bytes();
        for cut in [3, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bytes[..cut]),
                    Err(NnError::CorruptCheckpoint(_))
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn rng_state_restores_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}
