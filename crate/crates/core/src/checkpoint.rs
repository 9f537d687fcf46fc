//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MDCK" | u32 format version | u64 header length | header JSON
//! u64 entry count | entries...
//! entry: u32 name length | name | u8 frozen | u32 rank | u64 dims... | f64 payload
//! ```
//!
//! Entry names are prefixed by section: `param/` for the live weights,
//! `best/` for the best validation weights and `adam.m/`, `adam.v/` for the
//! optimizer moments. The header holds the spec, the vocabulary and the
//! scalar training progress. Writing is deterministic, so equal states give
//! equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::VariantSpec;
use crate::error::{MdamError, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::train::{Adam, TrainProgress, TrainState};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const BEST: &str = "best/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: VariantSpec,
    vocab: Vocabulary,
    adam: Adam,
    phase: u8,
    next_epoch: usize,
    /// `None` before the first validation.
    best_val_accuracy: Option<f64>,
    best_epoch: Option<usize>,
    epochs_since_improvement: usize,
    done: bool,
}

/// A model, its vocabulary and the full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: VariantSpec,
    pub vocab: Vocabulary,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(spec: VariantSpec, vocab: Vocabulary, state: TrainState) -> Self {
        Checkpoint { spec, vocab, state }
    }

    /// The live weights.
    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.state.progress;
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            vocab: self.vocab.clone(),
            adam: p.adam.clone(),
            phase: p.phase,
            next_epoch: p.next_epoch,
            best_val_accuracy: p.best_val_accuracy.is_finite().then_some(p.best_val_accuracy),
            best_epoch: p.best_epoch,
            epochs_since_improvement: p.epochs_since_improvement,
            done: p.done,
        };
        let json = serde_json::to_vec(&header)?;

        let mut entries: Vec<(String, bool, &Tensor)> = Vec::new();
        for (path, param) in self.state.params.iter() {
            entries.push((format!("{PARAM}{path}"), param.frozen, param.value()));
        }
        for (path, param) in p.best_params.iter() {
            entries.push((format!("{BEST}{path}"), param.frozen, param.value()));
        }
        for (path, t) in &p.adam.m {
            entries.push((format!("{ADAM_M}{path}"), false, t));
        }
        for (path, t) in &p.adam.v {
            entries.push((format!("{ADAM_V}{path}"), false, t));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, frozen, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(frozen));
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MdamError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(MdamError::Format(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        if header.format_version != version {
            return Err(MdamError::Format("header and file versions disagree".into()));
        }

        let mut params = ModelParams::new();
        let mut best = ModelParams::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let count = r.u64()?;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| MdamError::Format("entry name is not utf-8".into()))?
                .to_string();
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(MdamError::Format(format!("bad frozen flag {b} on {name}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let len = len.filter(|&n| n <= r.remaining() / 8).ok_or_else(|| {
                MdamError::Format(format!("entry {name} with shape {shape:?} overruns the file"))
            })?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(path) = name.strip_prefix(PARAM) {
                params.insert(path, t, frozen);
            } else if let Some(path) = name.strip_prefix(BEST) {
                best.insert(path, t, frozen);
            } else if let Some(path) = name.strip_prefix(ADAM_M) {
                m.insert(path.to_string(), t);
            } else if let Some(path) = name.strip_prefix(ADAM_V) {
                v.insert(path.to_string(), t);
            } else {
                return Err(MdamError::Format(format!("entry {name} has no known section")));
            }
        }
        if r.remaining() != 0 {
            return Err(MdamError::Format(format!("{} trailing bytes", r.remaining())));
        }

        let mut adam = header.adam;
        adam.m = m;
        adam.v = v;
        Ok(Checkpoint {
            spec: header.spec,
            vocab: header.vocab,
            state: TrainState {
                params,
                progress: TrainProgress {
                    adam,
                    phase: header.phase,
                    next_epoch: header.next_epoch,
                    best_val_accuracy: header.best_val_accuracy.unwrap_or(f64::NEG_INFINITY),
                    best_epoch: header.best_epoch,
                    best_params: best,
                    epochs_since_improvement: header.epochs_since_improvement,
                    done: header.done,
                },
            },
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| MdamError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| MdamError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MdamError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Fails unless the stored weights have exactly the shapes `spec` and the
    /// stored vocabulary call for.
    pub fn check_against(&self, spec: &VariantSpec) -> Result<()> {
        let expected = crate::model::xavier_init(spec, &self.vocab, 0, None)?;
        for (path, p) in expected.iter() {
            let got = self
                .state
                .params
                .get(path)
                .ok_or_else(|| MdamError::Config(format!("checkpoint lacks parameter {path}")))?;
            if got.shape() != p.value().shape() {
                return Err(MdamError::Config(format!(
                    "parameter {path} has shape {:?} in the checkpoint but {:?} under the requested spec",
                    got.shape(),
                    p.value().shape()
                )));
            }
        }
        if let Some(extra) = self.state.params.paths().find(|p| !expected.contains(p)) {
            return Err(MdamError::Config(format!("checkpoint parameter {extra} is not part of the requested spec")));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(MdamError::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::desk_setup;

    fn sample() -> Checkpoint {
        let spec = VariantSpec::desk();
        let (vocab, _, params) = desk_setup(&spec, 3).unwrap();
        let mut state = TrainState::new(params, &spec);
        state.progress.adam.step = 7;
        state.progress.adam.m.insert("answer.b".into(), Tensor::vector(vec![0.1 + 0.2]).unwrap());
        state.progress.adam.v.insert("answer.b".into(), Tensor::vector(vec![f64::MIN_POSITIVE]).unwrap());
        state.progress.best_val_accuracy = 0.625;
        state.progress.best_epoch = Some(4);
        Checkpoint::new(spec, vocab, state)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn untrained_state_keeps_negative_infinity() {
        let spec = VariantSpec::desk();
        let (vocab, _, params) = desk_setup(&spec, 1).unwrap();
        let ck = Checkpoint::new(spec.clone(), vocab, TrainState::new(params, &spec));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.state.progress.best_val_accuracy, f64::NEG_INFINITY);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(MdamError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(MdamError::Format(_))));
        let mut newer = bytes;
        newer[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&newer), Err(MdamError::Format(_))));
    }

    #[test]
    fn shape_check_names_the_parameter() {
        let ck = sample();
        ck.check_against(&ck.spec).unwrap();
        let wider = VariantSpec {
            d_model: 48,
            ..ck.spec.clone()
        };
        let err = ck.check_against(&wider).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }
}
