//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`:
//!
//! ```text
//! "SSVC" | version | config_len | config JSON
//!        | vocab_count | (len | utf-8 token)*
//!        | param_count | (name_len | name | ndim | dim* | f64 LE data)*
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::vocab::Vocabulary;
use crate::tensor::Tensor;

use super::{SsvcConfig, SsvcParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint {0}")]
    Malformed(String),
    #[error("config mismatch in field `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("parameter `{name}`: {reason}")]
    Param { name: String, reason: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// A trained model together with the vocabulary its indices refer to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: SsvcParams,
    pub vocab: Vocabulary,
}

pub fn encode_checkpoint(params: &SsvcParams, vocab: &Vocabulary) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    put_bytes(&mut out, &config);
    put_u32(&mut out, vocab.len() as u32);
    for token in vocab.tokens() {
        put_bytes(&mut out, token.as_bytes());
    }
    put_u32(&mut out, params.store.len() as u32);
    for (name, t) in params.store.iter() {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &SsvcParams, vocab: &Vocabulary, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params, vocab))?;
    Ok(())
}

/// Reads a checkpoint. With `expected` set, the stored config must equal
/// it; the first differing field is reported otherwise.
pub fn load_checkpoint(path: &Path, expected: Option<&SsvcConfig>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected)
}

pub fn decode_checkpoint(bytes: &[u8], expected: Option<&SsvcConfig>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_bytes = r.bytes()?;
    let config: SsvcConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    if let Some(exp) = expected {
        if let Some((field, expected, found)) = exp.first_difference(&config) {
            return Err(CheckpointError::ConfigMismatch {
                field,
                expected,
                found,
            });
        }
    }
    let n_tokens = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
    for _ in 0..n_tokens {
        let raw = r.bytes()?;
        let s = std::str::from_utf8(raw)
            .map_err(|_| CheckpointError::Malformed("non utf-8 token".into()))?;
        tokens.push(s.to_string());
    }
    let vocab = Vocabulary::from_tokens(tokens)
        .map_err(|e| CheckpointError::Malformed(format!("vocabulary: {e}")))?;

    let mut params =
        SsvcParams::new(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let n_params = r.u32()? as usize;
    if n_params != params.store.len() {
        return Err(CheckpointError::Malformed(format!(
            "holds {n_params} parameters, model has {}",
            params.store.len()
        )));
    }
    let mut seen = vec![false; n_params];
    for _ in 0..n_params {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| CheckpointError::Malformed("non utf-8 parameter name".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product::<usize>();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| {
            CheckpointError::Malformed(format!("parameter `{name}` too large"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = params
            .store
            .find(&name)
            .ok_or_else(|| CheckpointError::Param {
                name: name.clone(),
                reason: "unknown to this model".into(),
            })?;
        if params.store.get(id).shape() != shape.as_slice() {
            return Err(CheckpointError::Param {
                name,
                reason: format!(
                    "stored shape {shape:?}, model expects {:?}",
                    params.store.get(id).shape()
                ),
            });
        }
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(CheckpointError::Param {
                name,
                reason: "stored twice".into(),
            });
        }
        *params.store.get_mut(id) =
            Tensor::new(shape, data).map_err(|e| CheckpointError::Param {
                name: name.clone(),
                reason: e.to_string(),
            })?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, vocab })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.bytes.len(),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SsvcConfig;

    fn sample() -> (SsvcParams, Vocabulary) {
        let params = SsvcParams::new(SsvcConfig::mini(), 42).unwrap();
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<start>", "<end>", "<unk>", "a", "dog", "runs"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        (params, vocab)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (params, vocab) = sample();
        let bytes = encode_checkpoint(&params, &vocab);
        assert_eq!(&bytes[..4], b"SSVC");
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            CHECKPOINT_VERSION
        );
        let ck = decode_checkpoint(&bytes, Some(&params.config)).unwrap();
        assert_eq!(ck.params.store, params.store);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(encode_checkpoint(&ck.params, &ck.vocab), bytes);
    }

    #[test]
    fn rejects_mismatched_config_by_field() {
        let (params, vocab) = sample();
        let bytes = encode_checkpoint(&params, &vocab);
        let mut other = params.config.clone();
        other.attn_units += 1;
        let err = decode_checkpoint(&bytes, Some(&other)).unwrap_err();
        assert!(
            matches!(&err, CheckpointError::ConfigMismatch { field, .. } if field == "attn_units")
        );
    }

    #[test]
    fn rejects_version_and_truncation() {
        let (params, vocab) = sample();
        let mut bytes = encode_checkpoint(&params, &vocab);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(cut, None),
            Err(CheckpointError::Truncated { .. })
        ));
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes, None),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn rejects_every_magic_mutation() {
        let (params, vocab) = sample();
        let bytes = encode_checkpoint(&params, &vocab);
        for i in 0..4 {
            for flip in [1u8, 0x20, 0x80] {
                let mut b = bytes.clone();
                b[i] ^= flip;
                assert!(matches!(
                    decode_checkpoint(&b, None),
                    Err(CheckpointError::Magic(_))
                ));
            }
        }
    }
}
