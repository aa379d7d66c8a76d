//! Precomputed per-frame feature files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "SVFT" | version u32 | count u32
//!        | (id_len u32 | id utf-8 | T u32 | dim u32 | T*dim f32)*
//! ```
//!
//! Files ending in `.jsonl` are read as one `{"id": .., "frames": [[..]]}`
//! object per line instead.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::DataError;

pub const FEATURE_MAGIC: &[u8; 4] = b"SVFT";
pub const FEATURE_VERSION: u32 = 1;

/// One video as a `[T, dim]` matrix of frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Tensor,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Tensor) -> Result<Self, DataError> {
        let id = id.into();
        if frames.rank() != 2 {
            return Err(DataError::Features(format!(
                "video `{id}`: frames must be a [T, dim] matrix, got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(DataError::NonFinite { id });
        }
        Ok(Self { id, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn encode_features(videos: &[VideoSequence]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(videos.len() as u32).to_le_bytes());
    for v in videos {
        if !v.frames.is_finite() {
            return Err(DataError::NonFinite { id: v.id.clone() });
        }
        out.extend_from_slice(&(v.id.len() as u32).to_le_bytes());
        out.extend_from_slice(v.id.as_bytes());
        out.extend_from_slice(&(v.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(v.feature_dim() as u32).to_le_bytes());
        for &x in v.frames.data() {
            let narrowed = x as f32;
            if !narrowed.is_finite() {
                return Err(DataError::NonFinite { id: v.id.clone() });
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<VideoSequence>, DataError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        if bytes.len() - pos < n {
            return Err(DataError::Truncated { offset: pos });
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let magic = take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(DataError::Magic {
            expected: "SVFT",
            found: magic.to_vec(),
        });
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != FEATURE_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let count = u32_at(take(4)?) as usize;
    let mut videos = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = u32_at(take(4)?) as usize;
        let id = std::str::from_utf8(take(id_len)?)
            .map_err(|_| DataError::Features("video id is not utf-8".into()))?
            .to_string();
        let t = u32_at(take(4)?) as usize;
        let dim = u32_at(take(4)?) as usize;
        if t == 0 || dim == 0 {
            return Err(DataError::Features(format!(
                "video `{id}` has shape [{t}, {dim}]"
            )));
        }
        let n = t
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DataError::Features(format!("video `{id}` is too large")))?;
        let raw = take(n)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let frames = Tensor::new(vec![t, dim], data).expect("shape matches");
        videos.push(VideoSequence::new(id, frames)?);
    }
    if pos != bytes.len() {
        return Err(DataError::Features(format!(
            "{} trailing bytes after {count} videos",
            bytes.len() - pos
        )));
    }
    Ok(videos)
}

#[derive(Serialize, Deserialize)]
struct JsonVideo {
    id: String,
    frames: Vec<Vec<f64>>,
}

pub fn parse_features_jsonl(text: &str) -> Result<Vec<VideoSequence>, DataError> {
    let mut videos = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: JsonVideo = serde_json::from_str(line).map_err(|e| DataError::Line {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if v.frames.is_empty()
            || v.frames[0].is_empty()
            || v.frames.iter().any(|r| r.len() != v.frames[0].len())
        {
            return Err(DataError::Line {
                line: i + 1,
                reason: format!(
                    "video `{}`: frames must be a non-empty rectangular matrix",
                    v.id
                ),
            });
        }
        videos.push(VideoSequence::new(v.id, Tensor::from_rows(&v.frames))?);
    }
    Ok(videos)
}

pub fn features_to_jsonl(videos: &[VideoSequence]) -> String {
    let mut out = String::new();
    for v in videos {
        let rec = JsonVideo {
            id: v.id.clone(),
            frames: (0..v.num_frames())
                .map(|t| v.frames.row(t).to_vec())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

pub fn read_features(path: &Path) -> Result<Vec<VideoSequence>, DataError> {
    if is_jsonl(path) {
        parse_features_jsonl(&fs::read_to_string(path)?)
    } else {
        decode_features(&fs::read(path)?)
    }
}

pub fn write_features(path: &Path, videos: &[VideoSequence]) -> Result<(), DataError> {
    if is_jsonl(path) {
        fs::write(path, features_to_jsonl(videos))?;
    } else {
        fs::write(path, encode_features(videos)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<VideoSequence> {
        vec![
            VideoSequence::new("vid1", Tensor::from_rows(&[[0.5, -1.25], [3.0, 1e-3]])).unwrap(),
            VideoSequence::new("b", Tensor::from_rows(&[[7.0]])).unwrap(),
        ]
    }

    #[test]
    fn binary_round_trip() {
        let bytes = encode_features(&sample()).unwrap();
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back[0].id, "vid1");
        assert_eq!(encode_features(&back).unwrap(), bytes);
        assert_eq!(back[1].frames.data(), &[7.0]);
    }

    #[test]
    fn empty_set_round_trips() {
        let bytes = encode_features(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode_features(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_features(&sample()).unwrap();
        let err = decode_features(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(
            matches!(err, DataError::Truncated { offset } if offset > 12),
            "{err}"
        );
        assert!(err.to_string().contains("byte"));
    }

    #[test]
    fn non_finite_rejected() {
        let bad = Tensor::from_rows(&[[f64::NAN]]);
        assert!(matches!(
            VideoSequence::new("x", bad.clone()),
            Err(DataError::NonFinite { .. })
        ));
        let mut bytes = encode_features(&sample()).unwrap();
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_features(&bytes),
            Err(DataError::NonFinite { .. })
        ));
    }

    #[test]
    fn every_magic_mutation_rejected() {
        let bytes = encode_features(&sample()).unwrap();
        for i in 0..4 {
            for b in 0..=255u8 {
                if b == bytes[i] {
                    continue;
                }
                let mut m = bytes.clone();
                m[i] = b;
                assert!(matches!(decode_features(&m), Err(DataError::Magic { .. })));
            }
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let text = features_to_jsonl(&sample());
        assert_eq!(parse_features_jsonl(&text).unwrap(), sample());
        let err = parse_features_jsonl("{\"id\":\"a\",\"frames\":[[1,2],[3]]}\n").unwrap_err();
        assert!(matches!(err, DataError::Line { line: 1, .. }));
        assert!(parse_features_jsonl("").unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_exactly(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let n = vals.len();
            let data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let v = VideoSequence::new("p", Tensor::new(vec![n, 1], data.clone()).unwrap()).unwrap();
            let back = decode_features(&encode_features(&[v]).unwrap()).unwrap();
            prop_assert_eq!(back[0].frames.data(), &data[..]);
        }
    }
}
