//! Feature ingestion, caption handling and the synthetic corpus.

pub mod embeddings;
pub mod features;
pub mod synth;
pub mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub use embeddings::{load_embeddings, Coverage, LoadedEmbeddings};
pub use features::{read_features, write_features, VideoSequence};
pub use synth::{synth_generate, SynthSpec};
pub use vocab::{tokenize, Vocabulary};

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?} (expected {expected})")]
    Magic {
        expected: &'static str,
        found: Vec<u8>,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("video `{id}` contains non-finite values")]
    NonFinite { id: String },
    #[error("features: {0}")]
    Features(String),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("line {line}: expected {expected} embedding values, found {found}")]
    EmbeddingDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("caption of {len} tokens exceeds the limit of {max}")]
    CaptionTooLong { len: usize, max: usize },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("captions: {0}")]
    Captions(String),
    #[error("synthetic data: {0}")]
    Synth(String),
}

/// Reference captions keyed by video id.
pub type CaptionSet = BTreeMap<String, Vec<String>>;

/// Videos and their reference captions.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<VideoSequence>,
    pub captions: CaptionSet,
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub video_index: usize,
    pub frames: Tensor,
    pub caption: Vec<usize>,
}

impl Dataset {
    /// Checks that every video has at least one reference.
    pub fn validate(&self) -> Result<(), DataError> {
        for v in &self.videos {
            match self.captions.get(&v.id) {
                Some(refs) if !refs.is_empty() => {}
                _ => {
                    return Err(DataError::Captions(format!(
                        "video `{}` has no reference caption",
                        v.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn tokenized_references(&self, video: &VideoSequence) -> Vec<Vec<String>> {
        self.captions
            .get(&video.id)
            .map(|refs| refs.iter().map(|c| tokenize(c)).collect())
            .unwrap_or_default()
    }

    /// Vocabulary over every reference caption.
    pub fn build_vocab(&self) -> Vocabulary {
        let toks: Vec<Vec<String>> = self
            .captions
            .values()
            .flatten()
            .map(|c| tokenize(c))
            .collect();
        Vocabulary::build(toks.iter().map(Vec::as_slice))
    }

    /// One example per (video, reference) pair, encoded to `max_len`.
    pub fn examples(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>, DataError> {
        self.validate()?;
        let mut out = Vec::new();
        for (i, v) in self.videos.iter().enumerate() {
            for toks in self.tokenized_references(v) {
                out.push(Example {
                    video_index: i,
                    frames: v.frames.clone(),
                    caption: vocab.encode_caption(&toks, max_len)?,
                });
            }
        }
        Ok(out)
    }

    /// Splits off the last `n_holdout` videos.
    pub fn split_tail(mut self, n_holdout: usize) -> (Dataset, Dataset) {
        let at = self.videos.len().saturating_sub(n_holdout);
        let tail = self.videos.split_off(at);
        let tail_caps = tail
            .iter()
            .filter_map(|v| self.captions.remove_entry(&v.id))
            .collect();
        (
            self,
            Dataset {
                videos: tail,
                captions: tail_caps,
            },
        )
    }
}

pub fn read_captions(path: &Path) -> Result<CaptionSet, DataError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DataError::Captions(format!("{}: {e}", path.display())))
}

pub fn write_captions(path: &Path, captions: &CaptionSet) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(captions).expect("serializable");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Reads `<dir>/<split>.svft` (or `.jsonl`) and `<dir>/<split>.captions.json`.
pub fn read_split(dir: &Path, split: &str) -> Result<Dataset, DataError> {
    let bin = dir.join(format!("{split}.svft"));
    let features = if bin.exists() {
        bin
    } else {
        dir.join(format!("{split}.jsonl"))
    };
    let videos = read_features(&features)?;
    let captions = read_captions(&dir.join(format!("{split}.captions.json")))?;
    let ds = Dataset { videos, captions };
    ds.validate()?;
    Ok(ds)
}

pub fn write_split(dir: &Path, split: &str, ds: &Dataset) -> Result<(), DataError> {
    write_features(&dir.join(format!("{split}.svft")), &ds.videos)?;
    write_captions(&dir.join(format!("{split}.captions.json")), &ds.captions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tail_moves_captions() {
        let ds = synth_generate(&SynthSpec {
            seed: 0,
            n_samples: 10,
            n_objects: 2,
            n_actions: 2,
            frames: 3,
            dim: 4,
        })
        .unwrap();
        let (train, val) = ds.split_tail(3);
        assert_eq!(train.videos.len(), 7);
        assert_eq!(val.videos.len(), 3);
        assert_eq!(train.captions.len(), 7);
        train.validate().unwrap();
        val.validate().unwrap();
    }

    #[test]
    fn missing_reference_is_an_error() {
        let ds = Dataset {
            videos: vec![VideoSequence::new("v", Tensor::from_rows(&[[1.0]])).unwrap()],
            captions: CaptionSet::new(),
        };
        assert!(ds.validate().is_err());
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&SynthSpec {
            seed: 1,
            n_samples: 4,
            n_objects: 2,
            n_actions: 2,
            frames: 3,
            dim: 4,
        })
        .unwrap();
        write_split(dir.path(), "train", &ds).unwrap();
        let back = read_split(dir.path(), "train").unwrap();
        assert_eq!(back.captions, ds.captions);
        assert_eq!(back.videos.len(), 4);
        for (a, b) in back.videos.iter().zip(&ds.videos) {
            for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
