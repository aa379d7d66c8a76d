//! GloVe-style text embeddings: one `word v1 v2 ... vD` line per word.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::params::uniform;
use crate::tensor::Tensor;

use super::vocab::{Vocabulary, NUM_RESERVED};
use super::DataError;

/// Range of the uniform initializer for rows the file does not cover.
pub const MISSING_ROW_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coverage {
    pub found: usize,
    /// Ordinary vocabulary words absent from the file.
    pub missing: Vec<String>,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        let total = self.found + self.missing.len();
        if total == 0 {
            1.0
        } else {
            self.found as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedEmbeddings {
    /// `[vocab.len(), embed_dim]`
    pub matrix: Tensor,
    pub coverage: Coverage,
}

pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    embed_dim: usize,
    seed: u64,
) -> Result<LoadedEmbeddings, DataError> {
    read_embeddings(File::open(path)?, vocab, embed_dim, seed)
}

/// Rows for words found in the input; all other rows (reserved markers
/// included) are drawn from a seeded `U(-0.05, 0.05)`.
pub fn read_embeddings<R: Read>(
    input: R,
    vocab: &Vocabulary,
    embed_dim: usize,
    seed: u64,
) -> Result<LoadedEmbeddings, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = uniform(&mut rng, &[vocab.len(), embed_dim], MISSING_ROW_SCALE);
    let mut found = vec![false; vocab.len()];
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != embed_dim {
            return Err(DataError::EmbeddingDim {
                line: line_no,
                expected: embed_dim,
                found: values.len(),
            });
        }
        let Some(row) = vocab.index_of(word) else {
            continue;
        };
        let cols = matrix.shape()[1];
        let dst = &mut matrix.data_mut()[row * cols..(row + 1) * cols];
        for (d, s) in dst.iter_mut().zip(&values) {
            *d = s.parse::<f64>().map_err(|e| DataError::Line {
                line: line_no,
                reason: format!("`{s}`: {e}"),
            })?;
        }
        found[row] = true;
    }
    let mut coverage = Coverage {
        found: 0,
        missing: Vec::new(),
    };
    for (i, token) in vocab.tokens().iter().enumerate().skip(NUM_RESERVED) {
        if found[i] {
            coverage.found += 1;
        } else {
            coverage.missing.push(token.clone());
        }
    }
    Ok(LoadedEmbeddings { matrix, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::new();
        v.insert("cat");
        v.insert("dog");
        v
    }

    #[test]
    fn parses_known_rows() {
        let v = vocab();
        let loaded = read_embeddings("cat 0.1 0.2\nzebra 1 1\n".as_bytes(), &v, 2, 0).unwrap();
        let cat = v.index_of("cat").unwrap();
        assert_eq!(loaded.matrix.row(cat), &[0.1, 0.2]);
        assert_eq!(loaded.coverage.found, 1);
        assert_eq!(loaded.coverage.missing, vec!["dog".to_string()]);
        let dog = v.index_of("dog").unwrap();
        assert!(loaded
            .matrix
            .row(dog)
            .iter()
            .all(|x| x.abs() <= MISSING_ROW_SCALE));
    }

    #[test]
    fn missing_rows_are_seeded() {
        let v = vocab();
        let a = read_embeddings("".as_bytes(), &v, 3, 7).unwrap();
        let b = read_embeddings("".as_bytes(), &v, 3, 7).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.coverage.ratio(), 0.0);
    }

    #[test]
    fn dimension_mismatch_names_line_and_counts() {
        let v = vocab();
        let err =
            read_embeddings("cat 0.1 0.2\ndog 0.1 0.2 0.3\n".as_bytes(), &v, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            DataError::EmbeddingDim {
                line: 2,
                expected: 2,
                found: 3
            }
        ));
        let msg = err.to_string();
        assert!(
            msg.contains("expected 2") && msg.contains("found 3"),
            "{msg}"
        );
    }

    #[test]
    fn unparsable_value_names_line() {
        let v = vocab();
        let err = read_embeddings("cat 0.1 abc\n".as_bytes(), &v, 2, 0).unwrap_err();
        assert!(matches!(err, DataError::Line { line: 1, .. }));
    }
}
