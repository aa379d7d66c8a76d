//! Caption quality metrics.

pub mod bleu;
pub mod ss;

use thiserror::Error;

pub use bleu::{corpus_bleu, BleuReport};
pub use ss::{
    judgment_line, parse_judgments, read_judgments, ss_aggregate, ss_caption_score,
    write_judgments, CaptionScore, JudgmentRecord, SsReport,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bleu: {0}")]
    Bleu(String),
    #[error("no judgment records")]
    NoRecords,
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
