//! Human-judged caption score built from grammar, element and action judgments.
//!
//! Per annotator:
//!
//! ```text
//! S_element = (mean(element_recall) + mean(element_precision)) / 2
//! S_action  = (action_recall + action_precision) / 2
//! score     = S_grammar * (S_element + S_action) / 2
//! ```
//!
//! A caption's score is the mean over its annotators, and the corpus score
//! is the mean over judged captions. An empty element list counts as a mean
//! of 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// One annotator's judgments of one generated caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub video_id: String,
    pub caption: String,
    pub annotator_id: String,
    pub s_grammar: bool,
    /// One entry per prominent object in the video.
    pub element_recall: Vec<bool>,
    /// One entry per object named in the caption.
    pub element_precision: Vec<bool>,
    pub action_recall: bool,
    pub action_precision: bool,
    /// RFC 3339, set by the annotation service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl JudgmentRecord {
    /// This annotator's score for the caption, in `[0, 1]`.
    pub fn score(&self) -> f64 {
        if !self.s_grammar {
            return 0.0;
        }
        let s_element =
            (bool_mean(&self.element_recall) + bool_mean(&self.element_precision)) / 2.0;
        let s_action = (f64::from(u8::from(self.action_recall))
            + f64::from(u8::from(self.action_precision)))
            / 2.0;
        (s_element + s_action) / 2.0
    }
}

fn bool_mean(xs: &[bool]) -> f64 {
    if xs.is_empty() {
        return 1.0;
    }
    xs.iter().filter(|&&b| b).count() as f64 / xs.len() as f64
}

/// Sums in sorted order so the result does not depend on input order.
fn order_free_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean score across every annotator of one caption.
pub fn ss_caption_score(records: &[JudgmentRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    if records.len() < 2 {
        log::warn!(
            "caption `{}` of video `{}` has a single annotator; two or more are recommended",
            records[0].caption,
            records[0].video_id
        );
    }
    Ok(order_free_mean(
        records.iter().map(JudgmentRecord::score).collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub video_id: String,
    pub caption: String,
    pub score: f64,
    pub annotators: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsReport {
    pub ss_score: f64,
    #[serde(rename = "N")]
    pub n: usize,
    /// Sorted by `(video_id, caption)`.
    pub captions: Vec<CaptionScore>,
}

/// Groups records by `(video_id, caption)` and averages the caption scores.
pub fn ss_aggregate(records: &[JudgmentRecord]) -> Result<SsReport, MetricsError> {
    let mut groups: BTreeMap<(&str, &str), Vec<JudgmentRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.video_id.as_str(), r.caption.as_str()))
            .or_default()
            .push(r.clone());
    }
    if groups.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let mut captions = Vec::with_capacity(groups.len());
    for ((video_id, caption), recs) in &groups {
        captions.push(CaptionScore {
            video_id: video_id.to_string(),
            caption: caption.to_string(),
            score: ss_caption_score(recs)?,
            annotators: recs.len(),
        });
    }
    let n = captions.len();
    let ss_score = captions.iter().map(|c| c.score).sum::<f64>() / n as f64;
    Ok(SsReport {
        ss_score,
        n,
        captions,
    })
}

/// Parses a JSONL judgment store. A final line without a newline that fails
/// to parse is treated as an interrupted write and skipped with a warning;
/// any other bad line is an error.
pub fn parse_judgments(text: &str) -> Result<Vec<JudgmentRecord>, MetricsError> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JudgmentRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("skipping truncated trailing line {}: {e}", i + 1);
            }
            Err(e) => {
                return Err(MetricsError::Line {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read_judgments(path: &Path) -> Result<Vec<JudgmentRecord>, MetricsError> {
    parse_judgments(&fs::read_to_string(path)?)
}

/// One JSONL line including the trailing newline.
pub fn judgment_line(record: &JudgmentRecord) -> String {
    let mut s = serde_json::to_string(record).expect("serializable");
    s.push('\n');
    s
}

pub fn write_judgments(path: &Path, records: &[JudgmentRecord]) -> Result<(), MetricsError> {
    fs::write(path, records.iter().map(judgment_line).collect::<String>())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(
        annotator: &str,
        g: bool,
        er: &[bool],
        ep: &[bool],
        ar: bool,
        ap: bool,
    ) -> JudgmentRecord {
        JudgmentRecord {
            video_id: "v1".into(),
            caption: "a man is cooking".into(),
            annotator_id: annotator.into(),
            s_grammar: g,
            element_recall: er.to_vec(),
            element_precision: ep.to_vec(),
            action_recall: ar,
            action_precision: ap,
            timestamp: None,
        }
    }

    #[test]
    fn worked_example() {
        let r = rec("a", true, &[true, false], &[true], true, false);
        assert_eq!(r.score(), 0.625);
        assert_eq!(ss_caption_score(&[r]).unwrap(), 0.625);
    }

    #[test]
    fn grammar_zero_forces_zero() {
        assert_eq!(rec("a", false, &[true], &[true], true, true).score(), 0.0);
    }

    #[test]
    fn all_true_is_one() {
        assert_eq!(
            rec("a", true, &[true, true], &[true], true, true).score(),
            1.0
        );
        assert_eq!(rec("a", true, &[], &[], true, true).score(), 1.0);
    }

    #[test]
    fn aggregate_means_captions() {
        let a = rec("a", true, &[true, false], &[true], true, false);
        let mut b = rec("a", false, &[], &[], false, false);
        b.video_id = "v2".into();
        let rep = ss_aggregate(&[a, b]).unwrap();
        assert_eq!(rep.ss_score, 0.3125);
        assert_eq!(rep.n, 2);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["N"], 2);
    }

    #[test]
    fn annotators_are_averaged() {
        let recs = [
            rec("a", true, &[true, false], &[true], true, false),
            rec("b", true, &[true], &[true], true, true),
        ];
        let rep = ss_aggregate(&recs).unwrap();
        assert_eq!(rep.n, 1);
        assert_eq!(rep.ss_score, 0.8125);
        assert_eq!(rep.captions[0].annotators, 2);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(
            ss_caption_score(&[]),
            Err(MetricsError::NoRecords)
        ));
        assert!(matches!(ss_aggregate(&[]), Err(MetricsError::NoRecords)));
    }

    #[test]
    fn jsonl_round_trip_and_truncation() {
        let recs = vec![
            rec("a", true, &[true, false], &[true], true, false),
            rec("b", false, &[], &[false], false, true),
        ];
        let text: String = recs.iter().map(judgment_line).collect();
        assert_eq!(parse_judgments(&text).unwrap(), recs);
        let cut = format!("{text}{{\"video_id\":\"v1\",\"capt");
        assert_eq!(parse_judgments(&cut).unwrap(), recs);
        let bad_middle = format!("{{oops\n{text}");
        assert!(matches!(
            parse_judgments(&bad_middle),
            Err(MetricsError::Line { line: 1, .. })
        ));
    }

    fn arb_record() -> impl Strategy<Value = JudgmentRecord> {
        (
            "[a-d]",
            any::<bool>(),
            proptest::collection::vec(any::<bool>(), 0..5),
            proptest::collection::vec(any::<bool>(), 0..5),
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|(a, g, er, ep, ar, ap)| rec(&a, g, &er, &ep, ar, ap))
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(r in arb_record()) {
            let s = r.score();
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn annotator_order_is_irrelevant(
            recs in proptest::collection::vec(arb_record(), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(ss_caption_score(&recs).unwrap(), ss_caption_score(&shuffled).unwrap());
        }

        #[test]
        fn caption_order_is_irrelevant(
            recs in proptest::collection::vec((arb_record(), 0..4usize), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let recs: Vec<JudgmentRecord> = recs
                .into_iter()
                .map(|(mut r, v)| { r.video_id = format!("v{v}"); r })
                .collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (ss_aggregate(&recs).unwrap(), ss_aggregate(&shuffled).unwrap());
            prop_assert_eq!(a.ss_score, b.ss_score);
            prop_assert!((0.0..=1.0).contains(&a.ss_score));
            let mean = a.captions.iter().map(|c| c.score).sum::<f64>() / a.n as f64;
            prop_assert_eq!(a.ss_score, mean);
        }
    }
}
