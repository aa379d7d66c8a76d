//! Append-only JSONL judgment store.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ssvc_core::metrics::{judgment_line, parse_judgments, JudgmentRecord};

use crate::tasks::task_id;
use crate::AnnotateError;

#[derive(Debug)]
pub struct JudgmentStore {
    path: PathBuf,
    file: File,
    records: Vec<JudgmentRecord>,
    annotators: HashSet<(String, String)>,
    per_task: HashMap<String, usize>,
}

impl JudgmentStore {
    /// Opens or creates the store. A partial trailing line left by an
    /// interrupted write is cut off so later appends start on a fresh line.
    pub fn open(path: &Path) -> Result<Self, AnnotateError> {
        let text = if path.exists() {
            fs::read_to_string(path)?
        } else {
            String::new()
        };
        let records = parse_judgments(&text)?;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            if serde_json::from_str::<JudgmentRecord>(&text[keep..]).is_ok() {
                file.write_all(b"\n")?;
            } else {
                log::warn!("{}: dropping truncated trailing line", path.display());
                file.set_len(keep as u64)?;
            }
            file.sync_data()?;
        }
        let mut store = Self {
            path: path.to_path_buf(),
            file,
            records: Vec::new(),
            annotators: HashSet::new(),
            per_task: HashMap::new(),
        };
        for r in records {
            store.index(&r);
            store.records.push(r);
        }
        Ok(store)
    }

    fn index(&mut self, r: &JudgmentRecord) {
        let id = task_id(&r.video_id, &r.caption);
        self.annotators.insert((id.clone(), r.annotator_id.clone()));
        *self.per_task.entry(id).or_insert(0) += 1;
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[JudgmentRecord] {
        &self.records
    }

    pub fn received(&self, task_id: &str) -> usize {
        self.per_task.get(task_id).copied().unwrap_or(0)
    }

    /// Writes the record as one line and syncs it before it becomes
    /// visible. Rejects a second judgment by the same annotator.
    pub fn append(&mut self, record: JudgmentRecord) -> Result<(), AnnotateError> {
        let key = (
            task_id(&record.video_id, &record.caption),
            record.annotator_id.clone(),
        );
        if self.annotators.contains(&key) {
            return Err(AnnotateError::Duplicate {
                task_id: key.0,
                annotator_id: key.1,
            });
        }
        self.file.write_all(judgment_line(&record).as_bytes())?;
        self.file.sync_data()?;
        self.index(&record);
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), AnnotateError> {
        self.file.flush()?;
        self.file.sync_all()?;
        Ok(())
    }
}
