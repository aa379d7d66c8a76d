//! Annotation tasks: one per (video, generated caption).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::AnnotateError;

/// `video_id-XXXXXXXX` where the suffix is the first 8 hex digits of the
/// caption's SHA-256.
pub fn task_id(video_id: &str, caption: &str) -> String {
    let digest = hex::encode(Sha256::digest(caption.as_bytes()));
    format!("{video_id}-{}", &digest[..8])
}

/// A task as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub video_id: String,
    pub video_url: String,
    pub generated_caption: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Done,
}

/// A task as served, with its progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub video_id: String,
    pub video_url: String,
    pub generated_caption: String,
    pub status: TaskStatus,
    pub judgments_received: usize,
    pub required_annotators: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
}

impl AnnotationTask {
    pub fn new(rec: &TaskRecord, received: usize, required: usize, show_references: bool) -> Self {
        Self {
            task_id: rec.task_id.clone(),
            video_id: rec.video_id.clone(),
            video_url: rec.video_url.clone(),
            generated_caption: rec.generated_caption.clone(),
            status: if received >= required {
                TaskStatus::Done
            } else {
                TaskStatus::Open
            },
            judgments_received: received,
            required_annotators: required,
            references: show_references.then(|| rec.references.clone()),
        }
    }
}

/// Merges one task per `(video, caption)` into `existing`. Tasks already
/// present are left untouched, so importing twice changes nothing.
pub fn import_tasks(
    existing: &[TaskRecord],
    captions: &BTreeMap<String, String>,
    manifest: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<TaskRecord>, AnnotateError> {
    let missing: Vec<&str> = captions
        .keys()
        .filter(|id| !manifest.contains_key(*id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(AnnotateError::Manifest(format!(
            "no manifest entry for video(s): {}",
            missing.join(", ")
        )));
    }
    let mut by_id: BTreeMap<String, TaskRecord> = existing
        .iter()
        .map(|t| (t.task_id.clone(), t.clone()))
        .collect();
    for (video_id, caption) in captions {
        let id = task_id(video_id, caption);
        by_id.entry(id.clone()).or_insert_with(|| TaskRecord {
            task_id: id,
            video_id: video_id.clone(),
            video_url: manifest[video_id].clone(),
            generated_caption: caption.clone(),
            references: references.get(video_id).cloned().unwrap_or_default(),
        });
    }
    Ok(by_id.into_values().collect())
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>, AnnotateError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| AnnotateError::Tasks {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_tasks(path: &Path, tasks: &[TaskRecord]) -> Result<(), AnnotateError> {
    let mut text = String::new();
    for t in tasks {
        text.push_str(&serde_json::to_string(t).expect("serializable"));
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_json_map<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<BTreeMap<String, T>, AnnotateError> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(BTreeMap::new());
    }
    serde_json::from_str(&text).map_err(|e| AnnotateError::Json(format!("{}: {e}", path.display())))
}

/// Imports `{video_id: caption}` using the `{video_id: url}` manifest into
/// the task file at `tasks_path`. Returns the number of new tasks.
pub fn import_task_files(
    captions_path: &Path,
    manifest_path: &Path,
    references_path: Option<&Path>,
    tasks_path: &Path,
) -> Result<usize, AnnotateError> {
    let captions: BTreeMap<String, String> = read_json_map(captions_path)?;
    let manifest: BTreeMap<String, String> = read_json_map(manifest_path)?;
    let references = match references_path {
        Some(p) => read_json_map(p)?,
        None => BTreeMap::new(),
    };
    let existing = read_tasks(tasks_path)?;
    let merged = import_tasks(&existing, &captions, &manifest, &references)?;
    write_tasks(tasks_path, &merged)?;
    Ok(merged.len() - existing.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(n: usize) -> (BTreeMap<String, String>, BTreeMap<String, String>) {
        let caps = (0..n)
            .map(|i| (format!("vid{i:02}"), format!("a man is running {i}")))
            .collect();
        let man = (0..n)
            .map(|i| (format!("vid{i:02}"), format!("http://example.org/{i}.mp4")))
            .collect();
        (caps, man)
    }

    #[test]
    fn task_ids_are_deterministic() {
        assert_eq!(task_id("v1", "a cat"), task_id("v1", "a cat"));
        assert_ne!(task_id("v1", "a cat"), task_id("v1", "a dog"));
        assert!(task_id("v1", "a cat").starts_with("v1-"));
        assert_eq!(task_id("v1", "a cat").len(), 3 + 8);
    }

    #[test]
    fn fifty_captions_fifty_tasks_and_idempotent() {
        let (caps, man) = maps(50);
        let tasks = import_tasks(&[], &caps, &man, &BTreeMap::new()).unwrap();
        assert_eq!(tasks.len(), 50);
        let again = import_tasks(&tasks, &caps, &man, &BTreeMap::new()).unwrap();
        assert_eq!(again, tasks);
    }

    #[test]
    fn missing_manifest_entry_is_named() {
        let (caps, mut man) = maps(3);
        man.remove("vid01");
        let err = import_tasks(&[], &caps, &man, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("vid01"), "{err}");
    }

    #[test]
    fn empty_captions_give_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let caps = dir.path().join("caps.json");
        let man = dir.path().join("man.json");
        fs::write(&caps, "{}").unwrap();
        fs::write(&man, "{}").unwrap();
        let tasks = dir.path().join("tasks.jsonl");
        assert_eq!(import_task_files(&caps, &man, None, &tasks).unwrap(), 0);
        assert!(read_tasks(&tasks).unwrap().is_empty());
    }

    #[test]
    fn status_follows_required_count() {
        let (caps, man) = maps(1);
        let rec = &import_tasks(&[], &caps, &man, &BTreeMap::new()).unwrap()[0];
        assert_eq!(
            AnnotationTask::new(rec, 1, 2, false).status,
            TaskStatus::Open
        );
        assert_eq!(
            AnnotationTask::new(rec, 2, 2, false).status,
            TaskStatus::Done
        );
        assert!(AnnotationTask::new(rec, 0, 2, false).references.is_none());
    }
}
