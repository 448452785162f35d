//! File formats: task sets, predictions and line-delimited records.
//!
//! A task source may be
//! - a directory: every `*.json` file in it (sorted by name), each holding
//!   one task or an array of tasks; a `manifest.json` there is used instead
//!   when present, and a `tasks/` subdirectory is used when the directory
//!   itself holds no task files,
//! - a `.jsonl` file: one task per line,
//! - a `.json` file: one task, an array of tasks, or a manifest
//!   `{"tasks": ["relative/path.json", ...]}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_dataset, TaskInstance};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parse_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Line-delimited JSON; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

#[derive(Deserialize)]
struct Manifest {
    tasks: Vec<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TaskFile {
    Manifest(Manifest),
    Many(Vec<TaskInstance>),
    One(Box<TaskInstance>),
}

fn load_json(path: &Path, depth: usize) -> Result<Vec<TaskInstance>, IoError> {
    let text = read(path)?;
    let parsed: TaskFile = serde_json::from_str(&text).map_err(|e| {
        // report the error of the most likely shape
        let hint = serde_json::from_str::<TaskInstance>(&text).err().unwrap_or(e);
        parse_err(path, hint)
    })?;
    match parsed {
        TaskFile::One(t) => Ok(vec![*t]),
        TaskFile::Many(v) => Ok(v),
        TaskFile::Manifest(m) => {
            if depth > 0 {
                return Err(parse_err(path, "nested manifests are not supported"));
            }
            let base = path.parent().unwrap_or(Path::new("."));
            let mut out = Vec::new();
            for p in m.tasks {
                out.extend(load_json(&base.join(p), depth + 1)?);
            }
            Ok(out)
        }
    }
}

/// Loads and validates a task set. Task ids must be unique.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>, IoError> {
    let tasks = if path.is_dir() {
        let manifest = path.join("manifest.json");
        if manifest.is_file() {
            load_json(&manifest, 0)?
        } else {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| IoError::Read {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            let nested = path.join("tasks");
            if files.is_empty() && nested.is_dir() {
                return load_tasks(&nested);
            }
            let mut out = Vec::new();
            for f in files {
                out.extend(load_json(&f, 0)?);
            }
            out
        }
    } else if path.extension().is_some_and(|x| x == "jsonl") {
        read_jsonl(path)?
    } else {
        load_json(path, 0)?
    };
    let problems = validate_dataset(&tasks);
    if !problems.is_empty() {
        return Err(IoError::Invalid(problems.join("; ")));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SqlField {
    Many(Vec<String>),
    One(String),
}

impl SqlField {
    pub fn statements(self) -> Vec<String> {
        match self {
            SqlField::Many(v) => v,
            SqlField::One(s) => crate::sqltext::split_statements(&s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task_id: String,
    pub predicted_sql: SqlField,
}

/// Predictions keyed by task id. A string is split into statements; a
/// repeated task id is an error.
pub fn load_predictions(path: &Path) -> Result<HashMap<String, Vec<String>>, IoError> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    let mut out = HashMap::new();
    for r in records {
        if out.insert(r.task_id.clone(), r.predicted_sql.statements()).is_some() {
            return Err(parse_err(path, format!("duplicate prediction for '{}'", r.task_id)));
        }
    }
    Ok(out)
}
