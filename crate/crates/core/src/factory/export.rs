//! Chat-formatted training export.
//!
//! Line-delimited JSON. The first line is a header
//! `{"format":"sqlfix-chat-v1","count":N}`; each following line is one
//! trajectory:
//!
//! ```text
//! {"task_id": "...",
//!  "messages": [{"role":"assistant","content":"<thought>..</thought>\n<action>..</action>"},
//!               {"role":"user","content":"<observation>..</observation>"}, ...],
//!  "final_sql": ["..."]}
//! ```
//!
//! A DONE step has no observation message.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::FactoryError;
use crate::gateway::Message;
use crate::model::Trajectory;

pub const EXPORT_FORMAT: &str = "sqlfix-chat-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub format: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub task_id: String,
    pub messages: Vec<Message>,
    pub final_sql: Vec<String>,
}

pub fn chat_record(t: &Trajectory) -> Result<ChatRecord, FactoryError> {
    let final_sql = match (&t.final_sql, t.passed) {
        (Some(sql), Some(true)) => sql.clone(),
        _ => return Err(FactoryError::NotPassed(t.task_id.clone())),
    };
    let mut messages = Vec::with_capacity(t.steps.len() * 2);
    for s in &t.steps {
        messages.push(Message::assistant(format!(
            "<thought>{}</thought>\n<action>{}</action>",
            s.thought,
            s.action.as_text()
        )));
        if !s.action.is_done() {
            messages.push(Message::user(format!("<observation>{}</observation>", s.observation)));
        }
    }
    Ok(ChatRecord {
        task_id: t.task_id.clone(),
        messages,
        final_sql,
    })
}

/// Writes the header and one record per trajectory. Every trajectory must
/// have passed; nothing is written otherwise.
pub fn export_training(trajectories: &[Trajectory], out: &mut dyn Write) -> Result<usize, FactoryError> {
    let records = trajectories.iter().map(chat_record).collect::<Result<Vec<_>, _>>()?;
    let header = ExportHeader {
        format: EXPORT_FORMAT.to_string(),
        count: records.len(),
    };
    let io = |e: std::io::Error| FactoryError::Io(e.to_string());
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializable")).map_err(io)?;
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r).expect("serializable")).map_err(io)?;
    }
    Ok(records.len())
}
