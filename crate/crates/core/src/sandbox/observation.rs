use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::value::Row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub row_cap: usize,
    pub char_cap: usize,
    pub timeout_ms: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits {
            row_cap: 50,
            char_cap: 4000,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecStatus {
    Rows,
    Affected,
    Error,
    Timeout,
}

pub const TRUNCATION_MARKER: &str = "… truncated";

/// Engine feedback for one executed action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecObservation {
    pub status: ExecStatus,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub affected_count: Option<u64>,
    pub error_text: Option<String>,
    pub truncated: bool,
    pub elapsed_ms: u64,
}

impl ExecObservation {
    pub fn rows(columns: Vec<String>, rows: Vec<Row>, truncated: bool, elapsed_ms: u64) -> Self {
        ExecObservation {
            status: ExecStatus::Rows,
            columns,
            rows,
            affected_count: None,
            error_text: None,
            truncated,
            elapsed_ms,
        }
    }

    pub fn affected(count: u64, elapsed_ms: u64) -> Self {
        ExecObservation {
            status: ExecStatus::Affected,
            columns: Vec::new(),
            rows: Vec::new(),
            affected_count: Some(count),
            error_text: None,
            truncated: false,
            elapsed_ms,
        }
    }

    pub fn error(message: impl Into<String>, elapsed_ms: u64) -> Self {
        let mut text = message.into();
        if text.trim().is_empty() {
            text = "unknown engine error".to_string();
        }
        ExecObservation {
            status: ExecStatus::Error,
            columns: Vec::new(),
            rows: Vec::new(),
            affected_count: None,
            error_text: Some(text),
            truncated: false,
            elapsed_ms,
        }
    }

    pub fn timeout(timeout_ms: u64, elapsed_ms: u64) -> Self {
        ExecObservation {
            status: ExecStatus::Timeout,
            error_text: Some(format!("statement cancelled after {timeout_ms} ms")),
            ..ExecObservation::error("", elapsed_ms)
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self.status, ExecStatus::Error | ExecStatus::Timeout)
    }

    /// Text shown to the agent: status header, column names, tab-separated
    /// rows, then the truncation marker. Errors render the engine message
    /// verbatim. The result is cut to `char_cap` characters.
    pub fn render(&self, char_cap: usize) -> String {
        let mut out = String::new();
        match self.status {
            ExecStatus::Rows => {
                let _ = writeln!(out, "Rows: {}", self.rows.len());
                out.push_str(&self.columns.join("\t"));
                for row in &self.rows {
                    out.push('\n');
                    let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
                    out.push_str(&cells.join("\t"));
                }
            }
            ExecStatus::Affected => {
                let _ = write!(out, "Affected: {}", self.affected_count.unwrap_or(0));
            }
            ExecStatus::Error => {
                out.push_str("Error: ");
                out.push_str(self.error_text.as_deref().unwrap_or_default());
            }
            ExecStatus::Timeout => {
                out.push_str("Timeout: ");
                out.push_str(self.error_text.as_deref().unwrap_or_default());
            }
        }
        let mut cut = false;
        if out.chars().count() > char_cap {
            out = out.chars().take(char_cap).collect();
            cut = true;
        }
        if self.truncated || cut {
            out.push('\n');
            out.push_str(TRUNCATION_MARKER);
        }
        out
    }
}
