//! Server executor for Postgres-compatible engines.
//!
//! Only `TransactionRollback` isolation is supported: the whole episode
//! lives inside one transaction and each agent statement runs under its own
//! savepoint, so an engine error does not abort the episode transaction.

use std::time::Instant;

use postgres::{Client, NoTls, SimpleQueryMessage};

use super::{Engine, ExecLimits, ExecObservation, Executor, IsolationMode, SandboxError};
use crate::model::Dialect;
use crate::value::Value;

#[derive(Debug, Clone)]
pub struct PgSettings {
    pub host: String,
    pub port: u16,
    pub user: String,
    pub password: Option<String>,
}

impl PgSettings {
    /// Reads `SQLFIX_PG_HOST`, `SQLFIX_PG_PORT`, `SQLFIX_PG_USER` and
    /// `SQLFIX_PG_PASSWORD`. Returns `None` when no host is set.
    pub fn from_env() -> Option<Self> {
        let host = std::env::var("SQLFIX_PG_HOST").ok()?;
        Some(PgSettings {
            host,
            port: std::env::var("SQLFIX_PG_PORT")
                .ok()
                .and_then(|p| p.parse().ok())
                .unwrap_or(5432),
            user: std::env::var("SQLFIX_PG_USER").unwrap_or_else(|_| "postgres".into()),
            password: std::env::var("SQLFIX_PG_PASSWORD").ok(),
        })
    }
}

pub struct PostgresExecutor {
    settings: PgSettings,
}

impl PostgresExecutor {
    pub fn new(settings: PgSettings) -> Self {
        PostgresExecutor { settings }
    }
}

impl Executor for PostgresExecutor {
    fn dialect(&self) -> Dialect {
        Dialect::PostgresLike
    }

    fn supports(&self, mode: IsolationMode) -> bool {
        mode == IsolationMode::TransactionRollback
    }

    fn private_copies(&self) -> bool {
        false
    }

    fn connect(&self, db_ref: &str) -> Result<Box<dyn Engine>, SandboxError> {
        let mut cfg = postgres::Config::new();
        cfg.host(&self.settings.host)
            .port(self.settings.port)
            .user(&self.settings.user)
            .dbname(db_ref);
        if let Some(pw) = &self.settings.password {
            cfg.password(pw);
        }
        let client = cfg.connect(NoTls).map_err(|e| SandboxError::Connect {
            db_ref: db_ref.to_string(),
            message: e.to_string(),
        })?;
        Ok(Box::new(PostgresEngine {
            client,
            in_txn: false,
        }))
    }
}

pub struct PostgresEngine {
    client: Client,
    in_txn: bool,
}

fn parse_cell(raw: Option<&str>) -> Value {
    match raw {
        None => Value::Null,
        Some(s) => {
            if let Ok(i) = s.parse::<i64>() {
                Value::Integer(i)
            } else if let Ok(f) = s.parse::<f64>() {
                if s.chars().any(|c| c.is_ascii_digit()) {
                    Value::Real(f)
                } else {
                    Value::Text(s.to_string())
                }
            } else {
                Value::Text(s.to_string())
            }
        }
    }
}

impl PostgresEngine {
    fn run(&mut self, sql: &str, limits: &ExecLimits) -> Result<ExecObservation, postgres::Error> {
        let started = Instant::now();
        let messages = self.client.simple_query(sql)?;
        let mut columns = Vec::new();
        let mut rows = Vec::new();
        let mut truncated = false;
        let mut affected = None;
        let mut saw_rows = false;
        for m in messages {
            match m {
                SimpleQueryMessage::RowDescription(desc) => {
                    saw_rows = true;
                    columns = desc.iter().map(|c| c.name().to_string()).collect();
                }
                SimpleQueryMessage::Row(r) => {
                    saw_rows = true;
                    if columns.is_empty() {
                        columns = r.columns().iter().map(|c| c.name().to_string()).collect();
                    }
                    if rows.len() == limits.row_cap {
                        truncated = true;
                        continue;
                    }
                    rows.push((0..r.len()).map(|i| parse_cell(r.get(i))).collect());
                }
                SimpleQueryMessage::CommandComplete(n) => affected = Some(n),
                _ => {}
            }
        }
        let ms = started.elapsed().as_millis() as u64;
        if saw_rows && !columns.is_empty() {
            Ok(ExecObservation::rows(columns, rows, truncated, ms))
        } else {
            Ok(ExecObservation::affected(affected.unwrap_or(0), ms))
        }
    }

    fn control(&mut self, sql: &str) -> Result<(), String> {
        self.client.batch_execute(sql).map_err(|e| e.to_string())
    }
}

fn is_cancel(e: &postgres::Error) -> bool {
    e.code() == Some(&postgres::error::SqlState::QUERY_CANCELED)
}

fn error_text(e: &postgres::Error) -> String {
    e.as_db_error()
        .map(|d| d.message().to_string())
        .unwrap_or_else(|| e.to_string())
}

impl Engine for PostgresEngine {
    fn execute(&mut self, sql: &str, limits: &ExecLimits) -> ExecObservation {
        let upper = sql.trim().to_ascii_uppercase();
        match upper.as_str() {
            "BEGIN" => {
                self.in_txn = true;
                return match self.control("BEGIN") {
                    Ok(()) => ExecObservation::affected(0, 0),
                    Err(e) => ExecObservation::error(e, 0),
                };
            }
            "COMMIT" | "END" | "ROLLBACK" | "ABORT" => self.in_txn = false,
            _ => {}
        }
        let started = Instant::now();
        // savepoint control must not be nested inside the per-statement guard
        let is_savepoint_ctl = ["SAVEPOINT", "ROLLBACK TO", "RELEASE"]
            .iter()
            .any(|k| upper.starts_with(k));
        let guarded = self.in_txn && !is_savepoint_ctl;
        if guarded {
            if let Err(e) = self.control("SAVEPOINT sqlfix_stmt") {
                return ExecObservation::error(e, 0);
            }
        }
        let _ = self.control(&format!("SET statement_timeout = {}", limits.timeout_ms));
        let result = self.run(sql, limits);
        let _ = self.control("SET statement_timeout = 0");
        let ms = started.elapsed().as_millis() as u64;
        match result {
            Ok(obs) => {
                if guarded && self.in_txn {
                    let _ = self.control("RELEASE SAVEPOINT sqlfix_stmt");
                }
                obs
            }
            Err(e) => {
                if guarded {
                    let _ = self.control("ROLLBACK TO SAVEPOINT sqlfix_stmt");
                }
                if is_cancel(&e) {
                    ExecObservation::timeout(limits.timeout_ms, ms)
                } else {
                    ExecObservation::error(error_text(&e), ms)
                }
            }
        }
    }

    fn in_transaction(&self) -> Option<bool> {
        Some(self.in_txn)
    }

    fn snapshot(&mut self) -> Result<(), SandboxError> {
        Err(SandboxError::UnsupportedIsolation {
            dialect: Dialect::PostgresLike,
            mode: IsolationMode::TemplateCopy,
        })
    }

    fn restore(&mut self) -> Result<(), SandboxError> {
        self.snapshot()
    }

    fn schema_ddl(&mut self) -> Result<String, SandboxError> {
        let rows = self
            .client
            .query(
                "SELECT c.table_name, string_agg(c.column_name || ' ' || c.data_type, ', ' \
                 ORDER BY c.ordinal_position) \
                 FROM information_schema.columns c \
                 JOIN information_schema.tables t USING (table_schema, table_name) \
                 WHERE c.table_schema = current_schema() AND t.table_type = 'BASE TABLE' \
                 GROUP BY c.table_name ORDER BY c.table_name",
                &[],
            )
            .map_err(|e| SandboxError::Engine(e.to_string()))?;
        Ok(rows
            .iter()
            .map(|r| {
                let name: String = r.get(0);
                let cols: String = r.get(1);
                format!("CREATE TABLE {name} ({cols});")
            })
            .collect::<Vec<_>>()
            .join("\n\n"))
    }

    fn table_ddl(&mut self, table: &str) -> Result<Option<String>, SandboxError> {
        let ddl = self.schema_ddl()?;
        let prefix = format!("CREATE TABLE {} (", table.to_lowercase());
        Ok(ddl
            .split("\n\n")
            .find(|s| s.to_lowercase().starts_with(&prefix))
            .map(str::to_string))
    }
}
