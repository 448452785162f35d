//! Isolated database sessions for agent episodes and evaluation.
//!
//! A [`Sandbox`] resolves a task's dialect to a registered [`Executor`],
//! opens a connection, applies the task's preprocess statements and then
//! guards the post-preprocess state so [`Session::reset`] can return to it.

mod observation;
#[cfg(feature = "postgres")]
pub mod postgres;
pub mod sqlite;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dialect, TaskInstance};
use crate::sqltext;

pub use observation::{ExecLimits, ExecObservation, ExecStatus, TRUNCATION_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IsolationMode {
    /// Wrap the episode in a transaction and roll back on reset.
    TransactionRollback,
    /// Keep a copy of the post-preprocess database and restore it on reset.
    TemplateCopy,
}

impl IsolationMode {
    pub fn default_for(dialect: Dialect) -> IsolationMode {
        match dialect {
            Dialect::EmbeddedRef => IsolationMode::TemplateCopy,
            _ => IsolationMode::TransactionRollback,
        }
    }
}

impl std::str::FromStr for IsolationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "transactionrollback" | "rollback" => Ok(IsolationMode::TransactionRollback),
            "templatecopy" | "copy" => Ok(IsolationMode::TemplateCopy),
            _ => Err(format!("unknown isolation mode '{s}'")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SandboxError {
    #[error("no executor registered for dialect {0}")]
    UnregisteredDialect(Dialect),
    #[error("{dialect} executor does not support {mode:?} isolation")]
    UnsupportedIsolation { dialect: Dialect, mode: IsolationMode },
    #[error("cannot connect to '{db_ref}': {message}")]
    Connect { db_ref: String, message: String },
    #[error("preprocess statement {statement} failed: {message}")]
    Preprocess { statement: usize, message: String },
    #[error("session is closed")]
    Closed,
    #[error("session is poisoned and cannot be restored: {0}")]
    Poisoned(String),
    #[error("reset failed: {0}")]
    Reset(String),
    #[error("engine error: {0}")]
    Engine(String),
}

/// One live connection to a database instance.
pub trait Engine: Send {
    /// Runs a single statement. Never panics on engine errors; those come
    /// back as `Error` observations.
    fn execute(&mut self, sql: &str, limits: &ExecLimits) -> ExecObservation;

    /// Whether an explicit transaction is open, when the engine can tell.
    fn in_transaction(&self) -> Option<bool>;

    /// Captures the current database state for [`Engine::restore`].
    fn snapshot(&mut self) -> Result<(), SandboxError>;

    fn restore(&mut self) -> Result<(), SandboxError>;

    /// `CREATE ...` DDL for every user object, separated by blank lines.
    fn schema_ddl(&mut self) -> Result<String, SandboxError>;

    fn table_ddl(&mut self, table: &str) -> Result<Option<String>, SandboxError>;

    fn quote_ident(&self, name: &str) -> String {
        format!("\"{}\"", name.replace('"', "\"\""))
    }
}

pub trait Executor: Send + Sync {
    fn dialect(&self) -> Dialect;

    fn supports(&self, mode: IsolationMode) -> bool;

    /// True when every connection sees a private copy of the database, so
    /// sessions can never observe each other and a poisoned session can be
    /// rebuilt by reconnecting.
    fn private_copies(&self) -> bool;

    fn connect(&self, db_ref: &str) -> Result<Box<dyn Engine>, SandboxError>;
}

#[derive(Default, Clone)]
pub struct ExecutorRegistry {
    executors: HashMap<Dialect, Arc<dyn Executor>>,
}

impl ExecutorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, executor: Arc<dyn Executor>) -> &mut Self {
        self.executors.insert(executor.dialect(), executor);
        self
    }

    pub fn get(&self, dialect: Dialect) -> Option<&Arc<dyn Executor>> {
        self.executors.get(&dialect)
    }

    pub fn dialects(&self) -> Vec<Dialect> {
        let mut d: Vec<_> = self.executors.keys().copied().collect();
        d.sort();
        d
    }
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

const EPISODE_SAVEPOINT: &str = "sqlfix_episode";

/// Opens sessions against registered executors.
#[derive(Clone)]
pub struct Sandbox {
    registry: Arc<ExecutorRegistry>,
    limits: ExecLimits,
    default_mode: Option<IsolationMode>,
}

impl Sandbox {
    pub fn new(registry: ExecutorRegistry) -> Self {
        Sandbox {
            registry: Arc::new(registry),
            limits: ExecLimits::default(),
            default_mode: None,
        }
    }

    /// Sandbox with only the embedded executor, reading databases from
    /// `catalog_dir`.
    pub fn embedded(catalog_dir: impl Into<std::path::PathBuf>) -> Self {
        let mut reg = ExecutorRegistry::new();
        reg.register(Arc::new(sqlite::SqliteExecutor::new(catalog_dir)));
        Sandbox::new(reg)
    }

    pub fn with_limits(mut self, limits: ExecLimits) -> Self {
        self.limits = limits;
        self
    }

    /// Overrides the per-dialect default isolation mode.
    pub fn with_isolation(mut self, mode: Option<IsolationMode>) -> Self {
        self.default_mode = mode;
        self
    }

    pub fn limits(&self) -> ExecLimits {
        self.limits
    }

    pub fn registry(&self) -> &ExecutorRegistry {
        &self.registry
    }

    pub fn mode_for(&self, dialect: Dialect) -> IsolationMode {
        self.default_mode
            .unwrap_or_else(|| IsolationMode::default_for(dialect))
    }

    /// Opens a session with the sandbox's default isolation for the task's
    /// dialect.
    pub fn open(&self, task: &TaskInstance) -> Result<Session, SandboxError> {
        self.open_session(task, self.mode_for(task.dialect))
    }

    pub fn open_session(
        &self,
        task: &TaskInstance,
        mode: IsolationMode,
    ) -> Result<Session, SandboxError> {
        let executor = self
            .registry
            .get(task.dialect)
            .cloned()
            .ok_or(SandboxError::UnregisteredDialect(task.dialect))?;
        if !executor.supports(mode) {
            return Err(SandboxError::UnsupportedIsolation {
                dialect: task.dialect,
                mode,
            });
        }
        let mut session = Session {
            session_id: format!("s-{}", NEXT_SESSION.fetch_add(1, Ordering::Relaxed)),
            task_id: task.task_id.clone(),
            dialect: task.dialect,
            isolation_mode: mode,
            open_at: SystemTime::now(),
            statement_count: 0,
            executor,
            db_ref: task.db_ref.clone(),
            preprocess: task.preprocess_sql.clone(),
            cleanup: task.cleanup_sql.clone(),
            limits: self.limits,
            engine: None,
            poisoned: false,
            closed: false,
            cleanup_failures: Vec::new(),
        };
        session.engine = Some(session.prepare_engine()?);
        Ok(session)
    }
}

/// A database session bound to one task and one database instance.
///
/// Sessions are `Send` but not `Sync`: they move between workers but are
/// only driven by one at a time.
pub struct Session {
    pub session_id: String,
    pub task_id: String,
    pub dialect: Dialect,
    pub isolation_mode: IsolationMode,
    pub open_at: SystemTime,
    pub statement_count: u64,
    executor: Arc<dyn Executor>,
    db_ref: String,
    preprocess: Vec<String>,
    cleanup: Vec<String>,
    limits: ExecLimits,
    engine: Option<Box<dyn Engine>>,
    poisoned: bool,
    closed: bool,
    cleanup_failures: Vec<(usize, String)>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("session_id", &self.session_id)
            .field("task_id", &self.task_id)
            .field("dialect", &self.dialect)
            .field("isolation_mode", &self.isolation_mode)
            .field("statement_count", &self.statement_count)
            .field("poisoned", &self.poisoned)
            .field("closed", &self.closed)
            .finish()
    }
}

fn run_guard(engine: &mut dyn Engine, sql: &str, limits: &ExecLimits) -> Result<(), String> {
    let obs = engine.execute(sql, limits);
    match obs.error_text {
        Some(e) if obs.is_failure() => Err(e),
        _ => Ok(()),
    }
}

impl Session {
    fn prepare_engine(&self) -> Result<Box<dyn Engine>, SandboxError> {
        let mut engine = self.executor.connect(&self.db_ref)?;
        let limits = self.limits;
        if self.isolation_mode == IsolationMode::TransactionRollback {
            run_guard(engine.as_mut(), "BEGIN", &limits).map_err(SandboxError::Engine)?;
        }
        for (i, sql) in self.preprocess.iter().enumerate() {
            let obs = engine.execute(sql, &limits);
            if obs.is_failure() {
                return Err(SandboxError::Preprocess {
                    statement: i + 1,
                    message: obs.error_text.unwrap_or_default(),
                });
            }
        }
        match self.isolation_mode {
            IsolationMode::TransactionRollback => {
                run_guard(
                    engine.as_mut(),
                    &format!("SAVEPOINT {EPISODE_SAVEPOINT}"),
                    &limits,
                )
                .map_err(SandboxError::Engine)?;
            }
            IsolationMode::TemplateCopy => engine.snapshot()?,
        }
        Ok(engine)
    }

    fn engine(&mut self) -> Result<&mut Box<dyn Engine>, SandboxError> {
        if self.closed {
            return Err(SandboxError::Closed);
        }
        self.engine.as_mut().ok_or(SandboxError::Closed)
    }

    pub fn limits(&self) -> ExecLimits {
        self.limits
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Flags the session as unusable until the next reset, e.g. after the
    /// caller observed an environment fault the engine could not report.
    pub fn mark_poisoned(&mut self) {
        self.poisoned = true;
    }

    pub fn cleanup_failures(&self) -> &[(usize, String)] {
        &self.cleanup_failures
    }

    /// Executes one action with the session's limits.
    pub fn execute(&mut self, sql: &str) -> Result<ExecObservation, SandboxError> {
        let limits = self.limits;
        self.execute_with(sql, &limits)
    }

    /// Executes one action. Text holding several statements runs them in
    /// order and stops at the first failure; the observation is the one
    /// from the last statement that ran.
    pub fn execute_with(
        &mut self,
        sql: &str,
        limits: &ExecLimits,
    ) -> Result<ExecObservation, SandboxError> {
        if self.poisoned {
            return Err(SandboxError::Poisoned(
                "session must be reset before further use".into(),
            ));
        }
        let mode = self.isolation_mode;
        let engine = self.engine()?;
        let statements = sqltext::split_statements(sql);
        let mut obs = if statements.is_empty() {
            ExecObservation::error("empty statement", 0)
        } else {
            let mut total_ms = 0;
            let mut last = None;
            for stmt in &statements {
                let o = engine.execute(stmt, limits);
                total_ms += o.elapsed_ms;
                let failed = o.is_failure();
                last = Some(o);
                if failed {
                    break;
                }
            }
            let mut o = last.expect("at least one statement");
            o.elapsed_ms = total_ms;
            o
        };
        let txn_state = engine.in_transaction();
        let timed_out = obs.status == ExecStatus::Timeout;
        let lost_txn = mode == IsolationMode::TransactionRollback && txn_state == Some(false);
        let unknown_after_timeout =
            timed_out && mode == IsolationMode::TransactionRollback && txn_state.is_none();
        self.statement_count += 1;
        if lost_txn || unknown_after_timeout {
            self.poisoned = true;
            if lost_txn {
                let note = "\n(session poisoned: the episode transaction was ended)";
                if let Some(t) = obs.error_text.as_mut() {
                    t.push_str(note);
                }
            }
        }
        Ok(obs)
    }

    /// Runs a list of statements, one execute per entry, stopping at the
    /// first failure. Returns every observation produced.
    pub fn execute_all(&mut self, sql: &[String]) -> Result<Vec<ExecObservation>, SandboxError> {
        let mut out = Vec::with_capacity(sql.len());
        for s in sql {
            let o = self.execute(s)?;
            let failed = o.is_failure();
            out.push(o);
            if failed {
                break;
            }
        }
        Ok(out)
    }

    /// Restores the post-preprocess state and zeroes the statement count.
    pub fn reset(&mut self) -> Result<(), SandboxError> {
        if self.closed {
            return Err(SandboxError::Closed);
        }
        let limits = self.limits;
        let mode = self.isolation_mode;
        let restored = if self.poisoned {
            Err("poisoned".to_string())
        } else {
            let engine = self.engine.as_mut().ok_or(SandboxError::Closed)?;
            match mode {
                IsolationMode::TransactionRollback => {
                    let r = run_guard(
                        engine.as_mut(),
                        &format!("ROLLBACK TO SAVEPOINT {EPISODE_SAVEPOINT}"),
                        &limits,
                    );
                    match (r, engine.in_transaction()) {
                        (Ok(()), Some(false)) => Err("transaction ended".to_string()),
                        (r, _) => r,
                    }
                }
                IsolationMode::TemplateCopy => engine.restore().map_err(|e| e.to_string()),
            }
        };
        if let Err(reason) = restored {
            if !self.executor.private_copies() {
                self.poisoned = true;
                return Err(SandboxError::Poisoned(reason));
            }
            log::debug!("{}: rebuilding session after failed restore: {reason}", self.session_id);
            let engine = self
                .prepare_engine()
                .map_err(|e| SandboxError::Reset(e.to_string()))?;
            self.engine = Some(engine);
        }
        self.poisoned = false;
        self.statement_count = 0;
        Ok(())
    }

    pub fn schema_ddl(&mut self) -> Result<String, SandboxError> {
        self.engine()?.schema_ddl()
    }

    pub fn table_ddl(&mut self, table: &str) -> Result<Option<String>, SandboxError> {
        self.engine()?.table_ddl(table)
    }

    pub fn quote_ident(&mut self, name: &str) -> Result<String, SandboxError> {
        Ok(self.engine()?.quote_ident(name))
    }

    /// Runs cleanup statements best-effort and releases the connection.
    /// Closing twice is a no-op.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        let limits = self.limits;
        if let Some(mut engine) = self.engine.take() {
            for (i, sql) in self.cleanup.iter().enumerate() {
                let obs = engine.execute(sql, &limits);
                if obs.is_failure() {
                    let msg = obs.error_text.unwrap_or_default();
                    log::warn!(
                        "{}: cleanup statement {} failed: {msg}",
                        self.session_id,
                        i + 1
                    );
                    self.cleanup_failures.push((i + 1, msg));
                }
            }
            if self.isolation_mode == IsolationMode::TransactionRollback
                && engine.in_transaction() != Some(false)
            {
                let _ = engine.execute("ROLLBACK", &limits);
            }
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::task;
    use crate::value::Value;

    const SHOP: &str = "CREATE TABLE t(id INTEGER PRIMARY KEY, v INTEGER);
        INSERT INTO t VALUES (1, 10), (2, 20), (3, 30);";

    fn sandbox() -> Sandbox {
        let exec = sqlite::SqliteExecutor::in_memory_only();
        exec.register_script("shop", SHOP).unwrap();
        let mut reg = ExecutorRegistry::new();
        reg.register(Arc::new(exec));
        Sandbox::new(reg)
    }

    fn probe(s: &mut Session) -> Vec<Vec<Value>> {
        s.execute("SELECT id, v FROM t ORDER BY id").unwrap().rows
    }

    #[test]
    fn open_runs_preprocess_in_order() {
        let mut t = task();
        t.preprocess_sql = vec![
            "CREATE TABLE extra(x INTEGER)".into(),
            "INSERT INTO extra VALUES (7)".into(),
        ];
        for mode in [IsolationMode::TemplateCopy, IsolationMode::TransactionRollback] {
            let mut s = sandbox().open_session(&t, mode).unwrap();
            assert_eq!(s.statement_count, 0);
            let obs = s.execute("SELECT x FROM extra").unwrap();
            assert_eq!(obs.rows, vec![vec![Value::Integer(7)]]);
            assert_eq!(s.statement_count, 1);
        }
    }

    #[test]
    fn preprocess_failure_names_statement() {
        let mut t = task();
        t.preprocess_sql = vec!["INSERT INTO missing VALUES (1)".into()];
        let err = sandbox().open(&t).unwrap_err();
        match err {
            SandboxError::Preprocess { statement, message } => {
                assert_eq!(statement, 1);
                assert!(message.contains("missing"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unregistered_dialect_is_rejected() {
        let mut t = task();
        t.dialect = Dialect::OracleLike;
        assert_eq!(
            sandbox().open(&t).unwrap_err(),
            SandboxError::UnregisteredDialect(Dialect::OracleLike)
        );
    }

    #[test]
    fn execute_statuses() {
        let mut s = sandbox().open(&task()).unwrap();
        let o = s.execute("SELECT 1").unwrap();
        assert_eq!(o.status, ExecStatus::Rows);
        assert_eq!(o.columns, vec!["1"]);
        assert_eq!(o.rows, vec![vec![Value::Integer(1)]]);
        let o = s.execute("DELETE FROM t WHERE false").unwrap();
        assert_eq!(o.status, ExecStatus::Affected);
        assert_eq!(o.affected_count, Some(0));
        let o = s.execute("SELEC nonsense").unwrap();
        assert_eq!(o.status, ExecStatus::Error);
        assert!(!o.error_text.unwrap().is_empty());
        assert_eq!(s.statement_count, 3);
    }

    #[test]
    fn row_cap_truncates() {
        let mut s = sandbox().open(&task()).unwrap();
        let limits = ExecLimits {
            row_cap: 2,
            ..ExecLimits::default()
        };
        let o = s.execute_with("SELECT * FROM t", &limits).unwrap();
        assert!(o.truncated);
        assert_eq!(o.rows.len(), 2);
        let o = s
            .execute_with("SELECT * FROM t WHERE id < 3", &limits)
            .unwrap();
        assert!(!o.truncated);
    }

    #[test]
    fn timeout_cancels_statement_and_session_survives() {
        for mode in [IsolationMode::TemplateCopy, IsolationMode::TransactionRollback] {
            let mut s = sandbox().open_session(&task(), mode).unwrap();
            let limits = ExecLimits {
                timeout_ms: 50,
                ..ExecLimits::default()
            };
            let o = s
                .execute_with(
                    "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) \
                     SELECT count(*) FROM c",
                    &limits,
                )
                .unwrap();
            assert_eq!(o.status, ExecStatus::Timeout);
            assert!(!s.is_poisoned());
            assert_eq!(probe(&mut s).len(), 3);
        }
    }

    #[test]
    fn reset_restores_state_in_both_modes() {
        for mode in [IsolationMode::TemplateCopy, IsolationMode::TransactionRollback] {
            let mut s = sandbox().open_session(&task(), mode).unwrap();
            let before = probe(&mut s);
            s.execute("UPDATE t SET v = v * 100").unwrap();
            s.execute("CREATE TABLE junk(x)").unwrap();
            assert_ne!(probe(&mut s), before);
            s.reset().unwrap();
            assert_eq!(s.statement_count, 0);
            assert_eq!(probe(&mut s), before);
            assert!(s.execute("SELECT * FROM junk").unwrap().is_failure());
            // idempotent on a fresh state
            s.reset().unwrap();
            assert_eq!(probe(&mut s), before);
        }
    }

    #[test]
    fn commit_poisons_rollback_session_and_reset_recovers() {
        let mut s = sandbox()
            .open_session(&task(), IsolationMode::TransactionRollback)
            .unwrap();
        s.execute("UPDATE t SET v = 0").unwrap();
        s.execute("COMMIT").unwrap();
        assert!(s.is_poisoned());
        assert!(matches!(s.execute("SELECT 1"), Err(SandboxError::Poisoned(_))));
        s.reset().unwrap();
        assert_eq!(probe(&mut s)[0][1], Value::Integer(10));
    }

    #[test]
    fn poisoned_template_copy_session_resets_by_recopy() {
        let mut s = sandbox()
            .open_session(&task(), IsolationMode::TemplateCopy)
            .unwrap();
        s.execute("DELETE FROM t").unwrap();
        s.mark_poisoned();
        s.reset().unwrap();
        assert!(!s.is_poisoned());
        assert_eq!(probe(&mut s).len(), 3);
    }

    #[test]
    fn template_copy_reset_survives_dangling_transaction() {
        let mut s = sandbox()
            .open_session(&task(), IsolationMode::TemplateCopy)
            .unwrap();
        s.execute("BEGIN").unwrap();
        s.execute("DELETE FROM t").unwrap();
        s.reset().unwrap();
        assert_eq!(probe(&mut s).len(), 3);
    }

    #[test]
    fn sessions_are_isolated() {
        let sb = sandbox();
        for mode in [IsolationMode::TemplateCopy, IsolationMode::TransactionRollback] {
            let mut a = sb.open_session(&task(), mode).unwrap();
            let mut b = sb.open_session(&task(), mode).unwrap();
            let before = probe(&mut b);
            a.execute("DELETE FROM t").unwrap();
            a.execute("INSERT INTO t VALUES (9, 9)").unwrap();
            assert_eq!(probe(&mut b), before);
        }
    }

    #[test]
    fn close_runs_cleanup_and_is_idempotent() {
        let mut t = task();
        t.cleanup_sql = vec!["DROP TABLE nope".into(), "DELETE FROM t".into()];
        let mut s = sandbox().open(&t).unwrap();
        s.close();
        assert_eq!(s.cleanup_failures().len(), 1);
        assert_eq!(s.cleanup_failures()[0].0, 1);
        assert_eq!(s.execute("SELECT 1").unwrap_err(), SandboxError::Closed);
        s.close();
        assert_eq!(s.cleanup_failures().len(), 1);
        assert_eq!(s.reset().unwrap_err(), SandboxError::Closed);
    }

    #[test]
    fn multi_statement_action_stops_at_first_error() {
        let mut s = sandbox().open(&task()).unwrap();
        let o = s
            .execute("UPDATE t SET v = 1 WHERE id = 1; SELECT nope FROM t; DELETE FROM t")
            .unwrap();
        assert_eq!(o.status, ExecStatus::Error);
        assert_eq!(s.statement_count, 1);
        assert_eq!(probe(&mut s).len(), 3);
    }
}
