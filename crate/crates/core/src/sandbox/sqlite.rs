//! Embedded reference executor backed by SQLite.
//!
//! Databases are resolved from a catalog directory: `<db_ref>.sqlite`,
//! `<db_ref>.db` (database files) or `<db_ref>.sql` (a build script). Each
//! resolved database is kept as a serialized image and every connection
//! deserializes its own private in-memory copy, so the catalog files are
//! never written.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, MAIN_DB};

use super::{Engine, ExecLimits, ExecObservation, Executor, IsolationMode, SandboxError};
use crate::model::Dialect;
use crate::value::Value;

type Image = Arc<Vec<u8>>;

pub struct SqliteExecutor {
    catalog_dir: Option<PathBuf>,
    images: Mutex<HashMap<String, Image>>,
}

impl SqliteExecutor {
    pub fn new(catalog_dir: impl Into<PathBuf>) -> Self {
        SqliteExecutor {
            catalog_dir: Some(catalog_dir.into()),
            images: Mutex::new(HashMap::new()),
        }
    }

    /// Executor without a catalog directory; databases must be registered
    /// with [`SqliteExecutor::register_script`].
    pub fn in_memory_only() -> Self {
        SqliteExecutor {
            catalog_dir: None,
            images: Mutex::new(HashMap::new()),
        }
    }

    /// Builds a database from an SQL script and registers it as `db_ref`.
    pub fn register_script(&self, db_ref: &str, script: &str) -> Result<(), SandboxError> {
        let image = image_from_script(db_ref, script)?;
        self.images
            .lock()
            .expect("image cache poisoned")
            .insert(db_ref.to_string(), Arc::new(image));
        Ok(())
    }

    fn resolve(&self, db_ref: &str) -> Result<Image, SandboxError> {
        if let Some(img) = self.images.lock().expect("image cache poisoned").get(db_ref) {
            return Ok(img.clone());
        }
        let connect_err = |message: String| SandboxError::Connect {
            db_ref: db_ref.to_string(),
            message,
        };
        let dir = self
            .catalog_dir
            .as_deref()
            .ok_or_else(|| connect_err("unknown database".into()))?;
        if db_ref.contains(['/', '\\']) || db_ref.starts_with('.') {
            return Err(connect_err("database name may not contain a path".into()));
        }
        let image = load_image(dir, db_ref).map_err(connect_err)?;
        let image = Arc::new(image);
        self.images
            .lock()
            .expect("image cache poisoned")
            .entry(db_ref.to_string())
            .or_insert_with(|| image.clone());
        Ok(image)
    }
}

fn load_image(dir: &Path, db_ref: &str) -> Result<Vec<u8>, String> {
    for ext in ["sqlite", "db"] {
        let p = dir.join(format!("{db_ref}.{ext}"));
        if p.is_file() {
            return std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        }
    }
    let p = dir.join(format!("{db_ref}.sql"));
    if p.is_file() {
        let script = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        return image_from_script(db_ref, &script).map_err(|e| e.to_string());
    }
    Err(format!("no database file for '{db_ref}' in {}", dir.display()))
}

fn image_from_script(db_ref: &str, script: &str) -> Result<Vec<u8>, SandboxError> {
    let err = |e: rusqlite::Error| SandboxError::Connect {
        db_ref: db_ref.to_string(),
        message: e.to_string(),
    };
    let conn = Connection::open_in_memory().map_err(err)?;
    conn.execute_batch(script).map_err(err)?;
    let data = conn.serialize(MAIN_DB).map_err(err)?;
    Ok(data.to_vec())
}

fn connection_from_image(image: &[u8]) -> rusqlite::Result<Connection> {
    let mut conn = Connection::open_in_memory()?;
    conn.deserialize_read_exact(MAIN_DB, image, image.len(), false)?;
    conn.execute_batch("PRAGMA foreign_keys = ON;")?;
    Ok(conn)
}

impl Executor for SqliteExecutor {
    fn dialect(&self) -> Dialect {
        Dialect::EmbeddedRef
    }

    fn supports(&self, _mode: IsolationMode) -> bool {
        true
    }

    fn private_copies(&self) -> bool {
        true
    }

    fn connect(&self, db_ref: &str) -> Result<Box<dyn Engine>, SandboxError> {
        let image = self.resolve(db_ref)?;
        let conn = connection_from_image(&image).map_err(|e| SandboxError::Connect {
            db_ref: db_ref.to_string(),
            message: e.to_string(),
        })?;
        Ok(Box::new(SqliteEngine {
            conn,
            snapshot: None,
        }))
    }
}

pub struct SqliteEngine {
    conn: Connection,
    snapshot: Option<Vec<u8>>,
}

fn cell(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::Integer(i),
        ValueRef::Real(r) => Value::Real(r),
        ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::Blob { blob: b.to_vec() },
    }
}

fn is_interrupt(e: &rusqlite::Error) -> bool {
    matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted)
}

impl SqliteEngine {
    fn run(&mut self, sql: &str, limits: &ExecLimits) -> rusqlite::Result<ExecObservation> {
        let started = Instant::now();
        let mut stmt = self.conn.prepare(sql)?;
        let ncols = stmt.column_count();
        if ncols == 0 {
            stmt.execute([])?;
            let changes = self.conn.changes();
            return Ok(ExecObservation::affected(changes, elapsed(started)));
        }
        let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let mut rows = Vec::new();
        let mut truncated = false;
        let mut cursor = stmt.query([])?;
        while let Some(r) = cursor.next()? {
            if rows.len() == limits.row_cap {
                truncated = true;
                break;
            }
            let row = (0..ncols)
                .map(|i| r.get_ref(i).map(cell))
                .collect::<rusqlite::Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(ExecObservation::rows(columns, rows, truncated, elapsed(started)))
    }
}

fn elapsed(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

impl Engine for SqliteEngine {
    fn execute(&mut self, sql: &str, limits: &ExecLimits) -> ExecObservation {
        let started = Instant::now();
        let deadline = started + Duration::from_millis(limits.timeout_ms);
        let _ = self
            .conn
            .progress_handler(1_000, Some(move || Instant::now() >= deadline));
        let result = self.run(sql, limits);
        let _ = self.conn.progress_handler(0, None::<fn() -> bool>);
        match result {
            Ok(obs) => obs,
            Err(e) if is_interrupt(&e) => ExecObservation::timeout(limits.timeout_ms, elapsed(started)),
            Err(e) => ExecObservation::error(e.to_string(), elapsed(started)),
        }
    }

    fn in_transaction(&self) -> Option<bool> {
        Some(!self.conn.is_autocommit())
    }

    fn snapshot(&mut self) -> Result<(), SandboxError> {
        let data = self
            .conn
            .serialize(MAIN_DB)
            .map_err(|e| SandboxError::Engine(e.to_string()))?;
        self.snapshot = Some(data.to_vec());
        Ok(())
    }

    fn restore(&mut self) -> Result<(), SandboxError> {
        let image = self
            .snapshot
            .as_deref()
            .ok_or_else(|| SandboxError::Reset("no snapshot taken".into()))?;
        self.conn = connection_from_image(image).map_err(|e| SandboxError::Reset(e.to_string()))?;
        Ok(())
    }

    fn schema_ddl(&mut self) -> Result<String, SandboxError> {
        let mut stmt = self
            .conn
            .prepare(
                "SELECT sql FROM sqlite_master \
                 WHERE sql IS NOT NULL AND name NOT LIKE 'sqlite_%' \
                 ORDER BY CASE type WHEN 'table' THEN 0 WHEN 'view' THEN 1 ELSE 2 END, rowid",
            )
            .map_err(|e| SandboxError::Engine(e.to_string()))?;
        let ddl = stmt
            .query_map([], |r| r.get::<_, String>(0))
            .and_then(|rows| rows.collect::<rusqlite::Result<Vec<_>>>())
            .map_err(|e| SandboxError::Engine(e.to_string()))?;
        Ok(ddl
            .into_iter()
            .map(|s| format!("{s};"))
            .collect::<Vec<_>>()
            .join("\n\n"))
    }

    fn table_ddl(&mut self, table: &str) -> Result<Option<String>, SandboxError> {
        let mut stmt = self
            .conn
            .prepare(
                "SELECT sql FROM sqlite_master \
                 WHERE type IN ('table', 'view') AND name = ?1 COLLATE NOCASE",
            )
            .map_err(|e| SandboxError::Engine(e.to_string()))?;
        let mut rows = stmt
            .query([table])
            .map_err(|e| SandboxError::Engine(e.to_string()))?;
        match rows.next().map_err(|e| SandboxError::Engine(e.to_string()))? {
            Some(r) => Ok(Some(
                r.get::<_, String>(0)
                    .map_err(|e| SandboxError::Engine(e.to_string()))?
                    + ";",
            )),
            None => Ok(None),
        }
    }
}
