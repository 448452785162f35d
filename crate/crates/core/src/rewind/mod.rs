//! Synthetic task generation from verified solution SQL.
//!
//! Forum posts are mined for SQL, each candidate is adapted to a training
//! database and kept only if it executes with a non-null result. A backend
//! then injects an issue and writes tests for it; a proposal is accepted
//! only when the tests mechanically reject the issue SQL and accept the
//! solution. Finally a user question is drafted and checked for
//! consistency. Backend verdicts are advisory; the mechanical check is the
//! gate of record, and every emitted instance is re-checked at the end.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{fill, PromptSet};
use crate::evaluator::Evaluator;
use crate::gateway::{
    complete_parsed, extract_sql_fence, fenced_block, tag_content, Backend, CompletionRequest,
    GatewayError, Message, ParseError,
};
use crate::model::{
    validate_task, Category, Dialect, EvalScript, TaskInstance, TestCase, TestKind,
};
use crate::par::Parallelism;
use crate::sandbox::{ExecStatus, Sandbox};
use crate::sqltext;

pub const DEFAULT_MAX_ITER: u32 = 3;

#[derive(Debug, Error)]
pub enum RewindError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("target_size must be at least 1")]
    ZeroTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source_id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
}

/// Reads line-delimited corpus records. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, RewindError> {
    let text = std::fs::read_to_string(path).map_err(|e| RewindError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RewindError::Record {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Identifiers barred from generation. A bare line bars the identifier as
/// both a source and a database; `source:` and `db:` prefixes narrow it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionList {
    pub sources: HashSet<String>,
    pub databases: HashSet<String>,
}

impl ExclusionList {
    pub fn parse(text: &str) -> Self {
        let mut list = ExclusionList::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(id) = line.strip_prefix("source:") {
                list.sources.insert(id.trim().to_string());
            } else if let Some(id) = line.strip_prefix("db:") {
                list.databases.insert(id.trim().to_string());
            } else {
                list.sources.insert(line.to_string());
                list.databases.insert(line.to_string());
            }
        }
        list
    }

    pub fn load(path: &Path) -> Result<Self, RewindError> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|e| RewindError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn excludes_source(&self, id: &str) -> bool {
        self.sources.contains(id)
    }

    pub fn excludes_database(&self, id: &str) -> bool {
        self.databases.contains(id)
    }
}

const SQL_START: &str = r"(?i)^\s*(select|with|insert|update|delete|create|alter|drop|replace|merge)\b";

fn sql_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(SQL_START).expect("valid regex"))
}

/// SQL statements found in fenced (```sql or bare ```) and indented code
/// blocks, in order of appearance, without duplicates.
pub fn extract_candidates(body: &str) -> Vec<String> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let fence = FENCE.get_or_init(|| {
        Regex::new(r"(?s)```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```").expect("valid regex")
    });
    let mut blocks: Vec<(usize, String)> = Vec::new();
    let mut covered: Vec<(usize, usize)> = Vec::new();
    for c in fence.captures_iter(body) {
        let whole = c.get(0).expect("match");
        covered.push((whole.start(), whole.end()));
        let lang = c[1].to_ascii_lowercase();
        if lang.is_empty() || lang == "sql" || lang.ends_with("sql") {
            blocks.push((whole.start(), c[2].to_string()));
        }
    }
    // indented blocks outside fences
    let mut offset = 0;
    let mut current: Option<(usize, String)> = None;
    for line in body.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let inside_fence = covered.iter().any(|&(a, b)| start >= a && start < b);
        let indented = !inside_fence
            && (line.starts_with("    ") || line.starts_with('\t'))
            && !line.trim().is_empty();
        if indented {
            let text = line.trim_start_matches([' ', '\t']);
            match current.as_mut() {
                Some((_, buf)) => buf.push_str(text),
                None => current = Some((start, text.to_string())),
            }
        } else if let Some(b) = current.take() {
            blocks.push(b);
        }
    }
    if let Some(b) = current.take() {
        blocks.push(b);
    }
    blocks.sort_by_key(|(pos, _)| *pos);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (_, block) in blocks {
        for stmt in sqltext::split_statements(&block) {
            if sql_start().is_match(&sqltext::strip_comments(&stmt))
                && seen.insert(sqltext::normalize_for_match(&stmt))
            {
                out.push(stmt);
            }
        }
    }
    out
}

/// Category implied by the kinds of test a script uses.
pub fn category_for(script: &EvalScript) -> Category {
    let kinds: HashSet<TestKind> = script.test_cases.iter().map(TestCase::kind).collect();
    if kinds.contains(&TestKind::MustContain) || kinds.contains(&TestKind::MustNotContain) {
        Category::Personalization
    } else if kinds.contains(&TestKind::StateProbe) {
        Category::Management
    } else {
        Category::QueryLike
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Adapt,
    ExecOk,
    Issue,
    UserQuery,
    FinalGate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub stage: Stage,
    pub reason: String,
    pub iterations: u32,
}

impl Rejection {
    fn new(stage: Stage, reason: impl Into<String>, iterations: u32) -> Self {
        Rejection {
            stage,
            reason: reason.into(),
            iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub db_id: String,
    pub candidate_index: usize,
    pub issue_iterations: u32,
    pub query_rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GymInstance {
    pub task: TaskInstance,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueTriple {
    pub issue_sql: Vec<String>,
    pub issue_reason: String,
    pub eval_script: EvalScript,
    pub iterations: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
struct IssueProposal {
    issue_sql: OneOrMany,
    issue_reason: String,
    eval_script: EvalScript,
}

fn parse_proposal(text: &str) -> Result<IssueProposal, ParseError> {
    let body = fenced_block(text, "json").unwrap_or_else(|| text.trim().to_string());
    serde_json::from_str(&body).map_err(|e| ParseError::Invalid {
        message: format!("proposal is not valid JSON: {e}"),
        raw: text.to_string(),
    })
}

fn parse_verdict(text: &str) -> Result<bool, ParseError> {
    match tag_content(text, "verdict").map(|v| v.to_ascii_lowercase()) {
        Some(v) if v == "yes" => Ok(true),
        Some(v) if v == "no" => Ok(false),
        _ => Err(ParseError::Invalid {
            message: "expected <verdict>yes</verdict> or <verdict>no</verdict>".into(),
            raw: text.to_string(),
        }),
    }
}

fn parse_query(text: &str) -> Result<String, ParseError> {
    tag_content(text, "query")
        .filter(|q| !q.is_empty())
        .ok_or_else(|| ParseError::Invalid {
            message: "expected <query>...</query>".into(),
            raw: text.to_string(),
        })
}

fn parse_single_statement(text: &str) -> Result<String, ParseError> {
    let body = extract_sql_fence(text)?;
    let mut stmts = sqltext::split_statements(&body);
    if stmts.len() != 1 {
        return Err(ParseError::Invalid {
            message: format!("expected one statement, got {}", stmts.len()),
            raw: text.to_string(),
        });
    }
    Ok(stmts.remove(0))
}

#[derive(Debug, Clone)]
pub struct RewindConfig {
    pub dialect: Dialect,
    pub max_iter: u32,
    pub target_size: usize,
    pub prompts: Arc<PromptSet>,
    pub parallelism: Parallelism,
    pub temperature: f64,
}

impl Default for RewindConfig {
    fn default() -> Self {
        RewindConfig {
            dialect: Dialect::EmbeddedRef,
            max_iter: DEFAULT_MAX_ITER,
            target_size: 100,
            prompts: Arc::new(PromptSet::builtin()),
            parallelism: Parallelism::auto(),
            temperature: crate::gateway::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub source_id: String,
    pub candidate_index: usize,
    pub db_id: String,
    pub reason: String,
    pub iterations: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewindReport {
    pub posts_seen: usize,
    pub posts_excluded: usize,
    pub databases_excluded: Vec<String>,
    pub candidates: usize,
    pub accepted: usize,
    pub stopped_early: bool,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub rejects: BTreeMap<Stage, Vec<RejectRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewindRun {
    pub instances: Vec<GymInstance>,
    pub report: RewindReport,
}

/// Request context for one (post, candidate, database) unit. Replay
/// ordinals key on it, so it must not depend on scheduling.
#[derive(Debug, Clone)]
struct Unit<'a> {
    key: String,
    db: &'a str,
    schema: String,
}

/// Token tally for one unit.
#[derive(Debug, Default, Clone, Copy)]
struct Tokens {
    tin: u64,
    tout: u64,
}

pub struct Rewind<'a> {
    evaluator: Evaluator,
    backend: &'a dyn Backend,
    config: RewindConfig,
}

impl<'a> Rewind<'a> {
    pub fn new(sandbox: Sandbox, backend: &'a dyn Backend, config: RewindConfig) -> Self {
        let evaluator = Evaluator::new(sandbox).with_parallelism(Parallelism::sequential());
        Rewind {
            evaluator,
            backend,
            config,
        }
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    fn scratch_task(&self, db: &str) -> TaskInstance {
        TaskInstance {
            task_id: format!("scratch-{db}"),
            dialect: self.config.dialect,
            db_ref: db.to_string(),
            category: Category::QueryLike,
            user_query: String::new(),
            issue_sql: vec![],
            solution_sql: vec![],
            preprocess_sql: vec![],
            cleanup_sql: vec![],
            eval_script: EvalScript {
                test_cases: vec![],
                requires_order: false,
            },
            issue_reason: None,
            knowledge_tags: vec![],
        }
    }

    fn schema_of(&self, db: &str) -> Result<String, String> {
        let mut s = self
            .evaluator
            .sandbox()
            .open(&self.scratch_task(db))
            .map_err(|e| e.to_string())?;
        s.schema_ddl().map_err(|e| e.to_string())
    }

    fn ask<T>(
        &self,
        unit: &Unit<'_>,
        phase: &str,
        round: u32,
        prompt: String,
        format: &str,
        parse: impl Fn(&str) -> Result<T, ParseError>,
        tokens: &mut Tokens,
    ) -> Result<Result<T, ParseError>, GatewayError> {
        let req = CompletionRequest::new(self.backend.id(), vec![Message::user(prompt)])
            .with_temperature(self.config.temperature)
            .with_context("task_id", &unit.key)
            .with_context("attempt", round)
            .with_context("phase", phase);
        let corrective = fill(&self.config.prompts.corrective, &[("format", format)]);
        let p = complete_parsed(self.backend, &req, &corrective, parse)?;
        tokens.tin += p.tokens_in;
        tokens.tout += p.tokens_out;
        Ok(p.value)
    }

    /// Adapts a candidate to `db` and keeps it if it executes and returns a
    /// non-null result (at least one row, at least one non-null cell in the
    /// first row).
    fn adapt_and_check(
        &self,
        unit: &Unit<'_>,
        title: &str,
        candidate: &str,
        tokens: &mut Tokens,
    ) -> Result<String, Rejection> {
        let prompt = fill(
            &self.config.prompts.adapt,
            &[
                ("db_id", unit.db),
                ("dialect", self.config.dialect.display_name()),
                ("SCHEMA", &unit.schema),
                ("TITLE", title),
                ("CANDIDATE_SQL", candidate),
            ],
        );
        let adapted = match self.ask(unit, "adapt", 1, prompt, "one statement in a ```sql block.", parse_single_statement, tokens) {
            Ok(Ok(sql)) => sql,
            Ok(Err(e)) => return Err(Rejection::new(Stage::Adapt, format!("unparseable: {e}"), 1)),
            Err(e) => return Err(Rejection::new(Stage::Adapt, format!("backend: {e}"), 1)),
        };
        self.exec_ok(unit.db, &adapted)?;
        Ok(adapted)
    }

    fn exec_ok(&self, db: &str, sql: &str) -> Result<(), Rejection> {
        let mut session = self
            .evaluator
            .sandbox()
            .open(&self.scratch_task(db))
            .map_err(|e| Rejection::new(Stage::ExecOk, format!("setup: {e}"), 1))?;
        let obs = session
            .execute(sql)
            .map_err(|e| Rejection::new(Stage::ExecOk, format!("setup: {e}"), 1))?;
        match obs.status {
            ExecStatus::Error | ExecStatus::Timeout => Err(Rejection::new(
                Stage::ExecOk,
                format!("exec error: {}", obs.error_text.unwrap_or_default()),
                1,
            )),
            ExecStatus::Affected => Err(Rejection::new(Stage::ExecOk, "null result", 1)),
            ExecStatus::Rows => match obs.rows.first() {
                Some(row) if row.iter().any(|v| !v.is_null()) => Ok(()),
                _ => Err(Rejection::new(Stage::ExecOk, "null result", 1)),
            },
        }
    }

    fn draft_task(&self, db: &str, key: &str, solution: &[String], issue: &IssueTriple, query: &str) -> TaskInstance {
        TaskInstance {
            task_id: key.to_string(),
            dialect: self.config.dialect,
            db_ref: db.to_string(),
            category: category_for(&issue.eval_script),
            user_query: query.to_string(),
            issue_sql: issue.issue_sql.clone(),
            solution_sql: solution.to_vec(),
            preprocess_sql: vec![],
            cleanup_sql: vec![],
            eval_script: issue.eval_script.clone(),
            issue_reason: Some(issue.issue_reason.clone()),
            knowledge_tags: vec![],
        }
    }

    /// Up to `max_iter` proposals; the first that passes the mechanical
    /// red-team check and the backend coherence verdict is accepted.
    pub fn synthesize_issue(&self, db: &str, solution: &[String]) -> Result<IssueTriple, Rejection> {
        let schema = self
            .schema_of(db)
            .map_err(|e| Rejection::new(Stage::Issue, format!("setup: {e}"), 0))?;
        let unit = Unit {
            key: format!("issue:{db}"),
            db,
            schema,
        };
        self.synthesize_issue_in(&unit, solution, &mut Tokens::default())
    }

    fn synthesize_issue_in(
        &self,
        unit: &Unit<'_>,
        solution: &[String],
        tokens: &mut Tokens,
    ) -> Result<IssueTriple, Rejection> {
        let solution_text = solution.join(";\n");
        let mut feedback = String::new();
        let mut last = String::from("no proposal");
        for round in 1..=self.config.max_iter {
            let prompt = fill(
                &self.config.prompts.issue,
                &[
                    ("db_id", unit.db),
                    ("dialect", self.config.dialect.display_name()),
                    ("SCHEMA", &unit.schema),
                    ("SOLUTION_SQL", &solution_text),
                    ("FEEDBACK", &feedback),
                ],
            );
            let proposal = match self.ask(unit, "issue", round, prompt, "one JSON object in a ```json block.", parse_proposal, tokens) {
                Ok(Ok(p)) => p,
                Ok(Err(e)) => {
                    last = format!("unparseable proposal: {e}");
                    feedback = format!("\nYour previous proposal was rejected: {last}\n");
                    continue;
                }
                Err(e) => return Err(Rejection::new(Stage::Issue, format!("backend: {e}"), round)),
            };
            let issue_sql = match proposal.issue_sql {
                OneOrMany::One(s) => sqltext::split_statements(&s),
                OneOrMany::Many(v) => v,
            };
            let triple = IssueTriple {
                issue_sql,
                issue_reason: proposal.issue_reason,
                eval_script: proposal.eval_script,
                iterations: round,
            };
            match self.check_issue(unit, solution, &triple, tokens) {
                Ok(()) => return Ok(triple),
                Err(Ok(reason)) => {
                    last = reason;
                    feedback = format!("\nYour previous proposal was rejected: {last}\n");
                }
                Err(Err(e)) => return Err(Rejection::new(Stage::Issue, format!("backend: {e}"), round)),
            }
        }
        Err(Rejection::new(Stage::Issue, last, self.config.max_iter))
    }

    /// `Err(Ok(reason))` is a rejected proposal, `Err(Err(_))` a backend
    /// failure.
    fn check_issue(
        &self,
        unit: &Unit<'_>,
        solution: &[String],
        triple: &IssueTriple,
        tokens: &mut Tokens,
    ) -> Result<(), Result<String, GatewayError>> {
        if sqltext::normalize_for_match(&triple.issue_sql.join(";"))
            == sqltext::normalize_for_match(&solution.join(";"))
        {
            return Err(Ok("issue SQL equals the solution".into()));
        }
        let draft = self.draft_task(unit.db, &unit.key, solution, triple, "(pending)");
        let violations = validate_task(&draft);
        if !violations.is_empty() {
            return Err(Ok(format!("invalid task: {}", violations.join("; "))));
        }
        let red = self.evaluator.red_team_check(&draft);
        if !red.valid {
            return Err(Ok(red.reason.unwrap_or_else(|| "red-team check failed".into())));
        }
        let script = serde_json::to_string(&triple.eval_script).unwrap_or_default();
        let issue_text = triple.issue_sql.join(";\n");
        let solution_text = solution.join(";\n");
        let prompt = fill(
            &self.config.prompts.coherence,
            &[
                ("ISSUE_SQL", &issue_text),
                ("ISSUE_REASON", &triple.issue_reason),
                ("SOLUTION_SQL", &solution_text),
                ("EVAL_SCRIPT", &script),
            ],
        );
        match self.ask(unit, "coherence", triple.iterations, prompt, "<verdict>yes</verdict> or <verdict>no</verdict>.", parse_verdict, tokens) {
            Ok(Ok(true)) => Ok(()),
            Ok(Ok(false)) => Err(Ok("incoherent triplet".into())),
            Ok(Err(_)) => Err(Ok("coherence verdict unparseable".into())),
            Err(e) => Err(Err(e)),
        }
    }

    /// Up to `max_iter` drafts; returns the first one the consistency
    /// check affirms, with the round number.
    fn generate_user_query_in(
        &self,
        unit: &Unit<'_>,
        solution: &[String],
        issue: &IssueTriple,
        tokens: &mut Tokens,
    ) -> Result<(String, u32), Rejection> {
        let issue_text = issue.issue_sql.join(";\n");
        let solution_text = solution.join(";\n");
        let script = serde_json::to_string(&issue.eval_script).unwrap_or_default();
        let mut feedback = String::new();
        let mut last = String::from("no draft");
        for round in 1..=self.config.max_iter {
            let prompt = fill(
                &self.config.prompts.user_query,
                &[
                    ("SCHEMA", &unit.schema),
                    ("ISSUE_SQL", &issue_text),
                    ("ISSUE_REASON", &issue.issue_reason),
                    ("SOLUTION_SQL", &solution_text),
                    ("FEEDBACK", &feedback),
                ],
            );
            let draft = match self.ask(unit, "user_query", round, prompt, "the question inside <query>...</query>.", parse_query, tokens) {
                Ok(Ok(q)) => q,
                Ok(Err(e)) => {
                    last = format!("unparseable draft: {e}");
                    feedback = format!("\nYour previous draft was rejected: {last}\n");
                    continue;
                }
                Err(e) => return Err(Rejection::new(Stage::UserQuery, format!("backend: {e}"), round)),
            };
            let prompt = fill(
                &self.config.prompts.consistency,
                &[
                    ("SCHEMA", &unit.schema),
                    ("USER_QUERY", &draft),
                    ("ISSUE_SQL", &issue_text),
                    ("EVAL_SCRIPT", &script),
                    ("SOLUTION_SQL", &solution_text),
                ],
            );
            match self.ask(unit, "consistency", round, prompt, "<verdict>yes</verdict> or <verdict>no</verdict>.", parse_verdict, tokens) {
                Ok(Ok(true)) => return Ok((draft, round)),
                Ok(Ok(false)) => last = "inconsistent user query".into(),
                Ok(Err(_)) => last = "consistency verdict unparseable".into(),
                Err(e) => return Err(Rejection::new(Stage::UserQuery, format!("backend: {e}"), round)),
            }
            feedback = format!("\nYour previous draft was rejected: {last}\n");
        }
        Err(Rejection::new(Stage::UserQuery, last, self.config.max_iter))
    }

    /// Drafts and checks a user question for an accepted issue triple.
    pub fn generate_user_query(
        &self,
        db: &str,
        solution: &[String],
        issue: &IssueTriple,
    ) -> Result<(String, u32), Rejection> {
        let schema = self
            .schema_of(db)
            .map_err(|e| Rejection::new(Stage::UserQuery, format!("setup: {e}"), 0))?;
        let unit = Unit {
            key: format!("query:{db}"),
            db,
            schema,
        };
        self.generate_user_query_in(&unit, solution, issue, &mut Tokens::default())
    }

    /// Mines verified solution SQL from one post for one database.
    pub fn mine_solution_sql(
        &self,
        post: &CorpusRecord,
        db: &str,
    ) -> (Vec<String>, Vec<(usize, Rejection)>) {
        let schema = match self.schema_of(db) {
            Ok(s) => s,
            Err(e) => return (vec![], vec![(0, Rejection::new(Stage::ExecOk, format!("setup: {e}"), 0))]),
        };
        let mut ok = Vec::new();
        let mut rejected = Vec::new();
        for (k, cand) in extract_candidates(&post.body).iter().enumerate() {
            let unit = Unit {
                key: unit_key(&post.source_id, k, db),
                db,
                schema: schema.clone(),
            };
            match self.adapt_and_check(&unit, &post.title, cand, &mut Tokens::default()) {
                Ok(sql) => ok.push(sql),
                Err(r) => rejected.push((k, r)),
            }
        }
        (ok, rejected)
    }

    /// One post: every extracted candidate against every allowed database,
    /// at most one accepted instance per candidate.
    fn process_post(
        &self,
        post: &CorpusRecord,
        dbs: &[(String, String)],
    ) -> (Vec<GymInstance>, Vec<(Stage, RejectRecord)>, usize, Tokens) {
        let mut accepted = Vec::new();
        let mut rejects = Vec::new();
        let mut tokens = Tokens::default();
        let candidates = extract_candidates(&post.body);
        for (k, cand) in candidates.iter().enumerate() {
            for (db, schema) in dbs {
                let unit = Unit {
                    key: unit_key(&post.source_id, k, db),
                    db,
                    schema: schema.clone(),
                };
                let reject = |r: Rejection| {
                    (
                        r.stage,
                        RejectRecord {
                            source_id: post.source_id.clone(),
                            candidate_index: k,
                            db_id: db.clone(),
                            reason: r.reason,
                            iterations: r.iterations,
                        },
                    )
                };
                let solution = match self.adapt_and_check(&unit, &post.title, cand, &mut tokens) {
                    Ok(sql) => vec![sql],
                    Err(r) => {
                        rejects.push(reject(r));
                        continue;
                    }
                };
                let issue = match self.synthesize_issue_in(&unit, &solution, &mut tokens) {
                    Ok(t) => t,
                    Err(r) => {
                        rejects.push(reject(r));
                        continue;
                    }
                };
                let (query, rounds) = match self.generate_user_query_in(&unit, &solution, &issue, &mut tokens) {
                    Ok(q) => q,
                    Err(r) => {
                        rejects.push(reject(r));
                        continue;
                    }
                };
                let task = self.draft_task(db, &instance_id(&post.source_id, k, db), &solution, &issue, &query);
                accepted.push(GymInstance {
                    task,
                    provenance: Provenance {
                        source_id: post.source_id.clone(),
                        db_id: db.clone(),
                        candidate_index: k,
                        issue_iterations: issue.iterations,
                        query_rounds: rounds,
                    },
                });
                break;
            }
        }
        (accepted, rejects, candidates.len(), tokens)
    }

    /// Builds up to `target_size` instances from the corpus.
    ///
    /// Posts are processed in chunks (one post per worker) and merged in
    /// corpus order, so the result does not depend on scheduling. Work
    /// stops after the chunk in which the target is reached.
    pub fn build_instances(
        &self,
        corpus: &[CorpusRecord],
        dbs: &[String],
        exclusion: &ExclusionList,
    ) -> Result<RewindRun, RewindError> {
        if self.config.target_size == 0 {
            return Err(RewindError::ZeroTarget);
        }
        let mut report = RewindReport::default();
        let mut allowed = Vec::new();
        for db in dbs {
            if exclusion.excludes_database(db) {
                report.databases_excluded.push(db.clone());
                continue;
            }
            match self.schema_of(db) {
                Ok(schema) => allowed.push((db.clone(), schema)),
                Err(e) => report.rejects.entry(Stage::Adapt).or_default().push(RejectRecord {
                    source_id: String::new(),
                    candidate_index: 0,
                    db_id: db.clone(),
                    reason: format!("setup: {e}"),
                    iterations: 0,
                }),
            }
        }
        let posts: Vec<&CorpusRecord> = corpus
            .iter()
            .filter(|p| {
                report.posts_seen += 1;
                let excluded = exclusion.excludes_source(&p.source_id);
                report.posts_excluded += usize::from(excluded);
                !excluded
            })
            .collect();
        let chunk = self.config.parallelism.worker_count().max(1);
        let mut instances: Vec<GymInstance> = Vec::new();
        let mut seen_ids = HashSet::new();
        for (ci, group) in posts.chunks(chunk).enumerate() {
            let results = self
                .config
                .parallelism
                .map(group, |post| self.process_post(post, &allowed));
            for (accepted, rejects, n_cand, tokens) in results {
                report.candidates += n_cand;
                report.tokens_in += tokens.tin;
                report.tokens_out += tokens.tout;
                for (stage, r) in rejects {
                    report.rejects.entry(stage).or_default().push(r);
                }
                for inst in accepted {
                    if instances.len() >= self.config.target_size {
                        break;
                    }
                    // independent final gate
                    let red = self.evaluator.red_team_check(&inst.task);
                    if !red.valid || !seen_ids.insert(inst.task.task_id.clone()) {
                        report.rejects.entry(Stage::FinalGate).or_default().push(RejectRecord {
                            source_id: inst.provenance.source_id.clone(),
                            candidate_index: inst.provenance.candidate_index,
                            db_id: inst.provenance.db_id.clone(),
                            reason: red.reason.unwrap_or_else(|| "duplicate task id".into()),
                            iterations: inst.provenance.issue_iterations,
                        });
                        continue;
                    }
                    instances.push(inst);
                }
            }
            if instances.len() >= self.config.target_size {
                report.stopped_early = (ci + 1) * chunk < posts.len();
                break;
            }
        }
        report.accepted = instances.len();
        Ok(RewindRun { instances, report })
    }
}

fn unit_key(source: &str, k: usize, db: &str) -> String {
    format!("{source}#{k}@{db}")
}

fn instance_id(source: &str, k: usize, db: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect()
    };
    format!("rw-{}-{k}-{}", clean(source), clean(db))
}

#[cfg(test)]
mod tests;
