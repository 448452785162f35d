//! Test-case-scored evaluation of predicted SQL fixes.

mod soft_match;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_task, Category, MetricError, ProbeExpectation, SRReport, TaskInstance, TestCase,
    TestKind,
};
use crate::par::Parallelism;
use crate::sandbox::{ExecLimits, ExecObservation, ExecStatus, Sandbox, SandboxError, Session};
use crate::sqltext;
use crate::value::Row;

pub use soft_match::{cells_equal, soft_result_match, MatchOptions, MatchResult, RaggedInput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("predicted SQL list is empty")]
    EmptyPrediction,
    #[error("duplicate task_id '{0}'")]
    DuplicateTaskId(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub kind: TestKind,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub category: Category,
    pub per_case: Vec<CaseOutcome>,
    pub passed: bool,
}

impl TaskOutcome {
    fn from_cases(task: &TaskInstance, per_case: Vec<CaseOutcome>) -> Self {
        let passed = per_case.iter().all(|c| c.passed);
        TaskOutcome {
            task_id: task.task_id.clone(),
            category: task.category,
            per_case,
            passed,
        }
    }

    /// Every case failed for the same reason (setup failure, missing
    /// prediction).
    fn all_failed(task: &TaskInstance, detail: &str) -> Self {
        let per_case = task
            .eval_script
            .test_cases
            .iter()
            .map(|c| CaseOutcome {
                kind: c.kind(),
                passed: false,
                detail: detail.to_string(),
            })
            .collect::<Vec<_>>();
        let mut out = Self::from_cases(task, per_case);
        out.passed = false;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedTeamReport {
    pub task_id: String,
    pub solution_passes: bool,
    pub issue_fails: bool,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub report: SRReport,
    pub outcomes: Vec<TaskOutcome>,
}

/// Runs evaluation scripts inside sandbox sessions.
#[derive(Clone)]
pub struct Evaluator {
    sandbox: Sandbox,
    match_options: MatchOptions,
    limits: ExecLimits,
    parallelism: Parallelism,
}

impl Evaluator {
    /// Row cap used while evaluating; results past it fail the case rather
    /// than being silently compared on a prefix.
    pub const EVAL_ROW_CAP: usize = 1_000_000;

    pub fn new(sandbox: Sandbox) -> Self {
        let limits = ExecLimits {
            row_cap: Self::EVAL_ROW_CAP,
            ..sandbox.limits()
        };
        Evaluator {
            sandbox,
            match_options: MatchOptions::default(),
            limits,
            parallelism: Parallelism::auto(),
        }
    }

    pub fn with_match_options(mut self, opts: MatchOptions) -> Self {
        self.match_options = opts;
        self
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    /// Runs the predicted statements in order and returns the final
    /// observation, or the first failing one.
    fn run_statements(
        &self,
        session: &mut Session,
        sql: &[String],
    ) -> Result<Option<ExecObservation>, SandboxError> {
        let mut last = None;
        for s in sql {
            let o = session.execute_with(s, &self.limits)?;
            let failed = o.is_failure();
            last = Some(o);
            if failed {
                break;
            }
        }
        Ok(last)
    }

    fn result_rows(
        &self,
        session: &mut Session,
        sql: &[String],
        who: &str,
    ) -> Result<Result<Option<Vec<Row>>, String>, SandboxError> {
        let Some(obs) = self.run_statements(session, sql)? else {
            return Ok(Ok(None));
        };
        Ok(match obs.status {
            ExecStatus::Rows if obs.truncated => Err(format!(
                "{who} result exceeds {} rows",
                Self::EVAL_ROW_CAP
            )),
            ExecStatus::Rows => Ok(Some(obs.rows)),
            ExecStatus::Affected => Ok(None),
            ExecStatus::Error | ExecStatus::Timeout => Err(format!(
                "{who} SQL failed: {}",
                obs.error_text.unwrap_or_default()
            )),
        })
    }

    /// Runs one test case. The session must be in its post-preprocess state.
    pub fn run_test_case(
        &self,
        session: &mut Session,
        case: &TestCase,
        predicted: &[String],
        requires_order: bool,
    ) -> CaseOutcome {
        let kind = case.kind();
        let outcome = |passed: bool, detail: String| CaseOutcome {
            kind,
            passed,
            detail,
        };
        let result: Result<CaseOutcome, SandboxError> = (|| {
            Ok(match case {
                TestCase::MustContain { patterns } => {
                    let text = sqltext::normalize_for_match(&predicted.join("\n;\n"));
                    let missing: Vec<&String> = patterns
                        .iter()
                        .filter(|p| !text.contains(&sqltext::normalize_for_match(p)))
                        .collect();
                    if missing.is_empty() {
                        outcome(true, "all required patterns present".into())
                    } else {
                        outcome(false, format!("missing required pattern(s): {missing:?}"))
                    }
                }
                TestCase::MustNotContain { patterns } => {
                    let text = sqltext::normalize_for_match(&predicted.join("\n;\n"));
                    let found: Vec<&String> = patterns
                        .iter()
                        .filter(|p| text.contains(&sqltext::normalize_for_match(p)))
                        .collect();
                    if found.is_empty() {
                        outcome(true, "no forbidden pattern present".into())
                    } else {
                        outcome(false, format!("forbidden pattern(s) present: {found:?}"))
                    }
                }
                TestCase::ExecOk => match self.run_statements(session, predicted)? {
                    Some(o) if o.is_failure() => outcome(
                        false,
                        format!("predicted SQL failed: {}", o.error_text.unwrap_or_default()),
                    ),
                    _ => outcome(true, "all statements executed".into()),
                },
                TestCase::ResultMatch { reference_sql } => {
                    let pred = match self.result_rows(session, predicted, "predicted")? {
                        Ok(r) => r,
                        Err(e) => return Ok(outcome(false, e)),
                    };
                    session.reset()?;
                    let reference = match self.result_rows(session, reference_sql, "reference")? {
                        Ok(r) => r,
                        Err(e) => return Ok(outcome(false, e)),
                    };
                    match (pred, reference) {
                        (None, None) => outcome(true, "neither side returned rows".into()),
                        (None, Some(_)) => {
                            outcome(false, "predicted SQL returned no result set".into())
                        }
                        (Some(_), None) => {
                            outcome(false, "reference SQL returned no result set".into())
                        }
                        (Some(p), Some(r)) => {
                            let opts = self.match_options.ordered(requires_order);
                            match soft_result_match(&p, &r, &opts) {
                                Ok(m) if m.matched => outcome(true, "result sets match".into()),
                                Ok(m) => outcome(false, m.mismatch.unwrap_or_default()),
                                Err(e) => outcome(false, e.to_string()),
                            }
                        }
                    }
                }
                TestCase::StateProbe {
                    probe_sql,
                    expected,
                } => {
                    if let Some(o) = self.run_statements(session, predicted)? {
                        if o.is_failure() {
                            return Ok(outcome(
                                false,
                                format!(
                                    "predicted SQL failed: {}",
                                    o.error_text.unwrap_or_default()
                                ),
                            ));
                        }
                    }
                    let probe = session.execute_with(probe_sql, &self.limits)?;
                    if probe.is_failure() {
                        return Ok(outcome(
                            false,
                            format!("probe failed: {}", probe.error_text.unwrap_or_default()),
                        ));
                    }
                    self.compare_probe(&probe.rows, expected, requires_order, outcome)
                }
            })
        })();
        result.unwrap_or_else(|e| {
            session.mark_poisoned();
            outcome(false, format!("environment: {e}"))
        })
    }

    fn compare_probe(
        &self,
        rows: &[Row],
        expected: &ProbeExpectation,
        requires_order: bool,
        outcome: impl Fn(bool, String) -> CaseOutcome,
    ) -> CaseOutcome {
        match expected {
            ProbeExpectation::Rows(want) => {
                let opts = self.match_options.ordered(requires_order);
                match soft_result_match(rows, want, &opts) {
                    Ok(m) if m.matched => outcome(true, "probe matches expected rows".into()),
                    Ok(m) => outcome(
                        false,
                        format!("probe mismatch: {}", m.mismatch.unwrap_or_default()),
                    ),
                    Err(e) => outcome(false, e.to_string()),
                }
            }
            ProbeExpectation::Scalar(want) => match rows {
                [row] if row.len() == 1 => {
                    if cells_equal(&row[0], want, &self.match_options) {
                        outcome(true, "probe matches expected scalar".into())
                    } else {
                        outcome(false, format!("probe returned {}, expected {want}", row[0]))
                    }
                }
                _ => outcome(
                    false,
                    format!("probe returned {} row(s), expected one scalar", rows.len()),
                ),
            },
        }
    }

    /// Opens a session, runs every test case in order and closes it.
    /// Any case that executes SQL starts from the post-preprocess state.
    pub fn evaluate_task(
        &self,
        task: &TaskInstance,
        predicted: &[String],
    ) -> Result<TaskOutcome, EvalError> {
        if predicted.is_empty() || predicted.iter().all(|s| s.trim().is_empty()) {
            return Err(EvalError::EmptyPrediction);
        }
        let mut session = match self.sandbox.open(task) {
            Ok(s) => s,
            Err(e) => return Ok(TaskOutcome::all_failed(task, &format!("setup: {e}"))),
        };
        let mut per_case = Vec::with_capacity(task.eval_script.test_cases.len());
        for case in &task.eval_script.test_cases {
            if case.executes_sql() && (session.statement_count > 0 || session.is_poisoned()) {
                if let Err(e) = session.reset() {
                    per_case.push(CaseOutcome {
                        kind: case.kind(),
                        passed: false,
                        detail: format!("environment: {e}"),
                    });
                    continue;
                }
            }
            per_case.push(self.run_test_case(
                &mut session,
                case,
                predicted,
                task.eval_script.requires_order,
            ));
        }
        session.close();
        Ok(TaskOutcome::from_cases(task, per_case))
    }

    /// A task is red-team valid when its script passes the solution and
    /// rejects the issue SQL, each evaluated on a fresh session.
    pub fn red_team_check(&self, task: &TaskInstance) -> RedTeamReport {
        let invalid = |reason: String| RedTeamReport {
            task_id: task.task_id.clone(),
            solution_passes: false,
            issue_fails: false,
            valid: false,
            reason: Some(reason),
        };
        let violations = validate_task(task);
        if !violations.is_empty() {
            return invalid(format!("invalid task: {}", violations.join("; ")));
        }
        let setup_failed = |o: &TaskOutcome| {
            o.per_case
                .iter()
                .find(|c| c.detail.starts_with("setup:"))
                .map(|c| c.detail.clone())
        };
        let sol = match self.evaluate_task(task, &task.solution_sql) {
            Ok(o) => o,
            Err(e) => return invalid(e.to_string()),
        };
        if let Some(d) = setup_failed(&sol) {
            return invalid(d);
        }
        let issue = match self.evaluate_task(task, &task.issue_sql) {
            Ok(o) => o,
            Err(e) => return invalid(e.to_string()),
        };
        if let Some(d) = setup_failed(&issue) {
            return invalid(d);
        }
        let solution_passes = sol.passed;
        let issue_fails = !issue.passed;
        let reason = if !solution_passes {
            Some("solution rejected".to_string())
        } else if !issue_fails {
            Some("issue not caught".to_string())
        } else {
            None
        };
        RedTeamReport {
            task_id: task.task_id.clone(),
            solution_passes,
            issue_fails,
            valid: solution_passes && issue_fails,
            reason,
        }
    }

    pub fn red_team_dataset(&self, tasks: &[TaskInstance]) -> Vec<RedTeamReport> {
        self.parallelism.map(tasks, |t| self.red_team_check(t))
    }

    /// Scores predictions for every task. Tasks without a prediction count
    /// as failed.
    pub fn evaluate_dataset(
        &self,
        tasks: &[TaskInstance],
        predictions: &HashMap<String, Vec<String>>,
    ) -> Result<DatasetEvaluation, EvalError> {
        let mut seen = HashSet::new();
        for t in tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(EvalError::DuplicateTaskId(t.task_id.clone()));
            }
        }
        let outcomes = self.parallelism.map(tasks, |task| {
            match predictions.get(&task.task_id) {
                None => TaskOutcome::all_failed(task, "missing prediction"),
                Some(p) => self
                    .evaluate_task(task, p)
                    .unwrap_or_else(|e| TaskOutcome::all_failed(task, &e.to_string())),
            }
        });
        let report = SRReport::from_outcomes(outcomes.iter().map(|o| (o.category, o.passed)))?;
        Ok(DatasetEvaluation { report, outcomes })
    }
}

/// Plain-text summary table of an SR report.
pub fn summary_table(report: &SRReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>7} {:>7} {:>9}\n", "category", "passed", "total", "SR"));
    for (cat, tally) in &report.per_category {
        let pct = crate::model::SuccessRate::new(tally.n_passed, tally.n_total)
            .map(|r| r.percent_display())
            .unwrap_or_default();
        out.push_str(&format!(
            "{:<16} {:>7} {:>7} {:>9}\n",
            cat.to_string(),
            tally.n_passed,
            tally.n_total,
            pct
        ));
    }
    out.push_str(&format!(
        "{:<16} {:>7} {:>7} {:>9}\n",
        "overall", report.n_passed, report.n_total, report.sr_percent
    ));
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{Dialect, EvalScript};
    use crate::sandbox::sqlite::SqliteExecutor;
    use crate::sandbox::ExecutorRegistry;
    use crate::value::Value;

    const DB: &str = "CREATE TABLE orders(id INTEGER PRIMARY KEY, customer TEXT, qty INTEGER, status TEXT);
        INSERT INTO orders VALUES (1,'ann',2,'shipped'),(2,'ann',3,'cancelled'),(3,'bob',5,'shipped'),(4,'cy',1,'cancelled');";

    fn evaluator() -> Evaluator {
        let exec = SqliteExecutor::in_memory_only();
        exec.register_script("shop", DB).unwrap();
        let mut reg = ExecutorRegistry::new();
        reg.register(Arc::new(exec));
        Evaluator::new(Sandbox::new(reg)).with_parallelism(Parallelism::sequential())
    }

    fn task(id: &str, cases: Vec<TestCase>, issue: &str, solution: &str) -> TaskInstance {
        TaskInstance {
            task_id: id.into(),
            dialect: Dialect::EmbeddedRef,
            db_ref: "shop".into(),
            category: Category::QueryLike,
            user_query: "q".into(),
            issue_sql: vec![issue.into()],
            solution_sql: vec![solution.into()],
            preprocess_sql: vec![],
            cleanup_sql: vec![],
            eval_script: EvalScript {
                test_cases: cases,
                requires_order: false,
            },
            issue_reason: None,
            knowledge_tags: vec![],
        }
    }

    fn dropped_where() -> TaskInstance {
        let sol = "SELECT customer, SUM(qty) FROM orders WHERE status = 'shipped' GROUP BY customer";
        task(
            "dropped-where",
            vec![TestCase::ResultMatch {
                reference_sql: vec![sol.into()],
            }],
            "SELECT customer, SUM(qty) FROM orders GROUP BY customer",
            sol,
        )
    }

    #[test]
    fn must_contain_matches_normalized_text() {
        let ev = evaluator();
        let t = task(
            "p",
            vec![TestCase::MustContain {
                patterns: vec!["OVER".into()],
            }],
            "SELECT 1",
            "SELECT 1",
        );
        let mut s = ev.sandbox().open(&t).unwrap();
        let case = &t.eval_script.test_cases[0];
        let pred = vec!["SELECT id, rank() over(ORDER BY qty) FROM orders".to_string()];
        assert!(ev.run_test_case(&mut s, case, &pred, false).passed);
        let commented = vec!["SELECT id /* OVER( */ FROM orders".to_string()];
        assert!(!ev.run_test_case(&mut s, case, &commented, false).passed);
        // text-only cases never execute SQL
        assert_eq!(s.statement_count, 0);
    }

    #[test]
    fn state_probe_after_corrective_delete() {
        // hand-run oracle: after deleting cancelled rows the probe is empty
        let ev = evaluator();
        let t = task(
            "m",
            vec![TestCase::StateProbe {
                probe_sql: "SELECT id FROM orders WHERE status = 'cancelled'".into(),
                expected: ProbeExpectation::Rows(vec![]),
            }],
            "DELETE FROM orders WHERE status = 'Cancelled'",
            "DELETE FROM orders WHERE status = 'cancelled'",
        );
        let mut s = ev.sandbox().open(&t).unwrap();
        let pre = s
            .execute("SELECT id FROM orders WHERE status = 'cancelled'")
            .unwrap();
        assert_eq!(pre.rows.len(), 2);
        s.reset().unwrap();
        let out = ev.run_test_case(&mut s, &t.eval_script.test_cases[0], &t.solution_sql, false);
        assert!(out.passed, "{out:?}");
        s.reset().unwrap();
        let out = ev.run_test_case(&mut s, &t.eval_script.test_cases[0], &t.issue_sql, false);
        assert!(!out.passed);
    }

    #[test]
    fn result_match_reports_engine_error() {
        let ev = evaluator();
        let t = dropped_where();
        let out = ev
            .evaluate_task(&t, &["SELECT nope FROM orders".to_string()])
            .unwrap();
        assert!(!out.passed);
        assert!(out.per_case[0].detail.contains("no such column"), "{out:?}");
    }

    #[test]
    fn solution_passes_issue_fails() {
        let ev = evaluator();
        let t = dropped_where();
        assert!(ev.evaluate_task(&t, &t.solution_sql).unwrap().passed);
        assert!(!ev.evaluate_task(&t, &t.issue_sql).unwrap().passed);
        assert_eq!(ev.evaluate_task(&t, &[]), Err(EvalError::EmptyPrediction));
        let r = ev.red_team_check(&t);
        assert!(r.valid && r.solution_passes && r.issue_fails, "{r:?}");
    }

    #[test]
    fn red_team_reasons() {
        let ev = evaluator();
        let mut t = dropped_where();
        t.solution_sql = t.issue_sql.clone();
        t.issue_sql = vec!["SELECT 1".into()];
        let r = ev.red_team_check(&t);
        assert!(!r.valid);
        assert_eq!(r.reason.as_deref(), Some("solution rejected"));

        let mut t = dropped_where();
        t.issue_sql = t.solution_sql.clone();
        let r = ev.red_team_check(&t);
        assert_eq!(r.reason.as_deref(), Some("issue not caught"));

        let mut t = dropped_where();
        t.db_ref = "missing".into();
        let r = ev.red_team_check(&t);
        assert!(!r.valid);
        assert!(r.reason.unwrap().starts_with("setup:"));
    }

    #[test]
    fn setup_failure_fails_every_case() {
        let ev = evaluator();
        let mut t = dropped_where();
        t.preprocess_sql = vec!["INSERT INTO nothing VALUES (1)".into()];
        let out = ev.evaluate_task(&t, &t.solution_sql).unwrap();
        assert!(!out.passed);
        assert!(out.per_case.iter().all(|c| c.detail.starts_with("setup:")));
    }

    #[test]
    fn cases_do_not_leak_state() {
        let ev = evaluator();
        let sol = "DELETE FROM orders WHERE status = 'cancelled'";
        let t = task(
            "leak",
            vec![
                TestCase::ExecOk,
                TestCase::StateProbe {
                    probe_sql: "SELECT COUNT(*) FROM orders".into(),
                    expected: ProbeExpectation::Scalar(Value::Integer(2)),
                },
                TestCase::StateProbe {
                    probe_sql: "SELECT COUNT(*) FROM orders WHERE status = 'shipped'".into(),
                    expected: ProbeExpectation::Scalar(Value::Integer(2)),
                },
            ],
            "DELETE FROM orders",
            sol,
        );
        let out = ev.evaluate_task(&t, &t.solution_sql).unwrap();
        assert!(out.passed, "{out:?}");
        let again = ev.evaluate_task(&t, &t.solution_sql).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn dataset_rates_and_missing_predictions() {
        let ev = evaluator();
        let tasks: Vec<TaskInstance> = (0..4)
            .map(|i| {
                let mut t = dropped_where();
                t.task_id = format!("t{i}");
                t
            })
            .collect();
        let mut preds = HashMap::new();
        preds.insert("t0".to_string(), tasks[0].solution_sql.clone());
        preds.insert("t1".to_string(), tasks[1].solution_sql.clone());
        preds.insert("t2".to_string(), tasks[2].issue_sql.clone());
        let res = ev.evaluate_dataset(&tasks, &preds).unwrap();
        assert_eq!(res.report.sr, 0.5);
        assert_eq!(res.outcomes[3].per_case[0].detail, "missing prediction");

        let dup = vec![tasks[0].clone(), tasks[0].clone()];
        assert_eq!(
            ev.evaluate_dataset(&dup, &preds).unwrap_err(),
            EvalError::DuplicateTaskId("t0".into())
        );
        let table = summary_table(&res.report);
        assert!(table.contains("overall"));
        assert!(table.contains("50.00%"));
    }
}
