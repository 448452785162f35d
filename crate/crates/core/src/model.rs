//! Shared data model: tasks, evaluation scripts, trajectories, plans and
//! success-rate arithmetic.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sqltext;
use crate::value::{Row, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    QueryLike,
    Management,
    Personalization,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::QueryLike,
        Category::Management,
        Category::Personalization,
    ];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::QueryLike => "QueryLike",
            Category::Management => "Management",
            Category::Personalization => "Personalization",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dialect {
    EmbeddedRef,
    PostgresLike,
    MySQLLike,
    ServerLike,
    OracleLike,
}

impl Dialect {
    /// Name used in prompts ("Interact with the database using ...").
    pub fn display_name(self) -> &'static str {
        match self {
            Dialect::EmbeddedRef => "SQLite",
            Dialect::PostgresLike => "PostgreSQL",
            Dialect::MySQLLike => "MySQL",
            Dialect::ServerLike => "SQL Server",
            Dialect::OracleLike => "Oracle",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Expected outcome of a state probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeExpectation {
    Rows(Vec<Row>),
    Scalar(Value),
}

/// One typed assertion of an evaluation script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TestCase {
    /// Predicted and reference statements must produce equivalent results.
    ResultMatch { reference_sql: Vec<String> },
    /// After the predicted statements run, `probe_sql` must return `expected`.
    StateProbe {
        probe_sql: String,
        expected: ProbeExpectation,
    },
    /// Every pattern must occur in the normalized predicted text.
    MustContain { patterns: Vec<String> },
    /// No pattern may occur in the normalized predicted text.
    MustNotContain { patterns: Vec<String> },
    /// Every predicted statement must execute without error.
    ExecOk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestKind {
    ResultMatch,
    StateProbe,
    MustContain,
    MustNotContain,
    ExecOk,
}

impl TestKind {
    pub const ALL: [TestKind; 5] = [
        TestKind::ResultMatch,
        TestKind::StateProbe,
        TestKind::MustContain,
        TestKind::MustNotContain,
        TestKind::ExecOk,
    ];
}

impl TestCase {
    pub fn kind(&self) -> TestKind {
        match self {
            TestCase::ResultMatch { .. } => TestKind::ResultMatch,
            TestCase::StateProbe { .. } => TestKind::StateProbe,
            TestCase::MustContain { .. } => TestKind::MustContain,
            TestCase::MustNotContain { .. } => TestKind::MustNotContain,
            TestCase::ExecOk => TestKind::ExecOk,
        }
    }

    /// Whether running this case executes SQL against the database.
    pub fn executes_sql(&self) -> bool {
        !matches!(
            self,
            TestCase::MustContain { .. } | TestCase::MustNotContain { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScript {
    pub test_cases: Vec<TestCase>,
    #[serde(default)]
    pub requires_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub dialect: Dialect,
    pub db_ref: String,
    pub category: Category,
    pub user_query: String,
    pub issue_sql: Vec<String>,
    pub solution_sql: Vec<String>,
    #[serde(default)]
    pub preprocess_sql: Vec<String>,
    #[serde(default)]
    pub cleanup_sql: Vec<String>,
    pub eval_script: EvalScript,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issue_reason: Option<String>,
    #[serde(default)]
    pub knowledge_tags: Vec<String>,
}

fn check_sql_list(field: &str, list: &[String], required: bool, out: &mut Vec<String>) {
    if required && list.is_empty() {
        out.push(format!("{field}: must be non-empty"));
    }
    for (i, sql) in list.iter().enumerate() {
        if sql.trim().is_empty() {
            out.push(format!("{field}[{i}]: statement must be non-blank"));
        } else if sqltext::statement_count(sql) > 1 {
            out.push(format!(
                "{field}[{i}]: contains multiple statements; list them separately"
            ));
        }
    }
}

/// Checks every structural invariant of a task. An empty result means the
/// task is well-formed.
pub fn validate_task(task: &TaskInstance) -> Vec<String> {
    let mut v = Vec::new();
    if task.task_id.trim().is_empty() {
        v.push("task_id: must be non-empty".to_string());
    }
    if task.db_ref.trim().is_empty() {
        v.push("db_ref: must be non-empty".to_string());
    }
    check_sql_list("issue_sql", &task.issue_sql, true, &mut v);
    check_sql_list("solution_sql", &task.solution_sql, true, &mut v);
    check_sql_list("preprocess_sql", &task.preprocess_sql, false, &mut v);
    check_sql_list("cleanup_sql", &task.cleanup_sql, false, &mut v);

    let script = &task.eval_script;
    if script.test_cases.is_empty() {
        v.push("eval_script: needs ≥1 test case".to_string());
    }
    for (i, case) in script.test_cases.iter().enumerate() {
        match case {
            TestCase::ResultMatch { reference_sql } => {
                check_sql_list(
                    &format!("eval_script.test_cases[{i}].reference_sql"),
                    reference_sql,
                    true,
                    &mut v,
                );
            }
            TestCase::StateProbe { probe_sql, .. } => {
                if probe_sql.trim().is_empty() {
                    v.push(format!("eval_script.test_cases[{i}].probe_sql: must be non-blank"));
                } else if sqltext::statement_count(probe_sql) > 1 {
                    v.push(format!(
                        "eval_script.test_cases[{i}].probe_sql: contains multiple statements"
                    ));
                }
            }
            TestCase::MustContain { patterns } | TestCase::MustNotContain { patterns } => {
                if patterns.is_empty() || patterns.iter().any(|p| p.trim().is_empty()) {
                    v.push(format!(
                        "eval_script.test_cases[{i}].patterns: must be non-empty"
                    ));
                }
            }
            TestCase::ExecOk => {}
        }
    }
    v
}

/// Checks a whole dataset: per-task invariants plus task_id uniqueness.
pub fn validate_dataset(tasks: &[TaskInstance]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut v = Vec::new();
    for task in tasks {
        if !seen.insert(task.task_id.as_str()) {
            v.push(format!("task_id: duplicate '{}'", task.task_id));
        }
        v.extend(
            validate_task(task)
                .into_iter()
                .map(|msg| format!("{}: {msg}", task.task_id)),
        );
    }
    v
}

/// An agent action: an SQL text, the termination sentinel, or an output
/// that could not be parsed into either.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "text", rename_all = "snake_case")]
pub enum Action {
    Sql(String),
    Done,
    Malformed(String),
}

impl Action {
    pub const DONE_SENTINEL: &'static str = "[DONE]";

    pub fn is_done(&self) -> bool {
        matches!(self, Action::Done)
    }

    /// Text placed inside `<action>` tags when the step is rendered.
    pub fn as_text(&self) -> &str {
        match self {
            Action::Sql(s) | Action::Malformed(s) => s,
            Action::Done => Self::DONE_SENTINEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub thought: String,
    pub action: Action,
    pub observation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    Baseline,
    FPlan,
    Rejection,
    RejectFPlan,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Which scaffold produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Episode,
    ToolAct,
    Collect(StrategyKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub final_sql: Option<Vec<String>>,
    pub passed: Option<bool>,
    pub strategy: StrategyTag,
    pub tries_used: u32,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
    /// Sum of engine execution time across steps.
    #[serde(default)]
    pub db_ms: u64,
    /// Set when the episode ended abnormally (backend outage, setup error).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>, strategy: StrategyTag) -> Self {
        Trajectory {
            task_id: task_id.into(),
            steps: Vec::new(),
            final_sql: None,
            passed: None,
            strategy,
            tries_used: 1,
            tokens_in: 0,
            tokens_out: 0,
            wall_ms: 0,
            db_ms: 0,
            failure: None,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(pos) = self.steps.iter().position(|s| s.action.is_done()) {
            if pos + 1 != self.steps.len() {
                v.push("steps: DONE step must be last".to_string());
            }
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.thought.trim().is_empty() {
                v.push(format!("steps[{i}].thought: must be non-empty"));
            }
            if s.action.as_text().trim().is_empty() {
                v.push(format!("steps[{i}].action: must be non-empty"));
            }
            if s.observation.is_empty() && !s.action.is_done() {
                v.push(format!("steps[{i}].observation: empty for a non-DONE action"));
            }
        }
        if self.passed.is_some() && self.final_sql.is_none() {
            v.push("passed: set without final_sql".to_string());
        }
        if self.tries_used == 0 {
            v.push("tries_used: must be positive".to_string());
        }
        v
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan has no steps")]
    Empty,
    #[error("plan step {index} is blank")]
    BlankStep { index: usize },
    #[error("plan step {index} has {tokens} tokens, budget is {budget}")]
    OverBudget {
        index: usize,
        tokens: usize,
        budget: usize,
    },
}

/// Ordered list of abstract repair operations guiding a rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalPlan {
    steps: Vec<String>,
}

impl FunctionalPlan {
    pub const DEFAULT_STEP_BUDGET: usize = 64;

    pub fn new(steps: Vec<String>, step_token_budget: usize) -> Result<Self, PlanError> {
        if steps.is_empty() {
            return Err(PlanError::Empty);
        }
        for (index, s) in steps.iter().enumerate() {
            let tokens = s.split_whitespace().count();
            if tokens == 0 {
                return Err(PlanError::BlankStep { index });
            }
            if tokens > step_token_budget {
                return Err(PlanError::OverBudget {
                    index,
                    tokens,
                    budget: step_token_budget,
                });
            }
        }
        Ok(FunctionalPlan { steps })
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Numbered list, one step per line.
    pub fn render(&self) -> String {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}", i + 1, s.trim()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricError {
    #[error("success rate of an empty outcome list is undefined")]
    EmptyInput,
}

/// Exact pass fraction. Comparisons use the unrounded rational value; only
/// [`SuccessRate::percent_display`] rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub passed: u64,
    pub total: u64,
}

impl SuccessRate {
    pub fn new(passed: u64, total: u64) -> Result<Self, MetricError> {
        if total == 0 {
            return Err(MetricError::EmptyInput);
        }
        assert!(passed <= total, "passed ({passed}) exceeds total ({total})");
        Ok(SuccessRate { passed, total })
    }

    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.total as f64
    }

    /// Percent with two decimals, rounded half-up in integer arithmetic.
    pub fn percent_display(&self) -> String {
        let hundredths = (self.passed as u128 * 20_000 + self.total as u128) / (2 * self.total as u128);
        format!("{}.{:02}%", hundredths / 100, hundredths % 100)
    }
}

impl PartialOrd for SuccessRate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SuccessRate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.passed as u128 * other.total as u128).cmp(&(other.passed as u128 * self.total as u128))
    }
}

pub fn success_rate(outcomes: &[bool]) -> Result<SuccessRate, MetricError> {
    let passed = outcomes.iter().filter(|&&b| b).count() as u64;
    SuccessRate::new(passed, outcomes.len() as u64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTally {
    pub n_total: u64,
    pub n_passed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SRReport {
    pub n_total: u64,
    pub n_passed: u64,
    pub sr: f64,
    pub sr_percent: String,
    pub per_category: BTreeMap<Category, CategoryTally>,
}

impl SRReport {
    pub fn from_outcomes(
        outcomes: impl IntoIterator<Item = (Category, bool)>,
    ) -> Result<Self, MetricError> {
        let mut per_category: BTreeMap<Category, CategoryTally> = BTreeMap::new();
        let (mut total, mut passed) = (0u64, 0u64);
        for (cat, ok) in outcomes {
            let t = per_category.entry(cat).or_default();
            t.n_total += 1;
            total += 1;
            if ok {
                t.n_passed += 1;
                passed += 1;
            }
        }
        let rate = SuccessRate::new(passed, total)?;
        Ok(SRReport {
            n_total: total,
            n_passed: passed,
            sr: rate.fraction(),
            sr_percent: rate.percent_display(),
            per_category,
        })
    }

    pub fn rate(&self) -> SuccessRate {
        SuccessRate {
            passed: self.n_passed,
            total: self.n_total,
        }
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::task;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn well_formed_task_has_no_violations() {
        assert!(validate_task(&task()).is_empty());
    }

    #[test]
    fn empty_issue_sql_is_reported() {
        let mut t = task();
        t.issue_sql.clear();
        assert_eq!(validate_task(&t), vec!["issue_sql: must be non-empty"]);
    }

    #[test]
    fn zero_test_cases_is_reported() {
        let mut t = task();
        t.eval_script.test_cases.clear();
        assert_eq!(validate_task(&t), vec!["eval_script: needs ≥1 test case"]);
    }

    #[test]
    fn multi_statement_string_is_rejected() {
        let mut t = task();
        t.solution_sql = vec!["UPDATE t SET a = 1; SELECT 1".into()];
        let v = validate_task(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("solution_sql[0]: contains multiple statements"));
    }

    #[test]
    fn blank_patterns_and_duplicate_ids() {
        let mut t = task();
        t.eval_script.test_cases.push(TestCase::MustContain { patterns: vec![] });
        assert_eq!(validate_task(&t).len(), 1);
        let v = validate_dataset(&[task(), task()]);
        assert_eq!(v, vec!["task_id: duplicate 't1'"]);
    }

    #[test]
    fn success_rate_examples() {
        let r = success_rate(&[true, false, true, false]).unwrap();
        assert_eq!(r.fraction(), 0.5);
        let r = SuccessRate::new(206, 530).unwrap();
        assert_eq!(r.percent_display(), "38.87%");
        assert_eq!(success_rate(&[]), Err(MetricError::EmptyInput));
        // half-up: 1/8 = 12.5% exactly, 1/16 = 6.25%, 1/32 = 3.125% -> 3.13%
        assert_eq!(SuccessRate::new(1, 32).unwrap().percent_display(), "3.13%");
        assert_eq!(SuccessRate::new(10, 10).unwrap().percent_display(), "100.00%");
    }

    #[test]
    fn report_per_category_sums() {
        let r = SRReport::from_outcomes(vec![
            (Category::QueryLike, true),
            (Category::Management, false),
            (Category::QueryLike, false),
        ])
        .unwrap();
        assert_eq!(r.n_total, 3);
        assert_eq!(r.n_passed, 1);
        let sum: u64 = r.per_category.values().map(|t| t.n_total).sum();
        assert_eq!(sum, r.n_total);
        assert_eq!(r.per_category[&Category::QueryLike].n_passed, 1);
    }

    #[test]
    fn plan_invariants() {
        assert_eq!(FunctionalPlan::new(vec![], 8), Err(PlanError::Empty));
        assert_eq!(
            FunctionalPlan::new(vec!["a".into(), "  ".into()], 8),
            Err(PlanError::BlankStep { index: 1 })
        );
        assert!(matches!(
            FunctionalPlan::new(vec!["a b c".into()], 2),
            Err(PlanError::OverBudget { tokens: 3, .. })
        ));
        let p = FunctionalPlan::new(vec!["find rows".into(), "add GROUP BY".into()], 8).unwrap();
        assert_eq!(p.render(), "1. find rows\n2. add GROUP BY");
    }

    #[test]
    fn trajectory_invariants() {
        let mut t = Trajectory::new("t1", StrategyTag::Episode);
        t.steps.push(Step {
            thought: "done".into(),
            action: Action::Done,
            observation: String::new(),
        });
        assert!(t.validate().is_empty());
        t.steps.push(Step {
            thought: "x".into(),
            action: Action::Sql("SELECT 1".into()),
            observation: "ok".into(),
        });
        assert!(t.validate().iter().any(|v| v.contains("DONE step must be last")));
        let mut t = Trajectory::new("t1", StrategyTag::Episode);
        t.passed = Some(true);
        assert_eq!(t.validate(), vec!["passed: set without final_sql"]);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 _']{1,20}"
    }

    fn arb_task() -> impl Strategy<Value = TaskInstance> {
        (
            arb_text(),
            prop::sample::select(Category::ALL.to_vec()),
            prop::collection::vec(arb_text(), 1..3),
            prop::collection::vec(arb_text(), 1..3),
            prop::option::of(arb_text()),
            prop::collection::vec(-1000i64..1000, 0..4),
        )
            .prop_map(|(id, category, issue, solution, reason, ints)| TaskInstance {
                task_id: id.clone(),
                dialect: Dialect::EmbeddedRef,
                db_ref: "db".into(),
                category,
                user_query: id,
                issue_sql: issue,
                solution_sql: solution.clone(),
                preprocess_sql: vec![],
                cleanup_sql: vec!["DROP TABLE x".into()],
                eval_script: EvalScript {
                    test_cases: vec![
                        TestCase::ResultMatch {
                            reference_sql: solution,
                        },
                        TestCase::StateProbe {
                            probe_sql: "SELECT 1".into(),
                            expected: ProbeExpectation::Rows(vec![ints
                                .into_iter()
                                .map(Value::Integer)
                                .collect()]),
                        },
                        TestCase::ExecOk,
                    ],
                    requires_order: false,
                },
                issue_reason: reason,
                knowledge_tags: vec![],
            })
    }

    proptest! {
        #[test]
        fn task_roundtrip(t in arb_task()) {
            let json = serde_json::to_string(&t).unwrap();
            let back: TaskInstance = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn trajectory_roundtrip(steps in prop::collection::vec((arb_text(), arb_text(), any::<bool>()), 0..5), tin in 0u64..10_000) {
            let mut t = Trajectory::new("x", StrategyTag::Collect(StrategyKind::FPlan));
            for (th, a, done) in steps {
                t.steps.push(Step { thought: th, action: if done { Action::Done } else { Action::Sql(a) }, observation: "o".into() });
            }
            t.tokens_in = tin;
            t.final_sql = Some(vec!["SELECT 1".into()]);
            t.passed = Some(true);
            let json = serde_json::to_string(&t).unwrap();
            let back: Trajectory = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn success_rate_permutation_and_monotonicity(mut v in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let base = success_rate(&v).unwrap();
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(success_rate(&shuffled).unwrap(), base);
            if let Some(i) = v.iter().position(|b| !b) {
                v[i] = true;
                let flipped = success_rate(&v).unwrap();
                prop_assert!(flipped > base);
                prop_assert_eq!(flipped.passed, base.passed + 1);
                prop_assert_eq!(flipped.total, base.total);
            }
        }
    }
}
