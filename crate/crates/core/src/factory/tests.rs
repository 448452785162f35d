use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::*;
use crate::gateway::{Backend, CompletionRequest, ScriptedBackend};
use crate::model::{Action, Category, Dialect, EvalScript, Step, TestCase};
use crate::sandbox::sqlite::SqliteExecutor;
use crate::sandbox::{ExecutorRegistry, Sandbox};

const SHOP: &str = "CREATE TABLE orders(id INTEGER PRIMARY KEY, customer TEXT, qty INTEGER);
    INSERT INTO orders VALUES (1,'ann',2),(2,'ann',3),(3,'bob',5),(4,'cy',1);";

const ISSUE: &str = "SELECT customer, SUM(qty) FROM orders";
const FIX: &str = "SELECT customer, SUM(qty) FROM orders GROUP BY customer";

fn evaluator() -> Evaluator {
    let exec = SqliteExecutor::in_memory_only();
    exec.register_script("shop", SHOP).unwrap();
    let mut reg = ExecutorRegistry::new();
    reg.register(Arc::new(exec));
    Evaluator::new(Sandbox::new(reg)).with_parallelism(Parallelism::sequential())
}

fn task(id: &str) -> TaskInstance {
    TaskInstance {
        task_id: id.into(),
        dialect: Dialect::EmbeddedRef,
        db_ref: "shop".into(),
        category: Category::QueryLike,
        user_query: "totals per customer collapse into one row".into(),
        issue_sql: vec![ISSUE.into()],
        solution_sql: vec![FIX.into()],
        preprocess_sql: vec![],
        cleanup_sql: vec![],
        eval_script: EvalScript {
            test_cases: vec![TestCase::ResultMatch {
                reference_sql: vec![FIX.into()],
            }],
            requires_order: false,
        },
        issue_reason: None,
        knowledge_tags: vec![],
    }
}

/// Last `<action>` body in a rendered history.
fn last_action(t: &str) -> String {
    let mut out = String::new();
    let mut rest = t;
    while let Some(i) = rest.find("<action>") {
        let after = &rest[i + 8..];
        let end = after.find("</action>").unwrap_or(after.len());
        let a = &after[..end];
        if a != "[DONE]" && !a.starts_with("[Executable") {
            out = a.to_string();
        }
        rest = &after[end..];
    }
    out
}

/// Teacher whose first action is the fix when `fixes` says so, otherwise
/// the issue SQL, and which declares DONE on turn 2. The final answer
/// repeats the last executed action.
fn teacher<F>(fixes: F) -> ScriptedBackend
where
    F: Fn(&str, bool, u32) -> bool + Send + Sync + 'static,
{
    ScriptedBackend::from_fn("teacher", move |r: &CompletionRequest| {
        let t = r.transcript();
        let id = r.context("task_id").unwrap_or_default().to_string();
        let attempt: u32 = r.context("attempt").unwrap_or("1").parse().unwrap();
        Ok(match r.context("phase").unwrap_or_default() {
            "plan" => "1. add GROUP BY customer so SUM aggregates per customer\n2. keep the SUM(qty) aggregate\n".into(),
            "thought" if r.context("turn") == Some("1") => {
                let sql = if fixes(&id, t.contains("\nPlan\n"), attempt) { FIX } else { ISSUE };
                format!("run it</thought>\n<action>{sql}</action>")
            }
            "thought" => "looks right</thought>\n<action>[DONE]</action>".into(),
            "final" => format!("```sql\n{}\n```", last_action(&t)),
            other => return Err(format!("unexpected phase {other}")),
        })
    })
}

fn collector(b: &ScriptedBackend, workers: usize) -> Collector<'_> {
    Collector::new(evaluator(), Backends::single(b), AgentConfig::default())
        .with_parallelism(Parallelism::workers(workers))
}

fn tasks(n: usize) -> Vec<TaskInstance> {
    (0..n).map(|i| task(&format!("t{i:02}"))).collect()
}

#[test]
fn strategy_defaults() {
    for k in [StrategyKind::Baseline, StrategyKind::FPlan] {
        let s = StrategyConfig::defaults(k);
        assert_eq!((s.max_tries, s.temperature), (1, 0.0));
    }
    for k in [StrategyKind::Rejection, StrategyKind::RejectFPlan] {
        let s = StrategyConfig::defaults(k);
        assert_eq!((s.max_tries, s.temperature, s.early_stop), (5, 0.8, true));
    }
}

#[test]
fn plan_for_missing_group_by_mentions_aggregation() {
    let b = teacher(|_, _, _| true);
    let p = backward_infer_plan(&task("t"), "schema", &b, &crate::agent::PromptSet::builtin()).unwrap();
    let plan = p.plan.unwrap();
    assert_eq!(plan.len(), 2);
    assert!(plan.steps()[0].contains("GROUP BY"));
}

#[test]
fn plan_sensitive_teacher_passes_only_with_plan() {
    let b = teacher(|_, plan, _| plan);
    let c = collector(&b, 1);
    let base = c.collect(&tasks(1), &StrategyConfig::defaults(StrategyKind::Baseline)).unwrap();
    assert_eq!(base.report.successful_traj, 0);
    let fplan = c.collect(&tasks(1), &StrategyConfig::defaults(StrategyKind::FPlan)).unwrap();
    assert_eq!(fplan.report.successful_traj, 1);
    assert_eq!(fplan.plans.len(), 1);
    // the stored trace holds no plan text
    let stored = serde_json::to_string(&fplan.trajectories[0]).unwrap();
    assert!(!stored.contains("GROUP BY customer so"));
}

#[test]
fn forward_validate_accepts_fix_and_rejects_failure() {
    let b = teacher(|_, _, _| true);
    let c = collector(&b, 1);
    let t = c.forward_validate(&task("t"), None, 0.0, 1).unwrap();
    assert_eq!(t.passed, Some(true));
    let b = teacher(|_, _, _| false);
    let c = collector(&b, 1);
    let r = c.forward_validate(&task("t"), None, 0.0, 1).unwrap_err();
    assert_eq!(r.stage, "evaluation");
    assert_eq!(r.trajectory.unwrap().passed, Some(false));
}

#[test]
fn rejection_early_stops_on_third_try() {
    let calls = Arc::new(AtomicU32::new(0));
    let seen = calls.clone();
    let b = teacher(move |_, _, attempt| {
        seen.fetch_max(attempt, Ordering::SeqCst);
        attempt >= 3
    });
    let run = collector(&b, 4)
        .collect(&tasks(10), &StrategyConfig::defaults(StrategyKind::Rejection))
        .unwrap();
    assert_eq!(run.report.successful_traj, 10);
    assert_eq!(run.report.avg_tries, 3.0);
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    assert!(run.trajectories.iter().all(|t| t.tries_used == 3));
}

#[test]
fn early_stop_on_first_pass_charges_one_try() {
    let b = teacher(|_, _, _| true);
    let run = collector(&b, 1)
        .collect(&tasks(2), &StrategyConfig::defaults(StrategyKind::Rejection))
        .unwrap();
    assert_eq!(run.report.total_tries, 2);
    assert_eq!(run.report.avg_tries, 1.0);
}

#[test]
fn without_early_stop_all_tries_run_and_one_is_kept() {
    let b = teacher(|_, _, _| true);
    let s = StrategyConfig {
        early_stop: false,
        ..StrategyConfig::defaults(StrategyKind::Rejection)
    };
    let run = collector(&b, 1).collect(&tasks(1), &s).unwrap();
    assert_eq!(run.report.total_tries, 5);
    assert_eq!(run.trajectories.len(), 1);
}

#[test]
fn reject_fplan_first_try_is_greedy() {
    let temps = Arc::new(Mutex::new(Vec::new()));
    let seen = temps.clone();
    let inner = teacher(|_, _, attempt| attempt == 2);
    let b = ScriptedBackend::from_fn("teacher", move |r: &CompletionRequest| {
        if r.context("phase") == Some("thought") && r.context("turn") == Some("1") {
            seen.lock().unwrap().push(r.temperature);
        }
        inner.complete(r).map(|c| c.text).map_err(|e| e.to_string())
    });
    let run = collector(&b, 1)
        .collect(&tasks(1), &StrategyConfig::defaults(StrategyKind::RejectFPlan))
        .unwrap();
    assert_eq!(run.report.total_tries, 2);
    assert_eq!(*temps.lock().unwrap(), vec![0.0, 0.8]);
}

#[test]
fn unparseable_plan_skips_instance_after_one_reask() {
    let asks = Arc::new(AtomicU32::new(0));
    let n = asks.clone();
    let b = ScriptedBackend::from_fn("teacher", move |r: &CompletionRequest| {
        n.fetch_add(1, Ordering::SeqCst);
        assert_eq!(r.context("phase"), Some("plan"));
        Ok("no idea".into())
    });
    let run = collector(&b, 1)
        .collect(&tasks(1), &StrategyConfig::defaults(StrategyKind::FPlan))
        .unwrap();
    assert_eq!(asks.load(Ordering::SeqCst), 2);
    assert_eq!(run.report.plans_skipped, 1);
    assert_eq!(run.report.total_tries, 0);
}

#[test]
fn outage_is_resumable_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.jsonl");
    let up = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let flag = up.clone();
    let inner = teacher(|_, _, _| true);
    let b = ScriptedBackend::from_fn("teacher", move |r: &CompletionRequest| {
        if r.context("task_id") == Some("t02") && !flag.load(Ordering::SeqCst) {
            return Err("connection refused".into());
        }
        inner.complete(r).map(|c| c.text).map_err(|e| e.to_string())
    });
    let s = StrategyConfig::defaults(StrategyKind::Baseline);
    let first = collector(&b, 2).with_checkpoint(&ck).collect(&tasks(4), &s).unwrap();
    assert!(first.report.resumable);
    assert_eq!(first.report.pending, vec!["t02"]);
    assert_eq!(first.report.successful_traj, 3);
    assert_eq!(load_checkpoint(&ck).unwrap().len(), 3);

    up.store(true, Ordering::SeqCst);
    let second = collector(&b, 2).with_checkpoint(&ck).collect(&tasks(4), &s).unwrap();
    assert!(!second.report.resumable);
    assert_eq!(second.report.resumed, 3);
    assert_eq!(second.report.successful_traj, 4);
    let ids: Vec<&str> = second.trajectories.iter().map(|t| t.task_id.as_str()).collect();
    assert_eq!(ids, vec!["t00", "t01", "t02", "t03"]);
}

#[test]
fn stored_trajectories_replay_on_fresh_sessions() {
    let b = teacher(|id, _, _| id != "t01");
    let c = collector(&b, 3);
    let run = c.collect(&tasks(3), &StrategyConfig::defaults(StrategyKind::Baseline)).unwrap();
    assert_eq!(run.trajectories.len(), 2);
    for t in &run.trajectories {
        assert!(t.validate().is_empty());
        assert_eq!(t.strategy, StrategyTag::Collect(StrategyKind::Baseline));
        let sql = t.final_sql.clone().unwrap();
        assert!(c.evaluator().evaluate_task(&task(&t.task_id), &sql).unwrap().passed);
    }
}

#[test]
fn cost_uses_per_million_prices() {
    let m = CostModel {
        input_per_mtok: 2.0,
        output_per_mtok: 10.0,
    };
    assert!((m.estimate(1_000_000, 500_000) - 7.0).abs() < 1e-12);
}

fn passing(steps: usize) -> Trajectory {
    let mut t = Trajectory::new("t", StrategyTag::Collect(StrategyKind::Baseline));
    for i in 0..steps {
        let last = i + 1 == steps;
        t.steps.push(Step {
            thought: format!("t{i}"),
            action: if last { Action::Done } else { Action::Sql("SELECT 1".into()) },
            observation: if last { String::new() } else { "Rows: 1".into() },
        });
    }
    t.final_sql = Some(vec![FIX.into()]);
    t.passed = Some(true);
    t
}

#[test]
fn export_two_step_trajectory() {
    let mut buf = Vec::new();
    assert_eq!(export_training(&[passing(2)], &mut buf).unwrap(), 1);
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"format":"sqlfix-chat-v1","count":1}"#);
    let rec: ChatRecord = serde_json::from_str(lines[1]).unwrap();
    let assistant = rec
        .messages
        .iter()
        .filter(|m| m.role == crate::gateway::Role::Assistant)
        .count();
    assert_eq!(assistant, 2);
    assert_eq!(rec.messages.len(), 3);
    assert_eq!(rec.final_sql, vec![FIX]);
}

#[test]
fn export_rejects_failures_and_handles_empty() {
    let mut bad = passing(1);
    bad.passed = Some(false);
    let mut buf = Vec::new();
    assert!(matches!(
        export_training(&[passing(1), bad], &mut buf),
        Err(FactoryError::NotPassed(_))
    ));
    assert!(buf.is_empty());
    export_training(&[], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "{\"format\":\"sqlfix-chat-v1\",\"count\":0}\n");
}

#[test]
fn empty_dataset_is_an_error() {
    let b = teacher(|_, _, _| true);
    assert!(matches!(
        collector(&b, 1).collect(&[], &StrategyConfig::defaults(StrategyKind::Baseline)),
        Err(FactoryError::EmptyDataset)
    ));
}
