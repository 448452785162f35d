use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::gateway::ScriptedBackend;
use crate::sandbox::sqlite::SqliteExecutor;
use crate::sandbox::ExecutorRegistry;

const SHOP: &str = "CREATE TABLE orders(id INTEGER PRIMARY KEY, customer TEXT, qty INTEGER, status TEXT);
    INSERT INTO orders VALUES (1,'ann',2,'shipped'),(2,'ann',3,'cancelled'),(3,'bob',5,'shipped'),(4,'cy',1,'cancelled');
    CREATE TABLE notes(id INTEGER PRIMARY KEY, body TEXT);
    INSERT INTO notes VALUES (1, NULL);";

fn sandbox() -> Sandbox {
    let exec = SqliteExecutor::in_memory_only();
    exec.register_script("shop", SHOP).unwrap();
    exec.register_script("reserved", SHOP).unwrap();
    let mut reg = ExecutorRegistry::new();
    reg.register(Arc::new(exec));
    Sandbox::new(reg)
}

fn between<'t>(text: &'t str, start: &str, end: &str) -> &'t str {
    let a = text.find(start).map(|i| i + start.len()).unwrap_or(0);
    let b = text[a..].find(end).map(|i| a + i).unwrap_or(text.len());
    text[a..b].trim()
}

fn good_proposal(solution: &str) -> String {
    let sol = serde_json::to_string(solution).unwrap();
    let issue = serde_json::to_string(&format!("{solution} LIMIT 0")).unwrap();
    format!(
        "```json\n{{\"issue_sql\": [{issue}], \"issue_reason\": \"limit drops every row\", \
         \"eval_script\": {{\"test_cases\": [{{\"kind\": \"ResultMatch\", \"reference_sql\": [{sol}]}}]}}}}\n```"
    )
}

fn weak_proposal(solution: &str) -> String {
    let issue = serde_json::to_string(&format!("{solution} LIMIT 0")).unwrap();
    format!(
        "```json\n{{\"issue_sql\": [{issue}], \"issue_reason\": \"x\", \
         \"eval_script\": {{\"test_cases\": [{{\"kind\": \"MustContain\", \"patterns\": [\"orders\"]}}]}}}}\n```"
    )
}

/// Generator that adapts verbatim, proposes a weak proposal for the first
/// `weak` issue rounds, and affirms everything else.
fn generator(weak: u32) -> ScriptedBackend {
    ScriptedBackend::from_fn("gen", move |r: &CompletionRequest| {
        let t = r.transcript();
        let round: u32 = r.context("attempt").unwrap_or("1").parse().unwrap();
        Ok(match r.context("phase").unwrap_or_default() {
            "adapt" => format!("```sql\n{}\n```", between(&t, "Original SQL\n", "\n\nWrap")),
            "issue" => {
                let sol = between(&t, "Correct SQL\n", "\n");
                if round <= weak {
                    weak_proposal(sol)
                } else {
                    good_proposal(sol)
                }
            }
            "user_query" => "<query>Why does my order report come back empty?</query>".into(),
            _ => "<verdict>yes</verdict> fine".into(),
        })
    })
}

fn rewind<'a>(b: &'a dyn Backend, target: usize, workers: usize) -> Rewind<'a> {
    Rewind::new(
        sandbox(),
        b,
        RewindConfig {
            target_size: target,
            parallelism: Parallelism::workers(workers),
            ..RewindConfig::default()
        },
    )
}

fn post(id: &str, sql: &str) -> CorpusRecord {
    CorpusRecord {
        source_id: id.into(),
        title: format!("question {id}"),
        body: format!("I tried this:\n\n```sql\n{sql}\n```\n\nbut it fails."),
    }
}

fn sol() -> Vec<String> {
    vec!["SELECT customer, SUM(qty) FROM orders GROUP BY customer".into()]
}

#[test]
fn candidates_from_fences_and_indented_blocks() {
    let body = "text\n```sql\nSELECT a FROM t; SELECT b FROM t;\n```\nmore\n```\nselect a from t\n```\n\
                ```python\nprint('SELECT x')\n```\n    UPDATE t SET a = 1\n    WHERE b = 2\nend\n    just prose here\n";
    let c = extract_candidates(body);
    assert_eq!(
        c,
        vec!["SELECT a FROM t", "SELECT b FROM t", "UPDATE t SET a = 1\nWHERE b = 2"]
    );
    assert!(extract_candidates("no code at all").is_empty());
}

#[test]
fn exclusion_list_is_exact_match() {
    let l = ExclusionList::parse("# reserved\nso-1\nsource:so-2\ndb:reserved  # eval db\n\n");
    assert!(l.excludes_source("so-1") && l.excludes_database("so-1"));
    assert!(l.excludes_source("so-2") && !l.excludes_database("so-2"));
    assert!(l.excludes_database("reserved") && !l.excludes_source("reserved"));
    assert!(!l.excludes_source("so-10") && !l.excludes_source("SO-1"));
}

#[test]
fn mining_accepts_rows_and_rejects_errors_and_nulls() {
    let b = generator(0);
    let rw = rewind(&b, 1, 1);
    let p = CorpusRecord {
        source_id: "p".into(),
        title: "t".into(),
        body: "```sql\nSELECT customer FROM orders WHERE qty > 2;\nSELECT missing_col FROM orders;\n\
               SELECT id FROM orders WHERE qty > 100;\nSELECT body FROM notes;\n\
               UPDATE orders SET qty = 0\n```"
            .into(),
    };
    let (ok, rejected) = rw.mine_solution_sql(&p, "shop");
    assert_eq!(ok, vec!["SELECT customer FROM orders WHERE qty > 2"]);
    let reasons: Vec<(usize, &str)> = rejected.iter().map(|(k, r)| (*k, r.reason.as_str())).collect();
    assert_eq!(reasons.len(), 4);
    assert_eq!(reasons[0].0, 1);
    assert!(reasons[0].1.starts_with("exec error"), "{}", reasons[0].1);
    assert_eq!(&reasons[1..], &[(2, "null result"), (3, "null result"), (4, "null result")]);
}

#[test]
fn second_proposal_accepted_with_two_iterations() {
    let b = generator(1);
    let rw = rewind(&b, 1, 1);
    let t = rw.synthesize_issue("shop", &sol()).unwrap();
    assert_eq!(t.iterations, 2);
    assert_eq!(t.issue_sql, vec![format!("{} LIMIT 0", sol()[0])]);
}

#[test]
fn never_caught_issue_is_rejected_after_max_iter() {
    let b = generator(u32::MAX);
    let rw = rewind(&b, 1, 1);
    let r = rw.synthesize_issue("shop", &sol()).unwrap_err();
    assert_eq!(r.stage, Stage::Issue);
    assert_eq!(r.reason, "issue not caught");
    assert_eq!(r.iterations, DEFAULT_MAX_ITER);
}

#[test]
fn incoherent_verdict_rejects_a_valid_triplet() {
    let b = ScriptedBackend::from_fn("gen", |r: &CompletionRequest| {
        let t = r.transcript();
        Ok(match r.context("phase").unwrap_or_default() {
            "issue" => good_proposal(between(&t, "Correct SQL\n", "\n")),
            _ => "<verdict>no</verdict>".into(),
        })
    });
    let rw = rewind(&b, 1, 1);
    let r = rw.synthesize_issue("shop", &sol()).unwrap_err();
    assert_eq!(r.reason, "incoherent triplet");
}

fn triple() -> IssueTriple {
    let b = generator(0);
    rewind(&b, 1, 1).synthesize_issue("shop", &sol()).unwrap()
}

#[test]
fn first_affirmed_query_wins() {
    let b = generator(0);
    let (q, rounds) = rewind(&b, 1, 1).generate_user_query("shop", &sol(), &triple()).unwrap();
    assert_eq!(rounds, 1);
    assert!(q.contains("order report"));
}

#[test]
fn query_rejected_when_oracle_never_affirms() {
    let b = ScriptedBackend::from_fn("gen", |r: &CompletionRequest| {
        Ok(match r.context("phase").unwrap_or_default() {
            "user_query" => "<query>q</query>".into(),
            _ => "<verdict>no</verdict>".into(),
        })
    });
    let r = rewind(&b, 1, 1).generate_user_query("shop", &sol(), &triple()).unwrap_err();
    assert_eq!((r.stage, r.iterations), (Stage::UserQuery, 3));
}

#[test]
fn oracle_rejects_drafts_naming_absent_tables() {
    // The oracle affirms only drafts whose table mentions exist in the schema.
    let b = ScriptedBackend::from_fn("gen", |r: &CompletionRequest| {
        let t = r.transcript();
        let round: u32 = r.context("attempt").unwrap().parse().unwrap();
        Ok(match r.context("phase").unwrap_or_default() {
            "user_query" if round == 1 => "<query>Totals from the invoices table are empty</query>".into(),
            "user_query" => "<query>Totals from the orders table are empty</query>".into(),
            _ => {
                let schema = between(&t, "Database Schema\n", "\n\nUser question");
                let q = between(&t, "User question\n", "\n\n");
                let table = between(q, "from the ", " table");
                if schema.contains(&format!("TABLE {table}")) {
                    "<verdict>yes</verdict>".into()
                } else {
                    "<verdict>no</verdict> unknown table".into()
                }
            }
        })
    });
    let (q, rounds) = rewind(&b, 1, 1).generate_user_query("shop", &sol(), &triple()).unwrap();
    assert_eq!(rounds, 2);
    assert!(q.contains("orders"));
}

fn corpus(n: usize) -> Vec<CorpusRecord> {
    (1..=n)
        .map(|i| post(&format!("so-{i}"), &format!("SELECT customer, qty FROM orders WHERE id <= {i}")))
        .collect()
}

#[test]
fn target_reached_stops_early() {
    for workers in [1, 2] {
        let b = generator(0);
        let rw = rewind(&b, 3, workers);
        let run = rw.build_instances(&corpus(5), &["shop".into()], &ExclusionList::default()).unwrap();
        let ids: Vec<&str> = run.instances.iter().map(|g| g.task.task_id.as_str()).collect();
        assert_eq!(ids, vec!["rw-so-1-0-shop", "rw-so-2-0-shop", "rw-so-3-0-shop"]);
        assert!(run.report.stopped_early);
        assert_eq!(run.report.accepted, 3);
        for g in &run.instances {
            assert!(rw.evaluator().red_team_check(&g.task).valid);
            assert_eq!(g.task.category, Category::QueryLike);
            assert_eq!(g.provenance.issue_iterations, 1);
        }
    }
}

#[test]
fn fully_excluded_corpus_yields_nothing() {
    let b = generator(0);
    let rw = rewind(&b, 3, 1);
    let ex = ExclusionList::parse("source:so-1\nsource:so-2\nsource:so-3\n");
    let run = rw.build_instances(&corpus(3), &["shop".into()], &ex).unwrap();
    assert!(run.instances.is_empty());
    assert_eq!((run.report.posts_seen, run.report.posts_excluded), (3, 3));
    assert!(!run.report.stopped_early);
    assert_eq!(b.calls(), 0);
}

#[test]
fn reserved_databases_and_excluded_posts_never_emitted() {
    let b = generator(0);
    let rw = rewind(&b, 10, 2);
    let ex = ExclusionList::parse("source:so-2\ndb:reserved\n");
    let run = rw
        .build_instances(&corpus(4), &["reserved".into(), "shop".into()], &ex)
        .unwrap();
    assert_eq!(run.instances.len(), 3);
    assert_eq!(run.report.databases_excluded, vec!["reserved"]);
    for g in &run.instances {
        assert_eq!(g.provenance.db_id, "shop");
        assert_ne!(g.provenance.source_id, "so-2");
    }
}

#[test]
fn one_acceptance_per_candidate() {
    let b = generator(0);
    let rw = rewind(&b, 10, 1);
    let exec = rw.build_instances(&corpus(1), &["shop".into(), "reserved".into()], &ExclusionList::default());
    let run = exec.unwrap();
    assert_eq!(run.instances.len(), 1);
    assert_eq!(run.instances[0].provenance.db_id, "shop");
}

#[test]
fn rejects_grouped_by_stage() {
    let b = generator(u32::MAX);
    let rw = rewind(&b, 5, 1);
    let mut c = corpus(1);
    c.push(post("bad", "SELECT nope FROM orders"));
    let run = rw.build_instances(&c, &["shop".into()], &ExclusionList::default()).unwrap();
    assert!(run.instances.is_empty());
    assert_eq!(run.report.rejects[&Stage::Issue].len(), 1);
    assert_eq!(run.report.rejects[&Stage::ExecOk][0].source_id, "bad");
    assert!(run.report.tokens_in > 0);
}

#[test]
fn zero_target_is_an_error() {
    let b = generator(0);
    assert!(matches!(
        rewind(&b, 0, 1).build_instances(&[], &[], &ExclusionList::default()),
        Err(RewindError::ZeroTarget)
    ));
}

#[test]
fn category_follows_test_kinds() {
    let script = |cases: Vec<TestCase>| EvalScript {
        test_cases: cases,
        requires_order: false,
    };
    assert_eq!(category_for(&script(vec![TestCase::ExecOk])), Category::QueryLike);
    assert_eq!(
        category_for(&script(vec![TestCase::StateProbe {
            probe_sql: "SELECT 1".into(),
            expected: crate::model::ProbeExpectation::Scalar(crate::value::Value::Integer(1)),
        }])),
        Category::Management
    );
    assert_eq!(
        category_for(&script(vec![TestCase::MustNotContain { patterns: vec!["x".into()] }])),
        Category::Personalization
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn iterations_never_exceed_max(weak in 0u32..6, max_iter in 1u32..4) {
        let b = generator(weak);
        let rw = Rewind::new(sandbox(), &b, RewindConfig {
            max_iter,
            parallelism: Parallelism::sequential(),
            ..RewindConfig::default()
        });
        match rw.synthesize_issue("shop", &sol()) {
            Ok(t) => {
                prop_assert!(t.iterations <= max_iter);
                prop_assert_eq!(t.iterations, weak + 1);
            }
            Err(r) => {
                prop_assert!(weak >= max_iter);
                prop_assert_eq!(r.iterations, max_iter);
            }
        }
    }
}
