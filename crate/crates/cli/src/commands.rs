use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value as Json};
use sqlfix_core::agent::{run_episode, AgentConfig, AgentMode, Backends, PromptSet};
use sqlfix_core::evaluator::{summary_table, Evaluator};
use sqlfix_core::factory::{self, export_training, Collector, StrategyConfig};
use sqlfix_core::gateway::{
    Backend, RemoteBackend, ReplayFile, ScriptedBackend, DEFAULT_TEMPERATURE,
};
use sqlfix_core::io::{
    load_predictions, load_tasks, read_jsonl, to_jsonl, PredictionRecord, SqlField,
};
use sqlfix_core::rewind::{load_corpus, ExclusionList, Rewind, RewindConfig};
use sqlfix_core::stats::{self, build_report, StatsError};
use sqlfix_core::{
    Dialect, IsolationMode, Parallelism, SRReport, Sandbox, StrategyKind, StrategyTag,
    TaskInstance, Trajectory,
};

use crate::config::ConfigFile;
use crate::{
    setup, write_file, AgentArgs, Cli, CliError, CollectArgs, Command, ModeArg, ModelArgs,
    RewindArgs, RunManifest, StrategyArg,
};

const DB_EXTENSIONS: [&str; 3] = ["sqlite", "db", "sql"];

/// Settings after applying flag > env > file > default.
struct Context {
    config_path: Option<PathBuf>,
    file: ConfigFile,
    out: PathBuf,
    db_dir: Option<PathBuf>,
    isolation: Option<IsolationMode>,
    prompts: Arc<PromptSet>,
    parallelism: Parallelism,
    seed: u64,
    started: Instant,
}

impl Context {
    fn resolve(g: &crate::GlobalArgs) -> Result<Self, CliError> {
        let file = match &g.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let isolation = match g.isolation.clone().or_else(|| file.isolation.clone()) {
            Some(s) => Some(
                s.parse::<IsolationMode>()
                    .map_err(|e| CliError::Usage(format!("--isolation: {e}")))?,
            ),
            None => None,
        };
        let prompts = match g.prompts.clone().or_else(|| file.prompts.clone()) {
            Some(dir) => PromptSet::from_dir(&dir).map_err(setup)?,
            None => PromptSet::builtin(),
        };
        let parallelism = match g.workers.or(file.workers) {
            Some(n) => Parallelism::workers(n),
            None => Parallelism::auto(),
        };
        Ok(Context {
            config_path: g.config.clone(),
            out: g
                .out
                .clone()
                .or_else(|| file.out.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
            db_dir: g.db_dir.clone().or_else(|| file.db_dir.clone()),
            isolation,
            prompts: Arc::new(prompts),
            parallelism,
            seed: g.seed.or(file.seed).unwrap_or(0),
            file,
            started: Instant::now(),
        })
    }

    /// Database directory: the configured one, else the first of
    /// `<tasks>/databases`, `<tasks>/../databases` and `./databases`.
    fn db_dir_for(&self, inputs: &Path) -> Result<PathBuf, CliError> {
        if let Some(d) = &self.db_dir {
            if !d.is_dir() {
                return Err(setup(format!(
                    "database directory {} does not exist",
                    d.display()
                )));
            }
            return Ok(d.clone());
        }
        let base = if inputs.is_dir() {
            inputs.to_path_buf()
        } else {
            inputs.parent().unwrap_or(Path::new(".")).to_path_buf()
        };
        let candidates = [
            base.join("databases"),
            base.join("..").join("databases"),
            PathBuf::from("databases"),
        ];
        candidates
            .into_iter()
            .find(|d| d.is_dir())
            .ok_or_else(|| setup("no database directory found; pass --db-dir"))
    }

    fn sandbox(&self, db_dir: &Path) -> Sandbox {
        Sandbox::embedded(db_dir).with_isolation(self.isolation)
    }

    fn evaluator(&self, db_dir: &Path) -> Evaluator {
        Evaluator::new(self.sandbox(db_dir)).with_parallelism(self.parallelism)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_report(&self, payload: Json, timing: Json) -> Result<(), CliError> {
        let mut timing = timing;
        if let Json::Object(m) = &mut timing {
            m.insert(
                "wall_ms".into(),
                json!(self.started.elapsed().as_millis() as u64),
            );
        }
        let doc = json!({ "payload": payload, "timing": timing });
        write_file(&self.path("report.json"), &pretty(&doc))
    }

    fn write_manifest(
        &self,
        command: &str,
        args: &[String],
        datasets: &[&Path],
        backends: &[&str],
    ) -> Result<(), CliError> {
        let m = RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config: self.config_path.as_ref().map(|p| p.display().to_string()),
            datasets: datasets.iter().map(|p| p.display().to_string()).collect(),
            backends: backends.iter().map(|b| b.to_string()).collect(),
            out: self.out.display().to_string(),
            seed: self.seed,
            workers: self.parallelism.worker_count(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_file(&self.path("run_manifest.json"), &pretty(&m))
    }

    fn backend(&self, spec: &str) -> Result<Box<dyn Backend>, CliError> {
        if let Some(path) = spec.strip_prefix("replay:") {
            let file = ReplayFile::load(Path::new(path)).map_err(setup)?;
            return Ok(Box::new(ScriptedBackend::replay(spec, file)));
        }
        let model = match spec {
            "remote" => None,
            s => match s.strip_prefix("remote:") {
                Some(m) if !m.is_empty() => Some(m),
                _ => {
                    return Err(CliError::Usage(format!(
                        "backend '{spec}': expected replay:<file> or remote[:<model>]"
                    )))
                }
            },
        };
        let cfg = self.file.remote_config(model);
        RemoteBackend::new(spec, cfg)
            .map(|b| Box::new(b) as Box<dyn Backend>)
            .map_err(setup)
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn tasks_from(path: &Path) -> Result<Vec<TaskInstance>, CliError> {
    load_tasks(path).map_err(setup)
}

fn db_present(dir: &Path, db: &str) -> bool {
    DB_EXTENSIONS
        .iter()
        .any(|ext| dir.join(format!("{db}.{ext}")).is_file())
}

/// Fails when an embedded-engine task names a database that is not in `dir`.
fn check_databases(dir: &Path, tasks: &[TaskInstance]) -> Result<(), CliError> {
    let mut missing: Vec<&str> = tasks
        .iter()
        .filter(|t| t.dialect == Dialect::EmbeddedRef && !db_present(dir, &t.db_ref))
        .map(|t| t.db_ref.as_str())
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(setup(format!(
            "databases not found in {}: {}",
            dir.display(),
            missing.join(", ")
        )))
    }
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout.write_all(text.as_bytes()).map_err(setup)
}

pub(crate) fn execute(cli: Cli, args: Vec<String>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::resolve(&cli.global)?;
    match cli.command {
        Command::Eval { tasks, pred } => eval(&ctx, &args, &tasks, &pred, stdout),
        Command::Agent(a) => agent(&ctx, &args, &a, stdout),
        Command::Rewind(r) => rewind(&ctx, &args, &r, stdout),
        Command::Collect(c) => collect(&ctx, &args, &c, stdout),
        Command::Redteam { tasks } => redteam(&ctx, &args, &tasks, stdout),
        Command::Stats {
            tasks,
            ngram,
            pairs,
        } => stats_cmd(&ctx, &args, &tasks, ngram, pairs.as_deref(), stdout),
        Command::Export { trajectories } => export(&ctx, &args, &trajectories, stdout),
    }
}

fn eval(
    ctx: &Context,
    args: &[String],
    tasks_path: &Path,
    pred: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let tasks = tasks_from(tasks_path)?;
    let predictions = load_predictions(pred).map_err(setup)?;
    let db_dir = ctx.db_dir_for(tasks_path)?;
    check_databases(&db_dir, &tasks)?;
    let result = ctx
        .evaluator(&db_dir)
        .evaluate_dataset(&tasks, &predictions)
        .map_err(setup)?;
    ctx.write_manifest("eval", args, &[tasks_path, pred], &[])?;
    ctx.write_report(
        json!({ "report": result.report, "outcomes": result.outcomes }),
        json!({}),
    )?;
    emit(stdout, &summary_table(&result.report))
}

fn agent_config(ctx: &Context, m: &ModelArgs) -> AgentConfig {
    AgentConfig {
        max_turns: m.max_turns,
        gtm: m.gtm,
        prompts: ctx.prompts.clone(),
        temperature: m.temperature.unwrap_or(DEFAULT_TEMPERATURE),
        ..AgentConfig::default()
    }
}

fn actor(ctx: &Context, m: &ModelArgs) -> Result<Option<Box<dyn Backend>>, CliError> {
    match (&m.actor, m.gtm) {
        (Some(spec), true) => ctx.backend(spec).map(Some),
        (None, true) => Err(CliError::Usage("--gtm needs --actor".into())),
        (Some(_), false) => Err(CliError::Usage("--actor is only used with --gtm".into())),
        (None, false) => Ok(None),
    }
}

fn backend_specs(m: &ModelArgs) -> Vec<&str> {
    std::iter::once(m.backend.as_str())
        .chain(m.actor.as_deref())
        .collect()
}

fn agent(
    ctx: &Context,
    args: &[String],
    a: &AgentArgs,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let tasks = tasks_from(&a.tasks)?;
    let db_dir = ctx.db_dir_for(&a.tasks)?;
    check_databases(&db_dir, &tasks)?;
    let thinker = ctx.backend(&a.model.backend)?;
    let actor = actor(ctx, &a.model)?;
    let backends = match &actor {
        Some(act) => Backends::gtm(thinker.as_ref(), act.as_ref()),
        None => Backends::single(thinker.as_ref()),
    };
    let mut cfg = agent_config(ctx, &a.model);
    if a.mode == ModeArg::Toolact {
        cfg.mode = AgentMode::ToolAct;
    }
    cfg.validate(&backends)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let evaluator = ctx.evaluator(&db_dir);
    let sandbox = ctx.sandbox(&db_dir);
    let trajectories: Vec<Trajectory> = ctx.parallelism.map(&tasks, |task| {
        let mut traj = match sandbox.open(task) {
            Ok(mut session) => {
                let t = run_episode(task, &mut session, backends, &cfg);
                session.close();
                match t {
                    Ok(t) => t,
                    Err(e) => failed_trajectory(task, e.to_string()),
                }
            }
            Err(e) => failed_trajectory(task, format!("environment: {e}")),
        };
        traj.passed = Some(match &traj.final_sql {
            Some(sql) => evaluator
                .evaluate_task(task, sql)
                .map(|o| o.passed)
                .unwrap_or(false),
            None => false,
        });
        traj
    });

    let report = SRReport::from_outcomes(
        tasks
            .iter()
            .zip(&trajectories)
            .map(|(t, tr)| (t.category, tr.passed == Some(true))),
    )
    .map_err(setup)?;
    let predictions: Vec<PredictionRecord> = trajectories
        .iter()
        .filter_map(|t| {
            t.final_sql.clone().map(|sql| PredictionRecord {
                task_id: t.task_id.clone(),
                predicted_sql: SqlField::Many(sql),
            })
        })
        .collect();
    let per_task: Vec<Json> = trajectories
        .iter()
        .map(|t| {
            json!({
                "task_id": t.task_id,
                "passed": t.passed,
                "turns": t.steps.len(),
                "tokens_in": t.tokens_in,
                "tokens_out": t.tokens_out,
                "failure": t.failure,
            })
        })
        .collect();
    write_file(&ctx.path("predictions.jsonl"), &to_jsonl(&predictions))?;
    write_file(&ctx.path("trajectories.jsonl"), &to_jsonl(&trajectories))?;
    ctx.write_manifest("agent", args, &[&a.tasks], &backend_specs(&a.model))?;
    let db_ms: u64 = trajectories.iter().map(|t| t.db_ms).sum();
    let wall: u64 = trajectories.iter().map(|t| t.wall_ms).sum();
    ctx.write_report(
        json!({ "report": report, "tasks": per_task }),
        json!({ "db_ms": db_ms, "episode_ms": wall }),
    )?;
    emit(stdout, &summary_table(&report))
}

fn failed_trajectory(task: &TaskInstance, failure: String) -> Trajectory {
    Trajectory {
        task_id: task.task_id.clone(),
        steps: Vec::new(),
        final_sql: None,
        passed: None,
        strategy: StrategyTag::Episode,
        tries_used: 1,
        tokens_in: 0,
        tokens_out: 0,
        wall_ms: 0,
        db_ms: 0,
        failure: Some(failure),
    }
}

fn rewind(
    ctx: &Context,
    args: &[String],
    r: &RewindArgs,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    if r.target == 0 {
        return Err(CliError::Usage("--target must be positive".into()));
    }
    if r.max_iter == 0 {
        return Err(CliError::Usage("--max-iter must be positive".into()));
    }
    let corpus = load_corpus(&r.corpus).map_err(setup)?;
    let exclusion = match &r.exclusion {
        Some(p) => ExclusionList::load(p).map_err(setup)?,
        None => ExclusionList::default(),
    };
    let db_dir = ctx.db_dir_for(&r.corpus)?;
    let missing: Vec<&str> = r
        .dbs
        .iter()
        .filter(|d| !exclusion.excludes_database(d) && !db_present(&db_dir, d))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(setup(format!(
            "databases not found in {}: {}",
            db_dir.display(),
            missing.join(", ")
        )));
    }
    let backend = ctx.backend(&r.backend)?;
    let config = RewindConfig {
        max_iter: r.max_iter,
        target_size: r.target,
        prompts: ctx.prompts.clone(),
        parallelism: ctx.parallelism,
        ..RewindConfig::default()
    };
    let run = Rewind::new(ctx.sandbox(&db_dir), backend.as_ref(), config)
        .build_instances(&corpus, &r.dbs, &exclusion)
        .map_err(setup)?;
    for inst in &run.instances {
        write_file(
            &ctx.path(&format!("gym/{}.json", inst.task.task_id)),
            &pretty(&inst.task),
        )?;
    }
    write_file(&ctx.path("instances.jsonl"), &to_jsonl(&run.instances))?;
    let mut datasets: Vec<&Path> = vec![&r.corpus];
    if let Some(p) = &r.exclusion {
        datasets.push(p);
    }
    ctx.write_manifest("rewind", args, &datasets, &[&r.backend])?;
    let ids: Vec<&str> = run
        .instances
        .iter()
        .map(|i| i.task.task_id.as_str())
        .collect();
    ctx.write_report(json!({ "report": run.report, "instances": ids }), json!({}))?;
    let rejected: usize = run.report.rejects.values().map(Vec::len).sum();
    emit(
        stdout,
        &format!(
            "posts {} (excluded {}), candidates {}, accepted {}, rejected {}{}\n",
            run.report.posts_seen,
            run.report.posts_excluded,
            run.report.candidates,
            run.report.accepted,
            rejected,
            if run.report.stopped_early {
                ", target reached"
            } else {
                ""
            }
        ),
    )
}

fn strategy_kind(s: StrategyArg) -> StrategyKind {
    match s {
        StrategyArg::Baseline => StrategyKind::Baseline,
        StrategyArg::Fplan => StrategyKind::FPlan,
        StrategyArg::Rejection => StrategyKind::Rejection,
        StrategyArg::RejectFplan => StrategyKind::RejectFPlan,
    }
}

fn collect(
    ctx: &Context,
    args: &[String],
    c: &CollectArgs,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let tasks = tasks_from(&c.tasks)?;
    let db_dir = ctx.db_dir_for(&c.tasks)?;
    check_databases(&db_dir, &tasks)?;
    let mut strategy = StrategyConfig::defaults(strategy_kind(c.strategy));
    if let Some(n) = c.max_tries {
        strategy.max_tries = n;
    }
    if let Some(t) = c.model.temperature {
        strategy.temperature = t;
    }
    strategy.early_stop = !c.no_early_stop;
    strategy
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let thinker = ctx.backend(&c.model.backend)?;
    let actor = actor(ctx, &c.model)?;
    let backends = match &actor {
        Some(act) => Backends::gtm(thinker.as_ref(), act.as_ref()),
        None => Backends::single(thinker.as_ref()),
    };
    let cfg = agent_config(ctx, &c.model);
    cfg.validate(&backends)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut collector = Collector::new(ctx.evaluator(&db_dir), backends, cfg)
        .with_parallelism(ctx.parallelism)
        .with_cost_model(ctx.file.cost);
    if let Some(p) = &c.checkpoint {
        collector = collector.with_checkpoint(p);
    }
    let run = collector.collect(&tasks, &strategy).map_err(setup)?;

    let mut buf = Vec::new();
    factory::write_trajectories(&run.trajectories, &mut buf).map_err(setup)?;
    write_file(
        &ctx.path("trajectories.jsonl"),
        &String::from_utf8_lossy(&buf),
    )?;
    buf.clear();
    factory::write_plans(&run.plans, &mut buf).map_err(setup)?;
    write_file(&ctx.path("plans.jsonl"), &String::from_utf8_lossy(&buf))?;
    ctx.write_manifest("collect", args, &[&c.tasks], &backend_specs(&c.model))?;

    let mut payload = serde_json::to_value(&run.report).expect("serializable");
    let mut timing = json!({});
    if let (Json::Object(p), Json::Object(t)) = (&mut payload, &mut timing) {
        for key in ["db_time_ms", "episode_time_ms"] {
            if let Some(v) = p.remove(key) {
                t.insert(key.into(), v);
            }
        }
    }
    ctx.write_report(json!({ "strategy": strategy, "report": payload }), timing)?;
    let r = &run.report;
    emit(
        stdout,
        &format!(
            "{:?}: {}/{} trajectories kept, avg tries {:.2}, tokens {}/{}, est. cost {:.4}\n",
            r.strategy,
            r.successful_traj,
            r.n_instances,
            r.avg_tries,
            r.tokens_in,
            r.tokens_out,
            r.cost_estimate
        ),
    )?;
    if r.resumable {
        return Err(setup(format!(
            "model outage left {} instance(s) unfinished; rerun with the same --checkpoint to resume",
            r.pending.len()
        )));
    }
    Ok(())
}

fn redteam(
    ctx: &Context,
    args: &[String],
    tasks_path: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let tasks = tasks_from(tasks_path)?;
    let db_dir = ctx.db_dir_for(tasks_path)?;
    check_databases(&db_dir, &tasks)?;
    let reports = ctx.evaluator(&db_dir).red_team_dataset(&tasks);
    let valid = reports.iter().filter(|r| r.valid).count();
    ctx.write_manifest("redteam", args, &[tasks_path], &[])?;
    ctx.write_report(
        json!({ "n_tasks": reports.len(), "n_valid": valid, "reports": reports }),
        json!({}),
    )?;
    let mut text = format!("{valid}/{} tasks valid\n", reports.len());
    for r in reports.iter().filter(|r| !r.valid) {
        text.push_str(&format!(
            "  {}: {}\n",
            r.task_id,
            r.reason.as_deref().unwrap_or("invalid")
        ));
    }
    emit(stdout, &text)
}

#[derive(serde::Deserialize)]
struct Pairs {
    x: Vec<f64>,
    y: Vec<f64>,
}

fn stats_cmd(
    ctx: &Context,
    args: &[String],
    tasks_path: &Path,
    ngram: usize,
    pairs: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let tasks = tasks_from(tasks_path)?;
    let pairs_file = pairs;
    let pairs = match pairs_file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| setup(format!("{}: {e}", p.display())))?;
            Some(
                serde_json::from_str::<Pairs>(&text)
                    .map_err(|e| setup(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let report = build_report(
        &tasks,
        ngram,
        pairs.as_ref().map(|p| (p.x.as_slice(), p.y.as_slice())),
        ctx.parallelism,
    )
    .map_err(|e| match e {
        StatsError::ZeroN => CliError::Usage(e.to_string()),
        e => setup(e),
    })?;
    let mut csv =
        String::from("task_id,category,user_query_tokens,issue_sql_tokens,solution_sql_tokens\n");
    for t in &tasks {
        csv.push_str(&format!(
            "{},{:?},{},{},{}\n",
            t.task_id,
            t.category,
            stats::tokens(&t.user_query).len(),
            stats::tokens(&t.issue_sql.join(" ")).len(),
            stats::tokens(&t.solution_sql.join(" ")).len(),
        ));
    }
    write_file(&ctx.path("series.csv"), &csv)?;
    let mut datasets: Vec<&Path> = vec![tasks_path];
    datasets.extend(pairs_file);
    ctx.write_manifest("stats", args, &datasets, &[])?;
    ctx.write_report(
        serde_json::to_value(&report).expect("serializable"),
        json!({}),
    )?;
    let mut text = format!(
        "{} tasks, {}-gram diversity ({} tokens)\n",
        report.n_tasks, report.ngram, report.tokenizer
    );
    for (field, v) in &report.diversity {
        text.push_str(&format!("  {field:<14} {v:.4}\n"));
    }
    if let Some(r) = report.correlation {
        text.push_str(&format!("correlation {r:.4}\n"));
    }
    emit(stdout, &text)
}

fn export(
    ctx: &Context,
    args: &[String],
    path: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let trajectories: Vec<Trajectory> = read_jsonl(path).map_err(setup)?;
    let mut buf = Vec::new();
    let n = export_training(&trajectories, &mut buf).map_err(setup)?;
    write_file(&ctx.path("train.jsonl"), &String::from_utf8_lossy(&buf))?;
    ctx.write_manifest("export", args, &[path], &[])?;
    ctx.write_report(json!({ "records": n }), json!({}))?;
    emit(stdout, &format!("{n} training records\n"))
}
