//! Trajectory collection over a gym dataset.
//!
//! Four strategies: one greedy rollout (Baseline), one greedy rollout
//! guided by a backward-inferred plan (FPlan), sampled retries with early
//! stop (Rejection), and a plan-guided greedy first try followed by sampled
//! retries with the same plan (RejectFPlan). A try is one full episode plus
//! evaluation of its final SQL on a fresh session. At most one passing
//! trajectory is kept per instance.

mod export;
mod plan;

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, AgentConfig, AgentError, Backends};
use crate::evaluator::Evaluator;
use crate::model::{FunctionalPlan, StrategyKind, StrategyTag, TaskInstance, Trajectory};
use crate::par::Parallelism;

pub use export::{chat_record, export_training, ChatRecord, ExportHeader, EXPORT_FORMAT};
pub use plan::{backward_infer_plan, parse_plan, InferredPlan};

pub const SAMPLED_MAX_TRIES: u32 = 5;
pub const SAMPLED_TEMPERATURE: f64 = 0.8;

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trajectory for '{0}' did not pass and cannot be exported")]
    NotPassed(String),
    #[error("invalid strategy: {0}")]
    Strategy(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("i/o: {0}")]
    Io(String),
    #[error("checkpoint {path}:{line}: {message}")]
    Checkpoint {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub max_tries: u32,
    pub temperature: f64,
    pub early_stop: bool,
}

impl StrategyConfig {
    pub fn defaults(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::Baseline | StrategyKind::FPlan => StrategyConfig {
                kind,
                max_tries: 1,
                temperature: 0.0,
                early_stop: true,
            },
            StrategyKind::Rejection | StrategyKind::RejectFPlan => StrategyConfig {
                kind,
                max_tries: SAMPLED_MAX_TRIES,
                temperature: SAMPLED_TEMPERATURE,
                early_stop: true,
            },
        }
    }

    pub fn uses_plan(&self) -> bool {
        matches!(self.kind, StrategyKind::FPlan | StrategyKind::RejectFPlan)
    }

    pub fn validate(&self) -> Result<(), FactoryError> {
        if self.max_tries == 0 {
            return Err(FactoryError::Strategy("max_tries must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(FactoryError::Strategy(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Sampling temperature of a given try (1-based).
    fn temperature_for(&self, try_no: u32) -> f64 {
        if self.kind == StrategyKind::RejectFPlan && try_no == 1 {
            0.0
        } else {
            self.temperature
        }
    }
}

/// Per-million-token prices in one currency unit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
}

impl CostModel {
    pub fn estimate(&self, tokens_in: u64, tokens_out: u64) -> f64 {
        (tokens_in as f64 * self.input_per_mtok + tokens_out as f64 * self.output_per_mtok) / 1e6
    }
}

/// Checkpoint line: everything known about one finished instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub task_id: String,
    pub strategy: StrategyKind,
    pub tries: u32,
    pub kept: Option<Trajectory>,
    #[serde(default)]
    pub plan: Option<Vec<String>>,
    #[serde(default)]
    pub plan_skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup_error: Option<String>,
    pub db_ms: u64,
    pub episode_ms: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Teacher failure that interrupted this instance; such records are not
    /// checkpointed, so a resumed run retries them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outage: Option<String>,
}

impl InstanceRecord {
    fn new(task_id: &str, strategy: StrategyKind) -> Self {
        InstanceRecord {
            task_id: task_id.to_string(),
            strategy,
            tries: 0,
            kept: None,
            plan: None,
            plan_skipped: false,
            setup_error: None,
            db_ms: 0,
            episode_ms: 0,
            tokens_in: 0,
            tokens_out: 0,
            outage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub strategy: StrategyKind,
    pub n_instances: usize,
    pub successful_traj: usize,
    pub total_tries: u64,
    pub avg_tries: f64,
    /// Engine time of the agents' own queries.
    pub db_time_ms: u64,
    /// Whole-instance time: episodes, evaluation and model calls.
    pub episode_time_ms: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub cost_estimate: f64,
    pub plans_skipped: usize,
    pub setup_failures: usize,
    pub resumed: usize,
    /// Set when a teacher outage left instances unfinished.
    pub resumable: bool,
    pub pending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub task_id: String,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionRun {
    pub trajectories: Vec<Trajectory>,
    pub plans: Vec<PlanRecord>,
    pub records: Vec<InstanceRecord>,
    pub report: CollectionReport,
}

pub struct Collector<'a> {
    evaluator: Evaluator,
    teacher: Backends<'a>,
    agent: AgentConfig,
    parallelism: Parallelism,
    cost: CostModel,
    checkpoint: Option<PathBuf>,
}

impl<'a> Collector<'a> {
    pub fn new(evaluator: Evaluator, teacher: Backends<'a>, agent: AgentConfig) -> Self {
        Collector {
            evaluator,
            teacher,
            agent,
            parallelism: Parallelism::auto(),
            cost: CostModel::default(),
            checkpoint: None,
        }
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    pub fn with_cost_model(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    /// Appends finished instances to `path` and skips instances already
    /// recorded there for the same strategy.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    /// Runs the episode under `plan` and checks its final SQL on a fresh
    /// session. The stored trajectory never carries the plan.
    pub fn forward_validate(
        &self,
        task: &TaskInstance,
        plan: Option<&FunctionalPlan>,
        temperature: f64,
        attempt: u32,
    ) -> Result<Trajectory, ForwardRejection> {
        let mut session = self
            .evaluator
            .sandbox()
            .open(task)
            .map_err(|e| ForwardRejection::new("setup", e.to_string(), None))?;
        self.try_once(task, &mut session, plan, temperature, attempt)
    }

    fn try_once(
        &self,
        task: &TaskInstance,
        session: &mut crate::sandbox::Session,
        plan: Option<&FunctionalPlan>,
        temperature: f64,
        attempt: u32,
    ) -> Result<Trajectory, ForwardRejection> {
        let cfg = AgentConfig {
            plan_hint: plan.cloned(),
            temperature,
            attempt,
            ..self.agent.clone()
        };
        let mut traj = run_episode(task, session, self.teacher, &cfg)
            .map_err(|e| ForwardRejection::new("config", e.to_string(), None))?;
        if let Some(f) = traj.failure.clone() {
            let stage = if f.starts_with("backend") { "backend" } else { "episode" };
            return Err(ForwardRejection::new(stage, f, Some(traj)));
        }
        let Some(sql) = traj.final_sql.clone() else {
            return Err(ForwardRejection::new("final", "no final SQL", Some(traj)));
        };
        let passed = self
            .evaluator
            .evaluate_task(task, &sql)
            .map(|o| o.passed)
            .unwrap_or(false);
        traj.passed = Some(passed);
        if passed {
            Ok(traj)
        } else {
            Err(ForwardRejection::new("evaluation", "final SQL failed the tests", Some(traj)))
        }
    }

    fn run_instance(&self, task: &TaskInstance, strategy: &StrategyConfig) -> InstanceRecord {
        let started = Instant::now();
        let mut rec = InstanceRecord::new(&task.task_id, strategy.kind);
        let finish = |mut rec: InstanceRecord| {
            rec.episode_ms = started.elapsed().as_millis() as u64;
            rec
        };
        let mut session = match self.evaluator.sandbox().open(task) {
            Ok(s) => s,
            Err(e) => {
                rec.setup_error = Some(e.to_string());
                return finish(rec);
            }
        };
        let plan = if strategy.uses_plan() {
            let schema = match session.schema_ddl() {
                Ok(s) => s,
                Err(e) => {
                    rec.setup_error = Some(e.to_string());
                    return finish(rec);
                }
            };
            match backward_infer_plan(task, &schema, self.teacher.thinker, &self.agent.prompts) {
                Ok(inferred) => {
                    rec.tokens_in += inferred.tokens_in;
                    rec.tokens_out += inferred.tokens_out;
                    match inferred.plan {
                        Some(p) => {
                            rec.plan = Some(p.steps().to_vec());
                            Some(p)
                        }
                        None => {
                            rec.plan_skipped = true;
                            return finish(rec);
                        }
                    }
                }
                Err(e) => {
                    rec.outage = Some(format!("backend: {e}"));
                    return finish(rec);
                }
            }
        } else {
            None
        };
        for try_no in 1..=strategy.max_tries {
            if try_no > 1 {
                if let Err(e) = session.reset() {
                    rec.setup_error = Some(e.to_string());
                    break;
                }
            }
            rec.tries += 1;
            let outcome = self.try_once(task, &mut session, plan.as_ref(), strategy.temperature_for(try_no), try_no);
            let traj = match &outcome {
                Ok(t) => Some(t),
                Err(r) => r.trajectory.as_ref(),
            };
            if let Some(t) = traj {
                rec.db_ms += t.db_ms;
                rec.tokens_in += t.tokens_in;
                rec.tokens_out += t.tokens_out;
            }
            match outcome {
                Ok(mut t) => {
                    if rec.kept.is_none() {
                        t.strategy = StrategyTag::Collect(strategy.kind);
                        rec.kept = Some(t);
                    }
                    if strategy.early_stop {
                        break;
                    }
                }
                Err(r) if r.stage == "backend" => {
                    rec.outage = Some(r.reason);
                    break;
                }
                Err(r) if r.stage == "config" => {
                    rec.setup_error = Some(r.reason);
                    break;
                }
                Err(_) => {}
            }
        }
        if let Some(k) = rec.kept.as_mut() {
            k.tries_used = rec.tries;
        }
        finish(rec)
    }

    pub fn collect(
        &self,
        dataset: &[TaskInstance],
        strategy: &StrategyConfig,
    ) -> Result<CollectionRun, FactoryError> {
        if dataset.is_empty() {
            return Err(FactoryError::EmptyDataset);
        }
        strategy.validate()?;
        self.agent.validate(&self.teacher)?;
        let mut done: HashMap<String, InstanceRecord> = HashMap::new();
        let sink = match &self.checkpoint {
            Some(path) => {
                for r in load_checkpoint(path)? {
                    if r.strategy == strategy.kind {
                        done.insert(r.task_id.clone(), r);
                    }
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| FactoryError::Io(format!("{}: {e}", path.display())))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        let resumed: HashSet<&str> = dataset
            .iter()
            .filter(|t| done.contains_key(&t.task_id))
            .map(|t| t.task_id.as_str())
            .collect();
        let todo: Vec<&TaskInstance> = dataset.iter().filter(|t| !resumed.contains(t.task_id.as_str())).collect();
        let write_err: Mutex<Option<String>> = Mutex::new(None);
        let fresh = self.parallelism.map(&todo, |task| {
            let rec = self.run_instance(task, strategy);
            if let (Some(sink), None) = (&sink, &rec.outage) {
                let line = serde_json::to_string(&rec).expect("serializable");
                let mut f = sink.lock().expect("checkpoint lock poisoned");
                if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                    *write_err.lock().expect("lock") = Some(e.to_string());
                }
            }
            rec
        });
        if let Some(e) = write_err.into_inner().expect("lock") {
            return Err(FactoryError::Io(e));
        }
        let mut fresh: HashMap<String, InstanceRecord> =
            fresh.into_iter().map(|r| (r.task_id.clone(), r)).collect();
        let records: Vec<InstanceRecord> = dataset
            .iter()
            .filter_map(|t| done.remove(&t.task_id).or_else(|| fresh.remove(&t.task_id)))
            .collect();
        Ok(self.summarize(strategy, records, resumed.len()))
    }

    fn summarize(&self, strategy: &StrategyConfig, records: Vec<InstanceRecord>, resumed: usize) -> CollectionRun {
        let n = records.len();
        let total_tries: u64 = records.iter().map(|r| u64::from(r.tries)).sum();
        let tokens_in = records.iter().map(|r| r.tokens_in).sum();
        let tokens_out = records.iter().map(|r| r.tokens_out).sum();
        let pending: Vec<String> = records
            .iter()
            .filter(|r| r.outage.is_some())
            .map(|r| r.task_id.clone())
            .collect();
        let report = CollectionReport {
            strategy: strategy.kind,
            n_instances: n,
            successful_traj: records.iter().filter(|r| r.kept.is_some()).count(),
            total_tries,
            avg_tries: if n == 0 { 0.0 } else { total_tries as f64 / n as f64 },
            db_time_ms: records.iter().map(|r| r.db_ms).sum(),
            episode_time_ms: records.iter().map(|r| r.episode_ms).sum(),
            tokens_in,
            tokens_out,
            cost_estimate: self.cost.estimate(tokens_in, tokens_out),
            plans_skipped: records.iter().filter(|r| r.plan_skipped).count(),
            setup_failures: records.iter().filter(|r| r.setup_error.is_some()).count(),
            resumed,
            resumable: !pending.is_empty(),
            pending,
        };
        CollectionRun {
            trajectories: records.iter().filter_map(|r| r.kept.clone()).collect(),
            plans: records
                .iter()
                .filter_map(|r| {
                    r.plan.as_ref().map(|steps| PlanRecord {
                        task_id: r.task_id.clone(),
                        steps: steps.clone(),
                    })
                })
                .collect(),
            records,
            report,
        }
    }
}

/// Why a forward rollout was not retained.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRejection {
    /// setup, config, backend, episode, final or evaluation.
    pub stage: &'static str,
    pub reason: String,
    pub trajectory: Option<Trajectory>,
}

impl ForwardRejection {
    fn new(stage: &'static str, reason: impl Into<String>, trajectory: Option<Trajectory>) -> Self {
        ForwardRejection {
            stage,
            reason: reason.into(),
            trajectory,
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<InstanceRecord>, FactoryError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| FactoryError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| FactoryError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FactoryError::Checkpoint {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Trajectory store: one JSON trajectory per line.
pub fn write_trajectories(trajectories: &[Trajectory], out: &mut dyn Write) -> Result<(), FactoryError> {
    write_lines(trajectories, out)
}

/// Plan sidecar: one `{task_id, steps}` per line.
pub fn write_plans(plans: &[PlanRecord], out: &mut dyn Write) -> Result<(), FactoryError> {
    write_lines(plans, out)
}

fn write_lines<T: Serialize>(items: &[T], out: &mut dyn Write) -> Result<(), FactoryError> {
    for item in items {
        writeln!(out, "{}", serde_json::to_string(item).expect("serializable"))
            .map_err(|e| FactoryError::Io(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
