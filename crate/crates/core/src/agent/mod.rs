//! SQL-acting ReAct agent, the tool-restricted baseline, and final-answer
//! synthesis.

mod history;
mod prompts;

use std::sync::Arc;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    complete_parsed, extract_sql_fence, parse_action_prefilled, parse_tagged,
    parse_tagged_prefilled, parse_turn, Backend, CompletionRequest, GatewayError, Message,
    ParseError, Tag, MALFORMED_OBSERVATION,
};
use crate::model::{Action, FunctionalPlan, Step, StrategyTag, TaskInstance, Trajectory};
use crate::sandbox::{ExecLimits, Session};
use crate::sqltext;

pub use history::{render_history, render_step, DEFAULT_HISTORY_BUDGET};
pub use prompts::{fill, PromptError, PromptSet};

pub const DEFAULT_MAX_TURNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentMode {
    SqlAct,
    ToolAct,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub max_turns: usize,
    pub mode: AgentMode,
    pub gtm: bool,
    pub plan_hint: Option<FunctionalPlan>,
    pub prompts: Arc<PromptSet>,
    /// Per-action limits; the session's own limits when unset.
    pub limits: Option<ExecLimits>,
    pub history_budget: usize,
    pub temperature: f64,
    /// Try number, passed to backends as request context.
    pub attempt: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_turns: DEFAULT_MAX_TURNS,
            mode: AgentMode::SqlAct,
            gtm: false,
            plan_hint: None,
            prompts: Arc::new(PromptSet::builtin()),
            limits: None,
            history_budget: DEFAULT_HISTORY_BUDGET,
            temperature: crate::gateway::DEFAULT_TEMPERATURE,
            attempt: 1,
        }
    }
}

/// Models driving an episode. `thinker` is the only model unless GTM is on,
/// in which case it supplies thoughts and `actor` supplies actions.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub thinker: &'a dyn Backend,
    pub actor: Option<&'a dyn Backend>,
}

impl<'a> Backends<'a> {
    pub fn single(backend: &'a dyn Backend) -> Self {
        Backends {
            thinker: backend,
            actor: None,
        }
    }

    pub fn gtm(thinker: &'a dyn Backend, actor: &'a dyn Backend) -> Self {
        Backends {
            thinker,
            actor: Some(actor),
        }
    }

    /// Model that writes SQL: the actor under GTM, otherwise the thinker.
    fn sql_writer(&self, gtm: bool) -> &'a dyn Backend {
        match (gtm, self.actor) {
            (true, Some(a)) => a,
            _ => self.thinker,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
}

impl AgentConfig {
    pub fn validate(&self, backends: &Backends<'_>) -> Result<(), AgentError> {
        if self.max_turns == 0 {
            return Err(AgentError::InvalidConfig("max_turns must be positive".into()));
        }
        if self.gtm && backends.actor.is_none() {
            return Err(AgentError::InvalidConfig(
                "GTM needs both a thought model and an action model".into(),
            ));
        }
        if self.gtm && self.mode == AgentMode::ToolAct {
            return Err(AgentError::InvalidConfig("GTM applies to SqlAct only".into()));
        }
        Ok(())
    }
}

/// Task text shared by every prompt of an episode. Never includes the
/// solution.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub task_id: String,
    pub db_id: String,
    pub dialect: String,
    pub schema: String,
    pub user_issue: String,
    pub issue_sql: Vec<String>,
}

impl EpisodeContext {
    pub fn new(task: &TaskInstance, schema: String) -> Self {
        EpisodeContext {
            task_id: task.task_id.clone(),
            db_id: task.db_ref.clone(),
            dialect: task.dialect.display_name().to_string(),
            schema,
            user_issue: task.user_query.clone(),
            issue_sql: task.issue_sql.clone(),
        }
    }

    fn issue_text(&self) -> String {
        self.issue_sql.join(";\n\n")
    }

    fn issue_list(&self) -> String {
        serde_json::to_string(&self.issue_sql).unwrap_or_default()
    }
}

fn plan_block(plan: Option<&FunctionalPlan>) -> String {
    match plan {
        Some(p) => format!("\nPlan\n{}\n", p.render()),
        None => String::new(),
    }
}

fn request(
    backend: &dyn Backend,
    prompt: String,
    phase: &str,
    ctx: &EpisodeContext,
    cfg: &AgentConfig,
    turn: usize,
) -> CompletionRequest {
    CompletionRequest::new(backend.id(), vec![Message::user(prompt)])
        .with_temperature(cfg.temperature)
        .with_context("task_id", &ctx.task_id)
        .with_context("attempt", cfg.attempt)
        .with_context("phase", phase)
        .with_context("turn", turn)
}

fn corrective(cfg: &AgentConfig, format: &str) -> String {
    fill(&cfg.prompts.corrective, &[("format", format)])
}

const TURN_FORMAT: &str = "<thought>[Your Thought]</thought> followed by <action>[Executable SQL]</action> (or <action>[DONE]</action>).";
const ACTION_FORMAT: &str = "<action>[Executable SQL]</action> (or <action>[DONE]</action>).";
const FENCE_FORMAT: &str = "a single ```sql block holding the final SQL.";

/// One model turn before execution.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub thought: String,
    pub action: Action,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

fn malformed_action(raw: &[String]) -> Action {
    let last = raw.last().map(|s| s.trim()).unwrap_or_default();
    Action::Malformed(if last.is_empty() {
        "(empty reply)".to_string()
    } else {
        last.to_string()
    })
}

fn thought_or_placeholder(t: Option<String>) -> String {
    t.filter(|t| !t.trim().is_empty())
        .unwrap_or_else(|| "(unparsed)".to_string())
}

fn fill_turn_prompt(
    template: &str,
    ctx: &EpisodeContext,
    cfg: &AgentConfig,
    history: &str,
    turns_left: usize,
) -> String {
    let turn = turns_left.to_string();
    let plan = plan_block(cfg.plan_hint.as_ref());
    let issue = ctx.issue_text();
    fill(
        template,
        &[
            ("db_id", &ctx.db_id),
            ("dialect", &ctx.dialect),
            ("SCHEMA", &ctx.schema),
            ("USER_ISSUE", &ctx.user_issue),
            ("ISSUE_SQL", &issue),
            ("plan", &plan),
            ("turn", &turn),
            ("history", history),
        ],
    )
}

/// Single-model turn: thought and action from one reply.
pub fn react_step(
    ctx: &EpisodeContext,
    history: &str,
    turns_left: usize,
    backend: &dyn Backend,
    cfg: &AgentConfig,
) -> Result<TurnOutput, GatewayError> {
    let prompt = fill_turn_prompt(&cfg.prompts.thought, ctx, cfg, history, turns_left);
    let req = request(backend, prompt, "thought", ctx, cfg, cfg.max_turns - turns_left + 1);
    let parsed = complete_parsed(backend, &req, &corrective(cfg, TURN_FORMAT), parse_turn)?;
    let (thought, action) = match parsed.value {
        Ok(pair) => pair,
        Err(_) => {
            let thought = parsed
                .raw
                .iter()
                .rev()
                .find_map(|r| parse_tagged_prefilled(r, Tag::Thought).ok());
            (thought_or_placeholder(thought), malformed_action(&parsed.raw))
        }
    };
    Ok(TurnOutput {
        thought,
        action,
        tokens_in: parsed.tokens_in,
        tokens_out: parsed.tokens_out,
    })
}

/// GTM turn: the thinker's thought is kept and its action discarded; the
/// actor writes the action from the history plus that thought.
pub fn gtm_step(
    ctx: &EpisodeContext,
    history: &str,
    turns_left: usize,
    thinker: &dyn Backend,
    actor: &dyn Backend,
    cfg: &AgentConfig,
) -> Result<TurnOutput, GatewayError> {
    let turn = cfg.max_turns - turns_left + 1;
    let prompt = fill_turn_prompt(&cfg.prompts.thought, ctx, cfg, history, turns_left);
    let req = request(thinker, prompt, "thought", ctx, cfg, turn);
    let parsed = complete_parsed(thinker, &req, &corrective(cfg, TURN_FORMAT), |t| {
        parse_tagged_prefilled(t, Tag::Thought)
    })?;
    let (mut tokens_in, mut tokens_out) = (parsed.tokens_in, parsed.tokens_out);
    let thought = match parsed.value {
        Ok(t) => t,
        Err(_) => {
            return Ok(TurnOutput {
                thought: thought_or_placeholder(None),
                action: malformed_action(&parsed.raw),
                tokens_in,
                tokens_out,
            })
        }
    };
    let with_thought = if history.is_empty() {
        format!("<thought>{thought}</thought>")
    } else {
        format!("{history}\n\n<thought>{thought}</thought>")
    };
    let prompt = fill_turn_prompt(&cfg.prompts.action, ctx, cfg, &with_thought, turns_left);
    let req = request(actor, prompt, "action", ctx, cfg, turn);
    let parsed = complete_parsed(
        actor,
        &req,
        &corrective(cfg, ACTION_FORMAT),
        parse_action_prefilled,
    )?;
    tokens_in += parsed.tokens_in;
    tokens_out += parsed.tokens_out;
    let action = parsed
        .value
        .unwrap_or_else(|_| malformed_action(&parsed.raw));
    Ok(TurnOutput {
        thought,
        action,
        tokens_in,
        tokens_out,
    })
}

/// Result of final-answer synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalAnswer {
    pub sql: Option<Vec<String>>,
    pub asks: u32,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// Asks for the final SQL given the full react chain. The fenced body is
/// split into statements.
pub fn synthesize_final(
    ctx: &EpisodeContext,
    steps: &[Step],
    backend: &dyn Backend,
    cfg: &AgentConfig,
) -> Result<FinalAnswer, GatewayError> {
    let history = render_history(steps, cfg.history_budget);
    let issue = ctx.issue_list();
    let prompt = fill(
        &cfg.prompts.final_answer,
        &[
            ("dialect", &ctx.dialect),
            ("SCHEMA", &ctx.schema),
            ("USER_ISSUE", &ctx.user_issue),
            ("ISSUE_SQL", &issue),
            ("HISTORY", &history),
        ],
    );
    let req = request(backend, prompt, "final", ctx, cfg, steps.len());
    let parsed = complete_parsed(backend, &req, &corrective(cfg, FENCE_FORMAT), parse_fenced_statements)?;
    Ok(FinalAnswer {
        sql: parsed.value.ok(),
        asks: parsed.asks,
        tokens_in: parsed.tokens_in,
        tokens_out: parsed.tokens_out,
    })
}

/// Fenced SQL split into its statements.
pub fn parse_fenced_statements(text: &str) -> Result<Vec<String>, ParseError> {
    let body = extract_sql_fence(text)?;
    let stmts = sqltext::split_statements(&body);
    if stmts.is_empty() {
        return Err(ParseError::EmptyFence {
            raw: text.to_string(),
        });
    }
    Ok(stmts)
}

/// Single-shot fix without interaction.
pub fn direct_fix(
    ctx: &EpisodeContext,
    backend: &dyn Backend,
    cfg: &AgentConfig,
) -> Result<FinalAnswer, GatewayError> {
    let issue = ctx.issue_text();
    let prompt = fill(
        &cfg.prompts.direct,
        &[
            ("SCHEMA", &ctx.schema),
            ("USER_ISSUE", &ctx.user_issue),
            ("ISSUE_SQL", &issue),
        ],
    );
    let req = request(backend, prompt, "direct", ctx, cfg, 1);
    let parsed = complete_parsed(backend, &req, &corrective(cfg, FENCE_FORMAT), parse_fenced_statements)?;
    Ok(FinalAnswer {
        sql: parsed.value.ok(),
        asks: parsed.asks,
        tokens_in: parsed.tokens_in,
        tokens_out: parsed.tokens_out,
    })
}

fn limits_for(session: &Session, cfg: &AgentConfig) -> ExecLimits {
    cfg.limits.unwrap_or_else(|| session.limits())
}

fn start(task: &TaskInstance, session: &mut Session, tag: StrategyTag) -> (Trajectory, Option<EpisodeContext>) {
    let mut traj = Trajectory::new(&task.task_id, tag);
    match session.schema_ddl() {
        Ok(schema) => (traj, Some(EpisodeContext::new(task, schema))),
        Err(e) => {
            traj.failure = Some(format!("environment: {e}"));
            (traj, None)
        }
    }
}

/// Runs a SQL-Act episode on an open session, then synthesizes the final
/// SQL. Backend failures end the episode early with `failure` set and the
/// steps taken so far retained.
pub fn run_episode(
    task: &TaskInstance,
    session: &mut Session,
    backends: Backends<'_>,
    cfg: &AgentConfig,
) -> Result<Trajectory, AgentError> {
    cfg.validate(&backends)?;
    if cfg.mode == AgentMode::ToolAct {
        return run_toolact_episode(task, session, backends.thinker, cfg);
    }
    let started = Instant::now();
    let (mut traj, ctx) = start(task, session, StrategyTag::Episode);
    let Some(ctx) = ctx else {
        return Ok(traj);
    };
    let limits = limits_for(session, cfg);
    for i in 1..=cfg.max_turns {
        let turns_left = cfg.max_turns - i + 1;
        let history = render_history(&traj.steps, cfg.history_budget);
        let turn = match (cfg.gtm, backends.actor) {
            (true, Some(actor)) => gtm_step(&ctx, &history, turns_left, backends.thinker, actor, cfg),
            _ => react_step(&ctx, &history, turns_left, backends.thinker, cfg),
        };
        let turn = match turn {
            Ok(t) => t,
            Err(e) => {
                traj.failure = Some(format!("backend: {e}"));
                break;
            }
        };
        traj.tokens_in += turn.tokens_in;
        traj.tokens_out += turn.tokens_out;
        let observation = match &turn.action {
            Action::Done => String::new(),
            Action::Malformed(_) => MALFORMED_OBSERVATION.to_string(),
            Action::Sql(sql) => match session.execute_with(sql, &limits) {
                Ok(o) => {
                    traj.db_ms += o.elapsed_ms;
                    o.render(limits.char_cap)
                }
                Err(e) => {
                    traj.failure = Some(format!("environment: {e}"));
                    format!("Error: {e}")
                }
            },
        };
        let done = turn.action.is_done();
        traj.steps.push(Step {
            thought: turn.thought,
            action: turn.action,
            observation,
        });
        if done || traj.failure.is_some() {
            break;
        }
    }
    if traj.failure.is_none() {
        match synthesize_final(&ctx, &traj.steps, backends.sql_writer(cfg.gtm), cfg) {
            Ok(fin) => {
                traj.tokens_in += fin.tokens_in;
                traj.tokens_out += fin.tokens_out;
                traj.final_sql = fin.sql;
            }
            Err(e) => traj.failure = Some(format!("backend: {e}")),
        }
    }
    traj.wall_ms = started.elapsed().as_millis() as u64;
    Ok(traj)
}

/// Tool invocation of the restricted baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolCall {
    SchemaInspection(String),
    SampleData(String),
    SolutionQuery(String),
}

pub fn parse_tool_call(text: &str) -> Option<ToolCall> {
    use std::sync::OnceLock;
    static CALL: OnceLock<Regex> = OnceLock::new();
    static SOLUTION: OnceLock<Regex> = OnceLock::new();
    let call = CALL.get_or_init(|| {
        Regex::new(r"(?is)^\s*(schema\s*inspection|sample\s*data)\s*\(\s*([^)]*?)\s*\)\s*$")
            .expect("valid regex")
    });
    let solution = SOLUTION.get_or_init(|| {
        Regex::new(r"(?is)^\s*solution\s*query\s*:\s*(.+?)\s*$").expect("valid regex")
    });
    if let Some(c) = solution.captures(text) {
        let body = c[1].trim();
        let sql = extract_sql_fence(body).unwrap_or_else(|_| body.to_string());
        return Some(ToolCall::SolutionQuery(sql));
    }
    let c = call.captures(text)?;
    let table = c[2].trim_matches(|ch| matches!(ch, '"' | '`' | '\'' | '[' | ']')).to_string();
    if table.is_empty() {
        return None;
    }
    let name = c[1].to_ascii_lowercase();
    Some(if name.starts_with("schema") {
        ToolCall::SchemaInspection(table)
    } else {
        ToolCall::SampleData(table)
    })
}

pub const UNKNOWN_TOOL: &str =
    "unknown tool: use Schema Inspection(table), Sample Data(table) or Solution Query: <sql>";

/// Runs the tool-restricted baseline. The episode ends when a solution is
/// submitted or the turn budget runs out; no synthesis step follows.
pub fn run_toolact_episode(
    task: &TaskInstance,
    session: &mut Session,
    backend: &dyn Backend,
    cfg: &AgentConfig,
) -> Result<Trajectory, AgentError> {
    if cfg.max_turns == 0 {
        return Err(AgentError::InvalidConfig("max_turns must be positive".into()));
    }
    let started = Instant::now();
    let (mut traj, ctx) = start(task, session, StrategyTag::ToolAct);
    let Some(ctx) = ctx else {
        return Ok(traj);
    };
    let limits = limits_for(session, cfg);
    for i in 1..=cfg.max_turns {
        let turns_left = cfg.max_turns - i + 1;
        let history = render_history(&traj.steps, cfg.history_budget);
        let prompt = fill_turn_prompt(&cfg.prompts.toolact, &ctx, cfg, &history, turns_left);
        let req = request(backend, prompt, "toolact", &ctx, cfg, i);
        let parsed = match complete_parsed(backend, &req, &corrective(cfg, TURN_FORMAT), |t| {
            let thought = parse_tagged_prefilled(t, Tag::Thought)?;
            let action = parse_tagged(t, Tag::Action)?;
            Ok((thought, action))
        }) {
            Ok(p) => p,
            Err(e) => {
                traj.failure = Some(format!("backend: {e}"));
                break;
            }
        };
        traj.tokens_in += parsed.tokens_in;
        traj.tokens_out += parsed.tokens_out;
        let (thought, call_text) = match parsed.value {
            Ok(pair) => pair,
            Err(_) => {
                traj.steps.push(Step {
                    thought: thought_or_placeholder(None),
                    action: malformed_action(&parsed.raw),
                    observation: MALFORMED_OBSERVATION.to_string(),
                });
                continue;
            }
        };
        let mut finished = false;
        let observation = match parse_tool_call(&call_text) {
            None => UNKNOWN_TOOL.to_string(),
            Some(ToolCall::SolutionQuery(sql)) => {
                let stmts = sqltext::split_statements(&sql);
                finished = true;
                if stmts.is_empty() {
                    "Error: empty solution".to_string()
                } else {
                    traj.final_sql = Some(stmts);
                    "solution recorded".to_string()
                }
            }
            Some(ToolCall::SchemaInspection(table)) => match session.table_ddl(&table) {
                Ok(Some(ddl)) => ddl,
                Ok(None) => format!("Error: no table named '{table}'"),
                Err(e) => format!("Error: {e}"),
            },
            Some(ToolCall::SampleData(table)) => {
                let preview = session
                    .quote_ident(&table)
                    .and_then(|q| session.execute_with(&format!("SELECT * FROM {q}"), &limits));
                match preview {
                    Ok(o) => {
                        traj.db_ms += o.elapsed_ms;
                        o.render(limits.char_cap)
                    }
                    Err(e) => format!("Error: {e}"),
                }
            }
        };
        traj.steps.push(Step {
            thought,
            action: Action::Sql(call_text),
            observation,
        });
        if finished {
            break;
        }
    }
    traj.wall_ms = started.elapsed().as_millis() as u64;
    Ok(traj)
}
