//! Backward plan inference.

use std::sync::OnceLock;

use regex::Regex;

use crate::agent::{fill, PromptSet};
use crate::gateway::{complete_parsed, Backend, CompletionRequest, GatewayError, Message, ParseError};
use crate::model::{FunctionalPlan, TaskInstance};

const PLAN_FORMAT: &str = "a numbered list of steps, one per line (\"1. ...\").";

/// Numbered (`1.` / `1)`) or bulleted (`-` / `*`) lines of a reply.
pub fn parse_plan(text: &str, step_budget: usize) -> Result<FunctionalPlan, ParseError> {
    static ITEM: OnceLock<Regex> = OnceLock::new();
    let item = ITEM.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*])\s+(.+?)\s*$").expect("valid regex"));
    let steps: Vec<String> = text
        .lines()
        .filter_map(|l| item.captures(l).map(|c| c[1].to_string()))
        .collect();
    FunctionalPlan::new(steps, step_budget).map_err(|e| ParseError::Invalid {
        message: e.to_string(),
        raw: text.to_string(),
    })
}

/// Outcome of asking the teacher for a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredPlan {
    /// `None` when the reply and its re-ask both failed to parse.
    pub plan: Option<FunctionalPlan>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// Asks the teacher for the steps that turn the issue SQL into the solution.
/// The solution appears only in this prompt, never in rollout context.
pub fn backward_infer_plan(
    task: &TaskInstance,
    schema: &str,
    teacher: &dyn Backend,
    prompts: &PromptSet,
) -> Result<InferredPlan, GatewayError> {
    let issue = task.issue_sql.join(";\n");
    let solution = task.solution_sql.join(";\n");
    let prompt = fill(
        &prompts.plan,
        &[
            ("SCHEMA", schema),
            ("USER_ISSUE", &task.user_query),
            ("ISSUE_SQL", &issue),
            ("SOLUTION_SQL", &solution),
        ],
    );
    let req = CompletionRequest::new(teacher.id(), vec![Message::user(prompt)])
        .with_temperature(0.0)
        .with_context("task_id", &task.task_id)
        .with_context("attempt", 1)
        .with_context("phase", "plan");
    let corrective = fill(&prompts.corrective, &[("format", PLAN_FORMAT)]);
    let p = complete_parsed(teacher, &req, &corrective, |t| {
        parse_plan(t, FunctionalPlan::DEFAULT_STEP_BUDGET)
    })?;
    Ok(InferredPlan {
        plan: p.value.ok(),
        tokens_in: p.tokens_in,
        tokens_out: p.tokens_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_and_bulleted_items() {
        let p = parse_plan("Plan:\n1. add GROUP BY customer\n2) keep SUM\n- order the rows\nthanks", 64).unwrap();
        assert_eq!(p.steps(), ["add GROUP BY customer", "keep SUM", "order the rows"]);
    }

    #[test]
    fn zero_steps_is_a_parse_error() {
        assert!(parse_plan("I would just fix it.", 64).is_err());
        assert!(parse_plan("", 64).is_err());
        assert!(parse_plan("1. one two three", 2).is_err());
    }
}
