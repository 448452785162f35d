//! Rendering of (thought, action, observation) history.

use crate::model::Step;

pub const DEFAULT_HISTORY_BUDGET: usize = 16_000;

pub fn render_step(step: &Step) -> String {
    format!(
        "<thought>{}</thought>\n<action>{}</action>\n<observation>{}</observation>",
        step.thought,
        step.action.as_text(),
        step.observation
    )
}

/// History window over a trajectory prefix.
///
/// Steps are rendered oldest first and separated by blank lines. When the
/// text exceeds `char_budget`, whole steps are dropped from the front and a
/// marker line says how many. The newest step is always kept.
pub fn render_history(steps: &[Step], char_budget: usize) -> String {
    let rendered: Vec<String> = steps.iter().map(render_step).collect();
    let mut skip = 0;
    let total = |from: usize| -> usize {
        let parts = &rendered[from..];
        parts.iter().map(|s| s.chars().count()).sum::<usize>() + 2 * parts.len().saturating_sub(1)
    };
    while skip + 1 < rendered.len() && total(skip) > char_budget {
        skip += 1;
    }
    let body = rendered[skip..].join("\n\n");
    if skip == 0 {
        body
    } else {
        format!("[… {skip} earlier step(s) omitted]\n\n{body}")
    }
}
