//! Prompt template bundles.
//!
//! Templates use `{NAME}` placeholders. Substitution is a single pass over
//! the template, so placeholder-like text inside substituted values is never
//! expanded again. Unknown placeholders are left as-is.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read prompt bundle {path}: {message}")]
    Read { path: String, message: String },
}

macro_rules! bundle {
    ($($field:ident),* $(,)?) => {
        /// One complete set of templates.
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct PromptSet {
            pub id: String,
            $(pub $field: String,)*
        }

        impl PromptSet {
            /// The built-in bundle.
            pub fn builtin() -> Self {
                PromptSet {
                    id: "default".to_string(),
                    $($field: include_str!(concat!("../../assets/prompts/default/", stringify!($field), ".txt")).to_string(),)*
                }
            }

            /// Built-in bundle with every `<name>.txt` found in `dir` swapped in.
            pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
                if !dir.is_dir() {
                    return Err(PromptError::Read {
                        path: dir.display().to_string(),
                        message: "not a directory".into(),
                    });
                }
                let mut set = Self::builtin();
                set.id = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string());
                $(
                    let p = dir.join(concat!(stringify!($field), ".txt"));
                    if p.is_file() {
                        set.$field = std::fs::read_to_string(&p).map_err(|e| PromptError::Read {
                            path: p.display().to_string(),
                            message: e.to_string(),
                        })?;
                    }
                )*
                Ok(set)
            }
        }
    };
}

bundle!(
    thought,
    action,
    final_answer,
    direct,
    toolact,
    corrective,
    plan,
    adapt,
    issue,
    coherence,
    user_query,
    consistency,
);

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Fills `{NAME}` placeholders from `values`.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let map: HashMap<&str, &str> = values.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name.and_then(|n| map.get(n).map(|v| (n, *v))) {
            Some((n, v)) => {
                out.push_str(v);
                rest = &after[n.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        let t = "db {db_id}: {history} {unknown} {";
        let s = fill(t, &[("db_id", "shop"), ("history", "{db_id}")]);
        assert_eq!(s, "db shop: {db_id} {unknown} {");
    }

    #[test]
    fn builtin_templates_carry_their_placeholders() {
        let p = PromptSet::builtin();
        for key in ["{db_id}", "{SCHEMA}", "{USER_ISSUE}", "{ISSUE_SQL}", "{history}", "{turn}"] {
            assert!(p.thought.contains(key), "thought lacks {key}");
            assert!(p.action.contains(key), "action lacks {key}");
        }
        assert!(p.thought.trim_end().ends_with("<thought>"));
        assert!(p.action.trim_end().ends_with("<action>"));
        assert!(p.final_answer.contains("{HISTORY}"));
    }

    #[test]
    fn directory_overrides_single_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("final_answer.txt"), "custom {HISTORY}").unwrap();
        let p = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(p.final_answer, "custom {HISTORY}");
        assert_eq!(p.thought, PromptSet::builtin().thought);
        assert!(PromptSet::from_dir(&dir.path().join("missing")).is_err());
    }
}
