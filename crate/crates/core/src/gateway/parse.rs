//! Parsers for tagged model output and fenced SQL answers.

use std::fmt;

use thiserror::Error;

use crate::model::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Thought,
    Action,
}

impl Tag {
    pub fn name(self) -> &'static str {
        match self {
            Tag::Thought => "thought",
            Tag::Action => "action",
        }
    }

    pub fn open(self) -> String {
        format!("<{}>", self.name())
    }

    pub fn close(self) -> String {
        format!("</{}>", self.name())
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing <{tag}> tag")]
    MissingTag { tag: Tag, raw: String },
    #[error("unterminated <{tag}> tag")]
    UnterminatedTag { tag: Tag, raw: String },
    #[error("empty <{tag}> tag")]
    EmptyTag { tag: Tag, raw: String },
    #[error("no ```sql fence found")]
    MissingFence { raw: String },
    #[error("unterminated ```sql fence")]
    UnterminatedFence { raw: String },
    #[error("empty ```sql fence")]
    EmptyFence { raw: String },
    #[error("{message}")]
    Invalid { message: String, raw: String },
}

impl ParseError {
    /// The model output that failed to parse.
    pub fn raw(&self) -> &str {
        match self {
            ParseError::MissingTag { raw, .. }
            | ParseError::UnterminatedTag { raw, .. }
            | ParseError::EmptyTag { raw, .. }
            | ParseError::MissingFence { raw }
            | ParseError::UnterminatedFence { raw }
            | ParseError::EmptyFence { raw }
            | ParseError::Invalid { raw, .. } => raw,
        }
    }
}

/// Byte offset of the first case-insensitive occurrence of `needle` at or
/// after `from`. ASCII lowercasing keeps byte offsets stable.
fn find_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || from + n.len() > h.len() {
        return None;
    }
    (from..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// Content of the first well-formed `<tag>…</tag>` pair, trimmed.
pub fn parse_tagged(text: &str, tag: Tag) -> Result<String, ParseError> {
    let open = tag.open();
    let close = tag.close();
    let Some(start) = find_ci(text, &open, 0) else {
        return Err(ParseError::MissingTag {
            tag,
            raw: text.to_string(),
        });
    };
    let body = start + open.len();
    let Some(end) = find_ci(text, &close, body) else {
        return Err(ParseError::UnterminatedTag {
            tag,
            raw: text.to_string(),
        });
    };
    let inner = text[body..end].trim();
    if inner.is_empty() {
        return Err(ParseError::EmptyTag {
            tag,
            raw: text.to_string(),
        });
    }
    Ok(inner.to_string())
}

/// Like [`parse_tagged`], but also accepts a reply that continues a prompt
/// ending in the opening tag: the reply then carries only the closing tag.
pub fn parse_tagged_prefilled(text: &str, tag: Tag) -> Result<String, ParseError> {
    match parse_tagged(text, tag) {
        Err(ParseError::MissingTag { .. }) => {
            let close = tag.close();
            let end = find_ci(text, &close, 0).ok_or_else(|| ParseError::MissingTag {
                tag,
                raw: text.to_string(),
            })?;
            let inner = text[..end].trim();
            if inner.is_empty() {
                return Err(ParseError::EmptyTag {
                    tag,
                    raw: text.to_string(),
                });
            }
            Ok(inner.to_string())
        }
        other => other,
    }
}

fn to_action(content: String) -> Action {
    if content.eq_ignore_ascii_case(Action::DONE_SENTINEL) {
        Action::Done
    } else {
        Action::Sql(content)
    }
}

/// Parses the `<action>` tag, mapping `[DONE]` to [`Action::Done`].
pub fn parse_action(text: &str) -> Result<Action, ParseError> {
    parse_tagged(text, Tag::Action).map(to_action)
}

/// Action parse for a reply to a prompt that ends in `<action>`.
pub fn parse_action_prefilled(text: &str) -> Result<Action, ParseError> {
    parse_tagged_prefilled(text, Tag::Action).map(to_action)
}

/// Parses a thought/action pair from a reply to a prompt ending in
/// `<thought>`.
pub fn parse_turn(text: &str) -> Result<(String, Action), ParseError> {
    let thought = parse_tagged_prefilled(text, Tag::Thought)?;
    let action = parse_action(text)?;
    Ok((thought, action))
}

/// Trimmed content of the first `<name>…</name>` pair for an arbitrary tag
/// name, or `None`.
pub fn tag_content(text: &str, name: &str) -> Option<String> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = find_ci(text, &open, 0)? + open.len();
    let end = find_ci(text, &close, start)?;
    Some(text[start..end].trim().to_string())
}

/// Body of the first fenced block with the given info string (```json,
/// ```sql …), trimmed. `None` when absent or unterminated.
pub fn fenced_block(text: &str, info: &str) -> Option<String> {
    let open = format!("```{info}");
    let start = find_ci(text, &open, 0)? + open.len();
    let end = text[start..].find("```")? + start;
    Some(text[start..end].trim().to_string())
}

/// Body of the first ```sql fenced block, trimmed.
pub fn extract_sql_fence(text: &str) -> Result<String, ParseError> {
    const OPEN: &str = "```sql";
    let Some(start) = find_ci(text, OPEN, 0) else {
        return Err(ParseError::MissingFence {
            raw: text.to_string(),
        });
    };
    let body = start + OPEN.len();
    let Some(end) = text[body..].find("```").map(|p| body + p) else {
        return Err(ParseError::UnterminatedFence {
            raw: text.to_string(),
        });
    };
    let inner = text[body..end].trim();
    if inner.is_empty() {
        return Err(ParseError::EmptyFence {
            raw: text.to_string(),
        });
    }
    Ok(inner.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_pair_wins_and_is_trimmed() {
        let t = "<thought>check joins</thought><action>SELECT 1</action>";
        assert_eq!(parse_tagged(t, Tag::Action).unwrap(), "SELECT 1");
        assert_eq!(parse_tagged(t, Tag::Thought).unwrap(), "check joins");
        let two = "<action>\n  SELECT 1 \n</action> and <action>SELECT 2</action>";
        assert_eq!(parse_tagged(two, Tag::Action).unwrap(), "SELECT 1");
        assert_eq!(parse_tagged("<ACTION>x</Action>", Tag::Action).unwrap(), "x");
    }

    #[test]
    fn done_sentinel() {
        assert_eq!(parse_action("<action>[DONE]</action>").unwrap(), Action::Done);
        assert_eq!(parse_action("<action> [done] </action>").unwrap(), Action::Done);
        assert_eq!(
            parse_action("<action>SELECT '[DONE]'</action>").unwrap(),
            Action::Sql("SELECT '[DONE]'".into())
        );
    }

    #[test]
    fn errors_carry_raw_text() {
        let e = parse_tagged("no tags here", Tag::Thought).unwrap_err();
        assert!(matches!(e, ParseError::MissingTag { tag: Tag::Thought, .. }));
        assert_eq!(e.raw(), "no tags here");
        let e = parse_tagged("<action>SELECT 1", Tag::Action).unwrap_err();
        assert!(matches!(e, ParseError::UnterminatedTag { .. }));
        let e = parse_tagged("<action>  </action>", Tag::Action).unwrap_err();
        assert!(matches!(e, ParseError::EmptyTag { .. }));
    }

    #[test]
    fn prefilled_replies() {
        let reply = "the totals look off</thought>\n<action>SELECT 2</action>";
        let (t, a) = parse_turn(reply).unwrap();
        assert_eq!(t, "the totals look off");
        assert_eq!(a, Action::Sql("SELECT 2".into()));
        assert_eq!(
            parse_action_prefilled("SELECT 3</action>").unwrap(),
            Action::Sql("SELECT 3".into())
        );
        assert!(parse_action_prefilled("SELECT 3").is_err());
    }

    #[test]
    fn fences() {
        assert_eq!(extract_sql_fence("```sql\nSELECT 1\n```").unwrap(), "SELECT 1");
        assert_eq!(
            extract_sql_fence("Here is the fix:\n```sql\nSELECT a FROM t;\n```\nDone.").unwrap(),
            "SELECT a FROM t;"
        );
        assert_eq!(
            extract_sql_fence("```sql\nSELECT 1\n```\n```sql\nSELECT 2\n```").unwrap(),
            "SELECT 1"
        );
        assert!(matches!(
            extract_sql_fence("SELECT 1"),
            Err(ParseError::MissingFence { .. })
        ));
        assert!(matches!(
            extract_sql_fence("```sql\nSELECT 1"),
            Err(ParseError::UnterminatedFence { .. })
        ));
    }

    proptest! {
        #[test]
        fn parsers_are_total(s in "\\PC{0,80}") {
            let _ = parse_tagged(&s, Tag::Thought);
            let _ = parse_turn(&s);
            let _ = parse_action_prefilled(&s);
            let _ = extract_sql_fence(&s);
        }

        #[test]
        fn wrapped_content_roundtrips(body in "[a-zA-Z0-9 =*,()]{1,40}") {
            prop_assume!(!body.trim().is_empty());
            let text = format!("prose <action>{body}</action> more");
            prop_assert_eq!(parse_tagged(&text, Tag::Action).unwrap(), body.trim());
        }
    }
}
