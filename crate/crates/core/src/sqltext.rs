//! Dialect-tolerant lexical helpers over raw SQL text.
//!
//! Nothing here parses SQL grammar. The scanner only knows enough to tell
//! code apart from string literals, quoted identifiers and comments, which
//! is what statement splitting and constraint matching need.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Code,
    Quoted,
    Comment,
}

/// Splits `sql` into (kind, text) pieces. Unterminated literals or comments
/// run to the end of input.
fn scan(sql: &str) -> Vec<(Piece, &str)> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut code_start = 0;
    let n = bytes.len();

    fn flush<'a>(out: &mut Vec<(Piece, &'a str)>, sql: &'a str, from: usize, to: usize) {
        if to > from {
            out.push((Piece::Code, &sql[from..to]));
        }
    }

    while i < n {
        let c = bytes[i];
        let start = i;
        let piece_end = match c {
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                let end = sql[i..].find('\n').map_or(n, |p| i + p);
                Some((Piece::Comment, end))
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                // Postgres allows nested block comments.
                let mut depth = 1;
                let mut j = i + 2;
                while j < n && depth > 0 {
                    if bytes[j] == b'/' && bytes.get(j + 1) == Some(&b'*') {
                        depth += 1;
                        j += 2;
                    } else if bytes[j] == b'*' && bytes.get(j + 1) == Some(&b'/') {
                        depth -= 1;
                        j += 2;
                    } else {
                        j += 1;
                    }
                }
                Some((Piece::Comment, j.min(n)))
            }
            b'\'' => {
                let backslash_escapes = i > 0
                    && matches!(bytes[i - 1], b'E' | b'e')
                    && (i < 2 || !bytes[i - 2].is_ascii_alphanumeric());
                Some((Piece::Quoted, quoted_end(bytes, i, b'\'', backslash_escapes)))
            }
            b'"' => Some((Piece::Quoted, quoted_end(bytes, i, b'"', false))),
            b'`' => Some((Piece::Quoted, quoted_end(bytes, i, b'`', false))),
            b'[' => {
                let end = sql[i..].find(']').map_or(n, |p| i + p + 1);
                Some((Piece::Quoted, end))
            }
            b'$' => dollar_tag(&sql[i..]).map(|tag| {
                let body = i + tag.len();
                let end = sql[body..].find(tag).map_or(n, |p| body + p + tag.len());
                (Piece::Quoted, end)
            }),
            _ => None,
        };
        match piece_end {
            Some((kind, end)) => {
                flush(&mut out, sql, code_start, start);
                out.push((kind, &sql[start..end]));
                i = end;
                code_start = end;
            }
            None => i += 1,
        }
    }
    flush(&mut out, sql, code_start, n);
    out
}

fn quoted_end(bytes: &[u8], open: usize, quote: u8, backslash_escapes: bool) -> usize {
    let mut j = open + 1;
    while j < bytes.len() {
        let b = bytes[j];
        if backslash_escapes && b == b'\\' {
            j += 2;
            continue;
        }
        if b == quote {
            // doubled quote is an escaped quote
            if bytes.get(j + 1) == Some(&quote) {
                j += 2;
                continue;
            }
            return j + 1;
        }
        j += 1;
    }
    bytes.len()
}

/// Recognizes a Postgres dollar-quote opener such as `$$` or `$body$`.
fn dollar_tag(s: &str) -> Option<&str> {
    let rest = &s[1..];
    let close = rest.find('$')?;
    let tag = &rest[..close];
    if tag.is_empty()
        || (tag.chars().all(|c| c.is_alphanumeric() || c == '_')
            && !tag.starts_with(|c: char| c.is_ascii_digit()))
    {
        Some(&s[..close + 2])
    } else {
        None
    }
}

fn words(code: &str) -> impl Iterator<Item = &str> {
    code.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
}

/// Splits a script into statements on top-level semicolons.
///
/// Semicolons inside literals, quoted identifiers, comments and
/// `CREATE TRIGGER ... BEGIN ... END` bodies do not split. Statements that
/// contain nothing but whitespace and comments are dropped.
pub fn split_statements(sql: &str) -> Vec<String> {
    let mut statements = Vec::new();
    let mut current = String::new();
    let mut has_code = false;
    let mut is_trigger = false;
    let mut block_depth: i32 = 0;
    let mut leading_words: Vec<String> = Vec::new();

    for (kind, text) in scan(sql) {
        if kind != Piece::Code {
            current.push_str(text);
            if kind == Piece::Quoted {
                has_code = true;
            }
            continue;
        }
        let mut rest = text;
        while !rest.is_empty() {
            let cut = rest.find(';');
            let chunk = &rest[..cut.unwrap_or(rest.len())];
            for w in words(chunk) {
                let lw = w.to_ascii_lowercase();
                if leading_words.len() < 6 {
                    leading_words.push(lw.clone());
                    is_trigger = leading_words.first().is_some_and(|f| f == "create")
                        && leading_words.iter().any(|w| w == "trigger");
                }
                if is_trigger {
                    match lw.as_str() {
                        "begin" | "case" => block_depth += 1,
                        "end" => block_depth -= 1,
                        _ => {}
                    }
                }
            }
            if chunk.chars().any(|c| !c.is_whitespace()) {
                has_code = true;
            }
            current.push_str(chunk);
            match cut {
                Some(pos) if !(is_trigger && block_depth > 0) => {
                    if has_code {
                        statements.push(current.trim().to_string());
                    }
                    current.clear();
                    has_code = false;
                    is_trigger = false;
                    block_depth = 0;
                    leading_words.clear();
                    rest = &rest[pos + 1..];
                }
                Some(pos) => {
                    current.push(';');
                    rest = &rest[pos + 1..];
                }
                None => rest = "",
            }
        }
    }
    if has_code {
        statements.push(current.trim().to_string());
    }
    statements
}

/// Number of statements `sql` would split into.
pub fn statement_count(sql: &str) -> usize {
    split_statements(sql).len()
}

/// Replaces every comment with a single space, leaving literals intact.
pub fn strip_comments(sql: &str) -> String {
    scan(sql)
        .into_iter()
        .map(|(kind, text)| if kind == Piece::Comment { " " } else { text })
        .collect()
}

/// Comment-free, lower-cased, whitespace-collapsed form used for
/// constraint matching.
pub fn normalize_for_match(sql: &str) -> String {
    let stripped = strip_comments(sql).to_lowercase();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True when the first keyword of the statement is one that returns rows.
pub fn looks_like_query(sql: &str) -> bool {
    let stripped = strip_comments(sql);
    let first = words(&stripped).next().map(str::to_ascii_lowercase);
    matches!(
        first.as_deref(),
        Some("select" | "with" | "values" | "table" | "show" | "explain" | "pragma")
    )
}
