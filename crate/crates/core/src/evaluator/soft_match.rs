//! Result-set equivalence tolerant of row order and small numeric drift.
//!
//! Unordered comparison treats both sides as multisets of rows. Because
//! tolerant equality is not transitive, a sorted positional pass is only a
//! fast path; when it fails the rows are paired by maximum bipartite
//! matching, so a valid pairing is never missed.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{Row, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub ordered: bool,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            ordered: false,
            abs_tol: 1e-6,
            rel_tol: 1e-9,
        }
    }
}

impl MatchOptions {
    pub fn ordered(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{side} rows are ragged: row {row} has {found} cells, expected {expected}")]
pub struct RaggedInput {
    pub side: &'static str,
    pub row: usize,
    pub found: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub matched: bool,
    /// Why the sets differ; `None` when they match.
    pub mismatch: Option<String>,
}

impl MatchResult {
    fn ok() -> Self {
        MatchResult {
            matched: true,
            mismatch: None,
        }
    }

    fn fail(why: String) -> Self {
        MatchResult {
            matched: false,
            mismatch: Some(why),
        }
    }
}

/// Numeric cells pass when within `abs_tol` absolutely or `rel_tol`
/// relatively; text and blobs compare exactly; null equals only null.
pub fn cells_equal(a: &Value, b: &Value, opts: &MatchOptions) -> bool {
    match (a, b) {
        (Value::Null, Value::Null) => true,
        (Value::Null, _) | (_, Value::Null) => false,
        (Value::Text(x), Value::Text(y)) => x == y,
        (Value::Blob { blob: x }, Value::Blob { blob: y }) => x == y,
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => {
                if let (Value::Integer(i), Value::Integer(j)) = (a, b) {
                    if i == j {
                        return true;
                    }
                }
                if x.is_nan() || y.is_nan() {
                    return x.is_nan() && y.is_nan();
                }
                if x == y {
                    return true;
                }
                let diff = (x - y).abs();
                diff <= opts.abs_tol || diff <= opts.rel_tol * x.abs().max(y.abs())
            }
            _ => false,
        },
    }
}

fn rows_equal(a: &Row, b: &Row, opts: &MatchOptions) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| cells_equal(x, y, opts))
}

fn cell_order(a: &Value, b: &Value) -> Ordering {
    a.type_rank().cmp(&b.type_rank()).then_with(|| match (a, b) {
        (Value::Text(x), Value::Text(y)) => x.cmp(y),
        (Value::Blob { blob: x }, Value::Blob { blob: y }) => x.cmp(y),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => Ordering::Equal,
        },
    })
}

fn row_order(a: &Row, b: &Row) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cell_order(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn check_rectangular(rows: &[Row], side: &'static str) -> Result<Option<usize>, RaggedInput> {
    let Some(first) = rows.first() else {
        return Ok(None);
    };
    let width = first.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(RaggedInput {
                side,
                row: i,
                found: r.len(),
                expected: width,
            });
        }
    }
    Ok(Some(width))
}

fn fmt_row(r: &Row) -> String {
    let cells: Vec<String> = r.iter().map(|v| match v {
        Value::Text(s) => format!("'{s}'"),
        other => other.to_string(),
    }).collect();
    format!("[{}]", cells.join(", "))
}

/// Compares a predicted result set against a reference one.
pub fn soft_result_match(
    pred: &[Row],
    reference: &[Row],
    opts: &MatchOptions,
) -> Result<MatchResult, RaggedInput> {
    let pw = check_rectangular(pred, "predicted")?;
    let rw = check_rectangular(reference, "reference")?;
    if let (Some(p), Some(r)) = (pw, rw) {
        if p != r {
            return Ok(MatchResult::fail(format!(
                "column count differs: predicted {p}, reference {r}"
            )));
        }
    }
    if pred.len() != reference.len() {
        return Ok(MatchResult::fail(format!(
            "row count differs: predicted {}, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    if opts.ordered {
        for (i, (p, r)) in pred.iter().zip(reference).enumerate() {
            if !rows_equal(p, r, opts) {
                return Ok(MatchResult::fail(format!(
                    "row {i} differs: predicted {}, reference {}",
                    fmt_row(p),
                    fmt_row(r)
                )));
            }
        }
        return Ok(MatchResult::ok());
    }

    let mut ps: Vec<&Row> = pred.iter().collect();
    let mut rs: Vec<&Row> = reference.iter().collect();
    ps.sort_by(|a, b| row_order(a, b));
    rs.sort_by(|a, b| row_order(a, b));
    if ps.iter().zip(&rs).all(|(p, r)| rows_equal(p, r, opts)) {
        return Ok(MatchResult::ok());
    }
    match unmatched_row(&ps, &rs, opts) {
        None => Ok(MatchResult::ok()),
        Some(i) => Ok(MatchResult::fail(format!(
            "predicted row {} has no counterpart in the reference",
            fmt_row(ps[i])
        ))),
    }
}

/// Kuhn's augmenting-path matching. Returns a predicted row left unmatched
/// by a maximum matching, if any.
fn unmatched_row(ps: &[&Row], rs: &[&Row], opts: &MatchOptions) -> Option<usize> {
    let adj: Vec<Vec<usize>> = ps
        .iter()
        .map(|p| {
            rs.iter()
                .enumerate()
                .filter(|(_, r)| rows_equal(p, r, opts))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    if let Some(i) = adj.iter().position(Vec::is_empty) {
        return Some(i);
    }
    let mut owner: Vec<Option<usize>> = vec![None; rs.len()];
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    for i in 0..ps.len() {
        let mut seen = vec![false; rs.len()];
        if !augment(i, &adj, &mut seen, &mut owner) {
            return Some(i);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(cells: &[Value]) -> Row {
        cells.to_vec()
    }

    fn i(v: i64) -> Value {
        Value::Integer(v)
    }

    fn t(s: &str) -> Value {
        Value::Text(s.into())
    }

    #[test]
    fn unordered_multiset_equality() {
        let a = vec![r(&[i(1), t("a")]), r(&[i(2), t("b")])];
        let b = vec![r(&[i(2), t("b")]), r(&[i(1), t("a")])];
        assert!(soft_result_match(&a, &b, &MatchOptions::default()).unwrap().matched);
    }

    #[test]
    fn ordered_detects_swap() {
        let a = vec![r(&[i(1)]), r(&[i(2)])];
        let b = vec![r(&[i(2)]), r(&[i(1)])];
        let res = soft_result_match(&a, &b, &MatchOptions::default().ordered(true)).unwrap();
        assert!(!res.matched);
        assert!(res.mismatch.unwrap().contains("row 0"));
    }

    #[test]
    fn third_within_tolerance() {
        // oracle: |1/3 - 0.333333| = 3.33e-7 < 1e-6
        let third = 1.0f64 / 3.0;
        assert!((third - 0.333333).abs() < 1e-6);
        let a = vec![r(&[Value::Real(0.333333)])];
        let b = vec![r(&[Value::Real(third)])];
        assert!(soft_result_match(&a, &b, &MatchOptions::default()).unwrap().matched);
    }

    #[test]
    fn tolerance_boundary() {
        let o = MatchOptions::default();
        // exactly representable offsets around the 1e-6 absolute bound
        assert!(cells_equal(&Value::Real(0.0), &Value::Real(1e-6), &o));
        assert!(!cells_equal(&Value::Real(0.0), &Value::Real(1.1e-6), &o));
        assert!(cells_equal(&Value::Real(0.5), &Value::Real(0.5 + 2f64.powi(-20)), &o));
        assert!(!cells_equal(&Value::Real(0.5), &Value::Real(0.5 + 2f64.powi(-19)), &o));
        // relative tolerance covers large magnitudes
        assert!(cells_equal(&Value::Real(1e9), &Value::Real(1e9 + 0.5), &o));
        assert!(!cells_equal(&Value::Real(1e9), &Value::Real(1e9 + 2.0), &o));
        assert!(cells_equal(&i(3), &Value::Real(3.0), &o));
    }

    #[test]
    fn nulls_and_types() {
        let o = MatchOptions::default();
        assert!(cells_equal(&Value::Null, &Value::Null, &o));
        assert!(!cells_equal(&Value::Null, &i(0), &o));
        assert!(!cells_equal(&t("1"), &i(1), &o));
        let a = vec![r(&[Value::Null]), r(&[i(1)])];
        let b = vec![r(&[i(1)]), r(&[Value::Null])];
        assert!(soft_result_match(&a, &b, &o).unwrap().matched);
    }

    #[test]
    fn duplicates_count() {
        let o = MatchOptions::default();
        let a = vec![r(&[i(1)]), r(&[i(1)]), r(&[i(2)])];
        let b = vec![r(&[i(1)]), r(&[i(2)]), r(&[i(2)])];
        assert!(!soft_result_match(&a, &b, &o).unwrap().matched);
    }

    #[test]
    fn matching_beats_sorting_under_tolerance() {
        let o = MatchOptions::default();
        let eps = 5e-7;
        let a = vec![r(&[Value::Real(1.0 + eps), t("b")]), r(&[Value::Real(1.0), t("a")])];
        let b = vec![r(&[Value::Real(1.0), t("b")]), r(&[Value::Real(1.0 + eps), t("a")])];
        assert!(soft_result_match(&a, &b, &o).unwrap().matched);
    }

    #[test]
    fn ragged_and_shape_errors() {
        let o = MatchOptions::default();
        let ragged = vec![r(&[i(1)]), r(&[i(1), i(2)])];
        assert!(soft_result_match(&ragged, &[], &o).is_err());
        let res = soft_result_match(&[r(&[i(1)])], &[r(&[i(1), i(1)])], &o).unwrap();
        assert!(res.mismatch.unwrap().contains("column count"));
        assert!(soft_result_match(&[], &[], &o).unwrap().matched);
    }

    fn arb_cell() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            (-5i64..5).prop_map(Value::Integer),
            (-5i32..5).prop_map(|x| Value::Real(x as f64 / 4.0)),
            "[ab]{0,2}".prop_map(Value::Text),
        ]
    }

    proptest! {
        #[test]
        fn permutation_never_changes_unordered_match(
            rows in prop::collection::vec(prop::collection::vec(arb_cell(), 2), 0..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let o = MatchOptions::default();
            prop_assert!(soft_result_match(&shuffled, &rows, &o).unwrap().matched);
        }
    }
}
