//! Plain-text match files: one match per line, `x_a y_a x_b y_b` followed by
//! optional numeric columns; `#` lines are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Match;
use crate::refine::RefinedMatch;

pub const REFINED_HEADER: &str = "x_a y_a x_b y_b fine_conf mid_conf";

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRow {
    pub m: Match,
    pub extra: Vec<f64>,
}

pub fn parse_match_text(text: &str, path: &str) -> Result<Vec<MatchRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message,
        };
        let mut vals = Vec::with_capacity(6);
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(format!("invalid number '{tok}'")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value '{tok}'")));
            }
            vals.push(v);
        }
        if !(4..=6).contains(&vals.len()) {
            return Err(err(format!("expected 4 to 6 columns, found {}", vals.len())));
        }
        rows.push(MatchRow {
            m: Match::new(vals[0], vals[1], vals[2], vals[3]),
            extra: vals[4..].to_vec(),
        });
    }
    Ok(rows)
}

pub fn read_match_file(path: impl AsRef<Path>) -> Result<Vec<MatchRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_match_text(&text, &path.display().to_string())
}

pub fn format_match_rows(header: &str, rows: &[MatchRow]) -> String {
    let mut out = format!("# {header}\n");
    for r in rows {
        let [a, b, c, d] = r.m.to_array();
        let _ = write!(out, "{a} {b} {c} {d}");
        for v in &r.extra {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_match_file(path: impl AsRef<Path>, header: &str, rows: &[MatchRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_match_rows(header, rows)).map_err(|e| Error::io(path, e))
}

/// Writes fine matches with their fine and mid confidences.
pub fn write_refined_matches(path: impl AsRef<Path>, matches: &[RefinedMatch]) -> Result<()> {
    let rows: Vec<MatchRow> = matches
        .iter()
        .map(|r| MatchRow {
            m: r.fine,
            extra: vec![r.fine_conf, r.mid_conf],
        })
        .collect();
    write_match_file(path, REFINED_HEADER, &rows)
}

/// Reads a match file as refined matches. A missing fine confidence reads
/// as 1, a missing mid confidence as the fine one.
pub fn read_refined_matches(path: impl AsRef<Path>) -> Result<Vec<RefinedMatch>> {
    Ok(read_match_file(path)?
        .into_iter()
        .map(|r| {
            let fine = r.extra.first().copied().unwrap_or(1.0);
            let mid = r.extra.get(1).copied().unwrap_or(fine);
            RefinedMatch::unrefined(r.m, fine, mid)
        })
        .collect())
}
