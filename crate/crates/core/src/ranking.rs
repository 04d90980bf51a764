//! Ranked candidate lists and their JSON-lines run files.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::store::{parse_json_lines, write_atomic};

/// Significant digits used for every number written by this crate.
pub const SIGNIFICANT_DIGITS: usize = 9;

/// Rounds `x` to nine significant decimal digits.
///
/// Serializing the result with the shortest round-trip representation
/// prints at most nine significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses")
}

/// Formats `x` with exactly nine significant digits, for plain-text output.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return format!("{:.*}", SIGNIFICANT_DIGITS - 1, 0.0);
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..9).contains(&magnitude) {
        return format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x);
    }
    let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new leading digit (9.99... -> 10.0...).
    let rounded: f64 = s.parse().expect("formatted float parses");
    if rounded.abs() >= 10f64.powi(magnitude + 1) && decimals > 0 {
        return format!("{x:.*}", decimals - 1);
    }
    s
}

pub(crate) fn serialize_sig<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig(*x))
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    #[serde(serialize_with = "serialize_sig")]
    pub score: f64,
}

/// Candidates for one query, best first.
///
/// Scores are non-increasing and ids are unique. Equal scores are ordered
/// by ascending gallery row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    #[serde(rename = "ranking")]
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, entries: Vec<RankedEntry>) -> Self {
        RankedList {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Keeps only the first `k` entries.
    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// Checks the ordering and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!(
                    "query {:?}: id {:?} ranked twice",
                    self.query_id, e.id
                )));
            }
            if i > 0 && e.score > self.entries[i - 1].score {
                return Err(Error::Validation(format!(
                    "query {:?}: scores increase at position {}",
                    self.query_id,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// The run-file line for this list, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("ranked lists always serialize")
    }
}

/// Encodes a run as JSON lines, one list per line, newline terminated.
pub fn encode_run(runs: &[RankedList]) -> String {
    let mut out = String::new();
    for r in runs {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn save_run(runs: &[RankedList], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), encode_run(runs).as_bytes())
}

/// Reads a run file. Query ids must be unique.
pub fn load_run(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let runs: Vec<RankedList> = parse_json_lines(&text, path)?;
    let mut seen = HashSet::new();
    for r in &runs {
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::Validation(format!(
                "{}: query {:?} appears twice",
                path.display(),
                r.query_id
            )));
        }
        r.validate()?;
    }
    Ok(runs)
}
