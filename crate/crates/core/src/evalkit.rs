//! Records and aggregation for human ratings of chatbot conversations.
//!
//! Each rater documents a conversation, labels every bot reply as a match,
//! ambiguous or nonsense, and scores nine categories on a 1–10 scale.
//! Category scores are reported as percentages (mean score × 10).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 9] = [
    "coherence",
    "adequacy",
    "context_awareness",
    "creativity",
    "lexical_variation",
    "sarcasm",
    "personality",
    "humor",
    "emotion",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Match,
    Ambiguous,
    Nonsense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub rater_id: String,
    pub turns: Vec<Turn>,
    /// Keyed by [`CATEGORIES`]; kept sorted so serialization is stable.
    pub scores: BTreeMap<String, u8>,
}

impl EvalRecord {
    /// Check the record invariants, returning one message per problem with
    /// its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, turn) in self.turns.iter().enumerate() {
            match (turn.speaker, turn.label) {
                (Speaker::Bot, None) => out.push(format!("turns[{i}].label missing on bot turn")),
                (Speaker::User, Some(_)) => out.push(format!("turns[{i}].label not allowed on user turn")),
                _ => {}
            }
        }
        for cat in CATEGORIES {
            match self.scores.get(cat) {
                None => out.push(format!("scores.{cat} missing")),
                Some(s) if !(1..=10).contains(s) => out.push(format!("scores.{cat} out of range")),
                _ => {}
            }
        }
        for key in self.scores.keys() {
            if !CATEGORIES.contains(&key.as_str()) {
                out.push(format!("scores.{key} is not a known category"));
            }
        }
        out
    }
}

/// Validate a raw JSON value against the record schema.
fn validate_value(v: &Value) -> std::result::Result<EvalRecord, Vec<String>> {
    let mut problems = Vec::new();
    let Some(obj) = v.as_object() else {
        return Err(vec!["<root> is not an object".into()]);
    };
    if !obj.get("rater_id").is_some_and(Value::is_string) {
        problems.push("rater_id missing or not a string".into());
    }
    match obj.get("turns").and_then(Value::as_array) {
        None => problems.push("turns missing or not an array".into()),
        Some(turns) => {
            for (i, t) in turns.iter().enumerate() {
                let speaker = t.get("speaker").and_then(Value::as_str);
                if !matches!(speaker, Some("user" | "bot")) {
                    problems.push(format!("turns[{i}].speaker must be \"user\" or \"bot\""));
                }
                if !t.get("text").is_some_and(Value::is_string) {
                    problems.push(format!("turns[{i}].text missing or not a string"));
                }
                if let Some(label) = t.get("label") {
                    if !matches!(label.as_str(), Some("match" | "ambiguous" | "nonsense")) {
                        problems.push(format!(
                            "turns[{i}].label must be \"match\", \"ambiguous\" or \"nonsense\""
                        ));
                    }
                }
            }
        }
    }
    match obj.get("scores").and_then(Value::as_object) {
        None => problems.push("scores missing or not an object".into()),
        Some(scores) => {
            for (key, s) in scores {
                if s.as_i64().is_none() {
                    problems.push(format!("scores.{key} is not an integer"));
                } else if !(1..=10).contains(&s.as_i64().unwrap()) {
                    problems.push(format!("scores.{key} out of range"));
                }
            }
            for cat in CATEGORIES {
                if !scores.contains_key(cat) {
                    problems.push(format!("scores.{cat} missing"));
                }
            }
        }
    }
    if !problems.is_empty() {
        return Err(problems);
    }
    let record: EvalRecord = serde_json::from_value(v.clone()).map_err(|e| vec![e.to_string()])?;
    let semantic = record.problems();
    if semantic.is_empty() {
        Ok(record)
    } else {
        Err(semantic)
    }
}

pub fn parse_record_str(json: &str) -> std::result::Result<EvalRecord, Vec<String>> {
    let value: Value = serde_json::from_str(json).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    validate_value(&value)
}

/// Files to read for `path`: the `.json` files of a directory, sorted, or
/// the path itself.
fn expand(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Read and validate every record under `paths` (files or directories).
/// All problems across all files are reported together.
pub fn parse_records<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for p in paths {
        for file in expand(p.as_ref())? {
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            match parse_record_str(&text) {
                Ok(r) => records.push(r),
                Err(errs) => problems.extend(errs.into_iter().map(|e| format!("{}: {e}", file.display()))),
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(records)
}

/// Round half away from zero to one decimal.
pub fn round1(x: f64) -> f64 {
    // nudge so that exact binary ties such as 61.25 are not lost to noise
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryScores {
    /// Category → percent, in [`CATEGORIES`] order.
    pub percent: Vec<(String, f64)>,
    pub n_raters: usize,
}

impl CategoryScores {
    pub fn get(&self, category: &str) -> Option<f64> {
        self.percent.iter().find(|(c, _)| c == category).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelTally {
    pub counts: BTreeMap<Label, usize>,
    pub percents: BTreeMap<Label, f64>,
    pub n_responses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub categories: CategoryScores,
    pub labels: LabelTally,
    pub n_raters: usize,
    pub n_responses: usize,
}

/// Per-category percent: each rater's scores are first averaged over that
/// rater's records, then averaged across raters and multiplied by ten.
pub fn aggregate_scores(records: &[EvalRecord]) -> Result<CategoryScores> {
    if records.is_empty() {
        return Err(Error::Argument("no records to aggregate".into()));
    }
    let mut by_rater: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_rater.entry(r.rater_id.as_str()).or_default().push(r);
    }
    let percent = CATEGORIES
        .iter()
        .map(|&cat| {
            let rater_means: f64 = by_rater
                .values()
                .map(|rs| {
                    let sum: u32 = rs.iter().map(|r| r.scores.get(cat).copied().unwrap_or(0) as u32).sum();
                    sum as f64 / rs.len() as f64
                })
                .sum();
            (cat.to_string(), round1(rater_means / by_rater.len() as f64 * 10.0))
        })
        .collect();
    Ok(CategoryScores {
        percent,
        n_raters: by_rater.len(),
    })
}

pub fn tally_labels(records: &[EvalRecord]) -> Result<LabelTally> {
    let mut counts: BTreeMap<Label, usize> =
        [Label::Match, Label::Ambiguous, Label::Nonsense].into_iter().map(|l| (l, 0)).collect();
    for turn in records.iter().flat_map(|r| &r.turns) {
        if let (Speaker::Bot, Some(label)) = (turn.speaker, turn.label) {
            *counts.get_mut(&label).expect("all labels present") += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::Argument("no labeled bot responses".into()));
    }
    let percents = counts
        .iter()
        .map(|(&l, &n)| (l, round1(n as f64 / total as f64 * 100.0)))
        .collect();
    Ok(LabelTally {
        counts,
        percents,
        n_responses: total,
    })
}

pub fn build_report(records: &[EvalRecord]) -> Result<EvalReport> {
    let categories = aggregate_scores(records)?;
    let labels = tally_labels(records)?;
    Ok(EvalReport {
        n_raters: categories.n_raters,
        n_responses: labels.n_responses,
        categories,
        labels,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = CATEGORIES.iter().map(|c| c.len()).max().unwrap_or(0).max("nonsense".len());
        let _ = writeln!(s, "{:<width$}  {:>7}", "category", "score %");
        for (cat, p) in &self.categories.percent {
            let _ = writeln!(s, "{cat:<width$}  {p:>7.1}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}", "label", "count", "%");
        for (label, n) in &self.labels.counts {
            let name = match label {
                Label::Match => "match",
                Label::Ambiguous => "ambiguous",
                Label::Nonsense => "nonsense",
            };
            let _ = writeln!(s, "{name:<width$}  {n:>7}  {:>7.1}", self.labels.percents[label]);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "raters: {}  responses: {}", self.n_raters, self.n_responses);
        s
    }
}
