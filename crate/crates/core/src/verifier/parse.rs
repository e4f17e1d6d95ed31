//! Maps raw completions to verdicts.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Verdict, VerdictLabel};

/// Response layout the completion is expected to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseFormat {
    /// `REASONING:` / `EVALUATION:` / `FEEDBACK:` fields.
    Standard,
    /// Standard plus a leading `GENERAL ... KNOWLEDGE:` field.
    Monolithic,
    /// `Thoughts:` / `Status:` lines.
    Pan,
    /// Free text; the last label phrase wins.
    Robomimic,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty completion")]
    Empty,
    #[error("no {0} field")]
    MissingField(&'static str),
    #[error("unrecognised label `{0}`")]
    UnknownLabel(String),
    #[error("conflicting labels {0} and {1}")]
    Conflicting(VerdictLabel, VerdictLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Reasoning,
    Evaluation,
    Feedback,
    Knowledge,
    Thoughts,
    Status,
}

static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[\s#*_>`-]*(reasoning|evaluation|feedback|general\s+(?:web|computer)\s+knowledge|thoughts|status)[\s*_`]*:[\s*_`]*(.*)$",
    )
    .expect("static regex")
});

static ROBOT_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(success|failure|in[\s_-]+progress)\b").expect("static regex"));

fn field_of(name: &str) -> Field {
    let n = name.to_ascii_lowercase();
    match n.as_str() {
        "reasoning" => Field::Reasoning,
        "evaluation" => Field::Evaluation,
        "feedback" => Field::Feedback,
        "thoughts" => Field::Thoughts,
        "status" => Field::Status,
        _ => Field::Knowledge,
    }
}

/// Splits a completion into `(field, value)` pairs. Values run until the
/// next recognised header line.
fn fields(raw: &str) -> Vec<(Field, String)> {
    let mut out: Vec<(Field, Vec<&str>)> = Vec::new();
    for line in raw.lines() {
        if let Some(c) = HEADER.captures(line) {
            let first = c.get(2).map_or("", |m| m.as_str());
            out.push((field_of(&c[1]), vec![first]));
        } else if let Some((_, lines)) = out.last_mut() {
            lines.push(line);
        }
    }
    out.into_iter()
        .map(|(f, lines)| {
            let v = lines.join("\n");
            (f, strip_trailing_markup(v.trim()).to_string())
        })
        .collect()
}

fn strip_trailing_markup(s: &str) -> &str {
    s.trim_end_matches(|c: char| c == '*' || c == '_' || c == '`' || c.is_whitespace())
}

/// Normalizes a label value to lowercase words separated by single spaces.
fn normalize(value: &str) -> String {
    let cleaned: String = value
        .chars()
        .map(|c| match c {
            '*' | '#' | '`' | '"' | '\'' | '.' | ',' | '!' | ':' | ';' | '(' | ')' | '[' | ']' => ' ',
            '_' | '-' => ' ',
            c => c.to_ascii_lowercase(),
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads a label from the start of a field value.
pub fn parse_label(value: &str) -> Result<VerdictLabel, ParseError> {
    let norm = normalize(value);
    let words: Vec<&str> = norm.split(' ').collect();
    let label = match words.as_slice() {
        ["partial", "success", ..] | ["partially", "successful", ..] | ["partialsuccess", ..] => {
            VerdictLabel::PartialSuccess
        }
        ["success", ..] | ["successful", ..] => VerdictLabel::Success,
        ["failure", ..] | ["failed", ..] | ["fail", ..] => VerdictLabel::Failure,
        _ => return Err(ParseError::UnknownLabel(value.trim().chars().take(40).collect())),
    };
    Ok(label)
}

fn single_label(values: &[&String], field: &'static str) -> Result<VerdictLabel, ParseError> {
    let mut label: Option<VerdictLabel> = None;
    if values.is_empty() {
        return Err(ParseError::MissingField(field));
    }
    for v in values {
        let l = parse_label(v)?;
        match label {
            Some(prev) if prev != l => return Err(ParseError::Conflicting(prev, l)),
            _ => label = Some(l),
        }
    }
    label.ok_or(ParseError::MissingField(field))
}

fn non_empty(v: Option<&String>) -> Option<String> {
    v.filter(|s| !s.trim().is_empty()).cloned()
}

/// Parses a completion. Never falls back to a default label.
pub fn parse_verdict(raw: &str, format: ResponseFormat) -> Result<Verdict, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    if format == ResponseFormat::Robomimic {
        let last = ROBOT_LABEL.find_iter(raw).last().ok_or(ParseError::MissingField("label"))?;
        let word = last.as_str().to_ascii_lowercase();
        let label = if word.starts_with("success") {
            VerdictLabel::Success
        } else if word.starts_with("failure") {
            VerdictLabel::Failure
        } else {
            VerdictLabel::PartialSuccess
        };
        let mut v = Verdict::new(label, raw);
        v.reasoning = Some(raw.trim().to_string());
        return Ok(v);
    }
    let fs = fields(raw);
    let get = |f: Field| fs.iter().filter(move |(k, _)| *k == f).map(|(_, v)| v);
    let (label_field, name) = match format {
        ResponseFormat::Pan => (Field::Status, "Status"),
        _ => (Field::Evaluation, "EVALUATION"),
    };
    let values: Vec<&String> = get(label_field).collect();
    let label = single_label(&values, name)?;
    let mut v = Verdict::new(label, raw);
    match format {
        ResponseFormat::Pan => v.reasoning = non_empty(get(Field::Thoughts).next()),
        _ => {
            v.reasoning = non_empty(get(Field::Reasoning).next());
            v.feedback = non_empty(get(Field::Feedback).next());
        }
    }
    if format == ResponseFormat::Monolithic {
        v.priors = non_empty(get(Field::Knowledge).next());
    }
    Ok(v)
}

/// Completion text for a label in the standard layout; the inverse used by
/// tests and mock backends.
pub fn render_response(label: VerdictLabel, reasoning: Option<&str>, feedback: &str) -> String {
    let mut s = String::new();
    if let Some(r) = reasoning {
        s.push_str("REASONING: ");
        s.push_str(r);
        s.push('\n');
    }
    s.push_str("EVALUATION: ");
    s.push_str(label.as_prompt_str());
    s.push_str("\nFEEDBACK: ");
    s.push_str(feedback);
    s
}
