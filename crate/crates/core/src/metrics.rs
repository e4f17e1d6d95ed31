//! Confusion-matrix metrics against oracle labels, and report tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{RunKind, RunManifest, RunRow, TokenUsage};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction and oracle lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no scored pairs")]
    Empty,
    #[error("label {0} is not 0 or 1")]
    NonBinary(u8),
    #[error("cannot mix offline and online runs in one table")]
    MixedKinds,
    #[error("baseline run `{0}` not found")]
    MissingBaseline(String),
}

/// Positive class is oracle = 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add_pair(&mut self, predicted: u8, oracle: u8) {
        match (predicted, oracle) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.positives())
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.negatives())
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn rates(&self) -> Rates {
        Rates {
            tpr: percent_half_up(self.tp, self.positives()),
            tnr: percent_half_up(self.tn, self.negatives()),
            accuracy: percent_half_up(self.tp + self.tn, self.total()),
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Integer percent rounded half up, computed without floating point.
/// `None` when the denominator is zero.
pub fn percent_half_up(num: u64, den: u64) -> Option<u32> {
    if den == 0 {
        return None;
    }
    let (num, den) = (num as u128, den as u128);
    Some(((200 * num + den) / (2 * den)) as u32)
}

/// Rendered integer percentages; `None` marks an undefined rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: Option<u32>,
    pub tnr: Option<u32>,
    pub accuracy: Option<u32>,
}

pub fn confusion(predicted: &[u8], oracle: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if predicted.len() != oracle.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), oracle.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &o) in predicted.iter().zip(oracle) {
        for x in [p, o] {
            if x > 1 {
                return Err(MetricsError::NonBinary(x));
            }
        }
        c.add_pair(p, o);
    }
    Ok(c)
}

/// Per-domain and overall counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_domain: BTreeMap<String, ConfusionCounts>,
    pub overall: ConfusionCounts,
}

impl MetricsReport {
    pub fn add(&mut self, domain: &str, predicted: u8, oracle: u8) {
        self.per_domain.entry(domain.to_string()).or_default().add_pair(predicted, oracle);
        self.overall.add_pair(predicted, oracle);
    }
}

/// Rows grouped by variant. Only scored rows (reward and oracle present)
/// are counted, but every variant and domain seen gets an entry.
pub fn offline_reports(rows: &[RunRow]) -> BTreeMap<String, MetricsReport> {
    let mut out: BTreeMap<String, MetricsReport> = BTreeMap::new();
    for r in rows {
        let rep = out.entry(r.variant.clone()).or_default();
        match (r.reward, r.oracle) {
            (Some(p), Some(o)) => rep.add(r.domain.as_str(), p, o),
            _ => {
                rep.per_domain.entry(r.domain.as_str().to_string()).or_default();
            }
        }
    }
    out
}

/// One line of an offline table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub method: String,
    pub domains: BTreeMap<String, ConfusionCounts>,
}

fn cell(v: Option<u32>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Plain-text table: one row per method, TPR/TNR/Acc per domain in
/// `domains` order.
pub fn render_report(rows: &[ReportRow], domains: &[String]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Method");
    for d in domains {
        let _ = write!(out, " | {:^17}", d);
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "");
    for _ in domains {
        let _ = write!(out, " | {:>5} {:>5} {:>5}", "TPR", "TNR", "Acc");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.method);
        for d in domains {
            let rates = r.domains.get(d).map(ConfusionCounts::rates);
            let (a, b, c) = rates.map_or((None, None, None), |x| (x.tpr, x.tnr, x.accuracy));
            let _ = write!(out, " | {:>5} {:>5} {:>5}", cell(a), cell(b), cell(c));
        }
        out.push('\n');
    }
    out
}

/// Token ratio to one decimal, rounded half up: `1.9x`, or `2x` when the
/// decimal is zero.
pub fn token_multiplier(tokens: u64, baseline: u64) -> Option<String> {
    if baseline == 0 {
        return None;
    }
    let (a, b) = (tokens as u128, baseline as u128);
    let tenths = (20 * a + b) / (2 * b);
    Some(if tenths % 10 == 0 { format!("{}x", tenths / 10) } else { format!("{}.{}x", tenths / 10, tenths % 10) })
}

/// Success-rate and token summary of an online run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnlineSummary {
    pub run_id: String,
    pub method: String,
    pub per_domain: BTreeMap<String, (u64, u64)>,
    pub usage: TokenUsage,
}

impl OnlineSummary {
    pub fn from_manifest(m: &RunManifest) -> Self {
        let mut per_domain: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        let mut usage = TokenUsage::default();
        let mut method = String::new();
        for r in &m.rows {
            let e = per_domain.entry(r.domain.as_str().to_string()).or_default();
            e.1 += 1;
            if r.oracle == Some(1) {
                e.0 += 1;
            }
            usage += r.usage;
            if method.is_empty() {
                method = r.variant.clone();
            }
        }
        Self { run_id: m.run_id.clone(), method, per_domain, usage }
    }

    pub fn success_rate(&self, domain: &str) -> Option<u32> {
        self.per_domain.get(domain).and_then(|(s, n)| percent_half_up(*s, *n))
    }
}

/// Online table: SR per domain plus tokens relative to `baseline_run`.
pub fn render_online(runs: &[OnlineSummary], baseline_run: &str, domains: &[String]) -> Result<String, MetricsError> {
    let base = runs
        .iter()
        .find(|r| r.run_id == baseline_run)
        .ok_or_else(|| MetricsError::MissingBaseline(baseline_run.to_string()))?;
    let width = runs.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Method");
    for d in domains {
        let _ = write!(out, " | {:>12}", format!("{d} SR"));
    }
    let _ = writeln!(out, " | {:>6}", "Tokens");
    for r in runs {
        let _ = write!(out, "{:<width$}", r.method);
        for d in domains {
            let _ = write!(out, " | {:>12}", cell(r.success_rate(d)));
        }
        let mult = token_multiplier(r.usage.total(), base.usage.total()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, " | {:>6}", mult);
    }
    Ok(out)
}

/// Report for a set of manifests of one kind.
pub fn render_manifests(manifests: &[RunManifest], baseline_run: Option<&str>) -> Result<String, MetricsError> {
    let first = manifests.first().ok_or(MetricsError::Empty)?;
    if manifests.iter().any(|m| m.kind != first.kind) {
        return Err(MetricsError::MixedKinds);
    }
    let mut domains: Vec<String> = manifests
        .iter()
        .flat_map(|m| m.rows.iter().map(|r| r.domain.as_str().to_string()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    match first.kind {
        RunKind::Offline => {
            let mut rows = Vec::new();
            for m in manifests {
                for (variant, rep) in offline_reports(&m.rows) {
                    let mut d = rep.per_domain.clone();
                    if rep.per_domain.len() > 1 {
                        d.insert("overall".into(), rep.overall);
                    }
                    rows.push(ReportRow { method: variant, domains: d });
                }
            }
            if rows.is_empty() {
                return Err(MetricsError::Empty);
            }
            if rows.iter().any(|r| r.domains.contains_key("overall")) {
                domains.push("overall".into());
            }
            Ok(render_report(&rows, &domains))
        }
        RunKind::Online => {
            let runs: Vec<OnlineSummary> = manifests.iter().map(OnlineSummary::from_manifest).collect();
            render_online(&runs, baseline_run.unwrap_or(&first.run_id), &domains)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_pairs() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let r = c.rates();
        assert_eq!((r.tpr, r.tnr, r.accuracy), (Some(50), Some(50), Some(50)));
    }

    #[test]
    fn errors_and_undefined_rates() {
        assert_eq!(confusion(&[1], &[1, 0]), Err(MetricsError::LengthMismatch(1, 2)));
        assert_eq!(confusion(&[], &[]), Err(MetricsError::Empty));
        assert_eq!(confusion(&[2], &[1]), Err(MetricsError::NonBinary(2)));
        let c = confusion(&[0, 1], &[0, 0]).unwrap();
        assert_eq!(c.rates().tpr, None);
        assert_eq!(c.tpr(), None);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(percent_half_up(1, 8), Some(13)); // 12.5
        assert_eq!(percent_half_up(1, 3), Some(33));
        assert_eq!(percent_half_up(2, 3), Some(67));
        assert_eq!(percent_half_up(0, 0), None);
    }

    #[test]
    fn multipliers() {
        assert_eq!(token_multiplier(190, 100).as_deref(), Some("1.9x"));
        assert_eq!(token_multiplier(100, 100).as_deref(), Some("1x"));
        assert_eq!(token_multiplier(1949, 1000).as_deref(), Some("1.9x"));
        assert_eq!(token_multiplier(1950, 1000).as_deref(), Some("2x"));
        assert_eq!(token_multiplier(5, 0), None);
    }

    #[test]
    fn table_shape() {
        let mut d = BTreeMap::new();
        d.insert("shopping".to_string(), ConfusionCounts { tp: 5, fp: 0, tn: 5, fn_: 0 });
        let t = render_report(&[ReportRow { method: "cot".into(), domains: d }], &["shopping".into()]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(2).unwrap().ends_with("100   100   100"));
    }

    proptest! {
        #[test]
        fn accuracy_identity(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..500)) {
            let (p, o): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let c = confusion(&p, &o).unwrap();
            prop_assert_eq!(c.total() as usize, p.len());
            let acc = c.accuracy().unwrap();
            let pos = c.positives() as f64;
            let neg = c.negatives() as f64;
            let recombined = (c.tpr().unwrap_or(0.0) * pos + c.tnr().unwrap_or(0.0) * neg) / (pos + neg);
            prop_assert!((acc - recombined).abs() < 1e-12);
        }
    }
}
