//! Representative benchmark subsets: a fraction of the tasks whose
//! per-domain success rates and template mix track the full set.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScoreRecord {
    pub task_id: String,
    pub domain: String,
    pub template_id: String,
    pub score: u8,
}

impl TaskScoreRecord {
    pub fn new(task_id: impl Into<String>, domain: impl Into<String>, template_id: impl Into<String>, score: u8) -> Self {
        Self { task_id: task_id.into(), domain: domain.into(), template_id: template_id.into(), score }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SubsetError {
    #[error("fraction {0} is outside (0, 1]")]
    Fraction(f64),
    #[error("no records")]
    Empty,
    #[error("duplicate task id `{0}`")]
    Duplicate(String),
    #[error("task `{0}` has no template id")]
    MissingTemplate(String),
    #[error("task `{0}` has score {1}, expected 0 or 1")]
    Score(String, u8),
    #[error("fraction leaves domain `{0}` with no tasks")]
    EmptyDomain(String),
    #[error("requested {want} tasks from domain `{domain}`, which has {have}")]
    Oversized { domain: String, want: usize, have: usize },
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("size given for unknown domain `{0}`")]
    UnknownDomain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetConfig {
    pub fraction: f64,
    /// Per-domain sizes; overrides the fraction for the listed domains.
    #[serde(default)]
    pub sizes: BTreeMap<String, usize>,
    pub max_iters: usize,
    pub seed: u64,
    /// Weight on the summed per-domain success-rate deltas (pp).
    pub w_success: f64,
    /// Weight on the template-frequency L1 deviation (pp).
    pub w_template: f64,
}

impl SubsetConfig {
    pub fn new(fraction: f64, seed: u64) -> Self {
        Self { fraction, sizes: BTreeMap::new(), max_iters: 1000, seed, w_success: 1.0, w_template: 1.0 }
    }

    pub fn with_sizes(mut self, sizes: impl IntoIterator<Item = (String, usize)>) -> Self {
        self.sizes = sizes.into_iter().collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDelta {
    pub domain: String,
    pub full_tasks: usize,
    pub full_sr: f64,
    pub subset_tasks: usize,
    pub subset_sr: Option<f64>,
    /// Subset minus full, percentage points.
    pub delta_pp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub domains: Vec<DomainDelta>,
    /// L1 distance between template frequencies, percentage points.
    pub template_l1_pp: f64,
}

impl DeltaReport {
    pub fn max_abs_delta_pp(&self) -> f64 {
        self.domains.iter().filter_map(|d| d.delta_pp).fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn objective(&self, w_success: f64, w_template: f64) -> f64 {
        let sr: f64 = self.domains.iter().filter_map(|d| d.delta_pp).map(f64::abs).sum();
        w_success * sr + w_template * self.template_l1_pp
    }

    /// Per-domain table: task counts, success rates and the difference.
    pub fn render(&self) -> String {
        let width = self.domains.iter().map(|d| d.domain.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$} | {:>10} | {:>7} | {:>12} | {:>9} | {:>8}\n",
            "Domain", "Full tasks", "Full SR", "Subset tasks", "Subset SR", "Delta pp"
        );
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        for d in &self.domains {
            out.push_str(&format!(
                "{:<width$} | {:>10} | {:>7} | {:>12} | {:>9} | {:>8}\n",
                d.domain,
                d.full_tasks,
                format!("{:.1}", d.full_sr),
                d.subset_tasks,
                pct(d.subset_sr),
                d.delta_pp.map_or("-".to_string(), |v| format!("{v:+.1}")),
            ));
        }
        out.push_str(&format!("template L1: {:.2} pp\n", self.template_l1_pp));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub selected: Vec<String>,
    pub report: DeltaReport,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
}

fn validate(records: &[TaskScoreRecord]) -> Result<(), SubsetError> {
    if records.is_empty() {
        return Err(SubsetError::Empty);
    }
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.task_id.as_str()) {
            return Err(SubsetError::Duplicate(r.task_id.clone()));
        }
        if r.template_id.trim().is_empty() {
            return Err(SubsetError::MissingTemplate(r.task_id.clone()));
        }
        if r.score > 1 {
            return Err(SubsetError::Score(r.task_id.clone(), r.score));
        }
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to
/// the earlier entry.
pub fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (total * w % sum, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = total - out.iter().sum::<usize>();
    for (_, i) in rem.into_iter().take(left) {
        out[i] += 1;
    }
    out
}

/// Per-domain subset sizes: largest remainder of `fraction × N` over the
/// domain sizes, then explicit overrides.
pub fn domain_quotas(records: &[TaskScoreRecord], config: &SubsetConfig) -> Result<BTreeMap<String, usize>, SubsetError> {
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(SubsetError::Fraction(config.fraction));
    }
    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *sizes.entry(r.domain.clone()).or_default() += 1;
    }
    let n: usize = sizes.values().sum();
    let total = ((config.fraction * n as f64) + 1e-9).round() as usize;
    let names: Vec<String> = sizes.keys().cloned().collect();
    let counts: Vec<usize> = sizes.values().copied().collect();
    let mut quotas: BTreeMap<String, usize> = names.into_iter().zip(largest_remainder(total, &counts)).collect();
    for (d, want) in &config.sizes {
        let have = *sizes.get(d).ok_or_else(|| SubsetError::UnknownDomain(d.clone()))?;
        if *want > have {
            return Err(SubsetError::Oversized { domain: d.clone(), want: *want, have });
        }
        quotas.insert(d.clone(), *want);
    }
    if let Some((d, _)) = quotas.iter().find(|(_, q)| **q == 0) {
        return Err(SubsetError::EmptyDomain(d.clone()));
    }
    Ok(quotas)
}

/// Exact per-domain success rates and template deviation of a subset.
pub fn evaluate_subset(subset_ids: &[String], records: &[TaskScoreRecord]) -> Result<DeltaReport, SubsetError> {
    let by_id: HashMap<&str, &TaskScoreRecord> = records.iter().map(|r| (r.task_id.as_str(), r)).collect();
    let mut chosen = Vec::with_capacity(subset_ids.len());
    let mut seen = BTreeSet::new();
    for id in subset_ids {
        let r = by_id.get(id.as_str()).ok_or_else(|| SubsetError::UnknownTask(id.clone()))?;
        if !seen.insert(id.as_str()) {
            return Err(SubsetError::Duplicate(id.clone()));
        }
        chosen.push(*r);
    }
    let tally = |rs: &mut dyn Iterator<Item = &TaskScoreRecord>| {
        let mut dom: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut tpl: BTreeMap<String, usize> = BTreeMap::new();
        let mut n = 0usize;
        for r in rs {
            let e = dom.entry(r.domain.clone()).or_default();
            e.0 += 1;
            e.1 += r.score as usize;
            *tpl.entry(r.template_id.clone()).or_default() += 1;
            n += 1;
        }
        (dom, tpl, n)
    };
    let (full_dom, full_tpl, n_full) = tally(&mut records.iter());
    let (sub_dom, sub_tpl, n_sub) = tally(&mut chosen.iter().copied());
    let domains = full_dom
        .iter()
        .map(|(d, (n, s))| {
            let full_sr = 100.0 * *s as f64 / *n as f64;
            let (sn, ss) = sub_dom.get(d).copied().unwrap_or((0, 0));
            let subset_sr = (sn > 0).then(|| 100.0 * ss as f64 / sn as f64);
            DomainDelta {
                domain: d.clone(),
                full_tasks: *n,
                full_sr,
                subset_tasks: sn,
                subset_sr,
                delta_pp: subset_sr.map(|s| s - full_sr),
            }
        })
        .collect();
    let template_l1_pp = full_tpl
        .iter()
        .map(|(t, c)| {
            let f = *c as f64 / n_full as f64;
            let s = if n_sub == 0 { 0.0 } else { sub_tpl.get(t).copied().unwrap_or(0) as f64 / n_sub as f64 };
            (f - s).abs()
        })
        .sum::<f64>()
        * 100.0;
    Ok(DeltaReport { domains, template_l1_pp })
}

/// Compact counting state used while searching.
struct Search<'a> {
    records: &'a [TaskScoreRecord],
    dom_of: Vec<usize>,
    tpl_of: Vec<usize>,
    full_sr: Vec<f64>,
    full_tpl: Vec<f64>,
    sub_size: Vec<usize>,
    n_sub: f64,
    w: (f64, f64),
}

#[derive(Clone)]
struct Counts {
    dom_success: Vec<usize>,
    tpl: Vec<usize>,
}

impl Search<'_> {
    fn dom_term(&self, d: usize, successes: usize) -> f64 {
        (100.0 * successes as f64 / self.sub_size[d] as f64 - self.full_sr[d]).abs()
    }

    fn tpl_term(&self, t: usize, count: usize) -> f64 {
        (100.0 * count as f64 / self.n_sub - self.full_tpl[t]).abs()
    }

    fn objective(&self, c: &Counts) -> f64 {
        let sr: f64 = c.dom_success.iter().enumerate().map(|(d, s)| self.dom_term(d, *s)).sum();
        let tpl: f64 = c.tpl.iter().enumerate().map(|(t, n)| self.tpl_term(t, *n)).sum();
        self.w.0 * sr + self.w.1 * tpl
    }

    /// Objective change when `out` leaves and `inn` joins the subset.
    fn swap_delta(&self, c: &Counts, out: usize, inn: usize) -> f64 {
        let d = self.dom_of[out];
        let s_old = c.dom_success[d];
        let s_new = s_old + self.records[inn].score as usize - self.records[out].score as usize;
        let mut delta = self.w.0 * (self.dom_term(d, s_new) - self.dom_term(d, s_old));
        let (to, ti) = (self.tpl_of[out], self.tpl_of[inn]);
        if to != ti {
            delta += self.w.1
                * (self.tpl_term(to, c.tpl[to] - 1) - self.tpl_term(to, c.tpl[to]) + self.tpl_term(ti, c.tpl[ti] + 1)
                    - self.tpl_term(ti, c.tpl[ti]));
        }
        delta
    }
}

/// Stratified draw per (domain, template), then best-improvement one-in /
/// one-out swaps within a domain until no swap lowers the objective or
/// `max_iters` swaps were made. Candidate swaps are scored under `exec`;
/// the chosen swap is the lowest objective, ties to the lowest task ids,
/// so both execution modes return the same subset.
pub fn select_subset(records: &[TaskScoreRecord], config: &SubsetConfig, exec: Execution) -> Result<SubsetResult, SubsetError> {
    validate(records)?;
    let quotas = domain_quotas(records, config)?;
    let domains: Vec<String> = quotas.keys().cloned().collect();
    let dom_idx: HashMap<&str, usize> = domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let templates: Vec<String> =
        records.iter().map(|r| r.template_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let tpl_idx: HashMap<&str, usize> = templates.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    // records sorted by id so every later tie-break is by task id
    let mut sorted: Vec<TaskScoreRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let records = &sorted[..];
    let dom_of: Vec<usize> = records.iter().map(|r| dom_idx[r.domain.as_str()]).collect();
    let tpl_of: Vec<usize> = records.iter().map(|r| tpl_idx[r.template_id.as_str()]).collect();

    let mut dom_n = vec![0usize; domains.len()];
    let mut dom_s = vec![0usize; domains.len()];
    let mut tpl_n = vec![0usize; templates.len()];
    for (i, r) in records.iter().enumerate() {
        dom_n[dom_of[i]] += 1;
        dom_s[dom_of[i]] += r.score as usize;
        tpl_n[tpl_of[i]] += 1;
    }
    let n = records.len() as f64;
    let sub_size: Vec<usize> = domains.iter().map(|d| quotas[d]).collect();
    let search = Search {
        records,
        dom_of,
        tpl_of,
        full_sr: dom_n.iter().zip(&dom_s).map(|(n, s)| 100.0 * *s as f64 / *n as f64).collect(),
        full_tpl: tpl_n.iter().map(|c| 100.0 * *c as f64 / n).collect(),
        n_sub: sub_size.iter().sum::<usize>() as f64,
        sub_size,
        w: (config.w_success, config.w_template),
    };

    // initial stratified draw
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut selected = vec![false; records.len()];
    for (d, quota) in search.sub_size.iter().enumerate() {
        let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in (0..records.len()).filter(|i| search.dom_of[*i] == d) {
            strata.entry(search.tpl_of[i]).or_default().push(i);
        }
        let keys: Vec<usize> = strata.keys().copied().collect();
        let weights: Vec<usize> = keys.iter().map(|k| strata[k].len()).collect();
        for (k, take) in keys.iter().zip(largest_remainder(*quota, &weights)) {
            let mut members = strata[k].clone();
            members.shuffle(&mut rng);
            for i in members.into_iter().take(take) {
                selected[i] = true;
            }
        }
    }

    let mut counts = Counts { dom_success: vec![0; domains.len()], tpl: vec![0; templates.len()] };
    for (i, on) in selected.iter().enumerate() {
        if *on {
            counts.dom_success[search.dom_of[i]] += records[i].score as usize;
            counts.tpl[search.tpl_of[i]] += 1;
        }
    }
    let initial_objective = search.objective(&counts);
    let mut objective = initial_objective;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let outs: Vec<usize> = (0..records.len()).filter(|i| selected[*i]).collect();
        let best_per_out = exec.map(&outs, |&out| {
            let mut best: Option<(f64, usize)> = None;
            for (inn, &taken) in selected.iter().enumerate() {
                if taken || search.dom_of[inn] != search.dom_of[out] {
                    continue;
                }
                let delta = search.swap_delta(&counts, out, inn);
                if best.is_none_or(|(b, _)| delta < b) {
                    best = Some((delta, inn));
                }
            }
            best.map(|(delta, inn)| (delta, out, inn))
        });
        let best = best_per_out.into_iter().flatten().fold(None, |acc: Option<(f64, usize, usize)>, c| match acc {
            Some(a) if a.0 <= c.0 => Some(a),
            _ => Some(c),
        });
        match best {
            Some((delta, out, inn)) if delta < -1e-9 => {
                selected[out] = false;
                selected[inn] = true;
                let d = search.dom_of[out];
                counts.dom_success[d] = counts.dom_success[d] + records[inn].score as usize - records[out].score as usize;
                counts.tpl[search.tpl_of[out]] -= 1;
                counts.tpl[search.tpl_of[inn]] += 1;
                objective = search.objective(&counts);
                iterations += 1;
            }
            _ => break,
        }
    }
    let ids: Vec<String> =
        records.iter().zip(&selected).filter(|(_, on)| **on).map(|(r, _)| r.task_id.clone()).collect();
    let report = evaluate_subset(&ids, records)?;
    Ok(SubsetResult { selected: ids, report, initial_objective, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportionment() {
        assert_eq!(largest_remainder(303, &[466, 210, 234]), vec![155, 70, 78]);
        assert_eq!(largest_remainder(10, &[10, 10, 10]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(0, &[1, 2]), vec![0, 0]);
        assert_eq!(largest_remainder(5, &[0, 0]), vec![0, 0]);
    }

    fn recs() -> Vec<TaskScoreRecord> {
        (0..12).map(|i| TaskScoreRecord::new(format!("t{i:02}"), if i < 6 { "a" } else { "b" }, "x", (i % 2) as u8)).collect()
    }

    #[test]
    fn identity_subset() {
        let r = select_subset(&recs(), &SubsetConfig::new(1.0, 0), Execution::Sequential).unwrap();
        assert_eq!(r.selected.len(), 12);
        assert_eq!(r.report.max_abs_delta_pp(), 0.0);
        assert_eq!(r.report.template_l1_pp, 0.0);
    }

    #[test]
    fn config_errors() {
        let r = recs();
        assert_eq!(select_subset(&r, &SubsetConfig::new(0.0, 0), Execution::Sequential).unwrap_err(), SubsetError::Fraction(0.0));
        assert_eq!(
            select_subset(&r, &SubsetConfig::new(0.05, 0), Execution::Sequential).unwrap_err(),
            SubsetError::EmptyDomain("b".into())
        );
        let mut dup = r.clone();
        dup.push(r[0].clone());
        assert!(matches!(select_subset(&dup, &SubsetConfig::new(0.5, 0), Execution::Sequential), Err(SubsetError::Duplicate(_))));
        assert!(matches!(evaluate_subset(&["zz".into()], &r), Err(SubsetError::UnknownTask(_))));
        let sized = SubsetConfig::new(0.5, 0).with_sizes([("c".to_string(), 1)]);
        assert!(matches!(select_subset(&r, &sized, Execution::Sequential), Err(SubsetError::UnknownDomain(_))));
    }

    #[test]
    fn single_domain_report() {
        let r: Vec<TaskScoreRecord> = (0..4).map(|i| TaskScoreRecord::new(format!("t{i}"), "a", "x", (i < 2) as u8)).collect();
        let rep = evaluate_subset(&["t0".into(), "t3".into()], &r).unwrap();
        assert_eq!(rep.domains.len(), 1);
        assert_eq!(rep.domains[0].delta_pp, Some(0.0));
    }
}
