//! Metrics, the simulated analyst and the random-restarts baseline.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::exec;
use crate::feedback::FeedbackRecord;
use crate::mixture::{em_fit, log_likelihood, EmConfig, SoftClustering};
use crate::optimizer::{fit_with_feedback, FitConfig};

/// Cluster index per point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HardClusteringDoc", into = "HardClusteringDoc")]
pub struct HardClustering {
    labels: Vec<usize>,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct HardClusteringDoc {
    labels: Vec<usize>,
    k: usize,
}

impl TryFrom<HardClusteringDoc> for HardClustering {
    type Error = Error;
    fn try_from(d: HardClusteringDoc) -> Result<Self> {
        HardClustering::new(d.labels, d.k)
    }
}

impl From<HardClustering> for HardClusteringDoc {
    fn from(h: HardClustering) -> Self {
        HardClusteringDoc { labels: h.labels, k: h.k }
    }
}

impl HardClustering {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidParams(format!("label {bad} out of range for k = {k}")));
        }
        Ok(HardClustering { labels, k })
    }

    /// Uses `max label + 1` clusters.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        HardClustering { labels, k }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

/// Per-row argmax, ties to the smallest index.
pub fn hard_assign(soft: &SoftClustering) -> HardClustering {
    let labels = soft
        .resp()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (h, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = h;
                }
            }
            best
        })
        .collect();
    HardClustering { labels, k: soft.k() }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// `(majority count, size)` per cluster.
fn majority_counts<L: Eq + Hash>(pred: &HardClustering, gold: &[L]) -> Vec<(usize, usize)> {
    let mut counts: Vec<HashMap<&L, usize>> = (0..pred.k).map(|_| HashMap::new()).collect();
    for (&c, g) in pred.labels.iter().zip(gold) {
        *counts[c].entry(g).or_default() += 1;
    }
    counts
        .iter()
        .map(|m| (m.values().copied().max().unwrap_or(0), m.values().sum()))
        .collect()
}

pub fn purity<L: Eq + Hash>(pred: &HardClustering, gold: &[L]) -> Result<f64> {
    check_len(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(Error::EmptyInput);
    }
    let majority: usize = majority_counts(pred, gold).iter().map(|&(m, _)| m).sum();
    Ok(majority as f64 / gold.len() as f64)
}

/// Majority fraction per cluster; empty clusters are 1.0.
pub fn cluster_purities<L: Eq + Hash>(pred: &HardClustering, gold: &[L]) -> Result<Vec<f64>> {
    check_len(pred.len(), gold.len())?;
    Ok(majority_counts(pred, gold)
        .into_iter()
        .map(|(m, size)| if size == 0 { 1.0 } else { m as f64 / size as f64 })
        .collect())
}

/// Adjusted Rand index from the contingency table.
pub fn adjusted_rand_score(a: &HardClustering, b: &HardClustering) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let n = a.len() as u128;
    let pairs = |c: u128| c * c.saturating_sub(1) / 2;
    let mut table: HashMap<(usize, usize), u128> = HashMap::new();
    let mut rows = vec![0u128; a.k];
    let mut cols = vec![0u128; b.k];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        *table.entry((x, y)).or_default() += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let n11: u128 = table.values().map(|&c| pairs(c)).sum();
    let pa: u128 = rows.iter().map(|&c| pairs(c)).sum();
    let pb: u128 = cols.iter().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    // ARI = (n11 − pa·pb/C) / ((pa + pb)/2 − pa·pb/C), scaled by 2C.
    let num = 2.0 * (n11 as f64 * total as f64 - pa as f64 * pb as f64);
    let den = (pa + pb) as f64 * total as f64 - 2.0 * pa as f64 * pb as f64;
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Mean ARS over unordered pairs.
pub fn diversity(clusterings: &[HardClustering]) -> Result<f64> {
    if clusterings.len() < 2 {
        return Err(Error::TooFewClusterings {
            needed: 2,
            found: clusterings.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..clusterings.len() {
        for j in i + 1..clusterings.len() {
            sum += adjusted_rand_score(&clusterings[i], &clusterings[j])?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn optional_diversity(clusterings: &[HardClustering]) -> Result<Option<f64>> {
    if clusterings.len() < 2 {
        Ok(None)
    } else {
        diversity(clusterings).map(Some)
    }
}

/// Judgement of the threshold-purity analyst on one clustering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedFeedback {
    pub accepted: BTreeSet<usize>,
    pub rejected: BTreeSet<usize>,
    pub all_rejected: bool,
}

pub const DEFAULT_PURITY_THRESHOLD: f64 = 0.5;

/// Rejects clusters with purity strictly below `threshold`; rejects everything when nothing passes.
pub fn simulated_user<L: Eq + Hash>(pred: &HardClustering, gold: &[L], threshold: f64) -> Result<SimulatedFeedback> {
    Ok(judge(&cluster_purities(pred, gold)?, threshold))
}

/// The simulated analyst applied to precomputed per-cluster purities.
pub fn judge(purities: &[f64], threshold: f64) -> SimulatedFeedback {
    let (accepted, rejected): (BTreeSet<usize>, BTreeSet<usize>) =
        (0..purities.len()).partition(|&h| purities[h] >= threshold);
    if accepted.is_empty() {
        SimulatedFeedback {
            accepted,
            rejected: (0..purities.len()).collect(),
            all_rejected: true,
        }
    } else {
        SimulatedFeedback {
            accepted,
            rejected,
            all_rejected: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionMode {
    /// Simulated analyst judges every cluster until all are accepted.
    PerCluster,
    /// Every cluster is rejected, every round.
    Global,
}

impl SessionMode {
    pub fn label(self) -> &'static str {
        match self {
            SessionMode::PerCluster => "per-cluster",
            SessionMode::Global => "global",
        }
    }
}

impl std::str::FromStr for SessionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per-cluster" => Ok(SessionMode::PerCluster),
            "global" => Ok(SessionMode::Global),
            other => Err(format!("unknown mode {other:?}; valid modes: per-cluster, global")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub fit: FitConfig,
    /// Per-cluster mode: cap on feedback rounds. Global mode: number of clusterings produced.
    pub iterations: usize,
    pub threshold: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            fit: FitConfig::default(),
            iterations: 10,
            threshold: DEFAULT_PURITY_THRESHOLD,
        }
    }
}

/// Everything produced by one simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: SessionMode,
    pub clusterings: Vec<HardClustering>,
    pub per_clustering_purity: Vec<f64>,
    pub max_purity: f64,
    pub mean_pairwise_ars: Option<f64>,
    /// Feedback rounds that were submitted.
    pub iterations: usize,
    pub stabilized: bool,
    pub log_likelihoods: Vec<f64>,
    pub converged: Vec<bool>,
    pub kl_residuals: Vec<f64>,
    pub feedback: Vec<SimulatedFeedback>,
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the fit → judge → refit loop against gold labels.
pub fn run_simulated_session(data: &Dataset, k: usize, mode: SessionMode, config: &SimulationConfig) -> Result<SessionReport> {
    let gold = data.gold_labels().ok_or(Error::MissingGoldLabels)?;
    if config.iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be positive".into()));
    }
    let mut history: Vec<FeedbackRecord> = Vec::new();
    let mut report = SessionReport {
        mode,
        clusterings: Vec::new(),
        per_clustering_purity: Vec::new(),
        max_purity: 0.0,
        mean_pairwise_ars: None,
        iterations: 0,
        stabilized: false,
        log_likelihoods: Vec::new(),
        converged: Vec::new(),
        kl_residuals: Vec::new(),
        feedback: Vec::new(),
    };
    let max_fits = match mode {
        SessionMode::PerCluster => config.iterations + 1,
        SessionMode::Global => config.iterations,
    };
    for round in 0..max_fits {
        let fit_cfg = FitConfig {
            seed: derive_seed(config.fit.seed, round as u64),
            ..config.fit
        };
        let fit = fit_with_feedback(data, k, &history, &fit_cfg)?;
        let hard = hard_assign(&fit.clustering);
        report.per_clustering_purity.push(purity(&hard, gold)?);
        report.log_likelihoods.push(log_likelihood(&fit.params, data)?);
        report.converged.push(fit.converged);
        report.kl_residuals.push(fit.kl_residual);
        report.clusterings.push(hard.clone());
        if round + 1 == max_fits {
            break;
        }
        let fb = match mode {
            SessionMode::PerCluster => {
                let fb = simulated_user(&hard, gold, config.threshold)?;
                if fb.rejected.is_empty() {
                    report.stabilized = true;
                    report.feedback.push(fb);
                    break;
                }
                fb
            }
            SessionMode::Global => SimulatedFeedback {
                accepted: BTreeSet::new(),
                rejected: (0..k).collect(),
                all_rejected: true,
            },
        };
        history.push(FeedbackRecord::new(
            round,
            fb.accepted.clone(),
            fb.rejected.clone(),
            fit.clustering.into_resp(),
        )?);
        report.feedback.push(fb);
        report.iterations += 1;
    }
    report.max_purity = max_of(&report.per_clustering_purity);
    report.mean_pairwise_ars = optional_diversity(&report.clusterings)?;
    Ok(report)
}

/// Independent EM fits, one per seed.
pub fn random_restarts_baseline(data: &Dataset, k: usize, seeds: &[u64], config: &EmConfig) -> Result<Vec<HardClustering>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one run".into()));
    }
    exec::map_tasks(seeds, |&seed| {
        em_fit(data, k, &EmConfig { seed, ..*config }).map(|r| hard_assign(&r.clustering))
    })
    .into_iter()
    .collect()
}

/// Metrics for a set of clusterings that did not come from a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub clusterings: Vec<HardClustering>,
    pub per_clustering_purity: Option<Vec<f64>>,
    pub max_purity: Option<f64>,
    pub mean_pairwise_ars: Option<f64>,
}

impl BaselineReport {
    pub fn new(clusterings: Vec<HardClustering>, gold: Option<&[String]>) -> Result<Self> {
        let per = gold
            .map(|g| clusterings.iter().map(|c| purity(c, g)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(BaselineReport {
            max_purity: per.as_deref().map(max_of),
            per_clustering_purity: per,
            mean_pairwise_ars: optional_diversity(&clusterings)?,
            clusterings,
        })
    }
}

/// Repeated sessions of one mode, with averages across repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub mode: SessionMode,
    pub sessions: Vec<SessionReport>,
    pub mean_max_purity: f64,
    /// Mean over sessions that produced at least two clusterings.
    pub mean_pairwise_ars: Option<f64>,
    pub stabilized: usize,
}

impl SimulationReport {
    pub fn from_sessions(mode: SessionMode, sessions: Vec<SessionReport>) -> Self {
        let n = sessions.len().max(1) as f64;
        let mean_max_purity = sessions.iter().map(|s| s.max_purity).sum::<f64>() / n;
        let ars: Vec<f64> = sessions.iter().filter_map(|s| s.mean_pairwise_ars).collect();
        let mean_pairwise_ars = (!ars.is_empty()).then(|| ars.iter().sum::<f64>() / ars.len() as f64);
        let stabilized = sessions.iter().filter(|s| s.stabilized).count();
        SimulationReport {
            mode,
            sessions,
            mean_max_purity,
            mean_pairwise_ars,
            stabilized,
        }
    }
}

/// Runs `repeats` sessions with seeds derived from `config.fit.seed`, concurrently when enabled.
pub fn run_simulation(
    data: &Dataset,
    k: usize,
    mode: SessionMode,
    config: &SimulationConfig,
    repeats: usize,
) -> Result<SimulationReport> {
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| derive_seed(config.fit.seed, 1_000_000 + r)).collect();
    let sessions = exec::map_tasks(&seeds, |&seed| {
        let cfg = SimulationConfig {
            fit: FitConfig { seed, ..config.fit },
            ..*config
        };
        run_simulated_session(data, k, mode, &cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SimulationReport::from_sessions(mode, sessions))
}

/// One row of a method × metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub purity: Option<f64>,
    pub ars: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table with one row per method.
pub fn format_table(rows: &[MethodRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", "method", "purity", "ARS");
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", r.method, cell(r.purity), cell(r.ars));
    }
    out
}

impl SimulationReport {
    pub fn table_row(&self) -> MethodRow {
        MethodRow {
            method: self.mode.label().to_string(),
            purity: Some(self.mean_max_purity),
            ars: self.mean_pairwise_ars,
        }
    }
}

impl BaselineReport {
    pub fn table_row(&self) -> MethodRow {
        MethodRow {
            method: "random-restarts".to_string(),
            purity: self.max_purity,
            ars: self.mean_pairwise_ars,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::ResponsibilitySource;
    use ndarray::array;

    fn hc(l: &[usize]) -> HardClustering {
        HardClustering::from_labels(l.to_vec())
    }

    #[test]
    fn hard_assign_cases() {
        let s = SoftClustering::new(array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], ResponsibilitySource::ModelPosterior)
            .unwrap();
        assert_eq!(hard_assign(&s).labels(), &[0, 1, 0]);
    }

    #[test]
    fn purity_cases() {
        let g = ["A", "A", "B", "B"];
        assert_eq!(purity(&hc(&[0, 0, 1, 1]), &g).unwrap(), 1.0);
        assert_eq!(purity(&hc(&[0, 1, 0, 1]), &g).unwrap(), 0.5);
        let g6 = ["A", "A", "A", "B", "B", "C"];
        assert!((purity(&hc(&[0, 0, 1, 1, 1, 1]), &g6).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(cluster_purities(&hc(&[0, 0, 1, 1, 1, 1]), &g6).unwrap(), vec![1.0, 0.5]);
        let all0 = HardClustering::new(vec![0; 4], 2).unwrap();
        assert_eq!(cluster_purities(&all0, &g).unwrap(), vec![0.5, 1.0]);
        assert!(purity(&hc(&[0, 0]), &g).is_err());
    }

    #[test]
    fn ars_cases() {
        let a = hc(&[0, 0, 1, 1, 2]);
        assert_eq!(adjusted_rand_score(&a, &a).unwrap(), 1.0);
        assert_eq!(adjusted_rand_score(&a, &hc(&[2, 2, 0, 0, 1])).unwrap(), 1.0);
        // pairs: a-same {01,23}, b-same {02,13}, none shared; C = 6, pa = pb = 2.
        // (0 − 4/6) / (2 − 4/6) = −0.5
        assert!((adjusted_rand_score(&hc(&[0, 0, 1, 1]), &hc(&[0, 1, 0, 1])).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(adjusted_rand_score(&hc(&[0, 0, 0]), &hc(&[0, 0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn diversity_cases() {
        let a = hc(&[0, 0, 1, 1]);
        let b = hc(&[0, 1, 0, 1]);
        let c = hc(&[0, 0, 0, 1]);
        assert_eq!(diversity(&[a.clone(), a.clone()]).unwrap(), 1.0);
        let ab = adjusted_rand_score(&a, &b).unwrap();
        let ac = adjusted_rand_score(&a, &c).unwrap();
        let bc = adjusted_rand_score(&b, &c).unwrap();
        let d = diversity(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert!((d - (ab + ac + bc) / 3.0).abs() < 1e-15);
        assert!((diversity(&[c, a.clone(), b]).unwrap() - d).abs() < 1e-15);
        assert!(diversity(&[a]).is_err());
    }

    #[test]
    fn simulated_user_cases() {
        let f = judge(&[0.6, 0.4], 0.5);
        assert_eq!(f.accepted, [0].into());
        assert_eq!(f.rejected, [1].into());
        assert!(!f.all_rejected);
        let f = judge(&[0.3, 0.2], 0.5);
        assert!(f.all_rejected);
        assert_eq!(f.rejected, [0, 1].into());
        assert!(f.accepted.is_empty());
        let f = judge(&[1.0, 1.0], 0.5);
        assert!(f.rejected.is_empty());
        assert_eq!(judge(&[0.5], 0.5).accepted, [0].into());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("global".parse::<SessionMode>().unwrap(), SessionMode::Global);
        let err = "globl".parse::<SessionMode>().unwrap_err();
        assert!(err.contains("per-cluster") && err.contains("global"));
    }

    #[test]
    fn table_layout() {
        let t = format_table(&[
            MethodRow {
                method: "global".into(),
                purity: Some(0.75),
                ars: None,
            },
            MethodRow {
                method: "random-restarts".into(),
                purity: None,
                ars: Some(0.125),
            },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("0.7500") && lines[1].trim_end().ends_with('-'));
        assert!(lines[2].contains("0.1250"));
    }
}
