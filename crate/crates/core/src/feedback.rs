//! Feedback as a prior: joint label distributions between the current and a
//! past clustering, their mutual information, the signed accept/reject
//! penalty and the penalized MAP objective.
//!
//! A past clustering enters only through its frozen responsibility matrix,
//! so records are immutable and independent of the model family.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::mixture::{
    log_likelihood, posterior_and_loglik, rows_to_matrix, total_loglik, validate_prob_rows,
    MixtureModel, MixtureParams, SoftClustering,
};

/// Denominator floor for [`auto_beta`].
pub const AUTO_BETA_EPS: f64 = 1e-8;
/// Callers cap automatically chosen penalty weights at this value.
pub const BETA_CAP: f64 = 1e6;

/// One round of analyst feedback on a clustering with `K_s` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeedbackRecordDoc", into = "FeedbackRecordDoc")]
pub struct FeedbackRecord {
    iteration: usize,
    accepted: BTreeSet<usize>,
    rejected: BTreeSet<usize>,
    past_resp: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeedbackRecordDoc {
    iteration: usize,
    accepted: BTreeSet<usize>,
    rejected: BTreeSet<usize>,
    past_resp: Vec<Vec<f64>>,
}

impl From<FeedbackRecord> for FeedbackRecordDoc {
    fn from(r: FeedbackRecord) -> Self {
        FeedbackRecordDoc {
            iteration: r.iteration,
            accepted: r.accepted,
            rejected: r.rejected,
            past_resp: r.past_resp.outer_iter().map(|row| row.to_vec()).collect(),
        }
    }
}

impl TryFrom<FeedbackRecordDoc> for FeedbackRecord {
    type Error = Error;

    fn try_from(doc: FeedbackRecordDoc) -> Result<Self> {
        let resp = rows_to_matrix(&doc.past_resp)?;
        FeedbackRecord::new(doc.iteration, doc.accepted, doc.rejected, resp)
    }
}

impl FeedbackRecord {
    pub fn new(
        iteration: usize,
        accepted: BTreeSet<usize>,
        rejected: BTreeSet<usize>,
        past_resp: Array2<f64>,
    ) -> Result<Self> {
        if past_resp.nrows() == 0 {
            return Err(Error::InvalidRecord("empty responsibility matrix".into()));
        }
        validate_prob_rows(&past_resp).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        let k = past_resp.ncols();
        if let Some(i) = accepted.intersection(&rejected).next() {
            return Err(Error::InvalidRecord(format!(
                "cluster {i} is both accepted and rejected"
            )));
        }
        if let Some(&i) = accepted.iter().chain(&rejected).find(|&&i| i >= k) {
            return Err(Error::InvalidRecord(format!(
                "cluster index {i} out of range for {k} clusters"
            )));
        }
        Ok(FeedbackRecord {
            iteration,
            accepted,
            rejected,
            past_resp,
        })
    }

    /// Every cluster of `clustering` rejected.
    pub fn reject_all(iteration: usize, clustering: &SoftClustering) -> Self {
        let rejected = (0..clustering.k()).collect();
        FeedbackRecord {
            iteration,
            accepted: BTreeSet::new(),
            rejected,
            past_resp: clustering.resp().clone(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn accepted(&self) -> &BTreeSet<usize> {
        &self.accepted
    }

    pub fn rejected(&self) -> &BTreeSet<usize> {
        &self.rejected
    }

    pub fn past_resp(&self) -> &Array2<f64> {
        &self.past_resp
    }

    pub fn n(&self) -> usize {
        self.past_resp.nrows()
    }

    pub fn k(&self) -> usize {
        self.past_resp.ncols()
    }

    /// +1 for rejected past clusters, −1 for accepted ones, 0 otherwise.
    pub fn coefficients(&self) -> Vec<f64> {
        (0..self.k())
            .map(|c| {
                if self.rejected.contains(&c) {
                    1.0
                } else if self.accepted.contains(&c) {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// K×K_s joint distribution over (current label, past label) with its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLabelDist {
    pub joint: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl JointLabelDist {
    pub fn from_joint(joint: Array2<f64>) -> Self {
        let row_marginal = joint.sum_axis(Axis(1));
        let col_marginal = joint.sum_axis(Axis(0));
        JointLabelDist {
            joint,
            row_marginal,
            col_marginal,
        }
    }

    /// Recomputes both marginals from the joint.
    pub fn refresh_marginals(&mut self) {
        self.row_marginal = self.joint.sum_axis(Axis(1));
        self.col_marginal = self.joint.sum_axis(Axis(0));
    }

    /// Matrix of `J log(J / (P Q))` with `0 log 0 := 0`.
    pub fn pointwise_terms(&self) -> Array2<f64> {
        let (k, ks) = self.joint.dim();
        Array2::from_shape_fn((k, ks), |(h, c)| {
            let j = self.joint[[h, c]].max(0.0);
            let p = self.row_marginal[h];
            let q = self.col_marginal[c];
            if j <= 0.0 || p <= 0.0 || q <= 0.0 {
                0.0
            } else {
                j * (j / (p * q)).ln()
            }
        })
    }

    /// `Σ_{h_s} c(h_s) Σ_h J log(J / (P Q))`.
    pub fn signed_penalty(&self, coefficients: &[f64]) -> f64 {
        let terms = self.pointwise_terms();
        if let Some(&c0) = coefficients.first() {
            if coefficients.iter().all(|&c| c == c0) {
                return if c0 == 0.0 { 0.0 } else { c0 * terms.sum() };
            }
        }
        terms
            .axis_iter(Axis(1))
            .zip(coefficients)
            .filter(|(_, &c)| c != 0.0)
            .map(|(col, &c)| c * col.sum())
            .sum()
    }
}

fn check_rows(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::RowMismatch { expected, found });
    }
    Ok(())
}

/// Joint label distribution from two responsibility matrices over the same points.
pub fn joint_from_matrices(current: &Array2<f64>, past_resp: &Array2<f64>) -> Result<JointLabelDist> {
    let n = current.nrows();
    check_rows(n, past_resp.nrows())?;
    let (k, ks) = (current.ncols(), past_resp.ncols());
    let sum = exec::reduce_chunks(
        n,
        |range| {
            let mut acc = Array2::<f64>::zeros((k, ks));
            for j in range {
                let r = past_resp.row(j);
                for h in 0..k {
                    let q = current[[j, h]];
                    if q != 0.0 {
                        acc.row_mut(h).scaled_add(q, &r);
                    }
                }
            }
            acc
        },
        |a, b| a + b,
    )
    .unwrap_or_else(|| Array2::zeros((k, ks)));
    Ok(JointLabelDist::from_joint(sum / n as f64))
}

/// `p(h, h_s) = (1/N) Σ_j p(h | x_j) p(h_s | x_j, θ_s)`.
pub fn joint_label_distribution(current: &SoftClustering, past_resp: &Array2<f64>) -> Result<JointLabelDist> {
    joint_from_matrices(current.resp(), past_resp)
}

/// `I(H; H_s)` of a joint label distribution.
pub fn mutual_information(dist: &JointLabelDist) -> f64 {
    dist.pointwise_terms().sum()
}

/// Rejected-column MI terms minus accepted-column MI terms. Clusters with no
/// opinion contribute nothing.
pub fn feedback_penalty(current: &SoftClustering, record: &FeedbackRecord) -> Result<f64> {
    let dist = joint_label_distribution(current, record.past_resp())?;
    Ok(dist.signed_penalty(&record.coefficients()))
}

fn check_history(n: usize, history: &[FeedbackRecord]) -> Result<()> {
    for rec in history {
        check_rows(n, rec.n())?;
    }
    Ok(())
}

/// `Σ_s f_s` for the model posterior of `params`.
pub fn total_penalty<M: MixtureModel>(params: &M, data: &Dataset, history: &[FeedbackRecord]) -> Result<f64> {
    check_history(data.n(), history)?;
    let (resp, _) = posterior_and_loglik(params, data)?;
    history
        .iter()
        .map(|rec| joint_from_matrices(&resp, rec.past_resp()).map(|d| d.signed_penalty(&rec.coefficients())))
        .sum()
}

/// `log p(x | θ) − β Σ_s f_s(θ, θ_s)` with a constant prior.
pub fn penalized_objective<M: MixtureModel>(
    params: &M,
    data: &Dataset,
    history: &[FeedbackRecord],
    beta: f64,
) -> Result<f64> {
    penalized_objective_with_prior(params, data, history, beta, |_| 0.0)
}

/// [`penalized_objective`] plus an additive `log π₀(θ)` term.
pub fn penalized_objective_with_prior<M, P>(
    params: &M,
    data: &Dataset,
    history: &[FeedbackRecord],
    beta: f64,
    log_prior: P,
) -> Result<f64>
where
    M: MixtureModel,
    P: Fn(&M) -> f64,
{
    if !(beta >= 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be >= 0, got {beta}")));
    }
    check_history(data.n(), history)?;
    let (resp, row_ll) = posterior_and_loglik(params, data)?;
    let ll = total_loglik(&row_ll);
    if beta == 0.0 || history.is_empty() {
        return Ok(ll + log_prior(params));
    }
    let mut penalty = 0.0;
    for rec in history {
        penalty += joint_from_matrices(&resp, rec.past_resp())?.signed_penalty(&rec.coefficients());
    }
    Ok(ll - beta * penalty + log_prior(params))
}

/// Weight that puts `β Σ_s |f_s|` on the same scale as `|log p(x | θ)|`.
///
/// Uncapped; see [`BETA_CAP`].
pub fn auto_beta<M: MixtureModel>(params: &M, data: &Dataset, history: &[FeedbackRecord]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InvalidConfig("auto_beta needs at least one feedback record".into()));
    }
    check_history(data.n(), history)?;
    let ll = log_likelihood(params, data)?;
    let (resp, _) = posterior_and_loglik(params, data)?;
    let mut penalty_mag = 0.0;
    for rec in history {
        penalty_mag += joint_from_matrices(&resp, rec.past_resp())?
            .signed_penalty(&rec.coefficients())
            .abs();
    }
    Ok(ll.abs() / penalty_mag.max(AUTO_BETA_EPS))
}

/// Derivative of one record's penalty with respect to a single point's
/// current-cluster probabilities, scaled by N and up to an additive constant
/// (which vanishes on the simplex).
///
/// For cluster `h` the value is
/// `Σ_{h_s} c(h_s) [ r(h_s) log(J(h,h_s) / (P(h) Q(h_s))) − J(h,h_s) / P(h) ]`
/// where `r` is the point's past responsibility row. Rows with `P(h) = 0`
/// use the limiting conditional `J(h, ·)/P(h) → r`.
pub(crate) fn penalty_row_gradient(
    dist: &JointLabelDist,
    coefficients: &[f64],
    past_row: ArrayView1<'_, f64>,
    out: &mut [f64],
) {
    let ks = coefficients.len();
    for (h, o) in out.iter_mut().enumerate() {
        let p = dist.row_marginal[h];
        let mut acc = 0.0;
        for c in 0..ks {
            let coef = coefficients[c];
            if coef == 0.0 {
                continue;
            }
            let q = dist.col_marginal[c];
            let r = past_row[c];
            let cond = if p > 0.0 {
                dist.joint[[h, c]].max(0.0) / p
            } else {
                r
            };
            if r > 0.0 && q > 0.0 {
                acc += coef * r * (cond.max(f64::MIN_POSITIVE) / q).ln();
            }
            acc -= coef * cond;
        }
        *o = acc;
    }
}

/// Gradient of the penalized objective with respect to the unconstrained
/// parameterization: weight logits (softmax), raw means, log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedGradient {
    pub logits: Array1<f64>,
    pub means: Array2<f64>,
    pub log_variances: Array2<f64>,
}

/// Unconstrained coordinates of a Gaussian mixture: `(log w, μ, log σ²)`.
pub fn to_unconstrained(params: &MixtureParams) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    (
        params.weights().mapv(f64::ln),
        params.means().clone(),
        params.variances().mapv(f64::ln),
    )
}

/// Inverse of [`to_unconstrained`]; logits are softmax-normalized.
pub fn from_unconstrained(
    logits: &Array1<f64>,
    means: &Array2<f64>,
    log_variances: &Array2<f64>,
) -> Result<MixtureParams> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|l| (l - m).exp());
    let w = &e / e.sum();
    MixtureParams::new(w, means.clone(), log_variances.mapv(f64::exp))
}

/// Analytic gradient of [`penalized_objective`] for a diagonal Gaussian mixture.
pub fn penalized_objective_gradient(
    params: &MixtureParams,
    data: &Dataset,
    history: &[FeedbackRecord],
    beta: f64,
) -> Result<UnconstrainedGradient> {
    check_history(data.n(), history)?;
    let n = data.n();
    let k = params.n_components();
    let d = params.dim();
    let (post, _) = posterior_and_loglik(params, data)?;

    let dists: Vec<JointLabelDist> = history
        .iter()
        .map(|rec| joint_from_matrices(&post, rec.past_resp()))
        .collect::<Result<_>>()?;
    let coefs: Vec<Vec<f64>> = history.iter().map(FeedbackRecord::coefficients).collect();

    // e[j, h] = ∂L/∂a_jh where a_jh is the log joint of point j and component h.
    let mut e = Array2::<f64>::zeros((n, k));
    let mut g = vec![0.0; k];
    let mut g_total = vec![0.0; k];
    for j in 0..n {
        g_total.iter_mut().for_each(|v| *v = 0.0);
        for (s, rec) in history.iter().enumerate() {
            penalty_row_gradient(&dists[s], &coefs[s], rec.past_resp().row(j), &mut g);
            for h in 0..k {
                g_total[h] += g[h] / n as f64;
            }
        }
        let p = post.row(j);
        let mean_g: f64 = (0..k).map(|h| p[h] * g_total[h]).sum();
        for h in 0..k {
            e[[j, h]] = p[h] - beta * p[h] * (g_total[h] - mean_g);
        }
    }

    let w = params.weights();
    let e_tot: Array1<f64> = e.sum_axis(Axis(0));
    let e_sum: f64 = e_tot.sum();
    let logits = Array1::from_shape_fn(k, |h| e_tot[h] - w[h] * e_sum);

    let mut means = Array2::<f64>::zeros((k, d));
    let mut log_variances = Array2::<f64>::zeros((k, d));
    for j in 0..n {
        let x = data.row(j);
        for h in 0..k {
            let ejh = e[[j, h]];
            for i in 0..d {
                let var = params.variances()[[h, i]];
                let diff = x[i] - params.means()[[h, i]];
                means[[h, i]] += ejh * diff / var;
                log_variances[[h, i]] += ejh * 0.5 * (diff * diff / var - 1.0);
            }
        }
    }
    Ok(UnconstrainedGradient {
        logits,
        means,
        log_variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::ResponsibilitySource;
    use ndarray::array;

    fn soft(m: Array2<f64>) -> SoftClustering {
        SoftClustering::new(m, ResponsibilitySource::ModelPosterior).unwrap()
    }

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    /// 4-term summation oracle for a 2×2 joint.
    fn mi_oracle(j: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let p = [j[0][0] + j[0][1], j[1][0] + j[1][1]];
        let q = [j[0][0] + j[1][0], j[0][1] + j[1][1]];
        let mut t = [[0.0; 2]; 2];
        for h in 0..2 {
            for c in 0..2 {
                if j[h][c] > 0.0 {
                    t[h][c] = j[h][c] * (j[h][c] / (p[h] * q[c])).ln();
                }
            }
        }
        t
    }

    #[test]
    fn identity_joint() {
        let d = joint_label_distribution(&soft(array![[1.0, 0.0], [0.0, 1.0]]), &array![[1.0, 0.0], [0.0, 1.0]])
            .unwrap();
        assert_eq!(d.joint, array![[0.5, 0.0], [0.0, 0.5]]);
        assert!((mutual_information(&d) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_past_gives_product_joint() {
        let cur = soft(array![[0.9, 0.1], [0.3, 0.7], [0.5, 0.5]]);
        let d = joint_label_distribution(&cur, &array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]).unwrap();
        let marg = cur.column_means();
        for h in 0..2 {
            for c in 0..2 {
                assert!((d.joint[[h, c]] - 0.5 * marg[h]).abs() < 1e-15);
            }
        }
        assert!(mutual_information(&d).abs() < 1e-15);
    }

    #[test]
    fn hand_outer_product_joint() {
        let cur = soft(array![[0.7, 0.3], [0.2, 0.8]]);
        let past = array![[0.9, 0.1], [0.4, 0.6]];
        let d = joint_label_distribution(&cur, &past).unwrap();
        let want = [
            [(0.7 * 0.9 + 0.2 * 0.4) / 2.0, (0.7 * 0.1 + 0.2 * 0.6) / 2.0],
            [(0.3 * 0.9 + 0.8 * 0.4) / 2.0, (0.3 * 0.1 + 0.8 * 0.6) / 2.0],
        ];
        assert!((want[0][0] - 0.355f64).abs() < 1e-15);
        for h in 0..2 {
            for c in 0..2 {
                assert!((d.joint[[h, c]] - want[h][c]).abs() < 1e-15);
            }
        }
        let t = mi_oracle(&want);
        let mi: f64 = t.iter().flatten().sum();
        assert!((mutual_information(&d) - mi).abs() < 1e-15);

        let rec = FeedbackRecord::new(0, set(&[1]), set(&[0]), past).unwrap();
        let pen = feedback_penalty(&cur, &rec).unwrap();
        let want_pen = (t[0][0] + t[1][0]) - (t[0][1] + t[1][1]);
        assert!((pen - want_pen).abs() < 1e-15);
    }

    #[test]
    fn penalty_special_cases() {
        let cur = soft(array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]);
        let past = array![[0.9, 0.1], [0.4, 0.6], [0.05, 0.95]];
        let mi = mutual_information(&joint_label_distribution(&cur, &past).unwrap());
        let none = FeedbackRecord::new(0, set(&[]), set(&[]), past.clone()).unwrap();
        assert_eq!(feedback_penalty(&cur, &none).unwrap(), 0.0);
        let rej = FeedbackRecord::new(0, set(&[]), set(&[0, 1]), past.clone()).unwrap();
        assert_eq!(feedback_penalty(&cur, &rej).unwrap(), mi);
        let acc = FeedbackRecord::new(0, set(&[0, 1]), set(&[]), past).unwrap();
        assert_eq!(feedback_penalty(&cur, &acc).unwrap(), -mi);
    }

    #[test]
    fn record_validation() {
        let past = array![[1.0, 0.0]];
        assert!(FeedbackRecord::new(0, set(&[0]), set(&[0]), past.clone()).is_err());
        assert!(FeedbackRecord::new(0, set(&[2]), set(&[]), past.clone()).is_err());
        assert!(FeedbackRecord::new(0, set(&[]), set(&[]), array![[0.7, 0.7]]).is_err());
        let cur = soft(array![[1.0, 0.0], [0.0, 1.0]]);
        let rec = FeedbackRecord::new(0, set(&[]), set(&[0]), past).unwrap();
        assert!(matches!(feedback_penalty(&cur, &rec), Err(Error::RowMismatch { .. })));
    }

    #[test]
    fn record_json_round_trip() {
        let rec = FeedbackRecord::new(3, set(&[1]), set(&[0]), array![[0.25, 0.75], [1.0 / 3.0, 2.0 / 3.0]])
            .unwrap();
        let s = serde_json::to_string(&rec).unwrap();
        let back: FeedbackRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rec);
        assert!(serde_json::from_str::<FeedbackRecord>(
            r#"{"iteration":0,"accepted":[0],"rejected":[0],"past_resp":[[1.0,0.0]]}"#
        )
        .is_err());
    }

    fn small_problem() -> (Dataset, MixtureParams) {
        let rows = vec![vec![0.0, 0.1], vec![0.3, -0.2], vec![2.0, 1.9], vec![2.2, 2.4], vec![1.0, 1.1]];
        let data = Dataset::from_rows(&rows, None).unwrap();
        let p = MixtureParams::new(array![0.45, 0.55], array![[0.1, 0.0], [2.0, 2.0]], array![[0.5, 0.4], [0.6, 0.9]])
            .unwrap();
        (data, p)
    }

    #[test]
    fn objective_reduces_to_log_likelihood() {
        let (data, p) = small_problem();
        let ll = log_likelihood(&p, &data).unwrap();
        assert_eq!(penalized_objective(&p, &data, &[], 3.0).unwrap(), ll);
        let rec = FeedbackRecord::reject_all(0, &soft(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.5, 0.5]]));
        assert_eq!(penalized_objective(&p, &data, &[rec], 0.0).unwrap(), ll);
    }

    #[test]
    fn objective_composes_terms() {
        let (data, p) = small_problem();
        let past = soft(array![[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.3, 0.7], [0.5, 0.5]]);
        let rec = FeedbackRecord::reject_all(0, &past);
        let ll = log_likelihood(&p, &data).unwrap();
        let cur = crate::mixture::responsibilities(&p, &data).unwrap();
        let mi = mutual_information(&joint_label_distribution(&cur, past.resp()).unwrap());
        let got = penalized_objective(&p, &data, std::slice::from_ref(&rec), 2.5).unwrap();
        assert!((got - (ll - 2.5 * mi)).abs() < 1e-12);

        let beta = auto_beta(&p, &data, &[rec]).unwrap();
        assert!((beta - ll.abs() / mi).abs() < 1e-9 * beta);
        assert!(auto_beta(&p, &data, &[]).is_err());
    }

    #[test]
    fn auto_beta_with_zero_penalty_hits_epsilon_floor() {
        let (data, p) = small_problem();
        let rec = FeedbackRecord::new(0, set(&[]), set(&[]), Array2::from_elem((5, 2), 0.5)).unwrap();
        let ll = log_likelihood(&p, &data).unwrap();
        let beta = auto_beta(&p, &data, &[rec]).unwrap();
        assert!(beta.is_finite());
        assert!((beta - ll.abs() / AUTO_BETA_EPS).abs() < 1e-6 * beta);
    }

    #[test]
    fn unconstrained_round_trip() {
        let (_, p) = small_problem();
        let (l, m, v) = to_unconstrained(&p);
        let back = from_unconstrained(&l, &m, &v).unwrap();
        for (a, b) in back.weights().iter().zip(p.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
