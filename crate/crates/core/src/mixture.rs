//! Diagonal-covariance Gaussian mixtures: densities, responsibilities,
//! log-likelihood, the weighted M-step, seeding and plain EM.
//!
//! All per-point arithmetic is in the log domain. Row-wise work is routed
//! through [`crate::exec`], so results are identical with and without the
//! `parallel` feature.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;

/// Lower bound on any mixing weight.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Variance floor as a multiple of the mean per-dimension data variance.
pub const VARIANCE_FLOOR_SCALE: f64 = 1e-6;
/// A component whose total responsibility is below this fraction of N is re-seeded.
pub const EMPTY_MASS_FRACTION: f64 = 1e-8;

/// Tolerance used when validating probability vectors.
pub(crate) const PROB_TOL: f64 = 1e-9;

/// Component family interface. Only the Gaussian family is implemented, but
/// the responsibility, likelihood and optimizer code only see this trait.
pub trait MixtureModel: Clone + Send + Sync {
    fn n_components(&self) -> usize;

    fn dim(&self) -> usize;

    fn log_weights(&self) -> Vec<f64>;

    /// Writes `log p(x | h)` for every component into `out`.
    fn component_log_density_row(&self, x: ArrayView1<'_, f64>, out: &mut [f64]);

    /// Maximiser of the expected complete-data log-likelihood under `assignment`.
    fn fit_weighted(data: &Dataset, assignment: &SoftClustering) -> Result<Self>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceType {
    #[default]
    Diag,
}

/// Mixing weights, means (K×D) and diagonal variances (K×D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureParamsDoc", into = "MixtureParamsDoc")]
pub struct MixtureParams {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    log_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureParamsDoc {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
    #[serde(default)]
    covariance_type: CovarianceType,
}

impl From<MixtureParams> for MixtureParamsDoc {
    fn from(p: MixtureParams) -> Self {
        MixtureParamsDoc {
            weights: p.weights.to_vec(),
            means: p.means.outer_iter().map(|r| r.to_vec()).collect(),
            covariances: p.variances.outer_iter().map(|r| r.to_vec()).collect(),
            covariance_type: CovarianceType::Diag,
        }
    }
}

impl TryFrom<MixtureParamsDoc> for MixtureParams {
    type Error = Error;

    fn try_from(doc: MixtureParamsDoc) -> Result<Self> {
        let k = doc.weights.len();
        let d = doc.means.first().map_or(0, Vec::len);
        let to_matrix = |rows: &[Vec<f64>], what: &str| -> Result<Array2<f64>> {
            if rows.len() != k || rows.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidParams(format!("{what} must be {k}x{d}")));
            }
            Ok(Array2::from_shape_fn((k, d), |(h, i)| rows[h][i]))
        };
        let means = to_matrix(&doc.means, "means")?;
        let vars = to_matrix(&doc.covariances, "covariances")?;
        MixtureParams::new(Array1::from_vec(doc.weights), means, vars)
    }
}

impl MixtureParams {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParams("no components".into()));
        }
        if means.nrows() != k || variances.dim() != means.dim() || means.ncols() == 0 {
            return Err(Error::InvalidParams(format!(
                "shape mismatch: {k} weights, means {:?}, variances {:?}",
                means.dim(),
                variances.dim()
            )));
        }
        let sum: f64 = weights.sum();
        if (sum - 1.0).abs() > PROB_TOL || weights.iter().any(|&w| !(w >= WEIGHT_FLOOR * (1.0 - 1e-9))) {
            return Err(Error::InvalidParams(format!(
                "weights must be >= {WEIGHT_FLOOR} and sum to 1 (sum = {sum})"
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite mean".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParams("variances must be positive and finite".into()));
        }
        let log_norms = log_norms(&variances);
        Ok(MixtureParams {
            weights,
            means,
            variances,
            log_norms,
        })
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    /// Diagonal covariances, one row per component.
    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    pub fn covariance_type(&self) -> CovarianceType {
        CovarianceType::Diag
    }

    /// Reorders components: new component `i` is old component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MixtureParams {
        let k = self.weights.len();
        assert_eq!(perm.len(), k);
        MixtureParams {
            weights: Array1::from_shape_fn(k, |i| self.weights[perm[i]]),
            means: self.means.select(Axis(0), perm),
            variances: self.variances.select(Axis(0), perm),
            log_norms: perm.iter().map(|&h| self.log_norms[h]).collect(),
        }
    }
}

fn log_norms(variances: &Array2<f64>) -> Vec<f64> {
    variances
        .outer_iter()
        .map(|v| -0.5 * v.iter().map(|&s| (2.0 * PI * s).ln()).sum::<f64>())
        .collect()
}

impl MixtureModel for MixtureParams {
    fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    fn component_log_density_row(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        gaussian_row(self, x, out);
    }

    fn fit_weighted(data: &Dataset, assignment: &SoftClustering) -> Result<Self> {
        m_step(data, assignment)
    }
}

#[inline]
fn gaussian_row(p: &MixtureParams, x: ArrayView1<'_, f64>, out: &mut [f64]) {
    for (h, o) in out.iter_mut().enumerate() {
        let mean = p.means.row(h);
        let var = p.variances.row(h);
        let mut q = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(mean.iter()).zip(var.iter()) {
            let dx = xi - m;
            q += dx * dx / v;
        }
        *o = p.log_norms[h] - 0.5 * q;
    }
}

/// Where a responsibility matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponsibilitySource {
    ModelPosterior,
    Variational,
}

/// N×K matrix whose rows are probability vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SoftClusteringDoc", into = "SoftClusteringDoc")]
pub struct SoftClustering {
    resp: Array2<f64>,
    source: ResponsibilitySource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SoftClusteringDoc {
    resp: Vec<Vec<f64>>,
    source: ResponsibilitySource,
}

impl From<SoftClustering> for SoftClusteringDoc {
    fn from(s: SoftClustering) -> Self {
        SoftClusteringDoc {
            resp: s.resp.outer_iter().map(|r| r.to_vec()).collect(),
            source: s.source,
        }
    }
}

impl TryFrom<SoftClusteringDoc> for SoftClustering {
    type Error = Error;

    fn try_from(doc: SoftClusteringDoc) -> Result<Self> {
        SoftClustering::new(rows_to_matrix(&doc.resp)?, doc.source)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: r.len(),
        });
    }
    Ok(Array2::from_shape_fn((n, k), |(j, h)| rows[j][h]))
}

/// Checks that every row is a probability vector.
pub(crate) fn validate_prob_rows(m: &Array2<f64>) -> Result<()> {
    if m.ncols() == 0 {
        return Err(Error::InvalidParams("responsibility matrix has no columns".into()));
    }
    for (j, row) in m.outer_iter().enumerate() {
        let s: f64 = row.sum();
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (s - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidParams(format!(
                "row {j} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

impl SoftClustering {
    pub fn new(resp: Array2<f64>, source: ResponsibilitySource) -> Result<Self> {
        validate_prob_rows(&resp)?;
        Ok(SoftClustering { resp, source })
    }

    pub(crate) fn from_valid(resp: Array2<f64>, source: ResponsibilitySource) -> Self {
        SoftClustering { resp, source }
    }

    pub fn resp(&self) -> &Array2<f64> {
        &self.resp
    }

    pub fn into_resp(self) -> Array2<f64> {
        self.resp
    }

    pub fn source(&self) -> ResponsibilitySource {
        self.source
    }

    pub fn n(&self) -> usize {
        self.resp.nrows()
    }

    pub fn k(&self) -> usize {
        self.resp.ncols()
    }

    /// Column means, i.e. the empirical cluster prior.
    pub fn column_means(&self) -> Array1<f64> {
        self.resp.mean_axis(Axis(0)).expect("n >= 1")
    }

    pub fn with_source(mut self, source: ResponsibilitySource) -> Self {
        self.source = source;
        self
    }
}

/// Outcome of a mixture fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MixtureParams,
    /// Model posterior under the final parameters.
    pub clustering: SoftClustering,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `max_j KL(q_j || p(h | x_j))` at the final state; zero for plain EM.
    #[serde(default)]
    pub kl_residual: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub cancelled: bool,
}

impl FitResult {
    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }
}

fn check_dim<M: MixtureModel>(params: &M, data: &Dataset) -> Result<()> {
    if params.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: data.dim(),
        });
    }
    Ok(())
}

/// Entry (j, h) is `log p(x_j | h)`.
pub fn component_log_densities<M: MixtureModel>(params: &M, data: &Dataset) -> Result<Array2<f64>> {
    check_dim(params, data)?;
    let k = params.n_components();
    let flat = exec::fill_rows(data.n(), k, |j, out| {
        params.component_log_density_row(data.row(j), out)
    });
    Ok(Array2::from_shape_vec((data.n(), k), flat).expect("shape"))
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior rows and per-point log-likelihoods from a single pass.
pub(crate) fn posterior_and_loglik<M: MixtureModel>(
    params: &M,
    data: &Dataset,
) -> Result<(Array2<f64>, Vec<f64>)> {
    check_dim(params, data)?;
    let k = params.n_components();
    let lw = params.log_weights();
    // Each row stores K responsibilities followed by the row log-likelihood.
    let width = k + 1;
    let flat = exec::fill_rows(data.n(), width, |j, out| {
        let (row, tail) = out.split_at_mut(k);
        params.component_log_density_row(data.row(j), row);
        for (r, w) in row.iter_mut().zip(&lw) {
            *r += w;
        }
        let lse = log_sum_exp(row);
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
        }
        tail[0] = lse;
    });
    let n = data.n();
    let mut resp = Array2::zeros((n, k));
    let mut ll = Vec::with_capacity(n);
    for (j, chunk) in flat.chunks_exact(width).enumerate() {
        resp.row_mut(j).assign(&ArrayView1::from(&chunk[..k]));
        ll.push(chunk[k]);
    }
    Ok((resp, ll))
}

/// Sums per-row log-likelihoods in the same order as [`log_likelihood`].
pub(crate) fn total_loglik(row_ll: &[f64]) -> f64 {
    exec::sum_indices(row_ll.len(), |j| row_ll[j])
}

/// `p(h | x_j)` for every point, computed with log-sum-exp.
pub fn responsibilities<M: MixtureModel>(params: &M, data: &Dataset) -> Result<SoftClustering> {
    let (resp, _) = posterior_and_loglik(params, data)?;
    Ok(SoftClustering::from_valid(resp, ResponsibilitySource::ModelPosterior))
}

/// `Σ_j log Σ_h w_h p(x_j | h)`.
pub fn log_likelihood<M: MixtureModel>(params: &M, data: &Dataset) -> Result<f64> {
    check_dim(params, data)?;
    let k = params.n_components();
    let lw = params.log_weights();
    Ok(exec::sum_indices(data.n(), |j| {
        let mut row = vec![0.0; k];
        params.component_log_density_row(data.row(j), &mut row);
        for (r, w) in row.iter_mut().zip(&lw) {
            *r += w;
        }
        log_sum_exp(&row)
    }))
}

/// Variance floor for a dataset: a small multiple of its mean feature variance.
pub fn variance_floor(data: &Dataset) -> f64 {
    (VARIANCE_FLOOR_SCALE * data.feature_variances().mean().unwrap_or(0.0)).max(1e-12)
}

/// Clamps weights below [`WEIGHT_FLOOR`] and rescales the rest so they sum to one.
///
/// This is the exact maximiser of `Σ n_h log w_h` on the floored simplex, so
/// it leaves unclamped inputs untouched.
pub(crate) fn floor_weights(raw: &mut [f64]) {
    let k = raw.len();
    let mut clamped = vec![false; k];
    loop {
        let fixed_mass = WEIGHT_FLOOR * clamped.iter().filter(|&&c| c).count() as f64;
        let free: f64 = raw
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|(w, _)| *w)
            .sum();
        let scale = if free > 0.0 { (1.0 - fixed_mass) / free } else { 0.0 };
        let mut changed = false;
        for h in 0..k {
            if !clamped[h] && raw[h] * scale < WEIGHT_FLOOR {
                clamped[h] = true;
                changed = true;
            }
        }
        if !changed {
            let needs_rescale = clamped.iter().any(|&c| c) || (free - 1.0).abs() > 0.0;
            if needs_rescale {
                for h in 0..k {
                    raw[h] = if clamped[h] { WEIGHT_FLOOR } else { raw[h] * scale };
                }
            }
            return;
        }
    }
}

struct SufficientStats {
    mass: Vec<f64>,
    sums: Array2<f64>,
}

/// Weighted M-step: column-mean weights, weighted means, weighted variances
/// about the new means, with floors and empty-component re-seeding.
pub fn m_step(data: &Dataset, assignment: &SoftClustering) -> Result<MixtureParams> {
    let n = data.n();
    if assignment.n() != n {
        return Err(Error::RowMismatch {
            expected: n,
            found: assignment.n(),
        });
    }
    let k = assignment.k();
    let d = data.dim();
    let resp = assignment.resp();

    let stats = exec::reduce_chunks(
        n,
        |range| {
            let mut s = SufficientStats {
                mass: vec![0.0; k],
                sums: Array2::zeros((k, d)),
            };
            for j in range {
                let x = data.row(j);
                for h in 0..k {
                    let r = resp[[j, h]];
                    s.mass[h] += r;
                    s.sums.row_mut(h).scaled_add(r, &x);
                }
            }
            s
        },
        |mut a, b| {
            a.mass.iter_mut().zip(&b.mass).for_each(|(x, y)| *x += y);
            a.sums += &b.sums;
            a
        },
    )
    .expect("n >= 1");

    let mut means = Array2::zeros((k, d));
    for h in 0..k {
        if stats.mass[h] > 0.0 {
            means.row_mut(h).assign(&(&stats.sums.row(h) / stats.mass[h]));
        }
    }

    let sq = exec::reduce_chunks(
        n,
        |range| {
            let mut acc = Array2::<f64>::zeros((k, d));
            for j in range {
                let x = data.row(j);
                for h in 0..k {
                    let r = resp[[j, h]];
                    if r == 0.0 {
                        continue;
                    }
                    let mut row = acc.row_mut(h);
                    for ((a, &xi), &m) in row.iter_mut().zip(x.iter()).zip(means.row(h).iter()) {
                        *a += r * (xi - m) * (xi - m);
                    }
                }
            }
            acc
        },
        |a, b| a + b,
    )
    .expect("n >= 1");

    let floor = variance_floor(data);
    let global_var = data.feature_variances().mapv(|v| v.max(floor));
    let mut variances = Array2::zeros((k, d));
    let empty_cut = EMPTY_MASS_FRACTION * n as f64;
    let empty: Vec<usize> = (0..k).filter(|&h| stats.mass[h] < empty_cut).collect();
    for h in 0..k {
        if stats.mass[h] > 0.0 {
            for i in 0..d {
                variances[[h, i]] = (sq[[h, i]] / stats.mass[h]).max(floor);
            }
        } else {
            variances.row_mut(h).assign(&global_var);
        }
    }

    let mut weights: Vec<f64> = stats.mass.iter().map(|m| m / n as f64).collect();

    if !empty.is_empty() && empty.len() < k {
        reseed_empty(data, &empty, &mut means, &mut variances, &mut weights, &global_var)?;
    }
    floor_weights(&mut weights);

    MixtureParams::new(Array1::from_vec(weights), means, variances)
}

/// Moves each empty component onto one of the points with the lowest mixture
/// density under the populated components.
fn reseed_empty(
    data: &Dataset,
    empty: &[usize],
    means: &mut Array2<f64>,
    variances: &mut Array2<f64>,
    weights: &mut [f64],
    global_var: &Array1<f64>,
) -> Result<()> {
    let k = weights.len();
    let live: Vec<usize> = (0..k).filter(|h| !empty.contains(h)).collect();
    let mut live_w: Vec<f64> = live.iter().map(|&h| weights[h]).collect();
    let total: f64 = live_w.iter().sum();
    live_w.iter_mut().for_each(|w| *w /= total);
    floor_weights(&mut live_w);
    let sub = MixtureParams::new(
        Array1::from_vec(live_w),
        means.select(Axis(0), &live),
        variances.select(Axis(0), &live),
    )?;
    let (_, ll) = posterior_and_loglik(&sub, data)?;
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &b| ll[a].total_cmp(&ll[b]).then(a.cmp(&b)));
    for (slot, &h) in empty.iter().enumerate() {
        let j = order[slot % order.len()];
        means.row_mut(h).assign(&data.row(j));
        variances.row_mut(h).assign(global_var);
        weights[h] = 0.0;
    }
    Ok(())
}

/// Deterministic distance-weighted seeding of K means from data points.
///
/// The first mean is a uniformly drawn point; each subsequent one is drawn
/// among the not-yet-chosen points with probability proportional to the
/// squared distance to the nearest chosen mean. Variances start at the global
/// per-dimension variance and weights are uniform.
pub fn init_params(data: &Dataset, k: usize, seed: u64) -> Result<MixtureParams> {
    let n = data.n();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let mut centers = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.push(first);

    let sqdist = |j: usize, c: usize| -> f64 {
        data.row(j)
            .iter()
            .zip(data.row(c).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut nearest: Vec<f64> = exec::map_indices(n, |j| sqdist(j, first));

    while centers.len() < k {
        let total: f64 = (0..n).filter(|&j| !chosen[j]).map(|j| nearest[j]).sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            let mut last = None;
            for j in (0..n).filter(|&j| !chosen[j] && nearest[j] > 0.0) {
                last = Some(j);
                if u < nearest[j] {
                    pick = Some(j);
                    break;
                }
                u -= nearest[j];
            }
            pick.or(last).expect("positive total implies a candidate")
        } else {
            let free: Vec<usize> = (0..n).filter(|&j| !chosen[j]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.push(pick);
        let updated = exec::map_indices(n, |j| nearest[j].min(sqdist(j, pick)));
        nearest = updated;
    }

    let means = data.points().select(Axis(0), &centers);
    let floor = variance_floor(data);
    let var = data.feature_variances().mapv(|v| v.max(floor));
    let variances = Array2::from_shape_fn((k, data.dim()), |(_, i)| var[i]);
    let weights = Array1::from_elem(k, 1.0 / k as f64);
    let mut w = weights.to_vec();
    floor_weights(&mut w);
    MixtureParams::new(Array1::from_vec(w), means, variances)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            rel_tol: 1e-6,
            seed: 0,
        }
    }
}

/// `|new - old| < rel_tol * |old|`, guarding the zero case.
pub(crate) fn relative_change_below(old: f64, new: f64, rel_tol: f64) -> bool {
    (new - old).abs() < rel_tol * old.abs().max(f64::MIN_POSITIVE)
}

/// Plain EM from [`init_params`]`(seed)`.
pub fn em_fit(data: &Dataset, k: usize, config: &EmConfig) -> Result<FitResult> {
    em_fit_observed(data, k, config, |_, _, _| {})
}

/// [`em_fit`] with a callback receiving `(iteration, params, log_likelihood)`
/// after every M-step.
pub fn em_fit_observed<F>(data: &Dataset, k: usize, config: &EmConfig, observer: F) -> Result<FitResult>
where
    F: FnMut(usize, &MixtureParams, f64),
{
    let init = init_params(data, k, config.seed)?;
    em_fit_from(data, init, config, observer)
}

/// Plain EM from explicit starting parameters.
pub fn em_fit_from<F>(
    data: &Dataset,
    init: MixtureParams,
    config: &EmConfig,
    mut observer: F,
) -> Result<FitResult>
where
    F: FnMut(usize, &MixtureParams, f64),
{
    if config.max_iters == 0 || !(config.rel_tol > 0.0) {
        return Err(Error::InvalidConfig("max_iters and rel_tol must be positive".into()));
    }
    let mut params = init;
    let (resp, row_ll) = posterior_and_loglik(&params, data)?;
    let mut resp = SoftClustering::from_valid(resp, ResponsibilitySource::ModelPosterior);
    let mut prev = total_loglik(&row_ll);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=config.max_iters {
        params = m_step(data, &resp)?;
        let (r, row_ll) = posterior_and_loglik(&params, data)?;
        let ll = total_loglik(&row_ll);
        resp = SoftClustering::from_valid(r, ResponsibilitySource::ModelPosterior);
        trace.push(ll);
        iterations = it;
        observer(it, &params, ll);
        if relative_change_below(prev, ll, config.rel_tol) {
            converged = true;
            break;
        }
        prev = ll;
    }

    Ok(FitResult {
        params,
        clustering: resp,
        objective_trace: trace,
        converged,
        iterations,
        kl_residual: 0.0,
        beta: 0.0,
        alpha: 0.0,
        cancelled: false,
    })
}
