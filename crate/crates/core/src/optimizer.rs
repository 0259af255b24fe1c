//! MAP fitting under feedback penalties by relaxed coordinate ascent.
//!
//! The model posterior inside the penalty is replaced by free per-point
//! distributions `q_j`, tied back to the posterior with an `α`-weighted KL
//! term:
//!
//! ```text
//! F(θ, q) = log p(x | θ) − β Σ_s f_s(q) − α Σ_j KL(q_j ‖ p(h | x_j, θ))
//! ```
//!
//! Each outer iteration runs a weighted M-step on `q`, then several passes of
//! shuffled minibatch coordinate updates on the `q_j`. The joint label
//! distributions that the penalty depends on are maintained incrementally
//! during a pass and rebuilt from scratch once per outer iteration.
//!
//! A fit is only reported as converged when the objective has settled *and*
//! `max_j KL(q_j ‖ p(h | x_j, θ)) < kl_tol`; when the first holds but not the
//! second, `α` is doubled (a bounded number of times) and iteration continues.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::feedback::{
    auto_beta, joint_from_matrices, penalized_objective, penalty_row_gradient, FeedbackRecord, JointLabelDist, BETA_CAP,
};
use crate::mixture::{
    init_params, log_sum_exp, posterior_and_loglik, relative_change_below, total_loglik, FitResult,
    MixtureModel, MixtureParams, ResponsibilitySource, SoftClustering,
};
use crate::derive_seed;

/// Fixed value or chosen automatically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum Weight {
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
    Fixed(f64),
}

mod auto_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"auto\" or a number, got {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub e_sweeps_per_outer: usize,
    pub minibatch_size: usize,
    pub rel_tol: f64,
    pub kl_tol: f64,
    pub seed: u64,
    /// `Auto` means `alpha_scale · β / N`.
    pub alpha: Weight,
    /// `Auto` means [`auto_beta`] at the initial parameters, capped at [`BETA_CAP`].
    pub beta: Weight,
    pub alpha_scale: f64,
    pub max_alpha_doublings: u32,
    /// Independent initializations per fit; the best penalized objective wins.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_outer_iters: 200,
            e_sweeps_per_outer: 2,
            minibatch_size: 256,
            rel_tol: 1e-6,
            kl_tol: 1e-3,
            seed: 0,
            alpha: Weight::Auto,
            beta: Weight::Auto,
            alpha_scale: 1.0,
            max_alpha_doublings: 5,
            restarts: 4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("{what} must be positive")));
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters");
        }
        if self.e_sweeps_per_outer == 0 {
            return bad("e_sweeps_per_outer");
        }
        if self.restarts == 0 {
            return bad("restarts");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size");
        }
        if !(self.rel_tol > 0.0) {
            return bad("rel_tol");
        }
        if !(self.kl_tol > 0.0) {
            return bad("kl_tol");
        }
        if !(self.alpha_scale > 0.0) {
            return bad("alpha_scale");
        }
        if let Weight::Fixed(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad("alpha");
            }
        }
        if let Weight::Fixed(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig("beta must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Parameters, variational assignments and incrementally maintained joints.
#[derive(Debug, Clone)]
pub struct RelaxedState<M: MixtureModel = MixtureParams> {
    params: M,
    q: Array2<f64>,
    post: Array2<f64>,
    log_post: Array2<f64>,
    row_ll: Vec<f64>,
    kl: Vec<f64>,
    joints: Vec<JointLabelDist>,
    coefficients: Vec<Vec<f64>>,
    alpha: f64,
    beta: f64,
    damping: f64,
    consecutive_rejections: u32,
}

impl<M: MixtureModel> RelaxedState<M> {
    /// State with `q` equal to the model posterior.
    pub fn new(params: M, data: &Dataset, history: &[FeedbackRecord], alpha: f64, beta: f64) -> Result<Self> {
        let (post, _) = posterior_and_loglik(&params, data)?;
        Self::with_q(params, post, data, history, alpha, beta)
    }

    /// State with an explicit variational assignment.
    pub fn with_q(
        params: M,
        q: Array2<f64>,
        data: &Dataset,
        history: &[FeedbackRecord],
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need alpha > 0 and beta >= 0, got {alpha}, {beta}"
            )));
        }
        for rec in history {
            if rec.n() != data.n() {
                return Err(Error::RowMismatch {
                    expected: data.n(),
                    found: rec.n(),
                });
            }
        }
        if q.dim() != (data.n(), params.n_components()) {
            return Err(Error::InvalidParams(format!(
                "q has shape {:?}, expected ({}, {})",
                q.dim(),
                data.n(),
                params.n_components()
            )));
        }
        crate::mixture::validate_prob_rows(&q)?;
        let mut state = RelaxedState {
            params,
            q,
            post: Array2::zeros((0, 0)),
            log_post: Array2::zeros((0, 0)),
            row_ll: Vec::new(),
            kl: Vec::new(),
            joints: Vec::new(),
            coefficients: history.iter().map(FeedbackRecord::coefficients).collect(),
            alpha,
            beta,
            damping: 1.0,
            consecutive_rejections: 0,
        };
        state.refresh_posterior(data)?;
        state.refresh_joints(history)?;
        Ok(state)
    }

    pub fn params(&self) -> &M {
        &self.params
    }

    pub fn q(&self) -> SoftClustering {
        SoftClustering::from_valid(self.q.clone(), ResponsibilitySource::Variational)
    }

    pub fn q_matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn joints(&self) -> &[JointLabelDist] {
        &self.joints
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    /// Per-point `KL(q_j ‖ p(h | x_j, θ))` against the cached posterior.
    pub fn kl_terms(&self) -> &[f64] {
        &self.kl
    }

    fn coupling(&self, n: usize) -> f64 {
        if self.joints.is_empty() {
            0.0
        } else {
            self.beta / (self.alpha * n as f64)
        }
    }

    /// Recomputes posterior, log-posterior, row log-likelihoods and KL terms for the current params.
    fn refresh_posterior(&mut self, data: &Dataset) -> Result<()> {
        let k = self.params.n_components();
        let lw = self.params.log_weights();
        let params = &self.params;
        let width = k + 1;
        let flat = exec::fill_rows(data.n(), width, |j, out| {
            let (row, tail) = out.split_at_mut(k);
            params.component_log_density_row(data.row(j), row);
            for (r, w) in row.iter_mut().zip(&lw) {
                *r += w;
            }
            let lse = log_sum_exp(row);
            for r in row.iter_mut() {
                *r -= lse;
            }
            tail[0] = lse;
        });
        let n = data.n();
        let mut log_post = Array2::zeros((n, k));
        let mut row_ll = Vec::with_capacity(n);
        for (j, chunk) in flat.chunks_exact(width).enumerate() {
            for h in 0..k {
                log_post[[j, h]] = chunk[h];
            }
            row_ll.push(chunk[k]);
        }
        // The exact same operations as the plain posterior, so q can be set
        // to it bit-for-bit when the penalty is inactive.
        let (post, _) = posterior_and_loglik(&self.params, data)?;
        self.post = post;
        self.log_post = log_post;
        self.row_ll = row_ll;
        self.kl = (0..n).map(|j| self.point_kl(j)).collect();
        Ok(())
    }

    fn point_kl(&self, j: usize) -> f64 {
        let q = self.q.row(j);
        let p = self.post.row(j);
        if q == p {
            return 0.0;
        }
        let lp = self.log_post.row(j);
        q.iter()
            .zip(lp.iter())
            .filter(|(&qh, _)| qh > 0.0)
            .map(|(&qh, &l)| qh * (qh.ln() - l))
            .sum::<f64>()
            .max(0.0)
    }

    fn refresh_joints(&mut self, history: &[FeedbackRecord]) -> Result<()> {
        self.joints = history
            .iter()
            .map(|rec| joint_from_matrices(&self.q, rec.past_resp()))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn penalty_sum(&self) -> f64 {
        self.joints
            .iter()
            .zip(&self.coefficients)
            .map(|(d, c)| d.signed_penalty(c))
            .sum()
    }

    /// `−β Σ_s f_s(q) − α Σ_j KL_j` from the maintained joints.
    fn e_objective(&self) -> f64 {
        let kl = exec::sum_indices(self.kl.len(), |j| self.kl[j]);
        -self.beta * self.penalty_sum() - self.alpha * kl
    }

    /// Coordinate update of `q_j` with the current joints, followed by the
    /// incremental joint update.
    fn update_point(&mut self, j: usize, history: &[FeedbackRecord], n: usize, scratch: &mut [f64], grad: &mut [f64]) {
        let k = self.q.ncols();
        let kappa = self.coupling(n);
        let old: Vec<f64> = self.q.row(j).to_vec();
        if kappa == 0.0 {
            self.q.row_mut(j).assign(&self.post.row(j));
        } else {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            for (s, rec) in history.iter().enumerate() {
                penalty_row_gradient(&self.joints[s], &self.coefficients[s], rec.past_resp().row(j), grad);
                for h in 0..k {
                    scratch[h] += grad[h];
                }
            }
            for h in 0..k {
                scratch[h] = self.log_post[[j, h]] - kappa * scratch[h];
            }
            let lse = log_sum_exp(scratch);
            let eta = self.damping;
            for h in 0..k {
                let fixed = (scratch[h] - lse).exp();
                self.q[[j, h]] = if eta < 1.0 { (1.0 - eta) * old[h] + eta * fixed } else { fixed };
            }
            let total: f64 = self.q.row(j).sum();
            self.q.row_mut(j).mapv_inplace(|v| v / total);
        }
        let inv_n = 1.0 / n as f64;
        for (s, rec) in history.iter().enumerate() {
            let r = rec.past_resp().row(j);
            let dist = &mut self.joints[s];
            for h in 0..k {
                let delta = self.q[[j, h]] - old[h];
                if delta != 0.0 {
                    dist.joint.row_mut(h).scaled_add(delta * inv_n, &r);
                    dist.row_marginal[h] += delta * inv_n;
                }
            }
        }
        self.kl[j] = self.point_kl(j);
    }
}

/// What happened to one minibatch sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOutcome {
    pub accepted: bool,
    pub objective_before: f64,
    pub objective_after: f64,
}

/// Coordinate-ascent pass over `batch` (visited in shuffled order).
///
/// Each `q_j` is replaced by the stationary point of the E-step objective in
/// `q_j` with the joints held fixed,
/// `q_j(h) ∝ p(h | x_j, θ) · exp(−β/(αN) · Σ_s g_{s,j}(h))`, where `g` is
/// [`crate::feedback`]'s N-scaled penalty gradient. With reject-all feedback
/// `g_{s,j}(h) = Σ_{h_s} p(h_s | x_j, θ_s) log(J_s(h,h_s) / (P(h) Q_s(h_s)))`
/// up to a constant. The joints are updated after every point. If the
/// E-step objective `−β Σ_s f_s − α Σ_j KL_j` decreased over the batch, the
/// batch is rolled back; after more than two consecutive rollbacks the
/// update is damped by one half.
pub fn e_step_sweep<M: MixtureModel, R: Rng>(
    state: &mut RelaxedState<M>,
    data: &Dataset,
    history: &[FeedbackRecord],
    batch: &[usize],
    rng: &mut R,
) -> Result<SweepOutcome> {
    let n = data.n();
    if history.len() != state.joints.len() {
        return Err(Error::InvalidConfig(format!(
            "state tracks {} records, history has {}",
            state.joints.len(),
            history.len()
        )));
    }
    if let Some(&j) = batch.iter().find(|&&j| j >= n) {
        return Err(Error::InvalidConfig(format!("batch index {j} out of range")));
    }
    let mut order = batch.to_vec();
    order.shuffle(rng);

    let k = state.q.ncols();
    let before = state.e_objective();
    let saved_q: Vec<(usize, Vec<f64>)> = order.iter().map(|&j| (j, state.q.row(j).to_vec())).collect();
    let saved_kl: Vec<f64> = order.iter().map(|&j| state.kl[j]).collect();
    let saved_joints = state.joints.clone();

    let mut scratch = vec![0.0; k];
    let mut grad = vec![0.0; k];
    for &j in &order {
        state.update_point(j, history, n, &mut scratch, &mut grad);
    }
    let after = state.e_objective();
    let slack = 1e-12 * before.abs().max(1.0);
    let accepted = after >= before - slack;
    if accepted {
        state.consecutive_rejections = 0;
        state.damping = 1.0;
    } else {
        for ((j, row), kl) in saved_q.into_iter().zip(saved_kl) {
            state.q.row_mut(j).assign(&ndarray::ArrayView1::from(&row[..]));
            state.kl[j] = kl;
        }
        state.joints = saved_joints;
        state.consecutive_rejections += 1;
        if state.consecutive_rejections > 2 {
            state.damping = 0.5;
        }
    }
    Ok(SweepOutcome {
        accepted,
        objective_before: before,
        objective_after: if accepted { after } else { before },
    })
}

/// Weighted M-step on the variational assignment.
pub fn m_step_relaxed<M: MixtureModel>(data: &Dataset, q: &SoftClustering) -> Result<M> {
    M::fit_weighted(data, q)
}

/// `log p(x | θ) − β Σ_s f_s(q) − α Σ_j KL(q_j ‖ p(h | x_j, θ))`, evaluated from scratch.
pub fn relaxed_objective<M: MixtureModel>(
    state: &RelaxedState<M>,
    data: &Dataset,
    history: &[FeedbackRecord],
) -> Result<f64> {
    let (post, row_ll) = posterior_and_loglik(&state.params, data)?;
    let ll = total_loglik(&row_ll);
    let mut penalty = 0.0;
    for rec in history {
        penalty += joint_from_matrices(&state.q, rec.past_resp())?.signed_penalty(&rec.coefficients());
    }
    let kl = exec::sum_indices(data.n(), |j| kl_divergence(state.q.row(j), post.row(j)));
    let pen = if state.beta == 0.0 { 0.0 } else { state.beta * penalty };
    Ok(ll - pen - state.alpha * kl)
}

fn kl_divergence(q: ndarray::ArrayView1<'_, f64>, p: ndarray::ArrayView1<'_, f64>) -> f64 {
    if q == p {
        return 0.0;
    }
    q.iter()
        .zip(p.iter())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum::<f64>()
        .max(0.0)
}

/// `max_j KL(q_j ‖ p(h | x_j, θ))`, recomputed from the parameters.
pub fn kl_residual<M: MixtureModel>(state: &RelaxedState<M>, data: &Dataset) -> Result<f64> {
    if state.q.nrows() != data.n() {
        return Err(Error::RowMismatch {
            expected: data.n(),
            found: state.q.nrows(),
        });
    }
    let (post, _) = posterior_and_loglik(&state.params, data)?;
    Ok(exec::map_indices(data.n(), |j| kl_divergence(state.q.row(j), post.row(j)))
        .into_iter()
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitPhase {
    #[default]
    Initializing,
    EStep,
    MStep,
    Done,
}

/// Read-only view of a running fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ProgressSnapshot {
    pub outer_iter: usize,
    pub objective: Option<f64>,
    pub kl_residual: Option<f64>,
    pub phase: FitPhase,
}

/// Shared between a running fit and observers on other threads.
#[derive(Debug, Default)]
pub struct FitMonitor {
    snapshot: Mutex<ProgressSnapshot>,
    cancel: AtomicBool,
}

impl FitMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> ProgressSnapshot {
        *self.snapshot.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::Relaxed);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }

    fn update(&self, f: impl FnOnce(&mut ProgressSnapshot)) {
        let mut guard = self.snapshot.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut guard);
    }
}

/// Passed to observers after every outer iteration.
#[derive(Debug)]
pub struct OuterStep<'a, M> {
    pub iteration: usize,
    pub params: &'a M,
    pub objective: f64,
    pub kl_residual: f64,
    pub alpha: f64,
}

/// Fits K components under the feedback penalties of `history`.
pub fn fit_with_feedback(
    data: &Dataset,
    k: usize,
    history: &[FeedbackRecord],
    config: &FitConfig,
) -> Result<FitResult> {
    fit_with_feedback_observed(data, k, history, config, None, |_| {})
}

/// [`fit_with_feedback`] with progress reporting, cancellation and a per-iteration callback.
///
/// With `restarts > 1` the restarts run concurrently with a shared `β`
/// and the one with the highest penalized objective is returned. Only the
/// first restart reports progress and calls `observer`.
pub fn fit_with_feedback_observed<F>(
    data: &Dataset,
    k: usize,
    history: &[FeedbackRecord],
    config: &FitConfig,
    monitor: Option<&FitMonitor>,
    observer: F,
) -> Result<FitResult>
where
    F: FnMut(&OuterStep<'_, MixtureParams>) + Send,
{
    config.validate()?;
    let init = init_params(data, k, config.seed)?;
    if config.restarts <= 1 {
        return fit_relaxed_from(data, init, history, config, monitor, observer);
    }
    let beta = resolve_beta(config, &init, data, history)?;
    let shared = FitConfig {
        beta: Weight::Fixed(beta),
        ..*config
    };
    let observer = Mutex::new(observer);
    let runs: Vec<usize> = (0..config.restarts).collect();
    let results = exec::map_tasks(&runs, |&r| {
        if r == 0 {
            run_relaxed(data, init.clone(), history, &shared, monitor, true, |s| {
                (observer.lock().unwrap_or_else(|e| e.into_inner()))(s)
            })
        } else {
            let seed = derive_seed(config.seed, 0x7e57 + r as u64);
            let init = init_params(data, k, seed)?;
            run_relaxed(data, init, history, &FitConfig { seed, ..shared }, monitor, false, |_| {})
        }
    });
    let mut best: Option<(f64, FitResult)> = None;
    for res in results {
        let res = res?;
        let score = penalized_objective(&res.params, data, history, beta)?;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, res));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn resolve_beta<M: MixtureModel>(
    config: &FitConfig,
    init: &M,
    data: &Dataset,
    history: &[FeedbackRecord],
) -> Result<f64> {
    Ok(match config.beta {
        Weight::Fixed(b) => b,
        Weight::Auto if history.is_empty() => 0.0,
        Weight::Auto => auto_beta(init, data, history)?.min(BETA_CAP),
    })
}

/// The relaxed coordinate-ascent loop from explicit starting parameters.
pub fn fit_relaxed_from<M, F>(
    data: &Dataset,
    init: M,
    history: &[FeedbackRecord],
    config: &FitConfig,
    monitor: Option<&FitMonitor>,
    observer: F,
) -> Result<FitResult>
where
    M: MixtureModel + Into<MixtureParams>,
    F: FnMut(&OuterStep<'_, M>),
{
    config.validate()?;
    run_relaxed(data, init, history, config, monitor, true, observer)
}

fn run_relaxed<M, F>(
    data: &Dataset,
    init: M,
    history: &[FeedbackRecord],
    config: &FitConfig,
    monitor: Option<&FitMonitor>,
    report: bool,
    mut observer: F,
) -> Result<FitResult>
where
    M: MixtureModel + Into<MixtureParams>,
    F: FnMut(&OuterStep<'_, M>),
{
    let n = data.n();
    let beta = resolve_beta(config, &init, data, history)?;
    let alpha = match config.alpha {
        Weight::Fixed(a) => a,
        Weight::Auto if beta > 0.0 => config.alpha_scale * beta / n as f64,
        Weight::Auto => 1.0,
    };
    let reporter = if report { monitor } else { None };
    if let Some(m) = reporter {
        m.update(|s| *s = ProgressSnapshot::default());
    }

    let mut state = RelaxedState::new(init, data, history, alpha, beta)?;
    let mut prev = relaxed_from_state(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5eed));
    let batch = config.minibatch_size.min(n);
    let mut perm: Vec<usize> = (0..n).collect();

    let mut trace = Vec::new();
    let mut converged = false;
    let mut cancelled = false;
    let mut doublings = 0;
    let mut iterations = 0;
    let mut kl_res = 0.0;

    for it in 1..=config.max_outer_iters {
        if monitor.is_some_and(FitMonitor::is_cancelled) {
            cancelled = true;
            break;
        }
        if let Some(m) = reporter {
            m.update(|s| s.phase = FitPhase::MStep);
        }
        let q = SoftClustering::from_valid(state.q.clone(), ResponsibilitySource::Variational);
        state.params = M::fit_weighted(data, &q)?;
        state.refresh_posterior(data)?;
        state.refresh_joints(history)?;

        if let Some(m) = reporter {
            m.update(|s| s.phase = FitPhase::EStep);
        }
        for _ in 0..config.e_sweeps_per_outer {
            if monitor.is_some_and(FitMonitor::is_cancelled) {
                cancelled = true;
                break;
            }
            perm.shuffle(&mut rng);
            for chunk in perm.chunks(batch) {
                e_step_sweep(&mut state, data, history, chunk, &mut rng)?;
            }
        }
        state.refresh_joints(history)?;

        let obj = relaxed_from_state(&state);
        kl_res = state.kl.iter().copied().fold(0.0, f64::max);
        trace.push(obj);
        iterations = it;
        observer(&OuterStep {
            iteration: it,
            params: &state.params,
            objective: obj,
            kl_residual: kl_res,
            alpha: state.alpha,
        });
        if let Some(m) = reporter {
            m.update(|s| {
                s.outer_iter = it;
                s.objective = Some(obj);
                s.kl_residual = Some(kl_res);
            });
        }
        if cancelled {
            break;
        }
        if relative_change_below(prev, obj, config.rel_tol) {
            if kl_res < config.kl_tol {
                converged = true;
                break;
            }
            if doublings >= config.max_alpha_doublings {
                break;
            }
            doublings += 1;
            state.alpha *= 2.0;
        }
        prev = obj;
    }

    if let Some(m) = reporter {
        m.update(|s| s.phase = FitPhase::Done);
    }
    let final_alpha = state.alpha;
    let clustering = SoftClustering::from_valid(state.post, ResponsibilitySource::ModelPosterior);
    Ok(FitResult {
        params: state.params.into(),
        clustering,
        objective_trace: trace,
        converged,
        iterations,
        kl_residual: kl_res,
        beta,
        alpha: final_alpha,
        cancelled,
    })
}

/// Relaxed objective from the cached posterior, joints and KL terms.
fn relaxed_from_state<M: MixtureModel>(state: &RelaxedState<M>) -> f64 {
    let ll = total_loglik(&state.row_ll);
    let kl = exec::sum_indices(state.kl.len(), |j| state.kl[j]);
    let pen = if state.beta == 0.0 { 0.0 } else { state.beta * state.penalty_sum() };
    ll - pen - state.alpha * kl
}

/// Maximum absolute difference between maintained joints and a from-scratch rebuild.
pub fn joint_drift<M: MixtureModel>(state: &RelaxedState<M>, history: &[FeedbackRecord]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (dist, rec) in state.joints.iter().zip(history) {
        let fresh = joint_from_matrices(&state.q, rec.past_resp())?;
        let d = (&dist.joint - &fresh.joint).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        let m = (&dist.row_marginal - &fresh.row_marginal)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        worst = worst.max(d).max(m);
    }
    Ok(worst)
}

/// Column-sum of `q`, exposed for diagnostics.
pub fn q_mass<M: MixtureModel>(state: &RelaxedState<M>) -> Vec<f64> {
    state.q.sum_axis(Axis(0)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{joint_label_distribution, mutual_information, penalized_objective};
    use crate::mixture::{em_fit_observed, EmConfig};
    use ndarray::array;

    fn tiny() -> (Dataset, MixtureParams) {
        let data = Dataset::from_rows(&[vec![0.0], vec![0.4], vec![3.0]], None).unwrap();
        let p = MixtureParams::new(array![0.5, 0.5], array![[0.0], [3.0]], array![[1.0], [1.0]]).unwrap();
        (data, p)
    }

    #[test]
    fn kl_residual_closed_forms() {
        let (data, p) = tiny();
        let state = RelaxedState::new(p.clone(), &data, &[], 1.0, 0.0).unwrap();
        assert_eq!(kl_residual(&state, &data).unwrap(), 0.0);

        let one = Dataset::from_rows(&[vec![1.5]], None).unwrap();
        let st = RelaxedState::with_q(p, array![[1.0, 0.0]], &one, &[], 1.0, 0.0).unwrap();
        assert!((kl_residual(&st, &one).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn relaxed_objective_collapses_when_q_is_posterior() {
        let (data, p) = tiny();
        let past = SoftClustering::new(array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], ResponsibilitySource::ModelPosterior)
            .unwrap();
        let history = vec![FeedbackRecord::reject_all(0, &past)];
        let st = RelaxedState::new(p.clone(), &data, &history, 3.0, 2.0).unwrap();
        let got = relaxed_objective(&st, &data, &history).unwrap();
        let want = penalized_objective(&p, &data, &history, 2.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        let st0 = RelaxedState::new(p.clone(), &data, &history, 3.0, 0.0).unwrap();
        let ll = crate::mixture::log_likelihood(&p, &data).unwrap();
        assert!((relaxed_objective(&st0, &data, &history).unwrap() - ll).abs() < 1e-12);
    }

    #[test]
    fn relaxed_objective_three_term_oracle() {
        let (data, p) = tiny();
        let past = array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]];
        let history = vec![FeedbackRecord::new(0, Default::default(), [0, 1].into(), past.clone()).unwrap()];
        let q = array![[0.3, 0.7], [0.5, 0.5], [0.1, 0.9]];
        let st = RelaxedState::with_q(p.clone(), q.clone(), &data, &history, 1.5, 0.75).unwrap();

        let ll = crate::mixture::log_likelihood(&p, &data).unwrap();
        let mi = mutual_information(
            &joint_label_distribution(&SoftClustering::new(q.clone(), ResponsibilitySource::Variational).unwrap(), &past)
                .unwrap(),
        );
        let post = crate::mixture::responsibilities(&p, &data).unwrap();
        let mut kl = 0.0;
        for j in 0..3 {
            for h in 0..2 {
                kl += q[[j, h]] * (q[[j, h]] / post.resp()[[j, h]]).ln();
            }
        }
        let want = ll - 0.75 * mi - 1.5 * kl;
        assert!((relaxed_objective(&st, &data, &history).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn sweep_without_penalty_projects_onto_posterior() {
        let (data, p) = tiny();
        let q = array![[0.3, 0.7], [0.5, 0.5], [0.1, 0.9]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = RelaxedState::with_q(p.clone(), q.clone(), &data, &[], 1.0, 5.0).unwrap();
        e_step_sweep(&mut st, &data, &[], &[0, 1, 2], &mut rng).unwrap();
        let post = crate::mixture::responsibilities(&p, &data).unwrap();
        assert_eq!(st.q_matrix(), post.resp());

        let past = SoftClustering::new(array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], ResponsibilitySource::ModelPosterior)
            .unwrap();
        let history = vec![FeedbackRecord::reject_all(0, &past)];
        let mut st = RelaxedState::with_q(p, q, &data, &history, 1.0, 0.0).unwrap();
        e_step_sweep(&mut st, &data, &history, &[0, 1, 2], &mut rng).unwrap();
        assert_eq!(st.q_matrix(), post.resp());
    }

    #[test]
    fn sweep_keeps_joints_exact() {
        let (data, p) = tiny();
        let past = SoftClustering::new(array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], ResponsibilitySource::ModelPosterior)
            .unwrap();
        let history = vec![FeedbackRecord::reject_all(0, &past)];
        let mut st = RelaxedState::new(p, &data, &history, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = e_step_sweep(&mut st, &data, &history, &[0, 1, 2], &mut rng).unwrap();
        assert!(out.objective_after >= out.objective_before - 1e-12);
        assert!(joint_drift(&st, &history).unwrap() < 1e-10);
    }

    #[test]
    fn empty_history_matches_em_per_iteration() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.7).sin() * 3.0 + if i % 2 == 0 { 4.0 } else { -4.0 }, (t * 1.3).cos()]
            })
            .collect();
        let data = Dataset::from_rows(&rows, None).unwrap();
        let mut em_params = Vec::new();
        let em = em_fit_observed(&data, 3, &EmConfig { max_iters: 50, rel_tol: 1e-9, seed: 4 }, |_, p, _| {
            em_params.push(p.clone())
        })
        .unwrap();
        let cfg = FitConfig {
            max_outer_iters: 50,
            rel_tol: 1e-9,
            seed: 4,
            minibatch_size: 16,
            restarts: 1,
            ..FitConfig::default()
        };
        let mut fb_params = Vec::new();
        let fb = fit_with_feedback_observed(&data, 3, &[], &cfg, None, |s| fb_params.push(s.params.clone())).unwrap();
        assert_eq!(em.objective_trace.len(), fb.objective_trace.len());
        for (a, b) in em.objective_trace.iter().zip(&fb.objective_trace) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in em_params.iter().zip(&fb_params) {
            assert!((a.means() - b.means()).iter().all(|d| d.abs() < 1e-8));
        }
        assert_eq!(fb.kl_residual, 0.0);
    }

    #[test]
    fn monitor_reports_and_cancels() {
        let (data, _) = tiny();
        let monitor = FitMonitor::new();
        monitor.cancel();
        let res = fit_with_feedback_observed(&data, 2, &[], &FitConfig::default(), Some(&monitor), |_| {}).unwrap();
        assert!(res.cancelled);
        assert!(!res.converged);
        assert_eq!(monitor.snapshot().phase, FitPhase::Done);
    }

    #[test]
    fn weight_serde() {
        let cfg = FitConfig {
            beta: Weight::Fixed(2.5),
            ..FitConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"alpha\":\"auto\""));
        assert!(s.contains("\"beta\":2.5"));
        let back: FitConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: FitConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.minibatch_size, 256);
        assert!(serde_json::from_str::<FitConfig>(r#"{"beta": "sometimes"}"#).is_err());
    }
}
