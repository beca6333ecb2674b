//! M-step: maximize the ELBO over `alpha` and `theta` with `(phi, delta)` fixed.
//!
//! `alpha` uses damped Newton-Raphson on the Dirichlet terms. Each `theta[j][k]`
//! is an independent problem on the simplex, solved with a log barrier
//! `-(w) sum_v ln theta_v` whose weight `w = 1 / b0^m` shrinks over `M` stages.
//! Inside a stage, Newton directions are projected onto `sum(d theta) = 0` and
//! sized by backtracking.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{expected_log_membership, ModelParams, RankDataset, VariationalParams};
use crate::plackett_luce::SupportVector;
use crate::special::{digamma, ln_gamma, trigamma};

/// Smallest support value kept after a theta update.
pub const THETA_FLOOR: f64 = 1e-12;
const ALPHA_FLOOR: f64 = 1e-8;

/// Barrier continuation: stage `m = 1..=stages` uses barrier weight `1 / b0^m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSchedule {
    pub b0: f64,
    pub stages: usize,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        BarrierSchedule { b0: 10.0, stages: 4 }
    }
}

impl BarrierSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.b0 > 1.0) || self.stages == 0 {
            return Err(Error::Config(format!(
                "barrier schedule needs b0 > 1 and at least one stage, got b0={} stages={}",
                self.b0, self.stages
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        (1..=self.stages).map(|m| self.b0.powi(-(m as i32))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    pub tau0: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig { tau0: 0.5, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    pub schedule: BarrierSchedule,
    pub line_search: LineSearchConfig,
    /// A barrier stage ends when half the Newton decrement falls below
    /// `theta_tol * max(1, |objective|)`.
    pub theta_tol: f64,
    pub theta_max_iters: usize,
    /// Newton on alpha stops when `max |gradient| <= alpha_tol * T`.
    pub alpha_tol: f64,
    pub alpha_max_iters: usize,
    /// Execution mode only; results do not depend on it, so it is not recorded.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for MStepConfig {
    fn default() -> Self {
        MStepConfig {
            schedule: BarrierSchedule::default(),
            line_search: LineSearchConfig::default(),
            theta_tol: 1e-12,
            theta_max_iters: 100,
            alpha_tol: 1e-10,
            alpha_max_iters: 100,
            parallel: false,
        }
    }
}

// ---------------------------------------------------------------------------
// alpha

/// `sum_i E_q[ln lambda_ik]` for every k.
fn membership_statistics(n_individuals: usize, var: &VariationalParams) -> Vec<f64> {
    let k = var.n_subgroups();
    let mut stats = vec![0.0; k];
    let mut elog = vec![0.0; k];
    for i in 0..n_individuals {
        expected_log_membership(var.phi_row(i), &mut elog);
        for (s, e) in stats.iter_mut().zip(&elog) {
            *s += e;
        }
    }
    stats
}

/// The alpha-dependent part of the ELBO.
fn alpha_objective(alpha: &[f64], n_individuals: f64, stats: &[f64]) -> f64 {
    let mut value = n_individuals * (ln_gamma(alpha.iter().sum()) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>());
    for (a, s) in alpha.iter().zip(stats) {
        value += (a - 1.0) * s;
    }
    value
}

fn gradient_from_stats(alpha: &[f64], n_individuals: f64, stats: &[f64]) -> Vec<f64> {
    let total = digamma(alpha.iter().sum());
    alpha
        .iter()
        .zip(stats)
        .map(|(a, s)| n_individuals * (total - digamma(*a)) + s)
        .collect()
}

/// `d ELBO / d alpha_k = T (digamma(sum alpha) - digamma(alpha_k)) + sum_i E[ln lambda_ik]`.
pub fn alpha_gradient(data: &RankDataset, params: &ModelParams, var: &VariationalParams) -> Vec<f64> {
    let t = data.n_individuals();
    let stats = membership_statistics(t, var);
    gradient_from_stats(&params.alpha, t as f64, &stats)
}

/// `H_ab = -T (1[a = b] trigamma(alpha_a) - trigamma(sum alpha))`.
pub fn alpha_hessian(params: &ModelParams, n_individuals: usize) -> DMatrix<f64> {
    let k = params.n_subgroups();
    let t = n_individuals as f64;
    let shared = trigamma(params.alpha.iter().sum());
    DMatrix::from_fn(k, k, |a, b| {
        let diag = if a == b { trigamma(params.alpha[a]) } else { 0.0 };
        -t * (diag - shared)
    })
}

/// Solves `H x = g` for the diagonal-plus-rank-one alpha Hessian in O(K).
fn alpha_newton_solve(alpha: &[f64], n_individuals: f64, gradient: &[f64]) -> Option<Vec<f64>> {
    let q: Vec<f64> = alpha.iter().map(|a| -n_individuals * trigamma(*a)).collect();
    let z = n_individuals * trigamma(alpha.iter().sum());
    let denom = 1.0 / z + q.iter().map(|qk| 1.0 / qk).sum::<f64>();
    let b = gradient.iter().zip(&q).map(|(g, qk)| g / qk).sum::<f64>() / denom;
    let x: Vec<f64> = gradient.iter().zip(&q).map(|(g, qk)| (g - b) / qk).collect();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaOutcome {
    pub alpha: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

/// Damped Newton-Raphson for alpha. Steps are halved until every component
/// stays above a small floor and the ELBO does not decrease.
pub fn update_alpha(
    data: &RankDataset,
    params: &ModelParams,
    var: &VariationalParams,
    tol: f64,
    max_iters: usize,
) -> AlphaOutcome {
    let t = data.n_individuals() as f64;
    let stats = membership_statistics(data.n_individuals(), var);
    let mut alpha = params.alpha.clone();
    let mut value = alpha_objective(&alpha, t, &stats);
    let threshold = tol * t.max(1.0);
    for iter in 0..max_iters {
        let gradient = gradient_from_stats(&alpha, t, &stats);
        if gradient.iter().all(|g| g.abs() <= threshold) {
            return AlphaOutcome { alpha, iters: iter, converged: true };
        }
        let Some(step) = alpha_newton_solve(&alpha, t, &gradient) else {
            return AlphaOutcome { alpha, iters: iter, converged: false };
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = alpha.iter().zip(&step).map(|(a, s)| a - scale * s).collect();
            if candidate.iter().all(|a| *a > ALPHA_FLOOR) {
                let next = alpha_objective(&candidate, t, &stats);
                if next >= value {
                    accepted = Some((candidate, next));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, next)) => {
                let moved = candidate.iter().zip(&alpha).any(|(c, a)| c != a);
                alpha = candidate;
                value = next;
                if !moved {
                    return AlphaOutcome { alpha, iters: iter + 1, converged: true };
                }
            }
            None => return AlphaOutcome { alpha, iters: iter + 1, converged: false },
        }
    }
    let gradient = gradient_from_stats(&alpha, t, &stats);
    let converged = gradient.iter().all(|g| g.abs() <= threshold);
    AlphaOutcome { alpha, iters: max_iters, converged }
}

// ---------------------------------------------------------------------------
// theta

/// The theta-dependent ELBO terms of one `(variable, subgroup)` pair, reduced
/// to sufficient statistics:
///
/// `ELBO_jk(theta) = sum_v w_v ln theta_v - sum_S W_S ln(1 - sum_{v in S} theta_v)`
///
/// where `w_v` is the delta mass on slots selecting `v` and `W_S` the delta
/// mass on slots whose already-ranked prefix is the set `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaObjective {
    selection_weight: Vec<f64>,
    /// `(prefix bit mask, weight)`, sorted by mask.
    prefix_weight: Vec<(u64, f64)>,
}

impl ThetaObjective {
    pub fn new(data: &RankDataset, var: &VariationalParams, j: usize, k: usize) -> Self {
        let n_alt = data.n_alternatives()[j];
        let mut selection_weight = vec![0.0; n_alt];
        let mut prefixes: BTreeMap<u64, f64> = BTreeMap::new();
        for i in 0..data.n_individuals() {
            let slots = data.slot_range(i, j);
            let mut mask = 0u64;
            for (slot, &item) in slots.zip(data.observation(i, j).items()) {
                let d = var.delta_row(slot)[k];
                selection_weight[item] += d;
                if mask != 0 {
                    *prefixes.entry(mask).or_insert(0.0) += d;
                }
                mask |= 1u64 << item;
            }
        }
        let prefix_weight = prefixes.into_iter().filter(|(_, w)| *w > 0.0).collect();
        ThetaObjective { selection_weight, prefix_weight }
    }

    pub fn n_alternatives(&self) -> usize {
        self.selection_weight.len()
    }

    fn masked_sum(theta: &[f64], mask: u64) -> f64 {
        let mut sum = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let v = bits.trailing_zeros() as usize;
            sum += theta[v];
            bits &= bits - 1;
        }
        sum
    }

    /// `ELBO_jk(theta)`, without the barrier. `-inf` outside the feasible region.
    pub fn elbo_part(&self, theta: &[f64]) -> f64 {
        let mut value = 0.0;
        for (w, t) in self.selection_weight.iter().zip(theta) {
            if *w > 0.0 {
                if *t <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                value += w * t.ln();
            }
        }
        for &(mask, weight) in &self.prefix_weight {
            let remaining = 1.0 - Self::masked_sum(theta, mask);
            if remaining <= 0.0 {
                return f64::NEG_INFINITY;
            }
            value -= weight * remaining.ln();
        }
        value
    }

    /// The minimized objective `-ELBO_jk(theta) - barrier_weight * sum_v ln theta_v`;
    /// `+inf` when infeasible.
    pub fn value(&self, theta: &[f64], barrier_weight: f64) -> f64 {
        if theta.iter().any(|t| *t <= 0.0) {
            return f64::INFINITY;
        }
        let barrier: f64 = theta.iter().map(|t| t.ln()).sum();
        -self.elbo_part(theta) - barrier_weight * barrier
    }

    /// Gradient and Hessian of [`ThetaObjective::value`].
    pub fn gradient_hessian(&self, theta: &[f64], barrier_weight: f64) -> (Vec<f64>, DMatrix<f64>) {
        let n = theta.len();
        let mut gradient = vec![0.0; n];
        let mut hessian = DMatrix::zeros(n, n);
        for v in 0..n {
            let w = self.selection_weight[v] + barrier_weight;
            gradient[v] = -w / theta[v];
            hessian[(v, v)] = w / (theta[v] * theta[v]);
        }
        let mut members = Vec::with_capacity(n);
        for &(mask, weight) in &self.prefix_weight {
            let remaining = 1.0 - Self::masked_sum(theta, mask);
            let g = weight / remaining;
            let h = g / remaining;
            members.clear();
            let mut bits = mask;
            while bits != 0 {
                members.push(bits.trailing_zeros() as usize);
                bits &= bits - 1;
            }
            for &a in &members {
                gradient[a] -= g;
                for &b in &members {
                    hessian[(a, b)] -= h;
                }
            }
        }
        (gradient, hessian)
    }
}

/// Gradient and Hessian of the barrier-augmented negative ELBO in `theta[j][k]`.
pub fn theta_gradient_hessian(
    data: &RankDataset,
    var: &VariationalParams,
    j: usize,
    k: usize,
    theta: &[f64],
    barrier_weight: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    ThetaObjective::new(data, var, j, k).gradient_hessian(theta, barrier_weight)
}

/// Newton direction restricted to `sum(d theta) = 0`:
/// `d = -H^-1 (g - 1 (1' H^-1 g) / (1' H^-1 1))`.
///
/// `None` when `H` (or the projection) is singular.
pub fn kkt_step(gradient: &[f64], hessian: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = gradient.len();
    let lu = hessian.clone().lu();
    let hg = lu.solve(&DVector::from_column_slice(gradient))?;
    let h1 = lu.solve(&DVector::from_element(n, 1.0))?;
    let denom = h1.sum();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let ratio = hg.sum() / denom;
    let mut step: Vec<f64> = (0..n).map(|v| -(hg[v] - h1[v] * ratio)).collect();
    // remove rounding drift off the constraint plane
    let drift = step.iter().sum::<f64>() / n as f64;
    step.iter_mut().for_each(|s| *s -= drift);
    step.iter().all(|s| s.is_finite()).then_some(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub tau: f64,
    pub backtracks: usize,
    /// False when no step length both stayed feasible and reduced the objective.
    pub progress: bool,
}

/// Shrinks `tau = tau0^s` until `theta + tau * step` is strictly positive and
/// the barrier-augmented objective is no worse. Returns `tau = 0` without progress.
pub fn backtracking_line_search(
    objective: &ThetaObjective,
    theta: &[f64],
    step: &[f64],
    cfg: &LineSearchConfig,
    barrier_weight: f64,
) -> LineSearchOutcome {
    let current = objective.value(theta, barrier_weight);
    let mut tau = 1.0;
    let mut trial = vec![0.0; theta.len()];
    for s in 0..=cfg.max_backtracks {
        for ((t, x), d) in trial.iter_mut().zip(theta).zip(step) {
            *t = x + tau * d;
        }
        if trial.iter().all(|t| *t > 0.0) {
            let next = objective.value(&trial, barrier_weight);
            if next <= current {
                return LineSearchOutcome { tau, backtracks: s, progress: next < current };
            }
        }
        tau *= cfg.tau0;
    }
    LineSearchOutcome { tau: 0.0, backtracks: cfg.max_backtracks, progress: false }
}

/// What happened in one barrier stage of one `(j, k)` subproblem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub barrier_weight: f64,
    pub iters: usize,
    /// Stage ended on the decrement criterion.
    pub converged: bool,
    /// Newton steps replaced by a regularized or gradient direction.
    pub fallbacks: usize,
    pub elbo_before: f64,
    pub elbo_after: f64,
    /// Stages that lower the barrier-free ELBO are rolled back.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaReport {
    pub variable: usize,
    pub subgroup: usize,
    pub stages: Vec<StageReport>,
}

impl ThetaReport {
    pub fn converged(&self) -> bool {
        self.stages.iter().all(|s| s.converged)
    }
}

/// Descent direction for the stage objective at `theta`. Tries the KKT Newton
/// step, then Levenberg-style shifts of the Hessian, then the projected gradient.
fn descent_direction(gradient: &[f64], hessian: &DMatrix<f64>) -> (Vec<f64>, bool) {
    let is_descent = |d: &[f64]| gradient.iter().zip(d).map(|(g, s)| g * s).sum::<f64>() < 0.0;
    if let Some(step) = kkt_step(gradient, hessian) {
        if is_descent(&step) {
            return (step, false);
        }
    }
    let scale = hessian.diagonal().iter().fold(0.0f64, |m, h| m.max(h.abs())).max(1e-12);
    let mut shift = 1e-6 * scale;
    for _ in 0..12 {
        let shifted = hessian + DMatrix::identity(gradient.len(), gradient.len()) * shift;
        if let Some(step) = kkt_step(gradient, &shifted) {
            if is_descent(&step) {
                return (step, true);
            }
        }
        shift *= 10.0;
    }
    let mean = gradient.iter().sum::<f64>() / gradient.len() as f64;
    (gradient.iter().map(|g| -(g - mean)).collect(), true)
}

fn normalize_with_floor(theta: &mut [f64]) {
    let total: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|t| *t = (*t / total).max(THETA_FLOOR));
    let total: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|t| *t /= total);
}

/// Runs the barrier continuation for one subproblem from `start`.
pub fn solve_theta(objective: &ThetaObjective, start: &[f64], cfg: &MStepConfig) -> (Vec<f64>, Vec<StageReport>) {
    let mut theta = start.to_vec();
    normalize_with_floor(&mut theta);
    let mut stages = Vec::with_capacity(cfg.schedule.stages);
    for barrier_weight in cfg.schedule.weights() {
        let stage_start = theta.clone();
        let elbo_before = objective.elbo_part(&theta);
        let mut iters = 0;
        let mut fallbacks = 0;
        let mut converged = false;
        while iters < cfg.theta_max_iters {
            let (gradient, hessian) = objective.gradient_hessian(&theta, barrier_weight);
            let (step, fallback) = descent_direction(&gradient, &hessian);
            fallbacks += usize::from(fallback);
            let decrement = -gradient.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
            let scale = objective.value(&theta, barrier_weight).abs().max(1.0);
            if !fallback && 0.5 * decrement <= cfg.theta_tol * scale {
                converged = true;
                break;
            }
            iters += 1;
            let search = backtracking_line_search(objective, &theta, &step, &cfg.line_search, barrier_weight);
            if !search.progress {
                // nothing left to gain at working precision
                converged = 0.5 * decrement <= 1e-9 * scale;
                break;
            }
            for (t, s) in theta.iter_mut().zip(&step) {
                *t += search.tau * s;
            }
        }
        normalize_with_floor(&mut theta);
        let elbo_after = objective.elbo_part(&theta);
        let accepted = elbo_after >= elbo_before;
        if !accepted {
            theta = stage_start;
        }
        stages.push(StageReport { barrier_weight, iters, converged, fallbacks, elbo_before, elbo_after, accepted });
    }
    (theta, stages)
}

/// Updates every estimated `theta[j][k]`; fixed subgroups are left as they are.
pub fn update_theta(
    data: &RankDataset,
    var: &VariationalParams,
    params: &ModelParams,
    cfg: &MStepConfig,
) -> Result<(Vec<Vec<SupportVector>>, Vec<ThetaReport>)> {
    cfg.schedule.validate()?;
    params.check_against(data)?;
    let k = params.n_subgroups();
    let jobs: Vec<(usize, usize)> = (0..params.n_variables())
        .flat_map(|j| (0..k).map(move |kk| (j, kk)))
        .filter(|(_, kk)| !params.fixed_mask[*kk])
        .collect();
    let solve = |&(j, kk): &(usize, usize)| {
        let objective = ThetaObjective::new(data, var, j, kk);
        let (theta, stages) = solve_theta(&objective, params.theta[j][kk].as_slice(), cfg);
        (theta, ThetaReport { variable: j, subgroup: kk, stages })
    };
    let solved: Vec<(Vec<f64>, ThetaReport)> =
        if cfg.parallel { jobs.par_iter().map(solve).collect() } else { jobs.iter().map(solve).collect() };
    let mut theta = params.theta.clone();
    let mut reports = Vec::with_capacity(solved.len());
    for ((j, kk), (weights, report)) in jobs.into_iter().zip(solved) {
        theta[j][kk] = SupportVector::new(weights)?;
        reports.push(report);
    }
    Ok((theta, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepReport {
    pub alpha: AlphaOutcome,
    pub theta: Vec<ThetaReport>,
}

/// One full M-step: alpha and all estimated theta blocks.
pub fn run_mstep(
    data: &RankDataset,
    params: &ModelParams,
    var: &VariationalParams,
    cfg: &MStepConfig,
) -> Result<(ModelParams, MStepReport)> {
    let alpha = update_alpha(data, params, var, cfg.alpha_tol, cfg.alpha_max_iters);
    let (theta, theta_reports) = update_theta(data, var, params, cfg)?;
    let next = ModelParams::new(alpha.alpha.clone(), theta, params.fixed_mask.clone())?;
    Ok((next, MStepReport { alpha, theta: theta_reports }))
}
