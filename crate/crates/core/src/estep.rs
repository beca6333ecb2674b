//! Coordinate ascent over the variational parameters with `(alpha, theta)` held fixed.
//!
//! Each slot's `delta` row is the softmax of `E[ln lambda_i] + ln(step probability)`
//! and each `phi_i` is `alpha + sum of i's delta rows`. Both are exact block
//! maximizers, so every single update is ELBO non-decreasing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    elbo_from_table, expected_log_membership, individual_elbo, log_dirichlet_norm, slot_log_terms, ModelParams, RankDataset, VariationalParams,
};
use crate::plackett_luce::level_log_terms;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EStepConfig {
    /// Stop once `|delta ELBO| / |ELBO|` drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Execution mode only; results do not depend on it, so it is not recorded.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for EStepConfig {
    fn default() -> Self {
        EStepConfig { tol: 1e-6, max_iters: 500, parallel: false }
    }
}

#[derive(Debug, Clone)]
pub struct EStepOutcome {
    pub var: VariationalParams,
    pub elbo: f64,
    pub iters: usize,
    pub converged: bool,
    /// ELBO after each sweep, starting with the input's value.
    pub trace: Vec<f64>,
}

/// Max-subtracted softmax of `logits` into `out`.
fn softmax_into(logits: &[f64], out: &mut [f64]) -> bool {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    true
}

/// The maximizing `delta` row for slot `(i, j, n)` given the current `phi_i`.
/// `n` is the 0-based rank level.
pub fn update_delta(
    data: &RankDataset,
    params: &ModelParams,
    var: &VariationalParams,
    i: usize,
    j: usize,
    n: usize,
) -> Result<Vec<f64>> {
    let k = params.n_subgroups();
    let mut logits = vec![0.0; k];
    expected_log_membership(var.phi_row(i), &mut logits);
    let items = data.observation(i, j).items();
    let mut terms = Vec::new();
    for (kk, theta) in params.theta[j].iter().enumerate() {
        level_log_terms(theta.as_slice(), items, &mut terms)?;
        logits[kk] += terms[n];
    }
    let mut row = vec![0.0; k];
    if !softmax_into(&logits, &mut row) {
        return Err(Error::ZeroResponsibility { slot: data.slot_range(i, j).start + n });
    }
    Ok(row)
}

/// `phi_ik = alpha_k + sum over i's slots of delta_k`.
pub fn update_phi(data: &RankDataset, params: &ModelParams, var: &VariationalParams, i: usize) -> Vec<f64> {
    let mut phi = params.alpha.clone();
    for slot in data.individual_slots(i) {
        for (p, d) in phi.iter_mut().zip(var.delta_row(slot)) {
            *p += d;
        }
    }
    phi
}

/// Updates every delta row of one individual, then its phi.
fn sweep_individual(
    alpha: &[f64],
    table: &[f64],
    first_slot: usize,
    phi: &mut [f64],
    delta: &mut [f64],
) -> Result<()> {
    let k = alpha.len();
    let mut elog = vec![0.0; k];
    expected_log_membership(phi, &mut elog);
    let mut logits = vec![0.0; k];
    for (offset, row) in delta.chunks_mut(k).enumerate() {
        let slot = first_slot + offset;
        for kk in 0..k {
            logits[kk] = elog[kk] + table[slot * k + kk];
        }
        if !softmax_into(&logits, row) {
            return Err(Error::ZeroResponsibility { slot });
        }
    }
    phi.copy_from_slice(alpha);
    for row in delta.chunks(k) {
        for (p, d) in phi.iter_mut().zip(row) {
            *p += d;
        }
    }
    Ok(())
}

/// Splits the flat delta storage into one mutable block per individual.
fn delta_blocks<'a>(data: &RankDataset, k: usize, mut delta: &'a mut [f64]) -> Vec<&'a mut [f64]> {
    let mut blocks = Vec::with_capacity(data.n_individuals());
    for i in 0..data.n_individuals() {
        let len = data.individual_slots(i).len() * k;
        let (head, tail) = delta.split_at_mut(len);
        blocks.push(head);
        delta = tail;
    }
    blocks
}

fn sweep(
    data: &RankDataset,
    alpha: &[f64],
    table: &[f64],
    var: &mut VariationalParams,
    parallel: bool,
) -> Result<()> {
    let k = alpha.len();
    let (phi, delta) = var.parts_mut();
    let blocks = delta_blocks(data, k, delta);
    let jobs = phi.chunks_mut(k).zip(blocks).enumerate();
    let work = |(i, (phi_i, delta_i)): (usize, (&mut [f64], &mut [f64]))| {
        sweep_individual(alpha, table, data.individual_slots(i).start, phi_i, delta_i)
    };
    if parallel {
        jobs.collect::<Vec<_>>().into_par_iter().try_for_each(work)
    } else {
        jobs.into_iter().try_for_each(work)
    }
}

/// Sweeps all individuals until the relative ELBO change falls below `cfg.tol`.
/// Hitting `max_iters` is reported through `converged`, not as an error.
pub fn run_estep(
    data: &RankDataset,
    params: &ModelParams,
    var: VariationalParams,
    cfg: &EStepConfig,
) -> Result<EStepOutcome> {
    if !(cfg.tol > 0.0) {
        return Err(Error::Config(format!("E-step tolerance must be positive, got {}", cfg.tol)));
    }
    if var.n_subgroups() != params.n_subgroups() {
        return Err(Error::InvalidParams("variational and model K differ".into()));
    }
    let table = slot_log_terms(data, params)?;
    let mut var = var;
    let mut elbo = elbo_from_table(data, &params.alpha, &var, &table, cfg.parallel);
    let mut trace = vec![elbo];
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        sweep(data, &params.alpha, &table, &mut var, cfg.parallel)?;
        iters += 1;
        let next = elbo_from_table(data, &params.alpha, &var, &table, cfg.parallel);
        trace.push(next);
        let change = (next - elbo).abs() / next.abs().max(f64::MIN_POSITIVE);
        elbo = next;
        if change < cfg.tol || next == f64::NEG_INFINITY {
            converged = change < cfg.tol;
            break;
        }
    }
    Ok(EStepOutcome { var, elbo, iters, converged, trace })
}

/// Iterates one individual's updates until no component of `phi_i` moves by
/// more than `tol * sum(phi_i)`. Returns the final bound and whether it converged.
fn converge_individual(
    data: &RankDataset,
    alpha: &[f64],
    alpha_norm: f64,
    table: &[f64],
    i: usize,
    phi: &mut [f64],
    delta: &mut [f64],
    cfg: &EStepConfig,
) -> Result<(f64, bool)> {
    let first_slot = data.individual_slots(i).start;
    let mut previous = phi.to_vec();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        sweep_individual(alpha, table, first_slot, phi, delta)?;
        let total: f64 = phi.iter().sum();
        let moved = phi.iter().zip(&previous).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if moved <= cfg.tol * total {
            converged = true;
            break;
        }
        previous.copy_from_slice(phi);
    }
    Ok((individual_elbo(data, alpha, alpha_norm, phi, delta, table, i), converged))
}

/// E-step that converges each individual separately, once from `var` and once
/// from the `1/K` start, and keeps whichever solution has the higher bound.
///
/// Given `(alpha, theta)` the bound is a sum over individuals, so the result
/// is never below what the warm start alone reaches. The fresh start lets an
/// individual leave a subgroup it was locked into: with small `alpha`,
/// single-coordinate updates cannot move all of its slots at once.
pub fn run_estep_two_starts(
    data: &RankDataset,
    params: &ModelParams,
    var: VariationalParams,
    cfg: &EStepConfig,
) -> Result<EStepOutcome> {
    if !(cfg.tol > 0.0) {
        return Err(Error::Config(format!("E-step tolerance must be positive, got {}", cfg.tol)));
    }
    if var.n_subgroups() != params.n_subgroups() {
        return Err(Error::InvalidParams("variational and model K differ".into()));
    }
    let k = params.n_subgroups();
    let alpha = &params.alpha;
    let alpha_norm = log_dirichlet_norm(alpha);
    let table = slot_log_terms(data, params)?;
    let mut var = var;
    let start = elbo_from_table(data, alpha, &var, &table, cfg.parallel);
    let (phi, delta) = var.parts_mut();
    let blocks = delta_blocks(data, k, delta);
    let work = |(i, (phi_i, delta_i)): (usize, (&mut [f64], &mut [f64]))| -> Result<(f64, bool)> {
        let mut fresh_phi = vec![1.0 / k as f64; k];
        let mut fresh_delta = vec![1.0 / k as f64; delta_i.len()];
        let (warm, warm_ok) = converge_individual(data, alpha, alpha_norm, &table, i, phi_i, delta_i, cfg)?;
        let (fresh, fresh_ok) =
            converge_individual(data, alpha, alpha_norm, &table, i, &mut fresh_phi, &mut fresh_delta, cfg)?;
        if fresh > warm {
            phi_i.copy_from_slice(&fresh_phi);
            delta_i.copy_from_slice(&fresh_delta);
        }
        Ok((fresh.max(warm), warm_ok && fresh_ok))
    };
    let jobs = phi.chunks_mut(k).zip(blocks).enumerate();
    let outcomes: Vec<(f64, bool)> = if cfg.parallel {
        jobs.collect::<Vec<_>>().into_par_iter().map(work).collect::<Result<_>>()?
    } else {
        jobs.map(work).collect::<Result<_>>()?
    };
    let elbo = outcomes.iter().map(|o| o.0).sum();
    let converged = outcomes.iter().all(|o| o.1);
    Ok(EStepOutcome { var, elbo, iters: 1, converged, trace: vec![start, elbo] })
}
