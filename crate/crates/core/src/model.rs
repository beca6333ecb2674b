//! Data and parameter types for the mixed-membership Plackett-Luce model,
//! the generative sampler, and the evidence lower bound.
//!
//! Each individual `i` holds a membership vector `lambda_i ~ Dirichlet(alpha)`.
//! Every rank slot `(i, j, n)` draws its own subgroup `Z ~ Categorical(lambda_i)`
//! and then picks the next alternative for variable `j` from that subgroup's
//! Plackett-Luce support, restricted to the alternatives not yet ranked.
//!
//! Rank slots are stored flat, individual-major: the slots of `(i, j)` are
//! `data.slot_range(i, j)` and one slot's variational row is `var.delta_row(slot)`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plackett_luce::{level_log_terms, pl_sample, Ranking, SupportVector};
use crate::special::{digamma, ln_gamma};

/// Widest choice set supported; prefix sets are tracked as bit masks.
pub const MAX_ALTERNATIVES: usize = 64;

/// Default geometric ratio for the presentation-ordered subgroup.
pub const DEFAULT_SHARPNESS: f64 = 0.01;

/// `T` individuals, each ranking all `J` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDataset {
    n_alternatives: Vec<usize>,
    /// Individual-major: observation `(i, j)` lives at `i * J + j`.
    observations: Vec<Ranking>,
    /// `slot_start[i * J + j]..slot_start[i * J + j + 1]` are the slots of `(i, j)`.
    slot_start: Vec<usize>,
}

impl RankDataset {
    pub fn new(n_alternatives: Vec<usize>, observations: Vec<Vec<Ranking>>) -> Result<Self> {
        if n_alternatives.is_empty() {
            return Err(Error::Dataset("at least one variable is required".into()));
        }
        if let Some(v) = n_alternatives.iter().find(|v| **v == 0 || **v > MAX_ALTERNATIVES) {
            return Err(Error::Dataset(format!(
                "choice sets must have 1..={MAX_ALTERNATIVES} alternatives, got {v}"
            )));
        }
        let n_variables = n_alternatives.len();
        let mut flat = Vec::with_capacity(observations.len() * n_variables);
        let mut slot_start = Vec::with_capacity(observations.len() * n_variables + 1);
        slot_start.push(0);
        for (i, row) in observations.into_iter().enumerate() {
            if row.len() != n_variables {
                return Err(Error::Dataset(format!(
                    "individual {i} has {} rankings, expected {n_variables}",
                    row.len()
                )));
            }
            for (j, ranking) in row.into_iter().enumerate() {
                if ranking.n_alternatives() != n_alternatives[j] {
                    return Err(Error::Dataset(format!(
                        "individual {i}, variable {j}: ranking over {} alternatives, variable has {}",
                        ranking.n_alternatives(),
                        n_alternatives[j]
                    )));
                }
                let last = *slot_start.last().unwrap();
                slot_start.push(last + ranking.len());
                flat.push(ranking);
            }
        }
        Ok(RankDataset { n_alternatives, observations: flat, slot_start })
    }

    pub fn n_individuals(&self) -> usize {
        self.observations.len() / self.n_alternatives.len()
    }

    pub fn n_variables(&self) -> usize {
        self.n_alternatives.len()
    }

    pub fn n_alternatives(&self) -> &[usize] {
        &self.n_alternatives
    }

    pub fn observation(&self, i: usize, j: usize) -> &Ranking {
        &self.observations[i * self.n_variables() + j]
    }

    /// Total number of rank slots across the dataset.
    pub fn n_slots(&self) -> usize {
        *self.slot_start.last().unwrap()
    }

    pub fn slot_range(&self, i: usize, j: usize) -> Range<usize> {
        let idx = i * self.n_variables() + j;
        self.slot_start[idx]..self.slot_start[idx + 1]
    }

    pub fn individual_slots(&self, i: usize) -> Range<usize> {
        let j = self.n_variables();
        self.slot_start[i * j]..self.slot_start[(i + 1) * j]
    }

    /// `N_ij` for every variable of individual `i`.
    pub fn lengths(&self, i: usize) -> Vec<usize> {
        (0..self.n_variables()).map(|j| self.observation(i, j).len()).collect()
    }

    /// A new dataset made of the listed individuals, repeats allowed.
    pub fn select(&self, individuals: &[usize]) -> RankDataset {
        let j = self.n_variables();
        let rows = individuals
            .iter()
            .map(|&i| self.observations[i * j..(i + 1) * j].to_vec())
            .collect();
        RankDataset::new(self.n_alternatives.clone(), rows).expect("subset of a valid dataset")
    }

    pub(crate) fn individual_observations(&self, i: usize) -> &[Ranking] {
        let j = self.n_variables();
        &self.observations[i * j..(i + 1) * j]
    }
}

/// Global parameters: Dirichlet membership `alpha` and support `theta[j][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: Vec<f64>,
    /// Indexed `[variable][subgroup]`.
    pub theta: Vec<Vec<SupportVector>>,
    /// Subgroups whose support is frozen during estimation.
    pub fixed_mask: Vec<bool>,
}

impl ModelParams {
    pub fn new(alpha: Vec<f64>, theta: Vec<Vec<SupportVector>>, fixed_mask: Vec<bool>) -> Result<Self> {
        let params = ModelParams { alpha, theta, fixed_mask };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.alpha.len();
        if k == 0 {
            return Err(Error::InvalidParams("alpha is empty".into()));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidParams(format!("alpha component {a} is not positive")));
        }
        if self.fixed_mask.len() != k {
            return Err(Error::InvalidParams(format!(
                "fixed mask has {} entries for {k} subgroups",
                self.fixed_mask.len()
            )));
        }
        for (j, row) in self.theta.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidParams(format!(
                    "variable {j} has {} support vectors for {k} subgroups",
                    row.len()
                )));
            }
            let v = row[0].len();
            if row.iter().any(|t| t.len() != v) {
                return Err(Error::InvalidParams(format!("variable {j} mixes choice-set sizes")));
            }
        }
        Ok(())
    }

    pub fn n_subgroups(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_variables(&self) -> usize {
        self.theta.len()
    }

    pub fn n_alternatives(&self) -> Vec<usize> {
        self.theta.iter().map(|row| row[0].len()).collect()
    }

    /// Relative subgroup frequencies `alpha_k / sum(alpha)`.
    pub fn relative_frequencies(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        self.alpha.iter().map(|a| a / total).collect()
    }

    pub(crate) fn check_against(&self, data: &RankDataset) -> Result<()> {
        if self.n_alternatives() != data.n_alternatives() {
            return Err(Error::InvalidParams(format!(
                "parameters cover choice sets {:?}, data has {:?}",
                self.n_alternatives(),
                data.n_alternatives()
            )));
        }
        Ok(())
    }
}

/// Variational parameters: Dirichlet `phi` per individual and a categorical
/// `delta` row per rank slot, both stored flat with stride `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    n_subgroups: usize,
    phi: Vec<f64>,
    delta: Vec<f64>,
}

impl VariationalParams {
    /// Every `phi` entry and every `delta` entry set to `1/K`.
    pub fn uniform(data: &RankDataset, n_subgroups: usize) -> Self {
        let value = 1.0 / n_subgroups as f64;
        VariationalParams {
            n_subgroups,
            phi: vec![value; data.n_individuals() * n_subgroups],
            delta: vec![value; data.n_slots() * n_subgroups],
        }
    }

    pub fn from_parts(data: &RankDataset, n_subgroups: usize, phi: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        if phi.len() != data.n_individuals() * n_subgroups || delta.len() != data.n_slots() * n_subgroups {
            return Err(Error::InvalidParams("variational parameter shapes do not match the data".into()));
        }
        Ok(VariationalParams { n_subgroups, phi, delta })
    }

    pub fn n_subgroups(&self) -> usize {
        self.n_subgroups
    }

    pub fn phi_row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.n_subgroups..(i + 1) * self.n_subgroups]
    }

    pub fn phi_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.phi[i * self.n_subgroups..(i + 1) * self.n_subgroups]
    }

    pub fn delta_row(&self, slot: usize) -> &[f64] {
        &self.delta[slot * self.n_subgroups..(slot + 1) * self.n_subgroups]
    }

    pub fn delta_row_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.delta[slot * self.n_subgroups..(slot + 1) * self.n_subgroups]
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// The rows of `individuals` (indices into `data`), in that order, matching
    /// [`RankDataset::select`].
    pub fn select(&self, data: &RankDataset, individuals: &[usize]) -> Self {
        let k = self.n_subgroups;
        let mut phi = Vec::with_capacity(individuals.len() * k);
        let mut delta = Vec::new();
        for &i in individuals {
            phi.extend_from_slice(self.phi_row(i));
            let slots = data.individual_slots(i);
            delta.extend_from_slice(&self.delta[slots.start * k..slots.end * k]);
        }
        VariationalParams { n_subgroups: k, phi, delta }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.phi, &mut self.delta)
    }
}

/// A subgroup whose support is fixed instead of estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedSubgroupSpec {
    /// Every alternative equally likely.
    Uniform,
    /// Weights proportional to `sharpness^(v-1)` in presentation order.
    PresentationOrdered { sharpness: f64 },
}

pub fn make_fixed_theta(spec: &FixedSubgroupSpec, n_alternatives: usize) -> Result<SupportVector> {
    if n_alternatives < 2 {
        return Err(Error::Config(format!(
            "fixed subgroups need at least 2 alternatives, got {n_alternatives}"
        )));
    }
    match *spec {
        FixedSubgroupSpec::Uniform => Ok(SupportVector::uniform(n_alternatives)),
        FixedSubgroupSpec::PresentationOrdered { sharpness } => {
            if !(sharpness > 0.0 && sharpness < 1.0) {
                return Err(Error::Config(format!("sharpness must lie in (0, 1), got {sharpness}")));
            }
            let weights = (0..n_alternatives).map(|v| sharpness.powi(v as i32)).collect();
            SupportVector::normalized(weights)
        }
    }
}

/// Output of [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: RankDataset,
    /// `lambda_i` for each individual.
    pub memberships: Vec<Vec<f64>>,
    /// The subgroup that produced each rank slot.
    pub contexts: Vec<usize>,
}

/// `lambda ~ Dirichlet(alpha)`, drawn in log space so tiny `alpha` does not underflow.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.len() == 1 {
        return Ok(vec![1.0]);
    }
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let logs = alpha
        .iter()
        .map(|&a| {
            let g = Gamma::new(a + 1.0, 1.0).map_err(|e| Error::InvalidParams(e.to_string()))?;
            let u: f64 = rng.random();
            Ok(g.sample(rng).ln() + u.ln() / a)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let target = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last = k;
        if target < cumulative {
            break;
        }
    }
    last
}

/// Draws one individual's rankings given a membership vector. Returns the
/// rankings and the subgroup behind each slot.
fn sample_individual<R: Rng + ?Sized>(
    params: &ModelParams,
    membership: &[f64],
    lengths: &[usize],
    rng: &mut R,
) -> Result<(Vec<Ranking>, Vec<usize>)> {
    let mut rankings = Vec::with_capacity(lengths.len());
    let mut contexts = Vec::new();
    for (j, &n_levels) in lengths.iter().enumerate() {
        let n_alt = params.theta[j][0].len();
        let mut taken = vec![false; n_alt];
        let mut items = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let z = sample_categorical(membership, rng);
            // one Plackett-Luce step from subgroup z over the untaken alternatives
            let weights: Vec<f64> = params.theta[j][z]
                .as_slice()
                .iter()
                .zip(&taken)
                .map(|(w, t)| if *t { 0.0 } else { *w })
                .collect();
            let remaining = SupportVector::normalized(weights)
                .map_err(|_| Error::InsufficientSupport { requested: n_levels, available: items.len() })?;
            let pick = pl_sample(&remaining, 1, rng)?.items()[0];
            taken[pick] = true;
            items.push(pick);
            contexts.push(z);
        }
        rankings.push(Ranking::new(items, n_alt)?);
    }
    Ok((rankings, contexts))
}

/// Samples `T` individuals from the generative model. `lengths[j]` is the
/// number of rank levels every individual reports for variable `j`.
pub fn generate_dataset<R: Rng + ?Sized>(
    params: &ModelParams,
    n_individuals: usize,
    lengths: &[usize],
    rng: &mut R,
) -> Result<SyntheticData> {
    let memberships = (0..n_individuals)
        .map(|_| sample_dirichlet(&params.alpha, rng))
        .collect::<Result<Vec<_>>>()?;
    let shape = vec![lengths.to_vec(); n_individuals];
    generate_given_memberships(params, memberships, &shape, rng)
}

/// Like [`generate_dataset`] but with caller-supplied memberships and
/// per-individual lengths `lengths[i][j]`.
pub fn generate_given_memberships<R: Rng + ?Sized>(
    params: &ModelParams,
    memberships: Vec<Vec<f64>>,
    lengths: &[Vec<usize>],
    rng: &mut R,
) -> Result<SyntheticData> {
    params.validate()?;
    let n_alt = params.n_alternatives();
    let mut rows = Vec::with_capacity(memberships.len());
    let mut contexts = Vec::new();
    for (membership, lens) in memberships.iter().zip(lengths) {
        if membership.len() != params.n_subgroups() {
            return Err(Error::InvalidParams("membership length differs from K".into()));
        }
        if lens.len() != n_alt.len() || lens.iter().zip(&n_alt).any(|(n, v)| *n == 0 || n > v) {
            return Err(Error::Config(format!("rank lengths {lens:?} do not fit choice sets {n_alt:?}")));
        }
        let (rankings, z) = sample_individual(params, membership, lens, rng)?;
        rows.push(rankings);
        contexts.extend(z);
    }
    let data = RankDataset::new(n_alt, rows)?;
    Ok(SyntheticData { data, memberships, contexts })
}

/// Per-slot, per-subgroup log Plackett-Luce step terms
/// `ln theta[j][k][a(n)] - ln(1 - sum_{c<n} theta[j][k][a(c)])`, stride `K`.
pub(crate) fn slot_log_terms(data: &RankDataset, params: &ModelParams) -> Result<Vec<f64>> {
    params.check_against(data)?;
    let k = params.n_subgroups();
    let mut table = vec![0.0; data.n_slots() * k];
    let mut terms = Vec::new();
    for i in 0..data.n_individuals() {
        for j in 0..data.n_variables() {
            let range = data.slot_range(i, j);
            let items = data.observation(i, j).items();
            for (kk, theta) in params.theta[j].iter().enumerate() {
                level_log_terms(theta.as_slice(), items, &mut terms)?;
                for (offset, t) in terms.iter().enumerate() {
                    table[(range.start + offset) * k + kk] = *t;
                }
            }
        }
    }
    Ok(table)
}

/// `E_q[ln lambda_ik] = digamma(phi_ik) - digamma(sum_k phi_ik)`.
pub(crate) fn expected_log_membership(phi: &[f64], out: &mut [f64]) {
    let total = digamma(phi.iter().sum());
    for (o, p) in out.iter_mut().zip(phi) {
        *o = digamma(*p) - total;
    }
}

/// `ln Gamma(sum alpha) - sum ln Gamma(alpha_k)`.
pub(crate) fn log_dirichlet_norm(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
}

/// `x ln x` with `0 ln 0 = 0`.
fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// ELBO contribution of individual `i`; `delta` holds only that individual's rows.
pub(crate) fn individual_elbo(
    data: &RankDataset,
    alpha: &[f64],
    alpha_norm: f64,
    phi: &[f64],
    delta: &[f64],
    table: &[f64],
    i: usize,
) -> f64 {
    let k = alpha.len();
    let mut elog = vec![0.0; k];
    expected_log_membership(phi, &mut elog);

    let mut total = alpha_norm;
    for kk in 0..k {
        total += (alpha[kk] - 1.0) * elog[kk];
    }
    // entropy of Dirichlet(phi)
    total -= log_dirichlet_norm(phi);
    for kk in 0..k {
        total -= (phi[kk] - 1.0) * elog[kk];
    }
    for (row, slot) in delta.chunks(k).zip(data.individual_slots(i)) {
        let terms = &table[slot * k..(slot + 1) * k];
        for kk in 0..k {
            let d = row[kk];
            if d > 0.0 {
                total += d * (elog[kk] + terms[kk]) - xlogx(d);
            }
        }
    }
    total
}

/// Per-individual ELBO terms in index order, optionally computed in parallel.
pub(crate) fn individual_elbos(
    data: &RankDataset,
    alpha: &[f64],
    var: &VariationalParams,
    table: &[f64],
    parallel: bool,
) -> Vec<f64> {
    let k = alpha.len();
    let alpha_norm = log_dirichlet_norm(alpha);
    let term = |i: usize| {
        let slots = data.individual_slots(i);
        let delta = &var.delta[slots.start * k..slots.end * k];
        individual_elbo(data, alpha, alpha_norm, &var.phi[i * k..(i + 1) * k], delta, table, i)
    };
    if parallel {
        (0..data.n_individuals()).into_par_iter().map(term).collect()
    } else {
        (0..data.n_individuals()).map(term).collect()
    }
}

/// Sums the per-individual terms sequentially, so the total does not depend on `parallel`.
pub(crate) fn elbo_from_table(
    data: &RankDataset,
    alpha: &[f64],
    var: &VariationalParams,
    table: &[f64],
    parallel: bool,
) -> f64 {
    individual_elbos(data, alpha, var, table, parallel).iter().sum()
}

/// The evidence lower bound for `(alpha, theta)` under variational `(phi, delta)`.
///
/// Returns `-inf` when some `delta` puts mass on a subgroup that gives the
/// observed selection zero probability.
pub fn compute_elbo(data: &RankDataset, params: &ModelParams, var: &VariationalParams) -> Result<f64> {
    compute_elbo_with(data, params, var, false)
}

pub fn compute_elbo_with(
    data: &RankDataset,
    params: &ModelParams,
    var: &VariationalParams,
    parallel: bool,
) -> Result<f64> {
    if var.n_subgroups() != params.n_subgroups() {
        return Err(Error::InvalidParams("variational and model K differ".into()));
    }
    let table = slot_log_terms(data, params)?;
    Ok(elbo_from_table(data, &params.alpha, var, &table, parallel))
}

/// Default cap on subgroup assignments enumerated per individual.
pub const ENUMERATION_BUDGET: f64 = 1e7;

/// `ln P(X | alpha, theta)` by summing over every assignment of subgroups to
/// rank slots. Only feasible for tiny instances; individuals needing more than
/// [`ENUMERATION_BUDGET`] assignments are refused.
pub fn exact_log_marginal(data: &RankDataset, params: &ModelParams) -> Result<f64> {
    let k = params.n_subgroups();
    let table = slot_log_terms(data, params)?;
    let alpha_sum: f64 = params.alpha.iter().sum();
    let mut total = 0.0;
    for i in 0..data.n_individuals() {
        let slots = data.individual_slots(i);
        let n = slots.len();
        let needed = (k as f64).powi(n as i32);
        if needed > ENUMERATION_BUDGET {
            return Err(Error::EnumerationBudget { needed, budget: ENUMERATION_BUDGET });
        }
        let base = ln_gamma(alpha_sum) - ln_gamma(alpha_sum + n as f64);
        let mut assignment = vec![0usize; n];
        let mut counts = vec![0usize; k];
        let mut log_terms = Vec::with_capacity(needed as usize);
        loop {
            counts.iter_mut().for_each(|c| *c = 0);
            let mut lp = base;
            for (offset, &z) in assignment.iter().enumerate() {
                counts[z] += 1;
                lp += table[(slots.start + offset) * k + z];
            }
            for (kk, &c) in counts.iter().enumerate() {
                if c > 0 {
                    lp += ln_gamma(params.alpha[kk] + c as f64) - ln_gamma(params.alpha[kk]);
                }
            }
            log_terms.push(lp);
            // odometer increment
            let mut pos = 0;
            while pos < n {
                assignment[pos] += 1;
                if assignment[pos] < k {
                    break;
                }
                assignment[pos] = 0;
                pos += 1;
            }
            if pos == n {
                break;
            }
        }
        total += log_sum_exp(&log_terms);
    }
    Ok(total)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
