//! Variational EM driver and the procedures built on it: two-step
//! initialization, held-out ELBO model selection, bootstrap intervals and
//! goodness-of-fit simulation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::{run_estep, run_estep_two_starts, EStepConfig};
use crate::model::{
    compute_elbo_with, generate_given_memberships, make_fixed_theta, sample_dirichlet, FixedSubgroupSpec,
    ModelParams, RankDataset, VariationalParams,
};
use crate::mstep::{run_mstep, MStepConfig};
use crate::plackett_luce::SupportVector;
use crate::rng::{derive_seed, fnv1a, stream_rng};

/// Smallest component of a randomly drawn initial support vector.
const INIT_THETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Estimated supports drawn from a symmetric `Dirichlet(a, ..., a)`.
    Random { dirichlet_a: f64 },
    /// Start from the given parameters.
    Provided { params: ModelParams },
    /// Run from a random start, then restart from the resulting global
    /// parameters with the variational parameters reset.
    TwoStep { dirichlet_a: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Total subgroup count `K`, fixed subgroups included.
    pub n_subgroups: usize,
    /// Fixed subgroups take the last indices, in this order.
    pub fixed_subgroups: Vec<FixedSubgroupSpec>,
    /// Stop when the relative change of the ELBO between outer iterations is below this.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub estep: EStepConfig,
    pub mstep: MStepConfig,
    pub seed: u64,
    pub init: InitStrategy,
    /// Starting value of every alpha component for random starts.
    pub init_alpha: f64,
    /// Also run every E-step from the `1/K` start and keep, per individual,
    /// whichever variational solution has the higher bound.
    pub fresh_estep: bool,
    /// Execution mode only; results do not depend on it, so it is not recorded.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_subgroups: 2,
            fixed_subgroups: Vec::new(),
            outer_tol: 1e-7,
            max_outer_iters: 500,
            estep: EStepConfig::default(),
            mstep: MStepConfig::default(),
            seed: 0,
            init: InitStrategy::Random { dirichlet_a: 1.1 },
            init_alpha: 0.1,
            fresh_estep: true,
            parallel: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let fixed = self.fixed_subgroups.len();
        if self.n_subgroups == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if fixed > 0 && self.n_subgroups < fixed + 1 {
            return Err(Error::Config(format!(
                "K = {} leaves no estimated subgroup next to {fixed} fixed ones",
                self.n_subgroups
            )));
        }
        for (name, tol) in [("outer", self.outer_tol), ("E-step", self.estep.tol)] {
            if !(tol > 0.0) {
                return Err(Error::Config(format!("{name} tolerance must be positive, got {tol}")));
            }
        }
        if !(self.mstep.theta_tol > 0.0 && self.mstep.alpha_tol > 0.0) {
            return Err(Error::Config("M-step tolerances must be positive".into()));
        }
        if !(self.mstep.line_search.tau0 > 0.0 && self.mstep.line_search.tau0 < 1.0) {
            return Err(Error::Config(format!("tau0 must lie in (0, 1), got {}", self.mstep.line_search.tau0)));
        }
        if !(self.init_alpha > 0.0) {
            return Err(Error::Config("initial alpha must be positive".into()));
        }
        self.mstep.schedule.validate()?;
        match &self.init {
            InitStrategy::Random { dirichlet_a } | InitStrategy::TwoStep { dirichlet_a } if !(*dirichlet_a > 0.0) => {
                Err(Error::Config(format!("Dirichlet initialization parameter must be positive, got {dirichlet_a}")))
            }
            InitStrategy::Provided { params } if params.n_subgroups() != self.n_subgroups => Err(Error::Config(
                format!("provided parameters have K = {}, config asks for {}", params.n_subgroups(), self.n_subgroups),
            )),
            _ => Ok(()),
        }
    }

    pub fn fixed_mask(&self) -> Vec<bool> {
        let first_fixed = self.n_subgroups - self.fixed_subgroups.len();
        (0..self.n_subgroups).map(|k| k >= first_fixed).collect()
    }
}

/// Counts of inner solver flags raised during a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub estep_unconverged: usize,
    pub alpha_unconverged: usize,
    pub theta_stages_unconverged: usize,
    pub theta_stages_rejected: usize,
    pub theta_fallback_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub var: VariationalParams,
    /// ELBO after each outer iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn elbo(&self) -> f64 {
        self.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Random starting parameters: `theta ~ Dirichlet(a)` for estimated subgroups,
/// fixed supports from their specs, and a flat alpha.
pub fn random_init<R: Rng + ?Sized>(
    n_alternatives: &[usize],
    cfg: &FitConfig,
    dirichlet_a: f64,
    rng: &mut R,
) -> Result<ModelParams> {
    let mask = cfg.fixed_mask();
    let first_fixed = cfg.n_subgroups - cfg.fixed_subgroups.len();
    let mut theta = Vec::with_capacity(n_alternatives.len());
    for &v in n_alternatives {
        let mut row = Vec::with_capacity(cfg.n_subgroups);
        for k in 0..cfg.n_subgroups {
            if mask[k] {
                row.push(make_fixed_theta(&cfg.fixed_subgroups[k - first_fixed], v)?);
            } else {
                let draw = sample_dirichlet(&vec![dirichlet_a; v], rng)?;
                let floored = draw.into_iter().map(|w| w.max(INIT_THETA_FLOOR)).collect();
                row.push(SupportVector::normalized(floored)?);
            }
        }
        theta.push(row);
    }
    ModelParams::new(vec![cfg.init_alpha; cfg.n_subgroups], theta, mask)
}

fn em_loop(data: &RankDataset, start: ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    em_loop_from(data, start, VariationalParams::uniform(data, cfg.n_subgroups), cfg)
}

/// [`em_loop`] from given variational parameters instead of `1/K`.
fn em_loop_from(data: &RankDataset, start: ModelParams, var: VariationalParams, cfg: &FitConfig) -> Result<FitResult> {
    start.check_against(data)?;
    let estep_cfg = EStepConfig { parallel: cfg.parallel || cfg.estep.parallel, ..cfg.estep };
    let mstep_cfg = MStepConfig { parallel: cfg.parallel || cfg.mstep.parallel, ..cfg.mstep };
    let mut params = start;
    let mut var = var;
    let mut trace: Vec<f64> = Vec::new();
    let mut diagnostics = FitDiagnostics::default();
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_outer_iters {
        iters += 1;
        let estep = if cfg.fresh_estep {
            run_estep_two_starts(data, &params, var, &estep_cfg)?
        } else {
            run_estep(data, &params, var, &estep_cfg)?
        };
        diagnostics.estep_unconverged += usize::from(!estep.converged);
        var = estep.var;
        let (next, report) = run_mstep(data, &params, &var, &mstep_cfg)?;
        params = next;
        diagnostics.alpha_unconverged += usize::from(!report.alpha.converged);
        for stage in report.theta.iter().flat_map(|r| &r.stages) {
            diagnostics.theta_stages_unconverged += usize::from(!stage.converged);
            diagnostics.theta_stages_rejected += usize::from(!stage.accepted);
            diagnostics.theta_fallback_steps += stage.fallbacks;
        }
        let elbo = compute_elbo_with(data, &params, &var, estep_cfg.parallel)?;
        if let Some(&previous) = trace.last() {
            let change = (elbo - previous).abs() / elbo.abs().max(f64::MIN_POSITIVE);
            trace.push(elbo);
            if change < cfg.outer_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(elbo);
        }
    }
    Ok(FitResult { params, var, elbo_trace: trace, converged, iters, diagnostics })
}

/// Both runs of the two-step procedure.
fn fit_two_step(data: &RankDataset, cfg: &FitConfig, dirichlet_a: f64) -> Result<(FitResult, FitResult)> {
    let mut rng = stream_rng(cfg.seed, 0);
    let start = random_init(data.n_alternatives(), cfg, dirichlet_a, &mut rng)?;
    let first = em_loop(data, start, cfg)?;
    let second = em_loop(data, first.params.clone(), cfg)?;
    Ok((first, second))
}

/// Fits the model by variational EM.
pub fn fit(data: &RankDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    match &cfg.init {
        InitStrategy::Random { dirichlet_a } => {
            let mut rng = stream_rng(cfg.seed, 0);
            let start = random_init(data.n_alternatives(), cfg, *dirichlet_a, &mut rng)?;
            em_loop(data, start, cfg)
        }
        InitStrategy::Provided { params } => {
            params.validate()?;
            em_loop(data, params.clone(), cfg)
        }
        InitStrategy::TwoStep { dirichlet_a } => Ok(fit_two_step(data, cfg, *dirichlet_a)?.1),
    }
}

/// Results of both runs of the two-step initialization.
#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub first: FitResult,
    pub second: FitResult,
}

/// Runs from a random start to a stationary point, then runs again from the
/// resulting `(alpha, theta)` with `phi` and `delta` reset to `1/K`.
pub fn two_step_init(data: &RankDataset, cfg: &FitConfig) -> Result<TwoStepResult> {
    cfg.validate()?;
    let dirichlet_a = match cfg.init {
        InitStrategy::TwoStep { dirichlet_a } | InitStrategy::Random { dirichlet_a } => dirichlet_a,
        InitStrategy::Provided { .. } => {
            return Err(Error::Config("two-step initialization needs a random first run".into()))
        }
    };
    let (first, second) = fit_two_step(data, cfg, dirichlet_a)?;
    Ok(TwoStepResult { first, second })
}

/// ELBO of `test` after fitting only its variational parameters, with
/// `(alpha, theta)` frozen at `params`.
pub fn held_out_elbo_for(test: &RankDataset, params: &ModelParams, cfg: &FitConfig) -> Result<f64> {
    let estep_cfg = EStepConfig { parallel: cfg.parallel || cfg.estep.parallel, ..cfg.estep };
    let var = VariationalParams::uniform(test, params.n_subgroups());
    Ok(run_estep(test, params, var, &estep_cfg)?.elbo)
}

#[derive(Debug, Clone)]
pub struct HeldOut {
    pub elbo: f64,
    pub fit: FitResult,
}

/// Fits on `train`, then scores `test` with a single variational E-step.
pub fn held_out_elbo(train: &RankDataset, test: &RankDataset, cfg: &FitConfig) -> Result<HeldOut> {
    if train.n_alternatives() != test.n_alternatives() {
        return Err(Error::Dataset("training and test sets have different choice sets".into()));
    }
    let fit = fit(train, cfg)?;
    let elbo = held_out_elbo_for(test, &fit.params, cfg)?;
    Ok(HeldOut { elbo, fit })
}

/// Splits individuals in half by a seeded hash of their responses. The split
/// and the order within each half do not depend on the input order.
pub fn split_half(data: &RankDataset, split_seed: u64) -> (RankDataset, RankDataset) {
    let mut keyed: Vec<(u64, &[crate::plackett_luce::Ranking], usize)> = (0..data.n_individuals())
        .map(|i| {
            let obs = data.individual_observations(i);
            let words = obs.iter().flat_map(|r| r.items().iter().map(|&a| a as u64).chain([u64::MAX]));
            let key = derive_seed(split_seed, &[fnv1a(words)]);
            (key, obs, i)
        })
        .collect();
    keyed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    let half = order.len() / 2;
    (data.select(&order[..half]), data.select(&order[half..]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectKConfig {
    pub k_values: Vec<usize>,
    /// Random restarts for every `(K, a)` pair.
    pub restarts: usize,
    pub dirichlet_a: Vec<f64>,
    pub split_seed: u64,
}

impl Default for SelectKConfig {
    fn default() -> Self {
        SelectKConfig { k_values: vec![2, 3, 4, 5], restarts: 40, dirichlet_a: vec![0.6, 1.1, 1.5], split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectKRow {
    pub k: usize,
    /// Largest held-out ELBO over all restarts at this K.
    pub best_held_out: f64,
    pub restarts: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectKResult {
    pub best_k: usize,
    pub table: Vec<SelectKRow>,
    /// Training-set parameters of the winning restart.
    pub best_params: ModelParams,
}

/// Held-out ELBO model selection over `K`, with random restarts at each
/// Dirichlet initialization parameter.
pub fn select_k(data: &RankDataset, sel: &SelectKConfig, cfg: &FitConfig) -> Result<SelectKResult> {
    if sel.k_values.is_empty() || sel.restarts == 0 || sel.dirichlet_a.is_empty() {
        return Err(Error::Config("select-k needs K values, restarts and Dirichlet parameters".into()));
    }
    let (train, test) = split_half(data, sel.split_seed);
    if train.n_individuals() == 0 || test.n_individuals() == 0 {
        return Err(Error::Dataset("too few individuals to split".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = sel
        .k_values
        .iter()
        .flat_map(|&k| (0..sel.dirichlet_a.len()).flat_map(move |a| (0..sel.restarts).map(move |r| (k, a, r))))
        .collect();
    for &k in &sel.k_values {
        FitConfig { n_subgroups: k, ..cfg.clone() }.validate()?;
    }
    let run = |&(k, a, r): &(usize, usize, usize)| -> Option<(f64, ModelParams)> {
        let job_cfg = FitConfig {
            n_subgroups: k,
            seed: derive_seed(cfg.seed, &[k as u64, a as u64, r as u64]),
            init: InitStrategy::Random { dirichlet_a: sel.dirichlet_a[a] },
            ..cfg.clone()
        };
        let held = held_out_elbo(&train, &test, &job_cfg).ok()?;
        held.elbo.is_finite().then_some((held.elbo, held.fit.params))
    };
    let outcomes: Vec<Option<(f64, ModelParams)>> =
        if cfg.parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() };

    let mut table = Vec::with_capacity(sel.k_values.len());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for &k in &sel.k_values {
        let mut row = SelectKRow { k, best_held_out: f64::NEG_INFINITY, restarts: 0, failed: 0 };
        for (job, outcome) in jobs.iter().zip(&outcomes) {
            if job.0 != k {
                continue;
            }
            row.restarts += 1;
            match outcome {
                Some((elbo, params)) => {
                    row.best_held_out = row.best_held_out.max(*elbo);
                    if best.as_ref().map_or(true, |b| *elbo > b.0) {
                        best = Some((*elbo, k, params.clone()));
                    }
                }
                None => row.failed += 1,
            }
        }
        table.push(row);
    }
    let (_, best_k, best_params) = best.ok_or_else(|| Error::Config("every select-k fit failed".into()))?;
    Ok(SelectKResult { best_k, table, best_params })
}

/// An equal-tailed empirical interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

/// Linear-interpolation sample quantile (R's type 7).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn interval(values: &[f64], level: f64) -> Interval {
    let tail = (1.0 - level) / 2.0;
    Interval { low: quantile(values, tail), high: quantile(values, 1.0 - tail) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 200, level: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub level: f64,
    pub alpha: Vec<Interval>,
    pub relative_frequencies: Vec<Interval>,
    /// Indexed `[variable][subgroup][alternative]`.
    pub theta: Vec<Vec<Vec<Interval>>>,
    pub used: usize,
    /// Replicates dropped because their fit did not converge.
    pub dropped: usize,
}

/// Percentile bootstrap: refit on individuals resampled with replacement,
/// each replicate starting from the full-data estimate.
pub fn bootstrap_ci(
    data: &RankDataset,
    fitted: &FitResult,
    boot: &BootstrapConfig,
    cfg: &FitConfig,
) -> Result<BootstrapSummary> {
    if boot.replicates < 2 {
        return Err(Error::Config("the bootstrap needs at least two replicates".into()));
    }
    if !(boot.level > 0.0 && boot.level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {}", boot.level)));
    }
    let n = data.n_individuals();
    let replicate_cfg = FitConfig {
        n_subgroups: fitted.params.n_subgroups(),
        init: InitStrategy::Provided { params: fitted.params.clone() },
        ..cfg.clone()
    };
    replicate_cfg.validate()?;
    // each replicate starts from the full-data stationary point, individuals
    // keeping their own variational parameters
    let run = |b: usize| -> Result<Option<ModelParams>> {
        let mut rng = stream_rng(boot.seed, b as u64);
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let var = fitted.var.select(data, &picks);
        let result = em_loop_from(&data.select(&picks), fitted.params.clone(), var, &replicate_cfg)?;
        Ok(result.converged.then_some(result.params))
    };
    let outcomes: Vec<Result<Option<ModelParams>>> = if cfg.parallel {
        (0..boot.replicates).into_par_iter().map(run).collect()
    } else {
        (0..boot.replicates).map(run).collect()
    };
    let mut kept = Vec::new();
    for outcome in outcomes {
        if let Some(params) = outcome? {
            kept.push(params);
        }
    }
    let dropped = boot.replicates - kept.len();
    if kept.len() < 2 {
        return Err(Error::Config(format!("only {} bootstrap replicates converged", kept.len())));
    }
    let k = fitted.params.n_subgroups();
    let alpha = (0..k)
        .map(|kk| interval(&kept.iter().map(|p| p.alpha[kk]).collect::<Vec<_>>(), boot.level))
        .collect();
    let freqs: Vec<Vec<f64>> = kept.iter().map(|p| p.relative_frequencies()).collect();
    let relative_frequencies =
        (0..k).map(|kk| interval(&freqs.iter().map(|f| f[kk]).collect::<Vec<_>>(), boot.level)).collect();
    let theta = fitted
        .params
        .theta
        .iter()
        .enumerate()
        .map(|(j, row)| {
            (0..k)
                .map(|kk| {
                    (0..row[kk].len())
                        .map(|v| {
                            let draws: Vec<f64> = kept.iter().map(|p| p.theta[j][kk].as_slice()[v]).collect();
                            interval(&draws, boot.level)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(BootstrapSummary { level: boot.level, alpha, relative_frequencies, theta, used: kept.len(), dropped })
}

/// First-place counts `[variable][alternative]` of a dataset.
pub fn first_choice_counts(data: &RankDataset) -> Vec<Vec<u64>> {
    let mut counts: Vec<Vec<u64>> = data.n_alternatives().iter().map(|&v| vec![0; v]).collect();
    for i in 0..data.n_individuals() {
        for (j, row) in counts.iter_mut().enumerate() {
            row[data.observation(i, j).items()[0]] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessOfFit {
    /// `[simulation][variable][alternative]` first-place counts.
    pub simulated: Vec<Vec<Vec<u64>>>,
    pub observed: Vec<Vec<u64>>,
}

impl GoodnessOfFit {
    /// Central `level` band of the simulated counts for one alternative.
    pub fn band(&self, j: usize, v: usize, level: f64) -> Interval {
        let draws: Vec<f64> = self.simulated.iter().map(|s| s[j][v] as f64).collect();
        interval(&draws, level)
    }

    /// Share of alternatives whose observed count lies inside the central band.
    pub fn coverage(&self, level: f64) -> f64 {
        let mut inside = 0;
        let mut total = 0;
        for (j, row) in self.observed.iter().enumerate() {
            for (v, &count) in row.iter().enumerate() {
                total += 1;
                inside += usize::from(self.band(j, v, level).contains(count as f64));
            }
        }
        inside as f64 / total as f64
    }
}

/// Simulates `simulations` datasets shaped like `data` from `params` and
/// tabulates first-place counts.
pub fn goodness_of_fit(
    params: &ModelParams,
    data: &RankDataset,
    simulations: usize,
    seed: u64,
    parallel: bool,
) -> Result<GoodnessOfFit> {
    if simulations == 0 {
        return Err(Error::Config("at least one simulation is required".into()));
    }
    params.check_against(data)?;
    let lengths: Vec<Vec<usize>> = (0..data.n_individuals()).map(|i| data.lengths(i)).collect();
    let run = |s: usize| -> Result<Vec<Vec<u64>>> {
        let mut rng = stream_rng(seed, s as u64);
        let memberships = (0..lengths.len())
            .map(|_| sample_dirichlet(&params.alpha, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let syn = generate_given_memberships(params, memberships, &lengths, &mut rng)?;
        Ok(first_choice_counts(&syn.data))
    };
    let simulated: Result<Vec<_>> = if parallel {
        (0..simulations).into_par_iter().map(run).collect()
    } else {
        (0..simulations).map(run).collect()
    };
    Ok(GoodnessOfFit { simulated: simulated?, observed: first_choice_counts(data) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_elbo, generate_dataset};
    use crate::plackett_luce::Ranking;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(w: &[f64]) -> SupportVector {
        SupportVector::new(w.to_vec()).unwrap()
    }

    fn two_group_data(seed: u64, n: usize) -> (RankDataset, ModelParams) {
        let params = ModelParams::new(
            vec![0.3, 0.2],
            vec![
                vec![sv(&[0.6, 0.25, 0.1, 0.05]), sv(&[0.05, 0.1, 0.25, 0.6])],
                vec![sv(&[0.7, 0.2, 0.1]), sv(&[0.1, 0.2, 0.7])],
            ],
            vec![false, false],
        )
        .unwrap();
        let syn = generate_dataset(&params, n, &[3, 2], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (syn.data, params)
    }

    #[test]
    fn config_validation() {
        let mut cfg = FitConfig { n_subgroups: 2, fixed_subgroups: vec![FixedSubgroupSpec::Uniform; 2], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.n_subgroups = 3;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.fixed_mask(), vec![false, true, true]);
        cfg.outer_tol = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_is_monotone_and_fixed_groups_frozen() {
        let (data, _) = two_group_data(1, 150);
        let cfg = FitConfig {
            n_subgroups: 3,
            fixed_subgroups: vec![FixedSubgroupSpec::Uniform],
            seed: 4,
            ..Default::default()
        };
        let result = fit(&data, &cfg).unwrap();
        assert!(result.elbo_trace.windows(2).all(|w| w[1] >= w[0] - 1e-6), "{:?}", result.elbo_trace);
        for j in 0..2 {
            assert_eq!(result.params.theta[j][2], SupportVector::uniform(data.n_alternatives()[j]));
        }
        let elbo = compute_elbo(&data, &result.params, &result.var).unwrap();
        assert_eq!(elbo, result.elbo());
    }

    #[test]
    fn same_seed_same_result() {
        let (data, _) = two_group_data(2, 80);
        let cfg = FitConfig { seed: 9, ..Default::default() };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = fit(&data, &FitConfig { parallel: true, ..cfg }).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn held_out_elbo_adds_over_individuals() {
        let (data, params) = two_group_data(3, 60);
        let cfg = FitConfig { estep: EStepConfig { tol: 1e-12, max_iters: 5000, ..Default::default() }, ..Default::default() };
        let first: Vec<usize> = (0..25).collect();
        let rest: Vec<usize> = (25..60).collect();
        let whole = held_out_elbo_for(&data, &params, &cfg).unwrap();
        let parts = held_out_elbo_for(&data.select(&first), &params, &cfg).unwrap()
            + held_out_elbo_for(&data.select(&rest), &params, &cfg).unwrap();
        assert!((whole - parts).abs() < 1e-6 * whole.abs(), "{whole} vs {parts}");
    }

    #[test]
    fn split_ignores_input_order() {
        let (data, _) = two_group_data(4, 41);
        let reversed: Vec<usize> = (0..41).rev().collect();
        let shuffled = data.select(&reversed);
        let (a_train, a_test) = split_half(&data, 12);
        let (b_train, b_test) = split_half(&shuffled, 12);
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.n_individuals(), 20);
        assert_eq!(a_test.n_individuals(), 21);
    }

    #[test]
    fn select_k_single_candidate() {
        let (data, _) = two_group_data(5, 60);
        let sel = SelectKConfig { k_values: vec![1], restarts: 1, dirichlet_a: vec![1.1], split_seed: 3 };
        let out = select_k(&data, &sel, &FitConfig::default()).unwrap();
        assert_eq!(out.best_k, 1);
        assert_eq!(out.table.len(), 1);
    }

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.025) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn identical_individuals_give_zero_width_intervals() {
        let r = Ranking::new(vec![1, 0], 3).unwrap();
        let data = RankDataset::new(vec![3], vec![vec![r]; 12]).unwrap();
        let cfg = FitConfig { n_subgroups: 1, seed: 2, ..Default::default() };
        let fitted = fit(&data, &cfg).unwrap();
        let boot = BootstrapConfig { replicates: 5, level: 0.95, seed: 1 };
        let summary = bootstrap_ci(&data, &fitted, &boot, &cfg).unwrap();
        assert_eq!(summary.used, 5);
        assert!(summary.alpha.iter().all(|i| i.width() == 0.0));
        assert!(summary.theta.iter().flatten().flatten().all(|i| i.width() == 0.0));
    }

    #[test]
    fn gof_shapes_and_uniform_expectation() {
        let u = SupportVector::uniform(5);
        let params = ModelParams::new(vec![1.0], vec![vec![u]], vec![false]).unwrap();
        let rows = (0..1000).map(|_| vec![Ranking::new(vec![0], 5).unwrap()]).collect();
        let data = RankDataset::new(vec![5], rows).unwrap();
        let gof = goodness_of_fit(&params, &data, 1000, 3, false).unwrap();
        assert_eq!(gof.simulated.len(), 1000);
        assert!(gof.simulated.iter().all(|s| s.len() == 1 && s[0].len() == 5));
        // binomial(1000, 0.2): sd 12.65, mean of 1000 draws has se 0.4
        for v in 0..5 {
            let mean = gof.simulated.iter().map(|s| s[0][v] as f64).sum::<f64>() / 1000.0;
            assert!((mean - 200.0).abs() < 3.0 * 0.4 * 1.2, "alternative {v}: {mean}");
        }
        assert_eq!(gof.observed, vec![vec![1000, 0, 0, 0, 0]]);
    }
}
