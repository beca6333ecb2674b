use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rankmix_core::driver::{first_choice_counts, SelectKConfig};
use rankmix_core::io::{
    dataset_digest, load_dataset, load_params, load_results, load_schema, save_dataset, save_schema,
    write_document, LoadedDataset, ResultsDocument, RunManifest, Schema,
};
use rankmix_core::model::{generate_dataset, DEFAULT_SHARPNESS};
use rankmix_core::report::{conditional_memberships, report_summaries, Report};
use rankmix_core::rng::stream_rng;
use rankmix_core::{
    bootstrap_ci, fit, goodness_of_fit, select_k, BarrierSchedule, BootstrapConfig, EStepConfig, FitConfig,
    FixedSubgroupSpec, InitStrategy, MStepConfig,
};

/// Mixed-membership Plackett-Luce models for multivariate partial rankings.
#[derive(Parser)]
#[command(name = "rankmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model by variational EM.
    Fit {
        #[command(flatten)]
        input: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Results document to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose K by held-out ELBO on a random half split, then refit on all data.
    SelectK {
        #[command(flatten)]
        input: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Candidate K values, e.g. `2-5` or `2,3,5`.
        #[arg(long, default_value = "2-5")]
        k_range: String,
        /// Random restarts for every (K, Dirichlet parameter) pair.
        #[arg(long, default_value_t = 40)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Selection table to write.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the final full-data fit at the selected K.
        #[arg(long)]
        fit_out: Option<PathBuf>,
    },
    /// Percentile bootstrap intervals around a previous fit.
    Bootstrap {
        #[command(flatten)]
        input: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Results document from `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 200)]
        bootstrap_b: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a synthetic dataset from model parameters.
    Simulate {
        /// Parameter file, or a results document from `fit`.
        #[arg(long)]
        params: PathBuf,
        /// Number of individuals.
        #[arg(long)]
        t: usize,
        /// Rank levels reported per variable, e.g. `3,2`; one value applies to all.
        #[arg(long)]
        n: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Names the variables; otherwise they are called V1, V2, ...
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Dataset CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write a schema matching the dataset.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Simulated first-choice counts for checking a fit against the data.
    Gof {
        #[command(flatten)]
        input: DataArgs,
        /// Results document from `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 1000)]
        simulations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        parallel: bool,
        /// CSV with columns variable, alternative, simulation_index, first_choice_count.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print summary tables for a fit.
    Report {
        /// Results document from `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Renormalize memberships over these subgroups (1-based), e.g. `1,2`.
        #[arg(long)]
        subset: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV: individual_id,variable_id,rank_level,alternative.
    #[arg(long)]
    data: PathBuf,
    /// TOML schema declaring the variables and their alternatives.
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Total number of subgroups, fixed ones included.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Add a fixed subgroup with uniform preferences.
    #[arg(long)]
    fixed_uniform: bool,
    /// Add a fixed subgroup that ranks in presentation order.
    #[arg(long)]
    fixed_presentation: bool,
    /// Geometric decay of the presentation-ordered subgroup's weights.
    #[arg(long, default_value_t = DEFAULT_SHARPNESS)]
    sharpness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-7)]
    outer_tol: f64,
    #[arg(long, default_value_t = 500)]
    max_outer_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    estep_tol: f64,
    /// Barrier base; stage m uses weight b0^-m.
    #[arg(long, default_value_t = 10.0)]
    b0: f64,
    #[arg(long, default_value_t = 4)]
    barrier_stages: usize,
    /// Dirichlet parameter for random starting supports.
    #[arg(long, default_value_t = 1.1)]
    init_a: f64,
    /// Starting value of every alpha component.
    #[arg(long, default_value_t = 0.1)]
    init_alpha: f64,
    /// Restart from the first run's parameters with the variational parameters reset.
    #[arg(long, conflicts_with = "init")]
    two_step: bool,
    /// Start from these parameters (a parameter file or results document) instead of a random draw.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Run independent pieces on all cores; results are identical either way.
    #[arg(long)]
    parallel: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<FitConfig> {
        self.config_for_k(self.k)
    }

    fn config_for_k(&self, k: usize) -> Result<FitConfig> {
        let mut fixed = Vec::new();
        if self.fixed_uniform {
            fixed.push(FixedSubgroupSpec::Uniform);
        }
        if self.fixed_presentation {
            fixed.push(FixedSubgroupSpec::PresentationOrdered { sharpness: self.sharpness });
        }
        let init = if let Some(path) = &self.init {
            let params = load_params(path)?;
            if params.n_subgroups() != k {
                bail!("{} has {} subgroups, expected {k}", path.display(), params.n_subgroups());
            }
            InitStrategy::Provided { params }
        } else if self.two_step {
            InitStrategy::TwoStep { dirichlet_a: self.init_a }
        } else {
            InitStrategy::Random { dirichlet_a: self.init_a }
        };
        let cfg = FitConfig {
            n_subgroups: k,
            fixed_subgroups: fixed,
            outer_tol: self.outer_tol,
            max_outer_iters: self.max_outer_iters,
            estep: EStepConfig { tol: self.estep_tol, ..Default::default() },
            mstep: MStepConfig {
                schedule: BarrierSchedule { b0: self.b0, stages: self.barrier_stages },
                ..Default::default()
            },
            seed: self.seed,
            init,
            init_alpha: self.init_alpha,
            parallel: self.parallel,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(input: &DataArgs) -> Result<(Schema, LoadedDataset)> {
    let schema = load_schema(&input.schema)?;
    let loaded = load_dataset(&input.data, &schema)?;
    if loaded.dropped() > 0 {
        eprintln!("dropped {} individuals with missing variables", loaded.dropped());
    }
    Ok((schema, loaded))
}

/// Writes `doc` and a sidecar manifest that also records the wall-clock time.
fn write_with_manifest(path: &Path, doc: &impl Serialize, manifest: &RunManifest, started: Instant) -> Result<()> {
    write_document(path, doc)?;
    let sidecar =
        RunManifest { wall_clock_seconds: Some(started.elapsed().as_secs_f64()), ..manifest.clone() };
    write_document(&RunManifest::sidecar_path(path), &sidecar)?;
    Ok(())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: usize = lo.trim().parse().with_context(|| format!("bad {what} {part:?}"))?;
            let hi: usize = hi.trim().parse().with_context(|| format!("bad {what} {part:?}"))?;
            if lo > hi {
                bail!("empty {what} range {part:?}");
            }
            out.extend(lo..=hi);
        } else {
            out.push(part.parse().with_context(|| format!("bad {what} {part:?}"))?);
        }
    }
    if out.is_empty() {
        bail!("no {what} given");
    }
    Ok(out)
}

#[derive(Serialize)]
struct SelectKDocument<'a> {
    manifest: &'a RunManifest,
    best_k: usize,
    table: &'a [rankmix_core::driver::SelectKRow],
    best_training_params: &'a rankmix_core::ModelParams,
}

#[derive(Serialize)]
struct BootstrapDocument<'a> {
    manifest: &'a RunManifest,
    replicates: usize,
    summary: &'a rankmix_core::BootstrapSummary,
}

fn run_fit(input: &DataArgs, model: &ModelArgs, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (_, loaded) = load(input)?;
    let cfg = model.config()?;
    let result = fit(&loaded.data, &cfg)?;
    let manifest = RunManifest::new("fit", cfg.seed, &cfg, dataset_digest(&loaded))?;
    let doc = ResultsDocument::new(
        &result,
        report_summaries(&result),
        manifest,
        loaded.variable_ids.clone(),
        loaded.individual_ids.clone(),
    );
    write_with_manifest(out, &doc, &doc.manifest, started)?;
    println!(
        "K={} ELBO={:.6} iterations={} converged={}",
        cfg.n_subgroups,
        result.elbo(),
        result.iters,
        result.converged
    );
    print_frequencies(&doc.report());
    Ok(())
}

fn print_frequencies(report: &Report) {
    println!("subgroup  relative_frequency");
    for (k, f) in report.relative_frequencies.iter().enumerate() {
        println!("{:>8}  {:.4}", k + 1, f);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { input, model, out } => run_fit(&input, &model, &out),
        Command::SelectK { input, model, k_range, restarts, split_seed, out, fit_out } => {
            let started = Instant::now();
            let (_, loaded) = load(&input)?;
            let cfg = model.config()?;
            let sel = SelectKConfig {
                k_values: parse_list(&k_range, "K")?,
                restarts,
                split_seed,
                ..Default::default()
            };
            let result = select_k(&loaded.data, &sel, &cfg)?;
            let mut manifest = RunManifest::new("select-k", cfg.seed, &(&cfg, &sel), dataset_digest(&loaded))?;
            manifest.converged = result.table.iter().all(|row| row.failed < row.restarts);
            let doc = SelectKDocument {
                manifest: &manifest,
                best_k: result.best_k,
                table: &result.table,
                best_training_params: &result.best_params,
            };
            write_with_manifest(&out, &doc, &manifest, started)?;
            println!("K  best_held_out_elbo  failed/restarts");
            for row in &result.table {
                println!("{}  {:.6}  {}/{}", row.k, row.best_held_out, row.failed, row.restarts);
            }
            println!("selected K = {}", result.best_k);
            if let Some(path) = fit_out {
                let final_cfg = FitConfig {
                    n_subgroups: result.best_k,
                    init: InitStrategy::Provided { params: result.best_params.clone() },
                    ..cfg
                };
                let final_fit = fit(&loaded.data, &final_cfg)?;
                let manifest = RunManifest::new("select-k", final_cfg.seed, &final_cfg, dataset_digest(&loaded))?;
                let doc = ResultsDocument::new(
                    &final_fit,
                    report_summaries(&final_fit),
                    manifest,
                    loaded.variable_ids.clone(),
                    loaded.individual_ids.clone(),
                );
                write_with_manifest(&path, &doc, &doc.manifest, started)?;
            }
            Ok(())
        }
        Command::Bootstrap { input, model, fit: fit_path, bootstrap_b, level, out } => {
            let started = Instant::now();
            let (_, loaded) = load(&input)?;
            let previous = load_results(&fit_path)?;
            if previous.individual_ids != loaded.individual_ids {
                bail!("{} was not fitted on {}", fit_path.display(), input.data.display());
            }
            let cfg = model.config_for_k(previous.params.n_subgroups())?;
            let fitted = fit(&loaded.data, &FitConfig {
                init: InitStrategy::Provided { params: previous.params.clone() },
                ..cfg.clone()
            })?;
            let boot = BootstrapConfig { replicates: bootstrap_b, level, seed: cfg.seed };
            let summary = bootstrap_ci(&loaded.data, &fitted, &boot, &cfg)?;
            let mut manifest = RunManifest::new("bootstrap", cfg.seed, &(&cfg, &boot), dataset_digest(&loaded))?;
            manifest.converged = fitted.converged && summary.dropped == 0;
            let doc = BootstrapDocument { manifest: &manifest, replicates: bootstrap_b, summary: &summary };
            write_with_manifest(&out, &doc, &manifest, started)?;
            println!("used {} replicates, dropped {} unconverged", summary.used, summary.dropped);
            println!("subgroup  alpha_low  alpha_high  freq_low  freq_high");
            for (k, (a, f)) in summary.alpha.iter().zip(&summary.relative_frequencies).enumerate() {
                println!("{:>8}  {:.5}  {:.5}  {:.4}  {:.4}", k + 1, a.low, a.high, f.low, f.high);
            }
            Ok(())
        }
        Command::Simulate { params, t, n, seed, schema, out, schema_out } => {
            let params = load_params(&params)?;
            let sizes = params.n_alternatives();
            let mut lengths = parse_list(&n, "rank length")?;
            if lengths.len() == 1 {
                lengths = sizes.iter().map(|&v| lengths[0].min(v)).collect();
            }
            if lengths.len() != sizes.len() {
                bail!("--n gives {} lengths for {} variables", lengths.len(), sizes.len());
            }
            let schema = match schema {
                Some(path) => load_schema(&path)?,
                None => Schema::anonymous(&sizes),
            };
            if schema.n_alternatives() != sizes {
                bail!("schema choice sets {:?} differ from the parameters' {:?}", schema.n_alternatives(), sizes);
            }
            let mut rng = stream_rng(seed, 0);
            let syn = generate_dataset(&params, t, &lengths, &mut rng)?;
            let width = t.to_string().len();
            let ids: Vec<String> = (1..=t).map(|i| format!("r{i:0width$}")).collect();
            save_dataset(&out, &syn.data, &ids, &schema.variable_ids())?;
            if let Some(path) = schema_out {
                save_schema(&path, &schema)?;
            }
            println!("wrote {t} individuals to {}", out.display());
            Ok(())
        }
        Command::Gof { input, fit: fit_path, simulations, seed, parallel, out } => {
            let (_, loaded) = load(&input)?;
            let previous = load_results(&fit_path)?;
            let gof = goodness_of_fit(&previous.params, &loaded.data, simulations, seed, parallel)?;
            let mut writer = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
            writer.write_record(["variable", "alternative", "simulation_index", "first_choice_count"])?;
            let observed = first_choice_counts(&loaded.data);
            for (j, var) in loaded.variable_ids.iter().enumerate() {
                for (v, count) in observed[j].iter().enumerate() {
                    writer.write_record([var.as_str(), &(v + 1).to_string(), "observed", &count.to_string()])?;
                }
                for (s, sim) in gof.simulated.iter().enumerate() {
                    for (v, count) in sim[j].iter().enumerate() {
                        writer.write_record([var.as_str(), &(v + 1).to_string(), &s.to_string(), &count.to_string()])?;
                    }
                }
            }
            writer.flush()?;
            println!(
                "observed first-choice counts inside the central 95% band: {:.1}%",
                100.0 * gof.coverage(0.95)
            );
            Ok(())
        }
        Command::Report { fit: fit_path, subset, threshold, out } => {
            let doc = load_results(&fit_path)?;
            let report = doc.report();
            print_frequencies(&report);
            println!();
            println!("support ratios (theta * V), log10 in parentheses");
            for (j, var) in doc.variables.iter().enumerate() {
                println!("{var}");
                for (k, row) in report.support_ratios[j].iter().enumerate() {
                    let cells: Vec<String> = row
                        .iter()
                        .zip(&report.log10_support_ratios[j][k])
                        .map(|(r, l)| format!("{r:.3} ({l:+.2})"))
                        .collect();
                    println!("  subgroup {}: {}", k + 1, cells.join("  "));
                }
            }
            println!();
            println!("membership correlations");
            for row in &report.membership_correlation {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:+.3}")).collect();
                println!("  {}", cells.join("  "));
            }
            let k = doc.params.n_subgroups();
            let mut modal_counts = vec![0usize; k];
            for &m in &report.modal_subgroup {
                modal_counts[m] += 1;
            }
            let mean_modal = report.modal_membership.iter().sum::<f64>() / report.modal_membership.len() as f64;
            println!();
            println!("individuals per modal subgroup: {modal_counts:?}; mean modal membership {mean_modal:.3}");
            if let Some(subset) = subset {
                let subset: Vec<usize> = parse_list(&subset, "subgroup")?
                    .into_iter()
                    .map(|s| s.checked_sub(1).context("subgroups are numbered from 1"))
                    .collect::<Result<_>>()?;
                let kept = conditional_memberships(&report.memberships, &subset, threshold)?;
                let names: Vec<usize> = subset.iter().map(|s| s + 1).collect();
                println!("{} individuals above {threshold} membership in subgroups {names:?}", kept.len());
            }
            if let Some(path) = out {
                write_document(&path, &report)?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
