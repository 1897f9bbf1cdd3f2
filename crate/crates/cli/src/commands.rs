use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use basis_core::calibration::{select_beta, CalibrationResult};
use basis_core::diagnostics::{
    compare_initial_vs_refined, current_policy, default_estimators, difficulty_sweep, draw_batch, heterogeneity_sweep,
    mse_sweep, DiagnosticsConfig, OracleMode,
};
use basis_core::env::{make_population, PromptPopulation, ValueDistribution};
use basis_core::estimators::{EstimatorSpec, Family, RewardBatch, Variant, DEFAULT_EPSILON};
use basis_core::offline_values::{build_table, BetaGrid, ValueTable};
use basis_core::rng;
use basis_core::trainer::{train, TrainConfig};
use serde::Serialize;

use crate::config::ConfigFile;
use crate::manifest::RunManifest;
use crate::{CalibrateArgs, Cli, Command, DiagnoseArgs, GenPopArgs, GenValuesArgs, Protocol, TrainArgs, UsageError};

pub const DEFAULT_DIST: &str = "uniform:0.05,0.95";
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_TABLE_ROLLOUTS: usize = 64;

/// Everything a subcommand needs besides its own flags.
struct Ctx<'a> {
    out_dir: &'a Path,
    config: ConfigFile,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        Ok(self.config.pick_or(flag, "seed", rng::DEFAULT_SEED)?)
    }

    fn finish(&self, seed: u64, artifacts: Vec<String>) -> Result<()> {
        let manifest = RunManifest {
            command_line: std::env::args().collect(),
            config_path: self.config.path.as_ref().map(|p| p.display().to_string()),
            config_contents: self.config.contents.clone(),
            seed,
            artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        manifest.write(self.out_dir).context("writing manifest")
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.into())
            .build_global()
            .context("starting worker pool")?;
    }
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    std::fs::create_dir_all(&cli.output_dir)
        .with_context(|| format!("creating output directory {}", cli.output_dir.display()))?;
    let ctx = Ctx { out_dir: &cli.output_dir, config };
    match &cli.command {
        Command::GenPop(a) => gen_pop(&ctx, a),
        Command::GenValues(a) => gen_values(&ctx, a),
        Command::Diagnose(a) => diagnose(&ctx, a),
        Command::CalibrateSweep(a) => calibrate_sweep(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_pop(path: &Path) -> Result<PromptPopulation> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading population {}", path.display()))?;
    PromptPopulation::from_json(&text).with_context(|| format!("parsing population {}", path.display()))
}

fn load_table(path: &Path) -> Result<ValueTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading value table {}", path.display()))?;
    ValueTable::from_json(&text).with_context(|| format!("parsing value table {}", path.display()))
}

fn load_pair(pop: &Path, table: &Path) -> Result<(PromptPopulation, ValueTable)> {
    let pop = load_pop(pop)?;
    let table = load_table(table)?;
    if !table.covers(&pop) {
        bail!("value table does not cover every prompt of the population");
    }
    Ok((pop, table))
}

/// Comma-separated list, e.g. `1,2,4,8`.
fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| UsageError(format!("invalid {what} '{}': {e}", s.trim()))))
        .collect()
}

fn gen_pop(ctx: &Ctx, a: &GenPopArgs) -> Result<()> {
    let c = &ctx.config;
    let count: u32 = c.require(a.count, "count")?;
    let dist = match c.pick(a.dist, "dist")? {
        Some(d) => d,
        None => DEFAULT_DIST.parse::<ValueDistribution>()?,
    };
    let k = c.pick_or(a.k, "k", DEFAULT_K)?;
    let seed = ctx.seed(a.seed)?;
    let out = c.pick_or(a.out.clone(), "out", "population.pop.json".to_string())?;
    let pop = make_population(count as usize, dist, k, seed)?;
    write_text(&ctx.path(&out), &pop.to_json())?;
    ctx.finish(seed, vec![out])
}

fn gen_values(ctx: &Ctx, a: &GenValuesArgs) -> Result<()> {
    let c = &ctx.config;
    let pop_path: PathBuf = c.require(a.pop.clone(), "pop")?;
    let n: u32 = c.pick_or(a.n, "n", DEFAULT_TABLE_ROLLOUTS as u32)?;
    if n == 0 {
        return Err(UsageError("--n must be at least 1".into()).into());
    }
    let grid = match c.pick(a.grid.clone(), "grid")? {
        Some(raw) => BetaGrid::new(parse_list(&raw, "grid value")?).map_err(|e| UsageError(e.to_string()))?,
        None => BetaGrid::default_grid(),
    };
    let seed = ctx.seed(a.seed)?;
    let out = c.pick_or(a.out.clone(), "out", "values.vtab.json".to_string())?;
    let pop = load_pop(&pop_path)?;
    let table = build_table(&pop, n as usize, grid, seed)?;
    write_text(&ctx.path(&out), &table.to_json())?;
    ctx.finish(seed, vec![out])
}

fn diagnose(ctx: &Ctx, a: &DiagnoseArgs) -> Result<()> {
    let c = &ctx.config;
    let protocol: Protocol = c.require(a.protocol, "protocol")?;
    let pop_path: PathBuf = c.require(a.pop.clone(), "pop")?;
    let table_path: PathBuf = c.require(a.table.clone(), "table")?;
    let defaults = DiagnosticsConfig::default();
    let seed = ctx.seed(a.seed)?;

    let batch_size: u32 = c.pick_or(a.batch_size, "B", defaults.batch_size as u32)?;
    let repeats: u32 = c.pick_or(a.repeats, "repeats", defaults.repeats as u32)?;
    let batches: u32 = c.pick_or(a.batches, "batches", defaults.heterogeneity_batches as u32)?;
    let bins: u32 = c.pick_or(a.bins, "bins", defaults.heterogeneity_bins as u32)?;
    if batch_size < 2 {
        return Err(UsageError("--B must be at least 2".into()).into());
    }
    if repeats == 0 || batches == 0 || bins == 0 {
        return Err(UsageError("--repeats, --batches and --bins must be at least 1".into()).into());
    }
    let group_sizes = match c.pick(a.group_sizes.clone(), "group-sizes")? {
        Some(raw) => parse_list::<usize>(&raw, "group size")?,
        None => defaults.group_sizes.clone(),
    };
    if group_sizes.is_empty() || group_sizes.contains(&0) {
        return Err(UsageError("group sizes must be positive".into()).into());
    }
    let drift_beta: Option<f64> = c.pick(a.drift_beta, "drift-beta")?;
    if drift_beta.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
        return Err(UsageError("--drift-beta must be positive".into()).into());
    }
    let oracle = match c.pick(a.oracle_rollouts, "oracle-rollouts")? {
        Some(0) => return Err(UsageError("--oracle-rollouts must be at least 1".into()).into()),
        Some(r) => OracleMode::MonteCarlo { rollouts: r as usize },
        None => OracleMode::Exact,
    };
    let variant = c.pick_or(a.variant, "variant", Variant::Unb)?;
    let config = DiagnosticsConfig {
        batch_size: batch_size as usize,
        repeats: repeats as usize,
        heterogeneity_batches: batches as usize,
        heterogeneity_bins: bins as usize,
        estimators: default_estimators(&group_sizes),
        group_sizes,
        seed,
        drift_beta,
        oracle,
        ..defaults
    };

    let (pop, table) = load_pair(&pop_path, &table_path)?;
    let name = protocol.name();
    let (csv_name, json_name) = (format!("{name}.csv"), format!("{name}.json"));
    let json = if protocol == Protocol::BetaCurve {
        let curve = compare_initial_vs_refined(&pop, &table, table.grid.values(), variant, &config)?;
        curve.write_csv(create(&ctx.path(&csv_name))?)?;
        curve.to_json()
    } else {
        let report = match protocol {
            Protocol::GroupSweep => mse_sweep(&pop, &table, &config)?,
            Protocol::Heterogeneity => heterogeneity_sweep(&pop, &table, &config)?,
            Protocol::Difficulty => difficulty_sweep(&pop, &table, &config)?,
            Protocol::BetaCurve => unreachable!(),
        };
        report.write_csv(create(&ctx.path(&csv_name))?)?;
        report.to_json()
    };
    write_text(&ctx.path(&json_name), &json)?;
    ctx.finish(seed, vec![csv_name, json_name])
}

#[derive(Debug, Serialize)]
struct CalibrationSweep {
    seed: u64,
    batch_size: usize,
    variant: Variant,
    epsilon: f64,
    drift_beta: Option<f64>,
    /// Most frequently selected tilt, ties to the smaller tilt.
    modal_beta: Option<f64>,
    uncalibrated_trials: usize,
    trials: Vec<CalibrationResult>,
}

fn calibrate_sweep(ctx: &Ctx, a: &CalibrateArgs) -> Result<()> {
    let c = &ctx.config;
    let pop_path: PathBuf = c.require(a.pop.clone(), "pop")?;
    let table_path: PathBuf = c.require(a.table.clone(), "table")?;
    let batch_size: u32 = c.pick_or(a.batch_size, "B", 64)?;
    let trials: u32 = c.pick_or(a.trials, "trials", 50)?;
    if batch_size < 2 || trials == 0 {
        return Err(UsageError("--B must be at least 2 and --trials at least 1".into()).into());
    }
    let drift_beta: Option<f64> = c.pick(a.drift_beta, "drift-beta")?;
    if drift_beta.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
        return Err(UsageError("--drift-beta must be positive".into()).into());
    }
    let variant = c.pick_or(a.variant, "variant", Variant::Unb)?;
    let epsilon = c.pick_or(a.epsilon, "epsilon", DEFAULT_EPSILON)?;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(UsageError("--epsilon must lie in (0, 0.5)".into()).into());
    }
    let seed = ctx.seed(a.seed)?;
    let (pop, table) = load_pair(&pop_path, &table_path)?;

    let config = DiagnosticsConfig { batch_size: batch_size as usize, seed, drift_beta, ..Default::default() };
    let current = current_policy(&pop, &config);
    let results = (0..trials as usize)
        .map(|t| {
            let draw = draw_batch(&current, &config, rng::tag::CALIBRATE, t, 1);
            let rewards = draw.rewards.iter().map(|r| r[0]).collect();
            let batch = RewardBatch::single(draw.prompt_ids, rewards)?;
            Ok(select_beta(&batch, &table, variant, epsilon)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let csv_name = "calibrate-sweep.csv".to_string();
    let mut w = csv::Writer::from_writer(create(&ctx.path(&csv_name))?);
    w.write_record(["trial", "beta", "beta_index", "objective", "active_count", "scored_prompts"])?;
    let opt = |x: Option<String>| x.unwrap_or_default();
    for (t, r) in results.iter().enumerate() {
        w.write_record([
            t.to_string(),
            opt(r.beta.map(|b| b.to_string())),
            opt(r.beta_index.map(|i| i.to_string())),
            opt(r.min_objective().map(|o| o.to_string())),
            opt(r.beta_index.map(|i| r.active_counts[i].to_string())),
            r.scored_prompts.to_string(),
        ])?;
    }
    w.flush()?;

    let mut counts = vec![0usize; table.grid.len()];
    results.iter().filter_map(|r| r.beta_index).for_each(|i| counts[i] += 1);
    let modal = counts.iter().enumerate().filter(|(_, &n)| n > 0).max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(&x.0)));
    let sweep = CalibrationSweep {
        seed,
        batch_size: batch_size as usize,
        variant,
        epsilon,
        drift_beta,
        modal_beta: modal.map(|(i, _)| table.grid.values()[i]),
        uncalibrated_trials: results.iter().filter(|r| !r.is_calibrated()).count(),
        trials: results,
    };
    let json_name = "calibrate-sweep.json".to_string();
    write_text(&ctx.path(&json_name), &serde_json::to_string_pretty(&sweep)?)?;
    ctx.finish(seed, vec![csv_name, json_name])
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let c = &ctx.config;
    let pop_path: PathBuf = c.require(a.pop.clone(), "pop")?;
    let family: Family = c.pick_or(a.family, "family", Family::Zero)?;
    let variant: Option<Variant> = c.pick(a.variant, "variant")?;
    let default_g = if family == Family::Rloo { 2 } else { 1 };
    let group_size = c.pick_or(a.group_size, "group-size", default_g)?;
    let epsilon = c.pick_or(a.epsilon, "epsilon", DEFAULT_EPSILON)?;
    let estimator = EstimatorSpec::new(family, variant, group_size, epsilon).map_err(|e| UsageError(e.to_string()))?;
    let table_path: Option<PathBuf> = c.pick(a.table.clone(), "table")?;
    if family == Family::Basis && table_path.is_none() {
        return Err(UsageError("the basis family needs a value table (--table)".into()).into());
    }
    let defaults = TrainConfig::default();
    let steps: u32 = c.pick_or(a.steps, "steps", defaults.steps as u32)?;
    let batch_size: u32 = c.pick_or(a.batch_size, "B", defaults.batch_size as u32)?;
    let learning_rate = c.pick_or(a.lr, "lr", defaults.learning_rate)?;
    let eval_every: u32 = c.pick_or(a.eval_every, "eval-every", defaults.eval_every as u32)?;
    let seed = ctx.seed(a.seed)?;
    let config = TrainConfig {
        steps: steps as usize,
        batch_size: batch_size as usize,
        learning_rate,
        estimator,
        eval_every: eval_every as usize,
        seed,
    };
    config.validate().map_err(|e| UsageError(e.to_string()))?;

    let pop = load_pop(&pop_path)?;
    let table = match &table_path {
        Some(path) => {
            let table = load_table(path)?;
            if !table.covers(&pop) {
                bail!("value table does not cover every prompt of the population");
            }
            Some(table)
        }
        None => None,
    };
    let trace = train(&pop, table.as_ref(), &config)?;
    let csv_name = "trace.csv".to_string();
    trace.write_csv(create(&ctx.path(&csv_name))?)?;
    let pop_name = "final.pop.json".to_string();
    write_text(&ctx.path(&pop_name), &trace.final_population.to_json())?;
    ctx.finish(seed, vec![csv_name, pop_name])
}
