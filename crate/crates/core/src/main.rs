use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use twoscale::data::{self, fmt_f64, RunManifest};
use twoscale::inference::{self, ChainConfig};
use twoscale::kernel::{self, KernelSeries};
use twoscale::simulate::{self, CoherentErrorConfig, SimConfig, SimMode};
use twoscale::two_scale::{self, PoolDistribution};
use twoscale::{DiffusionRates, Error, GateCount, Result, SeriesConfig};

#[derive(Parser, Debug)]
#[command(
    name = "twoscale",
    version,
    about = "Two-scale Bloch-sphere diffusion model: densities, bands, simulation and fitting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Single-level and pool densities of the readout probability on a grid.
    Pdf(PdfArgs),
    /// Mean and variance of the readout probability versus gate count.
    Moments(MomentsArgs),
    /// Bounds, pool mean and percentile band versus gate count.
    Bounds(BoundsArgs),
    /// Monte Carlo frequencies.
    Simulate(SimulateArgs),
    /// MCMC fit of the three rates.
    Fit(FitArgs),
    /// Posterior summary of a chain file.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
struct RateArgs {
    /// SPAM exposure (rad²).
    #[arg(long, default_value_t = 0.0)]
    dini: f64,
    /// Binomial-level rate (rad²/gate).
    #[arg(long, default_value_t = 0.0)]
    dn: f64,
    /// Pool-level rate (rad²/gate).
    #[arg(long, default_value_t = 0.0)]
    dq: f64,
}

impl RateArgs {
    fn rates(&self) -> Result<DiffusionRates> {
        DiffusionRates::new(self.dini, self.dn, self.dq)
    }
}

#[derive(Args, Debug)]
struct PdfArgs {
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long)]
    gates: u64,
    /// Number of probability grid points on [0, 1].
    #[arg(long, default_value_t = 201)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MomentsArgs {
    #[arg(long, default_value_t = 0.0)]
    dini: f64,
    #[arg(long)]
    dn: f64,
    #[arg(long)]
    gates_max: u64,
    #[arg(long, default_value_t = 1)]
    gate_step: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long)]
    gates_max: u64,
    #[arg(long, default_value_t = 1)]
    gate_step: u64,
    /// Percentile levels of the pool band.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,0.5,0.75,0.95")]
    levels: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Stepwise,
    Distributional,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[command(flatten)]
    rates: RateArgs,
    /// Explicit gate counts; overrides --gates-max/--gate-step.
    #[arg(long, value_delimiter = ',')]
    gates: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    gates_max: u64,
    #[arg(long, default_value_t = 10)]
    gate_step: u64,
    #[arg(long)]
    pools: usize,
    #[arg(long, default_value_t = 8192)]
    shots: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    coherent_fraction: Option<f64>,
    /// Over-rotation per gate about the x axis (rad).
    #[arg(long, allow_hyphen_values = true)]
    over_rotation: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    iters: u64,
    #[arg(long, default_value_t = 100_000)]
    burn_in: u64,
    #[arg(long, default_value_t = 20)]
    thin: u64,
    #[arg(long)]
    seed: u64,
    /// FitReport JSON.
    #[arg(long)]
    out: PathBuf,
    /// Chain CSV; defaults to `<out>.chain.csv`.
    #[arg(long)]
    chain: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    chain: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(ErrorKind::ArgumentConflict, msg)
        .exit()
}

fn gate_range(max: u64, step: u64) -> Vec<GateCount> {
    if step == 0 {
        usage_error("--gate-step must be ≥ 1");
    }
    (0..=max).step_by(step as usize).map(GateCount).collect()
}

fn csv_writer(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(data::create(path)?))
}

fn run_pdf(a: &PdfArgs) -> Result<serde_json::Value> {
    if a.grid < 2 {
        usage_error("--grid must be ≥ 2");
    }
    let rates = a.rates.rates()?;
    let g = GateCount(a.gates);
    let cfg = SeriesConfig::default();
    let single = match KernelSeries::new(two_scale::binomial_exposure(&rates, g), &cfg) {
        Ok(s) => Some(s),
        Err(Error::Degenerate { .. }) => None,
        Err(e) => return Err(e),
    };
    let pool = match PoolDistribution::new(&rates, g, &cfg) {
        Ok(d) => Some(d),
        Err(Error::Degenerate { .. }) => None,
        Err(e) => return Err(e),
    };
    let mut w = csv::Writer::from_writer(csv_writer(&a.out)?);
    w.write_record(["p", "prob_pdf", "pool_pdf"])?;
    for i in 0..a.grid {
        let p = i as f64 / (a.grid - 1) as f64;
        // Point masses have no density; they are written as nan.
        let sp = single.as_ref().map_or(f64::NAN, |s| s.prob_density(p));
        let pp = match &pool {
            Some(d) => d.density(p)?,
            None => f64::NAN,
        };
        w.write_record([fmt_f64(p), fmt_f64(sp), fmt_f64(pp)])?;
    }
    w.flush()?;
    Ok(json!({"rates": rates, "gates": a.gates, "grid": a.grid}))
}

fn run_moments(a: &MomentsArgs) -> Result<serde_json::Value> {
    let rates = DiffusionRates::new(a.dini, a.dn, 0.0)?;
    let mut w = csv::Writer::from_writer(csv_writer(&a.out)?);
    w.write_record(["gates", "exposure", "mean", "second_raw", "variance"])?;
    for g in gate_range(a.gates_max, a.gate_step) {
        let tau = two_scale::binomial_exposure(&rates, g);
        let m = kernel::moments(tau);
        w.write_record([
            g.0.to_string(),
            fmt_f64(tau.value()),
            fmt_f64(m.mean.value()),
            fmt_f64(m.second_raw),
            fmt_f64(m.variance),
        ])?;
    }
    w.flush()?;
    Ok(json!({"rates": rates, "gates_max": a.gates_max, "gate_step": a.gate_step}))
}

fn run_bounds(a: &BoundsArgs) -> Result<serde_json::Value> {
    let rates = a.rates.rates()?;
    let gates = gate_range(a.gates_max, a.gate_step);
    let band = two_scale::band_curve(&rates, &gates, &a.levels, &SeriesConfig::default())?;
    data::write_band(&band, csv_writer(&a.out)?)?;
    Ok(
        json!({"rates": rates, "gates_max": a.gates_max, "gate_step": a.gate_step, "levels": a.levels}),
    )
}

fn run_simulate(a: &SimulateArgs) -> Result<serde_json::Value> {
    let coherent = match (a.coherent_fraction, a.over_rotation) {
        (None, None) => None,
        (Some(f), Some(r)) => Some(CoherentErrorConfig::new(f, r)?),
        _ => usage_error("--coherent-fraction and --over-rotation must be given together"),
    };
    if coherent.is_some() && a.mode == ModeArg::Distributional {
        usage_error("coherent-error flags require --mode stepwise");
    }
    if a.pools == 0 || a.shots == 0 {
        usage_error("--pools and --shots must be ≥ 1");
    }
    let gates: Vec<GateCount> = if a.gates.is_empty() {
        gate_range(a.gates_max, a.gate_step)
    } else {
        a.gates.iter().map(|&g| GateCount(g)).collect()
    };
    let mode = match a.mode {
        ModeArg::Stepwise => SimMode::Stepwise,
        ModeArg::Distributional => SimMode::Distributional,
    };
    let cfg = SimConfig::new(a.rates.rates()?, gates, a.shots, a.pools, a.seed, mode);
    let draws = match (mode, coherent) {
        (SimMode::Distributional, _) => simulate::simulate_distributional(&cfg)?,
        (SimMode::Stepwise, None) => simulate::simulate_stepwise(&cfg)?,
        (SimMode::Stepwise, Some(c)) => simulate::resample_runs(&cfg, &c)?
            .into_iter()
            .flat_map(|r| r.draws)
            .collect(),
    };
    data::write_draws(&draws, csv_writer(&a.out)?)?;
    Ok(json!({"simulation": cfg, "coherent": coherent}))
}

fn chain_path(a: &FitArgs) -> PathBuf {
    a.chain.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".chain.csv");
        s.into()
    })
}

fn run_fit(a: &FitArgs) -> Result<serde_json::Value> {
    if a.thin == 0 {
        usage_error("--thin must be ≥ 1");
    }
    let dataset = data::parse_dataset(&a.data)?;
    let cfg = ChainConfig {
        total_iterations: a.iters,
        burn_in: a.burn_in,
        thin: a.thin,
        seed: a.seed,
        ..ChainConfig::default()
    };
    let fit = inference::fit(&dataset, &cfg)?;
    data::write_json(&fit.report, &a.out)?;
    let mut w = csv_writer(&chain_path(a))?;
    data::write_chain(&fit.chain.samples, &mut w)?;
    w.flush()?;
    Ok(json!({"data": a.data, "chain_config": cfg}))
}

fn run_report(a: &ReportArgs) -> Result<serde_json::Value> {
    let samples = data::read_chain(&a.chain)?;
    let summary = inference::summarize(&samples)?;
    data::write_json(&summary, &a.out)?;
    Ok(json!({"chain": a.chain}))
}

/// Runs one subcommand and writes its manifest next to the primary output.
fn execute(cmd: &Cmd, argv: &[String]) -> Result<()> {
    let (name, config, seed, outputs) = match cmd {
        Cmd::Pdf(a) => ("pdf", run_pdf(a)?, None, vec![a.out.clone()]),
        Cmd::Moments(a) => ("moments", run_moments(a)?, None, vec![a.out.clone()]),
        Cmd::Bounds(a) => ("bounds", run_bounds(a)?, None, vec![a.out.clone()]),
        Cmd::Simulate(a) => (
            "simulate",
            run_simulate(a)?,
            Some(a.seed),
            vec![a.out.clone()],
        ),
        Cmd::Fit(a) => (
            "fit",
            run_fit(a)?,
            Some(a.seed),
            vec![a.out.clone(), chain_path(a)],
        ),
        Cmd::Report(a) => ("report", run_report(a)?, None, vec![a.out.clone()]),
        Cmd::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            let mut full = vec!["twoscale".to_string()];
            full.extend(m.argv.iter().cloned());
            let cli = Cli::try_parse_from(&full)
                .map_err(|e| Error::Invalid(format!("manifest arguments: {e}")))?;
            if matches!(cli.cmd, Cmd::Replay(_)) {
                return Err(Error::Invalid(
                    "a manifest cannot replay another replay".into(),
                ));
            }
            return execute(&cli.cmd, &m.argv);
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        argv: argv.to_vec(),
        config,
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    data::write_json(&manifest, RunManifest::path_for(&outputs[0]))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match execute(&cli.cmd, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(1)
        }
    }
}
