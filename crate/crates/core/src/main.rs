//! Command-line interface for the thermometry spectral analysis pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jntfit::pipeline::{self, PipelineConfig};
use jntfit::report;
use jntfit::simulate::SimConfig;
use jntfit::uncertainty::BandwidthGrid;

#[derive(Parser)]
#[command(name = "jntfit", version)]
#[command(about = "Ratio-spectrum model selection and uncertainty analysis for QVNS-based \
                   Johnson noise thermometry")]
struct Cli {
    /// Worker threads for resampling and scanning (default: all cores).
    /// Results are independent of this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan fitting bandwidths: selection fractions by cross-validation,
    /// mixture uncertainty per bandwidth, final offset uncertainty
    Select(SelectArgs),
    /// Per-run offset stability: WLS trend with bootstrap uncertainties,
    /// consistency and heteroscedasticity tests
    Trend(TrendArgs),
    /// Generate a synthetic dataset in the ingestion file formats
    Simulate(SimulateArgs),
    /// Fit a single order at a single bandwidth and export the fit record
    Fit(FitArgs),
    /// Breusch-Pagan heteroscedasticity test at one bandwidth and order
    BpTest(BpTestArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Spectra file: header plus rows of run_id,frequency_hz,s_r,s_q
    #[arg(long)]
    spectra: PathBuf,

    /// Calibration file: header plus rows of
    /// run_id,a0_calc,acquisition_hours,day_offset[,weight]
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory for reports and plot data
    #[arg(long, env = "JNTFIT_OUT_DIR", default_value = "jntfit-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    out: OutArgs,

    /// First scanned bandwidth (kHz)
    #[arg(long, default_value_t = 200.0)]
    grid_start_khz: f64,

    /// Last scanned bandwidth (kHz)
    #[arg(long, default_value_t = 1400.0)]
    grid_stop_khz: f64,

    /// Grid spacing (kHz)
    #[arg(long, default_value_t = 25.0)]
    grid_step_khz: f64,

    /// Random five-way splits per bandwidth (default 20000, fast 2000)
    #[arg(long)]
    n_splits: Option<usize>,

    /// Candidate polynomial orders
    #[arg(long, value_delimiter = ',', default_values_t = vec![2u32, 4, 6, 8, 10, 12, 14])]
    orders: Vec<u32>,

    /// Master seed; every split draws a deterministic substream
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Bandwidths entering the spread penalty
    #[arg(long, default_value_t = 5)]
    k_lowest: usize,

    /// Reduced resampling counts for quick runs
    #[arg(long)]
    fast: bool,

    /// Pool uncorrected spectra on the validation side of the
    /// cross-validation
    #[arg(long)]
    raw_validation: bool,
}

#[derive(Args)]
struct TrendArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    out: OutArgs,

    /// Fitting bandwidth (kHz)
    #[arg(long)]
    fmax_khz: f64,

    /// Polynomial order of the per-run fits
    #[arg(long)]
    order: u32,

    /// Bootstrap replicates (default 50000, fast 5000)
    #[arg(long)]
    n_boot: Option<usize>,

    /// Splits for the pooled-offset column (default 20000, fast 2000)
    #[arg(long)]
    n_splits: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    fast: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    out: OutArgs,

    /// TOML simulation config; defaults describe a 45-run dataset with an
    /// order-8 truth spectrum
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    out: OutArgs,

    /// Fitting bandwidth (kHz)
    #[arg(long)]
    fmax_khz: f64,

    /// Polynomial order
    #[arg(long)]
    order: u32,

    /// Physics TOML; when given, the fitted offset is converted to a
    /// Boltzmann value
    #[arg(long)]
    physics: Option<PathBuf>,
}

#[derive(Args)]
struct BpTestArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    out: OutArgs,

    /// Fitting bandwidth (kHz)
    #[arg(long)]
    fmax_khz: f64,

    /// Polynomial order
    #[arg(long)]
    order: u32,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> jntfit::Result<()> {
    match cli.command {
        Command::Select(args) => {
            let cfg = PipelineConfig {
                spectra: Some(args.input.spectra),
                calib: Some(args.input.calib),
                grid: BandwidthGrid {
                    start_hz: args.grid_start_khz * 1e3,
                    stop_hz: args.grid_stop_khz * 1e3,
                    step_hz: args.grid_step_khz * 1e3,
                },
                n_splits: args.n_splits,
                candidate_orders: args.orders,
                seed: args.seed,
                out_dir: args.out.out,
                k_lowest: args.k_lowest,
                fast: args.fast,
                threads: cli.threads,
                raw_validation: args.raw_validation,
                ..PipelineConfig::default()
            };
            let scan = pipeline::run_select(&cfg)?;
            print!("{}", report::summary_table(&scan));
            println!("reports written to {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Trend(args) => {
            let cfg = PipelineConfig {
                spectra: Some(args.input.spectra),
                calib: Some(args.input.calib),
                n_splits: args.n_splits,
                n_boot: args.n_boot,
                seed: args.seed,
                out_dir: args.out.out,
                fast: args.fast,
                threads: cli.threads,
                ..PipelineConfig::default()
            };
            let summary = pipeline::run_trend(&cfg, args.fmax_khz * 1e3, args.order)?;
            print!("{}", report::trend_table(std::slice::from_ref(&summary)));
            println!("reports written to {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Simulate(args) => {
            let mut sim = match &args.config {
                Some(path) => SimConfig::from_toml_path(path)?,
                None => SimConfig::default(),
            };
            if let Some(seed) = args.seed {
                sim.seed = seed;
            }
            let (spectra, calib) = pipeline::run_simulate(&sim, &args.out.out)?;
            println!(
                "wrote {} and {} ({} runs, seed {})",
                spectra.display(),
                calib.display(),
                sim.n_runs,
                sim.seed
            );
            Ok(())
        }
        Command::Fit(args) => {
            let cfg = PipelineConfig {
                spectra: Some(args.input.spectra),
                calib: Some(args.input.calib),
                physics: args.physics,
                out_dir: args.out.out,
                threads: cli.threads,
                ..PipelineConfig::default()
            };
            let value = pipeline::run_fit(&cfg, args.fmax_khz * 1e3, args.order)?;
            println!("{value:#}");
            Ok(())
        }
        Command::BpTest(args) => {
            let cfg = PipelineConfig {
                spectra: Some(args.input.spectra),
                calib: Some(args.input.calib),
                out_dir: args.out.out,
                threads: cli.threads,
                ..PipelineConfig::default()
            };
            let p = pipeline::run_bp_test(&cfg, args.fmax_khz * 1e3, args.order)?;
            println!(
                "Breusch-Pagan p-value at {} kHz, order {}: {p:.6}",
                args.fmax_khz, args.order
            );
            Ok(())
        }
    }
}
