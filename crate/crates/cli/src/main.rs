use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mvhedge::bsde::Payoff;
use mvhedge::experiment::{self, ExperimentConfig, ExperimentKind};
use mvhedge::market::write_paths_csv;
use mvhedge::opportunity::{write_surface_csv, OpportunitySurface};

type Config = ExperimentConfig<f64>;

/// Mean-variance hedging under Lévy-driven OU stochastic volatility.
#[derive(Parser, Debug)]
#[command(name = "mvhedge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate factor and price paths and dump them to paths.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Paths to write.
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// V(0) from the BSDE and from the density oracle.
    Price(Common),
    /// Solve the BSDE and write the mean-value summary.
    SolveBsde(Common),
    /// Hedge the claim on fresh paths.
    Hedge(Common),
    /// Horizon sweep of a figure preset.
    Figure {
        /// 1, 2 or 3.
        #[arg(value_parser = ["1", "2", "3"])]
        which: String,
        #[command(flatten)]
        common: Common,
        /// Also write a gnuplot script.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Run the invariant suites; nonzero exit on any failure.
    Validate(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (also MVHEDGE_OUT).
    #[arg(long, env = "MVHEDGE_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Initial endowment v.
    #[arg(long)]
    endowment: Option<f64>,
    /// Constant claim p.
    #[arg(long, conflicts_with_all = ["call", "put"])]
    constant: Option<f64>,
    /// Discounted call on the first asset with this strike.
    #[arg(long, conflicts_with = "put")]
    call: Option<f64>,
    /// Discounted put on the first asset with this strike.
    #[arg(long)]
    put: Option<f64>,
    /// Hedge paths.
    #[arg(long)]
    hedge_paths: Option<usize>,
    /// Drift tilt for importance sampling of the hedge.
    #[arg(long, allow_hyphen_values = true)]
    tilt: Option<f64>,
    /// Horizons in a figure sweep.
    #[arg(long)]
    sweep_points: Option<usize>,
    /// Hedge with V ≡ p for constant claims.
    #[arg(long)]
    closed_form_v: bool,
}

impl Common {
    fn load(&self, base: Config) -> Result<Config> {
        let cfg = self.load_unchecked(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// For `validate`, which reports configuration problems as checks.
    fn load_unchecked(&self, base: Config) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Config::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => base,
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.paths {
            cfg.paths = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.step {
            cfg.step = v;
        }
        if let Some(v) = self.endowment {
            cfg.endowment = v;
        }
        if let Some(value) = self.constant {
            cfg.payoff = Payoff::ConstantP { value };
        }
        if let Some(strike) = self.call {
            cfg.payoff = Payoff::DiscountedCall { strike, asset: 0 };
        }
        if let Some(strike) = self.put {
            cfg.payoff = Payoff::DiscountedPut { strike, asset: 0 };
        }
        if let Some(v) = self.hedge_paths {
            cfg.hedge.paths = v;
        }
        if self.tilt.is_some() {
            cfg.hedge.tilt = self.tilt;
        }
        if let Some(v) = self.sweep_points {
            cfg.sweep_points = v;
        }
        if self.closed_form_v {
            cfg.use_closed_form_v = true;
        }
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> mvhedge::Result<()>) -> Result<()> {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_file(dir, name, |w| Ok(w.write_all(text.as_bytes())?))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, count } => {
            let cfg = common.load(Config {
                kind: ExperimentKind::Simulate,
                ..Config::default()
            })?;
            let paths = experiment::run_simulate(&cfg, count)?;
            write_file(&out_dir(&cfg)?, "paths.csv", |w| write_paths_csv(w, &paths))?;
        }
        Command::Price(common) => {
            let cfg = common.load(Config {
                kind: ExperimentKind::Price,
                ..Config::default()
            })?;
            let (report, _) = experiment::run_price(&cfg)?;
            print!("{}", report.summary());
            let dir = out_dir(&cfg)?;
            write_text(&dir, "price.json", &serde_json::to_string_pretty(&report)?)?;
        }
        Command::SolveBsde(common) => {
            let cfg = common.load(Config {
                kind: ExperimentKind::SolveBsde,
                ..Config::default()
            })?;
            let pipe = experiment::prepare(&cfg)?;
            let (_, sol) = experiment::train(&cfg, &pipe)?;
            println!("V(0) = {} (SE {})", sol.value0.mean, sol.value0.se);
            let dir = out_dir(&cfg)?;
            write_file(&dir, "bsde.csv", |w| sol.write_csv(w))?;
            if let OpportunitySurface::Grid(grid) = &pipe.surface {
                write_file(&dir, "surface.csv", |w| write_surface_csv(w, grid, 10, 4))?;
            }
        }
        Command::Hedge(common) => {
            let cfg = common.load(Config::default())?;
            let report = experiment::run_hedge_experiment(&cfg)?;
            let summary = report.summary();
            print!("{summary}");
            let dir = out_dir(&cfg)?;
            write_text(&dir, "hedge_summary.txt", &summary)?;
            write_file(&dir, "hedge_traces.csv", |w| report.write_traces_csv(w))?;
        }
        Command::Figure { which, common, gnuplot } => {
            let cfg = common.load(Config::preset(&format!("fig{which}"))?)?;
            let table = experiment::run_figure_experiment(&cfg)?;
            let name = format!("figure{which}.csv");
            let dir = out_dir(&cfg)?;
            write_file(&dir, &name, |w| table.write_csv(w))?;
            if gnuplot {
                write_text(&dir, &format!("figure{which}.gp"), &table.gnuplot_script(&name))?;
            }
        }
        Command::Validate(common) => {
            let cfg = common.load_unchecked(Config {
                kind: ExperimentKind::Validate,
                ..Config::default()
            })?;
            let report = experiment::run_validate(&cfg);
            print!("{}", report.summary());
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
