//! Experiment configuration, the figure presets and the orchestration used
//! by the command line: path export, pricing both ways, BSDE solution,
//! hedging, horizon sweeps and the validation suite.

use std::io::Write;
use std::path::PathBuf;

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackscholes;
use crate::bsde::{
    collect_snapshots, mc_value_at_zero, solve_backward, BsdeConfig, BsdeSolution, ConstantValue, Payoff,
    Snapshots,
};
use crate::error::{config, Result};
use crate::hedge::{closed_forms, run_hedge, HedgeConfig, HedgeReport};
use crate::levy::{sample_jump_path_with, SubordinatorSpec, DEFAULT_MOMENT_EXPONENT};
use crate::market::{CoefficientModel, ModelKind, PathBundle, PathSimulator, SimulationConfig};
use crate::ngou::{evolve, OuParams, TimeGrid};
use crate::opportunity::{build_surface, density_path, estimate_p_mc, OpportunitySurface, SurfaceMethod};
use crate::rng::{path_rng, Stream};
use crate::scalar::{McEstimate, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Figure1,
    Figure2,
    Figure3,
    Simulate,
    Price,
    SolveBsde,
    #[default]
    Hedge,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Real")]
pub struct ExperimentConfig<T> {
    pub kind: ExperimentKind,
    pub model: CoefficientModel<T>,
    pub ou: OuParams<T>,
    pub subordinators: Vec<SubordinatorSpec<T>>,
    /// `C` in the exponential moment condition `∫(e^{Cz} - 1)ν(dz) < ∞`.
    pub moment_exponent: T,
    pub horizon: T,
    /// Simulation mesh `δ`.
    pub step: T,
    pub s0: Vec<T>,
    /// Training paths for the BSDE, the oracle and the sweeps.
    pub paths: usize,
    pub seed: u64,
    pub payoff: Payoff<T>,
    /// Initial endowment `v`.
    pub endowment: T,
    /// For constant claims, hedge with the exact `V ≡ p` instead of the
    /// regression solution.
    pub use_closed_form_v: bool,
    pub surface: SurfaceMethod<T>,
    pub bsde: BsdeConfig<T>,
    pub hedge: HedgeConfig<T>,
    /// Horizons in a figure sweep, evenly spaced up to `horizon`.
    pub sweep_points: usize,
    pub output_dir: Option<PathBuf>,
}

fn fig3_subordinator<T: Real>() -> SubordinatorSpec<T> {
    SubordinatorSpec {
        measure: crate::levy::LevyMeasure::CompoundPoissonExp {
            event_rate: T::lit(10.0),
            jump_rate: T::lit(8.0),
        },
        time_scale: T::one(),
    }
}

impl<T: Real> Default for ExperimentConfig<T> {
    /// The BNS model of the third figure at desk scale: one year, ten
    /// thousand paths, a constant claim `p = 3·10⁴` from `v = 10⁴`.
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Hedge,
            model: CoefficientModel::bns(T::lit(0.5), T::lit(0.02), T::zero()),
            ou: OuParams {
                lambda: vec![T::one()],
                y0: vec![T::lit(10.0)],
            },
            subordinators: vec![fig3_subordinator()],
            moment_exponent: T::lit(DEFAULT_MOMENT_EXPONENT),
            horizon: T::one(),
            step: T::lit(0.01),
            s0: vec![T::lit(100.0)],
            paths: 10_000,
            seed: 20_240_501,
            payoff: Payoff::ConstantP { value: T::lit(3e4) },
            endowment: T::lit(1e4),
            use_closed_form_v: false,
            surface: SurfaceMethod::default(),
            bsde: BsdeConfig::default(),
            hedge: HedgeConfig::default(),
            sweep_points: 20,
            output_dir: None,
        }
    }
}

impl<T: Real> ExperimentConfig<T> {
    /// `fig1`, `fig2` or `fig3`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "fig1" | "figure1" | "1" => Self {
                kind: ExperimentKind::Figure1,
                model: CoefficientModel::constant_bs(T::lit(2.0), T::lit(100.0), T::zero()),
                horizon: T::lit(4e4),
                step: T::lit(1e3),
                ..base
            },
            "fig2" | "figure2" | "2" => Self {
                kind: ExperimentKind::Figure2,
                model: CoefficientModel::constant_bs(T::lit(2.0), T::lit(10.0), T::zero()),
                horizon: T::lit(400.0),
                step: T::lit(10.0),
                ..base
            },
            "fig3" | "figure3" | "3" => Self {
                kind: ExperimentKind::Figure3,
                horizon: T::lit(200.0),
                step: T::lit(0.01),
                ..base
            },
            other => return Err(config(format!("unknown preset `{other}` (expected fig1, fig2 or fig3)"))),
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    /// Checks shapes and signs, the moment condition and the model.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > T::zero() && self.horizon.is_finite()) {
            return Err(config("horizon must be positive"));
        }
        if !(self.step > T::zero() && self.step <= self.horizon) {
            return Err(config("step must be positive and at most the horizon"));
        }
        if self.paths < 2 {
            return Err(config("at least two paths are required"));
        }
        if self.sweep_points == 0 {
            return Err(config("sweep_points must be positive"));
        }
        if !self.endowment.is_finite() {
            return Err(config("endowment must be finite"));
        }
        OuParams::new(self.ou.lambda.clone(), self.ou.y0.clone())?;
        self.model.validate(self.ou.dimension())?;
        self.specs()?;
        if self.s0.len() != self.model.assets() || self.s0.iter().any(|&s| !(s > T::zero())) {
            return Err(config("s0 needs one positive price per asset"));
        }
        self.payoff.validate(self.model.assets())
    }

    /// Subordinators, each checked against the moment condition.
    pub fn specs(&self) -> Result<Vec<SubordinatorSpec<T>>> {
        if self.subordinators.len() != self.ou.dimension() {
            return Err(config("one subordinator per factor component is required"));
        }
        self.subordinators
            .iter()
            .map(|s| SubordinatorSpec::new(s.measure.clone(), s.time_scale, self.moment_exponent))
            .collect()
    }

    pub fn simulator(&self) -> Result<PathSimulator<T>> {
        self.validate()?;
        PathSimulator::new(
            self.model.clone(),
            self.ou.clone(),
            self.specs()?,
            SimulationConfig {
                horizon: self.horizon,
                step: self.step,
                s0: self.s0.clone(),
                seed: self.seed,
            },
        )
    }

    pub fn opportunity_surface(&self) -> Result<OpportunitySurface<T>> {
        build_surface(&self.model, &self.ou, &self.specs()?, self.horizon, &self.surface)
    }
}


/// One horizon of a figure sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FigureRow<T> {
    pub horizon: T,
    pub p0: T,
    pub var: T,
    pub herr: T,
    pub error: T,
    pub sim_mse: T,
    pub sim_se: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FigureTable<T> {
    pub kind: ExperimentKind,
    pub tilt: T,
    pub rows: Vec<FigureRow<T>>,
}

impl<T: Real> FigureTable<T> {
    /// Writes `T,P0,Var,Herr,Error,sim_mse,sim_se`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "T,P0,Var,Herr,Error,sim_mse,sim_se")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.horizon, r.p0, r.var, r.herr, r.error, r.sim_mse, r.sim_se
            )?;
        }
        Ok(())
    }

    /// A gnuplot script plotting the error columns of `csv_name`.
    pub fn gnuplot_script(&self, csv_name: &str) -> String {
        format!(
            "set datafile separator ','\n\
             set key autotitle columnhead\n\
             set xlabel 'T'\n\
             set logscale y\n\
             plot '{csv_name}' using 1:3 with lines, \\\n     \
             '' using 1:4 with lines, \\\n     \
             '' using 1:5 with lines, \\\n     \
             '' using 1:6:7 with yerrorbars\n"
        )
    }
}

/// `∫₀^{T_j} ρ(Y) ds` at the sweep horizons along one factor path.
fn rho_integrals<T: Real>(
    model: &CoefficientModel<T>,
    ou: &OuParams<T>,
    specs: &[SubordinatorSpec<T>],
    horizons: &[T],
    seed: u64,
    index: u64,
) -> Result<Vec<T>> {
    if let Some(rho) = model.constant_rho() {
        return Ok(horizons.iter().map(|&t| rho * t).collect());
    }
    let horizon = *horizons.last().unwrap();
    let mut rng = path_rng(seed, index, Stream::Jumps);
    let jumps = sample_jump_path_with(specs, horizon, &mut rng)?;
    let step = horizon / T::from_usize(horizons.len()).unwrap();
    let factor = evolve(ou, &jumps, TimeGrid::merged(horizon, step, &jumps)?)?;
    let mesh = &factor.grid.mesh_positions;
    let mut out = Vec::with_capacity(horizons.len());
    let mut acc = T::zero();
    let mut err = None;
    for w in mesh.windows(2) {
        for k in w[0]..w[1] {
            acc += factor.integrate_over_step(k, |y| {
                model.rho(y).unwrap_or_else(|e| {
                    err = Some(e);
                    T::zero()
                })
            });
        }
        out.push(acc);
    }
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Closed-form curves and the simulated squared hedging error over a sweep
/// of horizons, for a constant claim.
///
/// Under continuous rebalancing the optimal gap `G = v + (φ·D) - p` solves
/// `dG = -G(ρ dt + B̄'dW)`, so given the factor path
/// `G(T) = G(0) exp(-X - (3/2)R)` with `R = ∫ρ ds` and `X = ∫B̄'dW ~ N(0, R)`.
/// The simulation samples `X` exactly under the measure where `W` has drift
/// `c B̄` and reweights by the likelihood ratio; `c = -2` (the default) leaves
/// only the factor randomness in the estimator.
pub fn run_figure_experiment<T: Real>(cfg: &ExperimentConfig<T>) -> Result<FigureTable<T>> {
    cfg.validate()?;
    let p = cfg
        .payoff
        .constant_value()
        .ok_or_else(|| config("figure sweeps need a constant payoff"))?;
    let v = cfg.endowment;
    let specs = cfg.specs()?;
    let n = cfg.sweep_points;
    let horizons: Vec<T> = (1..=n)
        .map(|j| cfg.horizon * T::from_usize(j).unwrap() / T::from_usize(n).unwrap())
        .collect();
    let p0s: Vec<T> = match cfg.model.constant_rho() {
        Some(rho) => horizons.iter().map(|&t| (-rho * t).exp()).collect(),
        None => {
            let surface = cfg.opportunity_surface()?;
            horizons
                .iter()
                .map(|&t| surface.p0_for_horizon(t, &cfg.ou.y0))
                .collect::<Result<_>>()?
        }
    };
    let tilt = cfg.hedge.tilt.unwrap_or(T::lit(-2.0));
    let g0 = v - p;
    let (two, three, half) = (T::lit(2.0), T::lit(3.0), T::lit(0.5));
    let samples: Vec<Vec<T>> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<T>> {
            let r = rho_integrals(&cfg.model, &cfg.ou, &specs, &horizons, cfg.seed, i)?;
            let mut rng = path_rng(cfg.seed, i, Stream::Brownian);
            let (mut x, mut prev) = (T::zero(), T::zero());
            Ok(r.iter()
                .map(|&rj| {
                    x += T::standard_normal(&mut rng) * (rj - prev).max(T::zero()).sqrt();
                    prev = rj;
                    g0 * g0 * (-(two + tilt) * x - (two * tilt + three + half * tilt * tilt) * rj).exp()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n);
    for (j, (&t, &p0)) in horizons.iter().zip(&p0s).enumerate() {
        let column: Vec<T> = samples.iter().map(|s| s[j]).collect();
        let est = McEstimate::from_samples(&column);
        let c = closed_forms(p, v, p0)?;
        rows.push(FigureRow {
            horizon: t,
            p0,
            var: c.var,
            herr: c.herr,
            error: c.error,
            sim_mse: est.mean,
            sim_se: est.se,
        });
    }
    Ok(FigureTable {
        kind: cfg.kind,
        tilt,
        rows,
    })
}

/// Simulated paths `0..count`.
pub fn run_simulate<T: Real>(cfg: &ExperimentConfig<T>, count: usize) -> Result<Vec<PathBundle<T>>> {
    cfg.simulator()?.simulate_batch(0, count)
}

/// Everything the pricing, BSDE and hedging commands share.
pub struct Pipeline<T> {
    pub sim: PathSimulator<T>,
    pub surface: OpportunitySurface<T>,
    pub p0: T,
}

pub fn prepare<T: Real>(cfg: &ExperimentConfig<T>) -> Result<Pipeline<T>> {
    let sim = cfg.simulator()?;
    let surface = cfg.opportunity_surface()?;
    let p0 = surface.p(T::zero(), &cfg.ou.y0)?;
    info!("P(0, y0) = {p0}");
    Ok(Pipeline { sim, surface, p0 })
}

/// Simulates the training paths (with `Ẑ(T)`) and solves the BSDE.
pub fn train<T: Real>(
    cfg: &ExperimentConfig<T>,
    pipe: &Pipeline<T>,
) -> Result<(Snapshots<T>, BsdeSolution<T>)> {
    let snap = collect_snapshots(&pipe.sim, &cfg.payoff, Some(&pipe.surface), 0, cfg.paths, cfg.bsde.stride)?;
    let sol = solve_backward(&snap, &pipe.surface, &cfg.model, &pipe.sim.specs, &cfg.bsde)?;
    Ok((snap, sol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PriceReport<T> {
    pub p0: T,
    pub bsde: McEstimate<T>,
    pub oracle: McEstimate<T>,
    pub density_mean: McEstimate<T>,
    /// Black-Scholes value for vanilla claims on the constant model.
    pub black_scholes: Option<T>,
}

impl<T: Real> PriceReport<T> {
    /// `|V_BSDE - V_oracle| <= k (SE_BSDE + SE_oracle)`.
    pub fn agrees(&self, k: T) -> bool {
        (self.bsde.mean - self.oracle.mean).abs() <= k * (self.bsde.se + self.oracle.se)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "P(0, y0)      {}\nV(0) BSDE     {} (SE {})\nV(0) oracle   {} (SE {})\nE[Z(T)]       {} (SE {})\n",
            self.p0,
            self.bsde.mean,
            self.bsde.se,
            self.oracle.mean,
            self.oracle.se,
            self.density_mean.mean,
            self.density_mean.se
        );
        if let Some(bs) = self.black_scholes {
            s.push_str(&format!("Black-Scholes {bs}\n"));
        }
        s.push_str(&format!(
            "agreement     {}\n",
            if self.agrees(T::lit(4.0)) { "within 4 combined SE" } else { "OUTSIDE 4 combined SE" }
        ));
        s
    }
}

/// Black-Scholes value of a discounted vanilla claim on the constant model.
pub fn black_scholes_reference<T: Real>(cfg: &ExperimentConfig<T>) -> Option<T> {
    let ModelKind::ConstantBs { beta, .. } = cfg.model.kind else {
        return None;
    };
    let (r, t) = (cfg.model.rate, cfg.horizon);
    match cfg.payoff {
        Payoff::DiscountedCall { strike, asset } => {
            Some(blackscholes::call_price(cfg.s0[asset], strike, r, beta, t))
        }
        Payoff::DiscountedPut { strike, asset } => Some(blackscholes::put_price(cfg.s0[asset], strike, r, beta, t)),
        Payoff::ConstantP { .. } => None,
    }
}

pub fn run_price<T: Real>(cfg: &ExperimentConfig<T>) -> Result<(PriceReport<T>, BsdeSolution<T>)> {
    let pipe = prepare(cfg)?;
    let (snap, sol) = train(cfg, &pipe)?;
    let density = snap.density.as_ref().expect("snapshots carry densities");
    let report = PriceReport {
        p0: pipe.p0,
        bsde: sol.value0,
        oracle: mc_value_at_zero(&snap.payoff, density)?,
        density_mean: McEstimate::from_samples(density),
        black_scholes: black_scholes_reference(cfg),
    };
    Ok((report, sol))
}

/// Hedges the configured claim on fresh paths.
pub fn run_hedge_experiment<T: Real>(cfg: &ExperimentConfig<T>) -> Result<HedgeReport<T>> {
    let pipe = prepare(cfg)?;
    let p0 = Some(pipe.p0);
    match (cfg.use_closed_form_v, cfg.payoff.constant_value()) {
        (true, Some(p)) => run_hedge(&pipe.sim, &ConstantValue(p), &cfg.payoff, cfg.endowment, p0, &cfg.hedge),
        _ => {
            let (_, sol) = train(cfg, &pipe)?;
            drop(pipe.surface);
            run_hedge(&pipe.sim, &sol, &cfg.payoff, cfg.endowment, p0, &cfg.hedge)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!("{} {:<28} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }
}

/// Mesh size the Monte-Carlo bands are calibrated for.
pub const VALIDATION_REFERENCE_STEP: f64 = 0.01;

/// Runs the invariant suites at desk scale. Statistical bands are widened by
/// `max(1, √(δ/0.01))` so coarser meshes are judged by their own budget.
pub fn run_validate<T: Real>(cfg: &ExperimentConfig<T>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let widen = (cfg.step / T::lit(VALIDATION_REFERENCE_STEP)).sqrt().max(T::one());
    let four = T::lit(4.0) * widen;
    let paths = cfg.paths.min(4000);

    report.record("moment condition", cfg.specs().map(|_| (true, format!("C = {}", cfg.moment_exponent))));
    report.record("configuration", cfg.validate().map(|_| (true, String::new())));

    report.record("closed-form identities", {
        let mut rng = path_rng(cfg.seed, 0, Stream::Auxiliary);
        let mut worst = 0.0f64;
        let mut ok = true;
        for _ in 0..100 {
            let p0 = rng.random_range(1e-6..1.0 - 1e-6);
            let p = rng.random_range(-1e5..1e5);
            let v = rng.random_range(-1e5..1e5);
            match closed_forms::<f64>(p, v, p0) {
                Ok(c) => {
                    let scale = c.var.abs().max(f64::MIN_POSITIVE);
                    let e1 = (c.var - c.herr - c.error).abs() / scale;
                    let e2 = (c.error - p0 * p0 / (1.0 - p0) * (p - v) * (p - v)).abs() / c.error.max(f64::MIN_POSITIVE);
                    worst = worst.max(e1).max(e2);
                    ok &= e1 <= 1e-12 && e2 <= 1e-12 && (p == v || c.error > 0.0);
                }
                Err(_) => ok = false,
            }
        }
        Ok((ok, format!("worst relative defect {worst:e}")))
    });

    report.record("figure endpoints agree", (|| {
        let e = |name: &str| -> Result<T> {
            let c: ExperimentConfig<T> = ExperimentConfig::preset(name)?;
            let rho = c.model.constant_rho().unwrap();
            Ok(closed_forms(T::lit(3e4), T::lit(1e4), (-rho * c.horizon).exp())?.error)
        };
        let (a, b) = (e("fig1")?, e("fig2")?);
        Ok(((a - b).abs() <= T::lit(1e-12) * a, format!("Error(fig1) = {a}, Error(fig2) = {b}")))
    })());

    let specs = match cfg.specs() {
        Ok(s) => s,
        Err(_) => return report,
    };

    report.record("OU integral identity", (|| {
        let mut worst = T::zero();
        for i in 0..paths.min(1000) as u64 {
            let mut rng = path_rng(cfg.seed, i, Stream::Jumps);
            let jumps = sample_jump_path_with(&specs, cfg.horizon, &mut rng)?;
            let factor = evolve(&cfg.ou, &jumps, TimeGrid::merged(cfg.horizon, cfg.step, &jumps)?)?;
            let integral = factor.integrated_factor(T::zero(), cfg.horizon)?;
            let last = factor.y(factor.len() - 1);
            for c in 0..cfg.ou.dimension() {
                let rhs = cfg.ou.y0[c] + jumps.total(c) - last[c];
                let lhs = cfg.ou.lambda[c] * integral[c];
                worst = worst.max((lhs - rhs).abs() / rhs.abs().max(T::one()));
            }
        }
        Ok((worst <= T::lit(1e-12), format!("worst relative defect {}", worst.as_f64())))
    })());

    let pipe = match prepare(cfg) {
        Ok(p) => p,
        Err(e) => {
            report.record("opportunity surface", Err(e));
            return report;
        }
    };

    report.record("density martingale", (|| {
        let zs: Vec<T> = (0..paths as u64)
            .into_par_iter()
            .map(|i| Ok(density_path(&pipe.surface, &cfg.model, &pipe.sim.simulate(i)?)?.terminal()))
            .collect::<Result<_>>()?;
        let est = McEstimate::from_samples(&zs);
        Ok((
            est.agrees_with(T::one(), four, T::zero()),
            format!("E[Z(T)] = {} (SE {}, {} paths)", est.mean, est.se, paths),
        ))
    })());

    if cfg.model.constant_rho().is_none() && cfg.ou.dimension() == 1 {
        report.record("surface cross-check", (|| {
            let y0 = cfg.ou.y0[0];
            let mut worst = T::zero();
            let mut ok = true;
            for (j, &(tf, yf)) in [(0.0, 1.0), (0.5, 0.5), (0.5, 2.0)].iter().enumerate() {
                let (t, y) = (cfg.horizon * T::lit(tf), y0 * T::lit(yf));
                let grid = pipe.surface.p(t, &[y])?;
                let mc = estimate_p_mc(&cfg.model, &cfg.ou, &specs, cfg.horizon, t, &[y], 4000, cfg.seed ^ j as u64)?;
                let gap = (grid - mc.mean).abs();
                ok &= gap <= four * mc.se + T::lit(1e-4) * widen;
                worst = worst.max(gap);
            }
            Ok((ok, format!("largest |P_grid - P_mc| = {}", worst.as_f64())))
        })());
    }

    let small = ExperimentConfig {
        paths: paths.min(2000),
        ..cfg.clone()
    };
    report.record("BSDE oracle agreement", (|| {
        let (snap, sol) = train(&small, &pipe)?;
        let oracle = mc_value_at_zero(&snap.payoff, snap.density.as_ref().unwrap())?;
        let gap = (sol.value0.mean - oracle.mean).abs();
        let band = four * (sol.value0.se + oracle.se);
        let residual_ok = sol
            .fits
            .iter()
            .all(|f| f.residual_mean.abs() <= four * f.residual_se + T::lit(1e-9) * (T::one() + f.mean_value.abs()));
        Ok((
            gap <= band && residual_ok,
            format!(
                "V(0) {} vs oracle {} (band {}); martingale residuals {}",
                sol.value0.mean,
                oracle.mean,
                band,
                if residual_ok { "ok" } else { "outside 4 SE" }
            ),
        ))
    })());

    report.record("self-financing bookkeeping", (|| {
        let hedge = HedgeConfig {
            paths: 200,
            trace_paths: 0,
            ..cfg.hedge.clone()
        };
        let value = ConstantValue(cfg.payoff.constant_value().unwrap_or(cfg.endowment));
        let r = run_hedge(&pipe.sim, &value, &cfg.payoff, cfg.endowment, Some(pipe.p0), &hedge)?;
        Ok((
            r.self_financing_residual <= T::lit(1e-10),
            format!("max residual {:e}", r.self_financing_residual.as_f64()),
        ))
    })());

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["fig1", "fig2", "fig3"] {
            let c = ExperimentConfig::<f64>::preset(name).unwrap();
            c.validate().unwrap();
        }
        assert!(ExperimentConfig::<f64>::preset("fig4").is_err());
    }

    #[test]
    fn json_round_trip_and_overrides() {
        let c = crate::ExperimentConfig64::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(crate::ExperimentConfig64::from_json(&text).unwrap(), c);
        let c = crate::ExperimentConfig64::from_json(r#"{"horizon": 2.5, "payoff": {"type": "discounted_call", "strike": 90, "asset": 0}}"#).unwrap();
        assert_eq!(c.horizon, 2.5);
        assert!(crate::ExperimentConfig64::from_json(r#"{"horizn": 2.5}"#).is_err());
    }

    #[test]
    fn broken_moment_condition_rejected() {
        let c = crate::ExperimentConfig64 {
            moment_exponent: 8.0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(crate::Error::MomentCondition { .. })));
    }

    #[test]
    fn fig1_endpoint_and_monotone_error() {
        let c = crate::ExperimentConfig64 {
            paths: 16,
            ..ExperimentConfig::preset("fig1").unwrap()
        };
        let t = run_figure_experiment(&c).unwrap();
        let last = t.rows.last().unwrap();
        assert!((last.p0 - (-16f64).exp()).abs() < 1e-20);
        assert!((last.error - 5.065_666_789_703_367e-6).abs() < 1e-15);
        assert!(t.rows.windows(2).all(|w| w[1].error < w[0].error));
        // exact tilt: the simulated error equals Herr with zero spread
        assert!((last.sim_mse - last.herr).abs() < 1e-9 * last.herr);
        assert_eq!(last.sim_se, 0.0);
    }

    #[test]
    fn equal_endowment_gives_zero_columns() {
        let c = crate::ExperimentConfig64 {
            paths: 8,
            endowment: 3e4,
            ..ExperimentConfig::preset("fig2").unwrap()
        };
        let t = run_figure_experiment(&c).unwrap();
        assert!(t.rows.iter().all(|r| r.var == 0.0 && r.herr == 0.0 && r.error == 0.0 && r.sim_mse == 0.0));
    }

    #[test]
    fn validate_reports_moment_failure() {
        let c = crate::ExperimentConfig64 {
            moment_exponent: 8.5,
            ..Default::default()
        };
        let r = run_validate(&c);
        assert!(!r.all_passed());
        let m = r.checks.iter().find(|c| c.name == "moment condition").unwrap();
        assert!(!m.passed && m.detail.contains("8.5"));
    }
}
