//! The eight acceptance criteria, run in sequence so that at most one large
//! snapshot set is alive at a time. Each prints one PASS/FAIL line straight to
//! stdout, so the lines show up without `--nocapture`.

use std::io::Write;
use std::time::Instant;

use mvhedge::blackscholes;
use mvhedge::bsde::{collect_snapshots, mc_value_at_zero, solve_backward, BsdeConfig, Payoff};
use mvhedge::experiment::{run_figure_experiment, ExperimentConfig};
use mvhedge::hedge::{closed_forms, run_hedge, HedgeConfig};
use mvhedge::levy::{sample_jump_path_with, SubordinatorSpec};
use mvhedge::market::{CoefficientModel, PathSimulator, SimulationConfig};
use mvhedge::ngou::{evolve, OuParams, TimeGrid};
use mvhedge::opportunity::{build_surface, density_path, estimate_p_mc, SurfaceMethod};
use mvhedge::rng::{path_rng, Stream};
use mvhedge::McEstimate;
use rand::Rng;
use rayon::prelude::*;

type Outcome = (bool, String);

fn ou() -> OuParams<f64> {
    OuParams::new(vec![1.0], vec![10.0]).unwrap()
}

fn specs() -> Vec<SubordinatorSpec<f64>> {
    vec![SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 4.0).unwrap()]
}

fn bns() -> CoefficientModel<f64> {
    CoefficientModel::bns(0.5, 0.02, 0.0)
}

/// Complete-market desk parameters: 8% drift, 20% vol, 3% rate.
fn desk_bs() -> CoefficientModel<f64> {
    CoefficientModel::constant_bs(0.08, 0.2, 0.03)
}

fn simulator(model: CoefficientModel<f64>, horizon: f64, step: f64, seed: u64) -> PathSimulator<f64> {
    PathSimulator::new(
        model,
        ou(),
        specs(),
        SimulationConfig {
            horizon,
            step,
            s0: vec![100.0],
            seed,
        },
    )
    .unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = path_rng(7, 0, Stream::Auxiliary);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p0 = rng.random_range(1e-6..1.0 - 1e-6);
        let p = rng.random_range(-1e5..1e5);
        let v = rng.random_range(-1e5..1e5);
        let c = closed_forms::<f64>(p, v, p0).unwrap();
        // the identity in exact rationals: Error = P0²/(1-P0)(p-v)²
        let e = p0 * p0 / (1.0 - p0) * (p - v) * (p - v);
        worst = worst
            .max((c.var - c.herr - c.error).abs() / c.var.abs())
            .max((c.error - e).abs() / e);
    }
    (worst <= 1e-12, format!("worst relative defect {worst:.2e} over 100 triples"))
}

fn criterion_2() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["fig1", "fig2"] {
        let cfg = ExperimentConfig {
            paths: 16,
            sweep_points: 40,
            ..ExperimentConfig::<f64>::preset(name).unwrap()
        };
        let t = run_figure_experiment(&cfg).unwrap();
        let last = t.rows.last().unwrap();
        let decreasing = t.rows.windows(2).all(|w| w[1].error < w[0].error);
        // oracle: P0 = e^{-16}, (p - v)² = 4·10⁸, evaluated independently
        let p0 = (-16f64).exp();
        let error = p0 * p0 / (1.0 - p0) * 4e8;
        let herr = p0 * 4e8;
        ok &= (last.p0 - p0).abs() <= 1e-12 * p0
            && (last.error - error).abs() <= 1e-12 * error
            && (last.herr - herr).abs() <= 1e-12 * herr
            // the quoted figures, at the precision they are quoted to
            && (last.error / 5.0664e-6 - 1.0).abs() < 5e-4
            && (last.herr - 45.0141).abs() < 5e-4
            && decreasing
            && last.error < 1e-5;
        details.push(format!("{name}: Error {:.6e}, Herr {:.6}, decreasing {decreasing}", last.error, last.herr));
    }
    (ok, details.join("; "))
}

fn criterion_3() -> Outcome {
    let n = 100_000u64;
    let mut ok = true;
    let mut details = Vec::new();
    // constant coefficients: fig1 drift and vol with ρT = 4
    {
        let model = CoefficientModel::constant_bs(2.0, 100.0, 0.0);
        let horizon = 1e4;
        // the factor does not enter this model, so give it a quiet subordinator
        let quiet = vec![SubordinatorSpec::compound_poisson_exp(1e-6, 8.0, 1.0, 4.0).unwrap()];
        let sim = PathSimulator::new(
            model.clone(),
            ou(),
            quiet,
            SimulationConfig {
                horizon,
                step: 500.0,
                s0: vec![100.0],
                seed: 31,
            },
        )
        .unwrap();
        let surface = build_surface(&model, &ou(), &specs(), horizon, &SurfaceMethod::default()).unwrap();
        let theta = 2.0 / 100.0;
        let rows: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let b = sim.simulate(i).unwrap();
                let z = density_path(&surface, &model, &b).unwrap();
                let mut worst = 0.0f64;
                for k in 0..b.len() {
                    let (t, w) = (b.times()[k], b.brownian(k)[0]);
                    let exact = (-theta * w - 0.5 * theta * theta * t).exp();
                    worst = worst.max((z.z[k] - exact).abs() / exact);
                }
                (z.terminal(), worst)
            })
            .collect();
        let zs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let pathwise = rows.iter().map(|r| r.1).fold(0.0, f64::max);
        let est = McEstimate::from_samples(&zs);
        ok &= est.agrees_with(1.0, 4.0, 0.0) && pathwise <= 1e-6;
        details.push(format!(
            "ConstantBS E[Z] {:.5} (SE {:.5}), pathwise defect {pathwise:.1e}",
            est.mean, est.se
        ));
    }
    {
        let model = bns();
        let horizon = 20.0;
        let sim = simulator(model.clone(), horizon, 0.05, 32);
        let surface = build_surface(&model, &ou(), &specs(), horizon, &SurfaceMethod::default()).unwrap();
        let zs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| density_path(&surface, &model, &sim.simulate(i).unwrap()).unwrap().terminal())
            .collect();
        let est = McEstimate::from_samples(&zs);
        ok &= est.agrees_with(1.0, 4.0, 0.0);
        details.push(format!("BNS T=20 E[Z] {:.5} (SE {:.5})", est.mean, est.se));
    }
    (ok, details.join("; "))
}

fn criterion_4() -> Outcome {
    let model = bns();
    let horizon = 1.0;
    let surface = build_surface(&model, &ou(), &specs(), horizon, &SurfaceMethod::default()).unwrap();
    let mut ok = true;
    let mut worst = (0.0f64, 0.0, 0.0);
    let mut j = 0u64;
    for &t in &[0.0, 0.25, 0.5, 0.75, 0.9] {
        for &y in &[2.5, 5.0, 10.0, 15.0, 20.0] {
            j += 1;
            let grid = surface.p(t, &[y]).unwrap();
            let mc = estimate_p_mc(&model, &ou(), &specs(), horizon, t, &[y], 20_000, 4_000 + j).unwrap();
            let gap = (grid - mc.mean).abs();
            ok &= gap <= 4.0 * mc.se + 1e-4;
            if gap > worst.0 {
                worst = (gap, t, y);
            }
        }
    }
    (ok, format!("largest gap {:.2e} at t={}, y={} over 25 probes", worst.0, worst.1, worst.2))
}

fn criterion_5() -> Outcome {
    let (horizon, step) = (20.0, 0.01);
    let o = ou();
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = path_rng(55, i, Stream::Jumps);
        let jumps = sample_jump_path_with(&specs(), horizon, &mut rng).unwrap();
        let f = evolve(&o, &jumps, TimeGrid::merged(horizon, step, &jumps).unwrap()).unwrap();
        let lhs = o.lambda[0] * f.integrated_factor(0.0, horizon).unwrap()[0];
        let rhs = o.y0[0] + jumps.total(0) - f.y(f.len() - 1)[0];
        worst = worst.max((lhs - rhs).abs() / rhs.abs());
    }
    (worst <= 1e-12, format!("worst relative defect {worst:.2e} over 1000 paths"))
}

fn criterion_6() -> Outcome {
    let n = 10_000;
    let cases = [
        ("(a) BNS constant 3e4", bns(), 0.01, Payoff::ConstantP { value: 3e4 }),
        (
            "(b) BS call ATM",
            desk_bs(),
            1e-3,
            Payoff::DiscountedCall { strike: 100.0, asset: 0 },
        ),
        ("(c) BNS call K=s0", bns(), 0.01, Payoff::DiscountedCall { strike: 100.0, asset: 0 }),
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for (name, model, step, payoff) in cases {
        let sim = simulator(model.clone(), 1.0, step, 61);
        let surface = build_surface(&model, &ou(), &specs(), 1.0, &SurfaceMethod::default()).unwrap();
        let snap = collect_snapshots(&sim, &payoff, Some(&surface), 0, n, 1).unwrap();
        let sol = solve_backward(&snap, &surface, &model, &specs(), &BsdeConfig::default()).unwrap();
        let oracle = mc_value_at_zero(&snap.payoff, snap.density.as_ref().unwrap()).unwrap();
        let v = sol.value0;
        let mut pass = (v.mean - oracle.mean).abs() <= 4.0 * (v.se + oracle.se);
        let mut line = format!("{name}: BSDE {:.4} (SE {:.4}) oracle {:.4} (SE {:.4})", v.mean, v.se, oracle.mean, oracle.se);
        if name.starts_with("(b)") {
            let bs = blackscholes::call_price(100.0, 100.0, 0.03, 0.2, 1.0);
            pass &= v.agrees_with(bs, 3.0, 0.0) && oracle.agrees_with(bs, 3.0, 0.0);
            line.push_str(&format!(" BS {bs:.4}"));
        }
        ok &= pass;
        details.push(line);
    }
    (ok, details.join("; "))
}

fn criterion_7() -> Outcome {
    // BNS, T = 20, δ = 10⁻³; hedge paths drawn under a drift tilt of -2
    let model = bns();
    let (horizon, p, v) = (20.0, 3e4, 1e4);
    let sim = simulator(model.clone(), horizon, 1e-3, 42);
    let surface = build_surface(&model, &ou(), &specs(), horizon, &SurfaceMethod::default()).unwrap();
    let p0 = surface.p(0.0, &[10.0]).unwrap();
    let payoff = Payoff::ConstantP { value: p };
    let snap = collect_snapshots(&sim, &payoff, Some(&surface), 0, 2000, 10).unwrap();
    let sol = solve_backward(&snap, &surface, &model, &specs(), &BsdeConfig::default()).unwrap();
    drop(snap);
    let cfg = HedgeConfig {
        paths: 10_000,
        tilt: Some(-2.0),
        trace_paths: 0,
        ..Default::default()
    };
    let r = run_hedge(&sim, &sol, &payoff, v, Some(p0), &cfg).unwrap();
    let herr = p0 * (p - v) * (p - v);
    let band = (4.0 * r.mse.se).max(0.02 * herr);
    (
        (r.mse.mean - herr).abs() <= band,
        format!(
            "E[(v+G-H)^2] {:.5e} (SE {:.2e}) vs Herr {herr:.5e}, band {band:.2e}",
            r.mse.mean, r.mse.se
        ),
    )
}

fn criterion_8() -> Outcome {
    let model = desk_bs();
    let payoff = Payoff::DiscountedCall { strike: 100.0, asset: 0 };
    let v = blackscholes::call_price(100.0, 100.0, 0.03, 0.2, 1.0);
    let sim = simulator(model.clone(), 1.0, 1e-3, 81);
    let surface = build_surface(&model, &ou(), &specs(), 1.0, &SurfaceMethod::default()).unwrap();
    let snap = collect_snapshots(&sim, &payoff, None, 0, 40_000, 1).unwrap();
    let bsde = BsdeConfig {
        adaptive_knots: 8,
        vbar_window: 0.1,
        ..Default::default()
    };
    let sol = solve_backward(&snap, &surface, &model, &specs(), &bsde).unwrap();
    drop(snap);
    let cfg = HedgeConfig {
        paths: 100_000,
        trace_paths: 0,
        ..Default::default()
    };
    let r = run_hedge(&sim, &sol, &payoff, v, None, &cfg).unwrap();
    let limit = 0.01 * v * v;
    (
        r.mse.mean < limit,
        format!("MSE {:.4} (SE {:.4}) vs 1% of v^2 = {limit:.4}, v = {v:.4}", r.mse.mean, r.mse.se),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("closed-form identities", criterion_1),
        ("figure 1/2 endpoint", criterion_2),
        ("density martingale", criterion_3),
        ("opportunity cross-validation", criterion_4),
        ("OU exact identity", criterion_5),
        ("BSDE oracle agreement", criterion_6),
        ("hedging error vs Herr", criterion_7),
        ("complete-market replication", criterion_8),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = run();
        let line = format!(
            "{} criterion {} {name}: {detail} [{:.1}s]\n",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
        std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
        if !ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
