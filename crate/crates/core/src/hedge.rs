//! The variance-optimal hedge `φ = ξ - (v + Ψ⁻ - V⁻)a`, its simulation and
//! the closed-form error comparators for constant claims.

use std::fmt::Write as _;
use std::io::Write;

use num_traits::Num;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{MeanValueProcess, Payoff};
use crate::error::{config, domain, Result};
use crate::linalg::dot;
use crate::market::{CoefficientModel, LocalCoefficients, PathBundle, PathSimulator};
use crate::opportunity::adjustment_from_local;
use crate::scalar::{McEstimate, Real};

/// `ξ = (c̃^D)⁻¹ c̃^{DV}` with `c̃^D = diag(D)σσ'diag(D)` and
/// `c̃^{DV} = diag(D)σV̄`, which reduces to `diag(D)⁻¹(σσ')⁻¹σV̄`.
pub fn pure_hedge_xi<T: Real>(model: &CoefficientModel<T>, d: &[T], y_left: &[T], vbar: &[T]) -> Result<Vec<T>> {
    let local = model.local(y_left)?;
    Ok(pure_hedge_from_local(&local, d, vbar))
}

pub(crate) fn pure_hedge_from_local<T: Real>(local: &LocalCoefficients<T>, d: &[T], vbar: &[T]) -> Vec<T> {
    if d.len() == 1 {
        return vec![vbar[0] / (d[0] * local.vol[(0, 0)])];
    }
    let sv = local.vol.mat_vec(vbar);
    local
        .cov_inv
        .mat_vec(&sv)
        .into_iter()
        .zip(d)
        .map(|(x, &dm)| x / dm)
        .collect()
}

/// `ΔΨ = (ξ - (v - V⁻)a)'ΔD - Ψ⁻ a'ΔD`; returns `Ψ` after the step.
pub fn psi_step<T: Real>(psi_left: T, xi: &[T], a: &[T], v: T, v_left: T, dd: &[T]) -> T {
    let gap = v - v_left;
    let mut inc = T::zero();
    for m in 0..dd.len() {
        inc += (xi[m] - gap * a[m] - psi_left * a[m]) * dd[m];
    }
    psi_left + inc
}

/// `φ = ξ - (v + Ψ⁻ - V⁻)a`.
pub fn strategy_phi<T: Real>(xi: &[T], a: &[T], v: T, psi_left: T, v_left: T) -> Vec<T> {
    let gap = v + psi_left - v_left;
    xi.iter().zip(a).map(|(&x, &am)| x - gap * am).collect()
}

/// `Var(X*(T))`, `Herr` and their difference for a constant claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedForms<T> {
    pub var: T,
    pub herr: T,
    pub error: T,
}

/// `Var = P₀/(1-P₀)(p-v)²`, `Herr = P₀(p-v)²`, `Error = P₀²/(1-P₀)(p-v)²`.
/// Only field operations are used, so exact rationals work too.
pub fn closed_forms<T>(p: T, v: T, p0: T) -> Result<ClosedForms<T>>
where
    T: Num + PartialOrd + Clone,
{
    if !(p0 > T::zero() && p0 < T::one()) {
        return Err(domain("P(0, y0) must lie in (0, 1)"));
    }
    let gap = p - v;
    let g2 = gap.clone() * gap;
    let odds = p0.clone() / (T::one() - p0.clone());
    Ok(ClosedForms {
        var: odds.clone() * g2.clone(),
        herr: p0.clone() * g2.clone(),
        error: odds * p0 * g2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real")]
pub struct HedgeConfig<T> {
    pub paths: usize,
    /// Index of the first simulated path; use an offset disjoint from the
    /// paths that trained the mean-value process.
    pub first_index: u64,
    /// Importance-sampling drift `tilt·θ(Y)` for `W`; the squared errors are
    /// reweighted by the likelihood ratio. `-2` makes the estimator nearly
    /// exact for constant claims.
    pub tilt: Option<T>,
    /// Paths whose full trajectories are kept in the report.
    pub trace_paths: usize,
}

impl<T: Real> Default for HedgeConfig<T> {
    fn default() -> Self {
        Self {
            paths: 10_000,
            first_index: 1 << 32,
            tilt: None,
            trace_paths: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HedgeTrace<T> {
    pub path: u64,
    pub t: Vec<T>,
    /// `φ(t_k)`, `d` per step, flat.
    pub phi: Vec<T>,
    pub psi: Vec<T>,
    pub wealth: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HedgeReport<T> {
    pub v: T,
    pub payoff: Payoff<T>,
    pub horizon: T,
    pub step: T,
    pub tilt: Option<T>,
    /// `E[(v + (φ·D)(T) - H)²]`.
    pub mse: McEstimate<T>,
    pub mean_shortfall: McEstimate<T>,
    /// Mean likelihood ratio; 1 up to MC error when the tilt is sound.
    pub mean_weight: T,
    /// Largest `|Ψ - Σφ'ΔD|/(1 + |Σφ'ΔD|)` over all paths and steps.
    pub self_financing_residual: T,
    pub p0: Option<T>,
    pub closed: Option<ClosedForms<T>>,
    pub traces: Vec<HedgeTrace<T>>,
}

struct Outcome<T> {
    sq: T,
    shortfall: T,
    weight: T,
    residual: T,
    trace: Option<HedgeTrace<T>>,
}

fn hedge_path<T: Real, V: MeanValueProcess<T> + ?Sized>(
    bundle: &PathBundle<T>,
    model: &CoefficientModel<T>,
    value: &V,
    payoff: &Payoff<T>,
    v: T,
    keep: bool,
) -> Result<(T, T, T, Option<HedgeTrace<T>>)> {
    let d = bundle.assets;
    let times = bundle.times();
    let n = times.len();
    let mut local = LocalCoefficients::new(d);
    let mut vbar = vec![T::zero(); d];
    let mut dd = vec![T::zero(); d];
    let (mut psi, mut gains, mut residual) = (T::zero(), T::zero(), T::zero());
    let mut trace = keep.then(|| HedgeTrace {
        path: bundle.index,
        t: times.to_vec(),
        phi: Vec::with_capacity(n * d),
        psi: Vec::with_capacity(n),
        wealth: Vec::with_capacity(n),
    });
    for k in 0..n - 1 {
        let (t, dk, y) = (times[k], bundle.d(k), bundle.factor.y(k));
        model.local_into(y, &mut local)?;
        let v_left = value.value(t, dk, y);
        value.vbar(t, dk, y, &mut vbar);
        let xi = pure_hedge_from_local(&local, dk, &vbar);
        let a = adjustment_from_local(&local, dk);
        let phi = strategy_phi(&xi, &a, v, psi, v_left);
        for ((x, &next), &now) in dd.iter_mut().zip(bundle.d(k + 1)).zip(dk) {
            *x = next - now;
        }
        if let Some(tr) = trace.as_mut() {
            tr.phi.extend_from_slice(&phi);
            tr.psi.push(psi);
            tr.wealth.push(v + gains);
        }
        gains += dot(&phi, &dd);
        psi = psi_step(psi, &xi, &a, v, v_left, &dd);
        residual = residual.max((psi - gains).abs() / (T::one() + gains.abs()));
    }
    if let Some(tr) = trace.as_mut() {
        tr.phi.extend(std::iter::repeat_n(T::nan(), d));
        tr.psi.push(psi);
        tr.wealth.push(v + gains);
    }
    let h = payoff.evaluate(bundle, model.rate);
    Ok((v + gains - h, residual, h, trace))
}

/// Simulates the optimal hedge from endowment `v` on fresh paths.
pub fn run_hedge<T: Real, V: MeanValueProcess<T> + ?Sized>(
    sim: &PathSimulator<T>,
    value: &V,
    payoff: &Payoff<T>,
    v: T,
    p0: Option<T>,
    cfg: &HedgeConfig<T>,
) -> Result<HedgeReport<T>> {
    payoff.validate(sim.assets())?;
    if cfg.paths < 2 {
        return Err(config("the hedge needs at least two paths"));
    }
    let outcomes: Vec<Outcome<T>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| -> Result<Outcome<T>> {
            let index = cfg.first_index + i as u64;
            let (bundle, weight) = match cfg.tilt {
                Some(c) => {
                    let (b, log_lr) = sim.simulate_tilted(index, c)?;
                    (b, log_lr.exp())
                }
                None => (sim.simulate(index)?, T::one()),
            };
            let (shortfall, residual, _, trace) =
                hedge_path(&bundle, &sim.model, value, payoff, v, i < cfg.trace_paths)?;
            Ok(Outcome {
                sq: shortfall * shortfall * weight,
                shortfall: shortfall * weight,
                weight,
                residual,
                trace,
            })
        })
        .collect::<Result<_>>()?;
    let sq: Vec<T> = outcomes.iter().map(|o| o.sq).collect();
    let sf: Vec<T> = outcomes.iter().map(|o| o.shortfall).collect();
    let mean_weight = outcomes.iter().map(|o| o.weight).sum::<T>() / T::from_usize(cfg.paths).unwrap();
    let residual = outcomes.iter().map(|o| o.residual).fold(T::zero(), T::max);
    let closed = match (payoff, p0) {
        (Payoff::ConstantP { value: p }, Some(p0)) if p0 > T::zero() && p0 < T::one() => {
            Some(closed_forms(*p, v, p0)?)
        }
        _ => None,
    };
    Ok(HedgeReport {
        v,
        payoff: payoff.clone(),
        horizon: sim.sim.horizon,
        step: sim.sim.step,
        tilt: cfg.tilt,
        mse: McEstimate::from_samples(&sq),
        mean_shortfall: McEstimate::from_samples(&sf),
        mean_weight,
        self_financing_residual: residual,
        p0,
        closed,
        traces: outcomes.into_iter().filter_map(|o| o.trace).collect(),
    })
}

impl<T: Real> HedgeReport<T> {
    /// `|mse - Herr| <= max(k·SE, rel·Herr)`; `None` without closed forms.
    pub fn matches_herr(&self, k: T, rel: T) -> Option<bool> {
        self.closed
            .as_ref()
            .map(|c| (self.mse.mean - c.herr).abs() <= (k * self.mse.se).max(rel * c.herr))
    }

    /// Writes `path,t,phi_1..phi_d,psi,wealth` for the traced paths.
    pub fn write_traces_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let d = self
            .traces
            .first()
            .map(|t| t.phi.len() / t.t.len().max(1))
            .unwrap_or(0);
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((1..=d).map(|m| format!("phi_{m}")));
        header.extend(["psi".to_string(), "wealth".to_string()]);
        writeln!(out, "{}", header.join(","))?;
        for tr in &self.traces {
            for k in 0..tr.t.len() {
                write!(out, "{},{}", tr.path, tr.t[k])?;
                for m in 0..d {
                    write!(out, ",{}", tr.phi[k * d + m])?;
                }
                writeln!(out, ",{},{}", tr.psi[k], tr.wealth[k])?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "hedge report");
        let _ = writeln!(s, "  payoff             {:?}", self.payoff);
        let _ = writeln!(s, "  endowment v        {}", self.v);
        let _ = writeln!(s, "  horizon / step     {} / {}", self.horizon, self.step);
        let _ = writeln!(s, "  paths              {}", self.mse.samples);
        if let Some(c) = self.tilt {
            let _ = writeln!(s, "  sampling tilt      {c} (mean weight {})", self.mean_weight);
        }
        let _ = writeln!(s, "  E[shortfall^2]     {} (SE {})", self.mse.mean, self.mse.se);
        let _ = writeln!(s, "  E[shortfall]       {} (SE {})", self.mean_shortfall.mean, self.mean_shortfall.se);
        let _ = writeln!(s, "  self-financing     {:e}", self.self_financing_residual.as_f64());
        if let Some(p0) = self.p0 {
            let _ = writeln!(s, "  P(0, y0)           {p0}");
        }
        if let Some(c) = &self.closed {
            let _ = writeln!(s, "  Var(X*(T))         {}", c.var);
            let _ = writeln!(s, "  Herr               {}", c.herr);
            let _ = writeln!(s, "  Error              {}", c.error);
            let band = (T::lit(4.0) * self.mse.se).max(T::lit(0.02) * c.herr);
            let ok = (self.mse.mean - c.herr).abs() <= band;
            let _ = writeln!(
                s,
                "  |mse - Herr|       {} (band {band}): {}",
                (self.mse.mean - c.herr).abs(),
                if ok { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::ConstantValue;
    use crate::levy::SubordinatorSpec;
    use crate::market::SimulationConfig;
    use crate::ngou::OuParams;

    #[test]
    fn hand_arithmetic() {
        let psi = psi_step(0.0, &[1.0], &[2e-6], 1e4, 3e4, &[1.0]);
        assert!((psi - 1.04f64).abs() < 1e-12);
        let phi = strategy_phi(&[0.5], &[2e-6], 1e4, 0.0, 3e4);
        assert!((phi[0] - 0.54f64).abs() < 1e-12);
        assert_eq!(psi_step(0.3, &[1.0], &[2e-6], 1e4, 3e4, &[0.0]), 0.3);
        assert_eq!(strategy_phi(&[0.5], &[0.0], 1e4, 7.0, 3e4), vec![0.5]);
        assert_eq!(strategy_phi(&[0.5], &[1.0], 1.0, 2.0, 3.0), vec![0.5]);
    }

    #[test]
    fn xi_scalar_and_matrix() {
        let m = CoefficientModel::constant_bs(0.1, 0.2, 0.0);
        let xi = pure_hedge_xi(&m, &[50.0], &[1.0], &[3.0]).unwrap();
        assert!((xi[0] - 3.0f64 / (50.0 * 0.2)).abs() < 1e-14);
        assert_eq!(pure_hedge_xi(&m, &[50.0], &[1.0], &[0.0]).unwrap(), vec![0.0]);
        let local = {
            let mut l = LocalCoefficients::<f64>::new(2);
            l.vol = crate::linalg::Matrix::from_row_major(2, 2, vec![0.2, 0.0, 0.1, 0.3]).unwrap();
            l.cov_inv = crate::linalg::spd_inverse(&l.vol.gram_outer(), "test").unwrap().0;
            l
        };
        let d = [10.0, 20.0];
        let vbar = [0.7, -0.4];
        let xi = pure_hedge_from_local(&local, &d, &vbar);
        // c̃^D ξ = c̃^{DV}
        let c = local.vol.gram_outer();
        let sv = local.vol.mat_vec(&vbar);
        for m in 0..2 {
            let lhs: f64 = (0..2).map(|j| d[m] * c[(m, j)] * d[j] * xi[j]).sum();
            assert!((lhs - d[m] * sv[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_examples() {
        let c = closed_forms(3e4, 1e4, (-16f64).exp()).unwrap();
        assert!((c.herr - 45.014_069_887_703_65).abs() < 1e-9);
        assert!((c.error - 5.065_666_789_703_367e-6).abs() < 1e-18);
        let c = closed_forms(3e4, 1e4, (-4f64).exp()).unwrap();
        assert!((c.var - 7_462_944.145_509_618).abs() < 1e-6);
        assert!((c.herr - 7_326_255.555_493_671).abs() < 1e-6);
        let c = closed_forms(5.0, 5.0, 0.3).unwrap();
        assert_eq!((c.var, c.herr, c.error), (0.0, 0.0, 0.0));
        assert!(closed_forms(1.0, 0.0, 1.0).is_err());
        assert!(closed_forms(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn endowment_equal_to_constant_claim_gives_zero_error() {
        let sim = PathSimulator::new(
            CoefficientModel::bns(0.5, 0.02, 0.0),
            OuParams::new(vec![1.0], vec![10.0]).unwrap(),
            vec![SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 4.0).unwrap()],
            SimulationConfig {
                horizon: 1.0,
                step: 0.05,
                s0: vec![100.0],
                seed: 3,
            },
        )
        .unwrap();
        let payoff = Payoff::ConstantP { value: 5.0 };
        let cfg = HedgeConfig {
            paths: 64,
            trace_paths: 2,
            ..Default::default()
        };
        let r = run_hedge(&sim, &ConstantValue(5.0), &payoff, 5.0, Some(0.5), &cfg).unwrap();
        assert_eq!(r.mse.mean, 0.0);
        assert!(r.traces[0].phi.iter().take(20).all(|&p| p == 0.0));
        assert_eq!(r.traces.len(), 2);
        let mut buf = Vec::new();
        r.write_traces_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("path,t,phi_1,psi,wealth\n"));
    }

    #[test]
    fn self_financing_bookkeeping() {
        let sim = PathSimulator::new(
            CoefficientModel::bns(0.5, 0.02, 0.01),
            OuParams::new(vec![1.0], vec![10.0]).unwrap(),
            vec![SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 4.0).unwrap()],
            SimulationConfig {
                horizon: 2.0,
                step: 0.01,
                s0: vec![100.0],
                seed: 5,
            },
        )
        .unwrap();
        let cfg = HedgeConfig {
            paths: 200,
            ..Default::default()
        };
        let r = run_hedge(&sim, &ConstantValue(3e4), &Payoff::ConstantP { value: 3e4 }, 1e4, None, &cfg).unwrap();
        assert!(r.self_financing_residual < 1e-12, "{}", r.self_financing_residual);
        for tr in &r.traces {
            assert_eq!(tr.psi[0], 0.0);
            assert_eq!(tr.wealth[0], 1e4);
        }
    }
}
