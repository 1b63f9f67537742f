//! Backward solve of the opportunity IPDE for one factor,
//!
//! `∂ₜP = ρ(y)P + λy∂ᵧP - λ ∫(P(t, y+z) - P(t, y)) ν(dz)`, `P(T, ·) = 1`,
//!
//! in time-to-go `τ = T - t` on a geometric mesh `yⱼ = y_lo e^{jΔx}` with
//! `Δx = λΔτ`. The transport term is then an exact one-node shift along the
//! characteristic `y e^{-λs}`, the reaction term is integrated along that
//! characteristic, and jumps enter with Poisson weights for zero, one and
//! two jumps per step, placed at the step midpoint. The scheme is second
//! order in `Δτ` and is Richardson-extrapolated from `Δτ` and `Δτ/2`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::levy::{JumpQuadrature, SubordinatorSpec, DEFAULT_TAIL_TOLERANCE};
use crate::market::CoefficientModel;
use crate::ngou::{integrate_decay, OuParams};
use crate::scalar::Real;

/// Jump-term time stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpStepping {
    /// Poisson weights for zero, one and two or more jumps per step:
    /// unconditionally stable and second order.
    Exponential,
    /// `P + λΔτ ∫(P(y+z) - P)ν(dz)`: first order, requires `λΛΔτ ≤ 1`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real")]
pub struct IpdeConfig<T> {
    /// Coarse time step `Δτ`; the fine solve uses `Δτ/2`.
    pub time_step: T,
    pub richardson: bool,
    pub jump_stepping: JumpStepping,
    /// Gauss-Legendre panels for continuous Lévy measures.
    pub quadrature_panels: usize,
    pub tail_tolerance: T,
    /// Quantile of `L(λT)` added to `y₀` for the top of the mesh.
    pub upper_quantile: T,
    /// Upper bound on stored values (levels × nodes).
    pub max_storage: usize,
}

impl<T: Real> Default for IpdeConfig<T> {
    fn default() -> Self {
        Self {
            time_step: T::lit(0.01),
            richardson: true,
            jump_stepping: JumpStepping::Exponential,
            quadrature_panels: 16,
            tail_tolerance: T::lit(DEFAULT_TAIL_TOLERANCE),
            upper_quantile: T::lit(1.0 - 1e-6),
            max_storage: 200_000_000,
        }
    }
}

/// Where an evaluation point fell relative to the trusted part of the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshRegion {
    Inside,
    /// Below the region unaffected by the bottom boundary; value clamped.
    Below,
    /// Above the mesh; log-linear extrapolation.
    Above,
}

/// `P(τ, y)` on `levels × nodes`, level `n` at `τ = nΔτ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IpdeSurface<T> {
    pub horizon: T,
    pub lambda: T,
    pub y_lo: T,
    pub dx: T,
    pub dtau: T,
    pub nodes: usize,
    pub levels: usize,
    /// Decay time after which the bottom boundary can no longer influence a
    /// node (no-jump probability below 1e-12).
    pub shadow_time: T,
    values: Vec<T>,
}

impl<T: Real> IpdeSurface<T> {
    pub fn node(&self, j: usize) -> T {
        self.y_lo * (self.dx * T::from_usize(j).unwrap()).exp()
    }

    pub fn top(&self) -> T {
        self.node(self.nodes - 1)
    }

    pub fn level(&self, n: usize) -> &[T] {
        &self.values[n * self.nodes..(n + 1) * self.nodes]
    }

    /// Smallest `y` at time-to-go `τ` whose value cannot see the bottom
    /// boundary.
    pub fn trusted_floor(&self, tau: T) -> T {
        self.y_lo * (self.lambda * tau.min(self.shadow_time) + self.dx + self.dx).exp()
    }

    fn interp_level(&self, n: usize, y: T) -> (T, MeshRegion) {
        let level = self.level(n);
        let top = self.top();
        if y >= top {
            let (a, b) = (level[self.nodes - 2], level[self.nodes - 1]);
            let (ya, yb) = (self.node(self.nodes - 2), top);
            let slope = (b.ln() - a.ln()) / (yb - ya);
            let v = (b.ln() + slope * (y - yb)).exp().min(T::one());
            let region = if y > top { MeshRegion::Above } else { MeshRegion::Inside };
            return (v, region);
        }
        if y <= self.y_lo {
            return (level[0], MeshRegion::Below);
        }
        let pos = (y / self.y_lo).ln() / self.dx;
        let j = pos.floor().to_usize().unwrap_or(0).min(self.nodes - 2);
        let (ya, yb) = (self.node(j), self.node(j + 1));
        let w = ((y - ya) / (yb - ya)).max(T::zero()).min(T::one());
        (level[j] + w * (level[j + 1] - level[j]), MeshRegion::Inside)
    }

    /// `P` at time-to-go `τ`, bilinear in `(τ, y)`.
    pub fn eval_tau(&self, tau: T, y: T) -> (T, MeshRegion) {
        let tau = tau.max(T::zero()).min(self.horizon);
        let u = tau / self.dtau;
        let n = u.floor().to_usize().unwrap_or(0).min(self.levels - 1);
        let (p0, mut region) = self.interp_level(n, y);
        let value = if n + 1 < self.levels {
            let w = u - T::from_usize(n).unwrap();
            let (p1, r1) = self.interp_level(n + 1, y);
            if r1 != MeshRegion::Inside {
                region = r1;
            }
            p0 + w * (p1 - p0)
        } else {
            p0
        };
        if region == MeshRegion::Inside && y < self.trusted_floor(tau) {
            region = MeshRegion::Below;
        }
        (value, region)
    }

    pub fn eval(&self, t: T, y: T) -> (T, MeshRegion) {
        self.eval_tau(self.horizon - t, y)
    }
}

struct Mesh<T> {
    y_lo: T,
    dx: T,
    nodes: usize,
}

enum Lookup<T> {
    Interior(usize, T),
    Above(T),
}

fn locate<T: Real>(ys: &[T], mesh: &Mesh<T>, target: T) -> Lookup<T> {
    let n = ys.len();
    if target >= ys[n - 1] {
        Lookup::Above((target - ys[n - 1]) / (ys[n - 1] - ys[n - 2]))
    } else if target <= ys[0] {
        Lookup::Interior(0, T::zero())
    } else {
        let pos = (target / mesh.y_lo).ln() / mesh.dx;
        let j = pos.floor().to_usize().unwrap_or(0).min(n - 2);
        let w = (target - ys[j]) / (ys[j + 1] - ys[j]);
        Lookup::Interior(j, w.max(T::zero()).min(T::one()))
    }
}

/// `Σ qₖ P(targetₖ)`, extrapolating linearly in `log P` above the mesh.
fn apply<T: Real>(row: &[Lookup<T>], weights: &[T], p: &[T]) -> T {
    let n = p.len();
    row.iter()
        .zip(weights)
        .map(|(l, &q)| {
            let v = match *l {
                Lookup::Interior(i, w) => p[i] + w * (p[i + 1] - p[i]),
                Lookup::Above(u) => {
                    let slope = (p[n - 1].ln() - p[n - 2].ln()).min(T::zero());
                    (p[n - 1].ln() + slope * u).exp()
                }
            };
            q * v
        })
        .sum()
}

/// Solves on one mesh, returning all levels flat.
#[allow(clippy::too_many_arguments)]
fn march<T: Real>(
    model: &CoefficientModel<T>,
    lambda: T,
    jump_rate: T,
    quad: &JumpQuadrature<T>,
    mesh: &Mesh<T>,
    steps: usize,
    dtau: T,
    stepping: JumpStepping,
) -> Result<Vec<T>> {
    let n = mesh.nodes;
    let ys: Vec<T> = (0..n)
        .map(|j| mesh.y_lo * (mesh.dx * T::from_usize(j).unwrap()).exp())
        .collect();
    let half_dt = dtau * T::lit(0.5);
    let shrink = (-lambda * half_dt).exp();
    let mut err = None;
    let mut decay_integral = |y: T| {
        integrate_decay(&[y], &[lambda], half_dt, |v| match model.rho(v) {
            Ok(r) => r,
            Err(e) => {
                err = Some(e);
                T::zero()
            }
        })
    };
    // A jump in the step is placed at its midpoint: decay for Δτ/2, jump,
    // decay for Δτ/2, with the reaction integrated along that path.
    let mut reaction = Vec::with_capacity(n);
    let mut lookups: Vec<Vec<Lookup<T>>> = Vec::with_capacity(n);
    let mut jump_weights: Vec<Vec<T>> = Vec::with_capacity(n);
    let mass = quad.mass();
    for &y in &ys {
        let first = decay_integral(y);
        let second = decay_integral(y * shrink);
        reaction.push((-(first + second)).exp());
        let mut row = Vec::with_capacity(quad.len());
        let mut weights = Vec::with_capacity(quad.len());
        for (&z, &w) in quad.nodes.iter().zip(&quad.weights) {
            let post = y * shrink + z;
            weights.push(w / mass * (second - decay_integral(post)).exp());
            row.push(locate(&ys, mesh, post * shrink));
        }
        lookups.push(row);
        jump_weights.push(weights);
    }
    if let Some(e) = err {
        return Err(e);
    }
    let rate_dt = jump_rate * dtau;
    if stepping == JumpStepping::Explicit && rate_dt > T::one() {
        return Err(Error::StepSize(format!(
            "explicit jump stepping needs lambda * nu-mass * dtau <= 1, got {rate_dt}"
        )));
    }
    // second jump of a two-jump step, applied without further decay
    let plain: Vec<Vec<Lookup<T>>> = ys
        .iter()
        .map(|&y| quad.nodes.iter().map(|&z| locate(&ys, mesh, y + z)).collect())
        .collect();
    let probs: Vec<T> = quad.weights.iter().map(|&w| w / mass).collect();
    let stay = (-rate_dt).exp();
    let one_jump = stay * rate_dt;
    let more_jumps = T::one() - stay - one_jump;
    let mut values = Vec::with_capacity((steps + 1) * n);
    values.extend(std::iter::repeat_n(T::one(), n));
    let mut after_jump = vec![T::zero(); n];
    for step in 0..steps {
        let prev = &values[step * n..(step + 1) * n];
        for (i, row) in plain.iter().enumerate() {
            after_jump[i] = apply(row, &probs, prev);
        }
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let single = apply(&lookups[j], &jump_weights[j], prev);
            let s = j.saturating_sub(1);
            let mixed = match stepping {
                JumpStepping::Exponential => {
                    let double = apply(&lookups[j], &jump_weights[j], &after_jump);
                    stay * prev[s] + one_jump * single + more_jumps * double
                }
                JumpStepping::Explicit => prev[s] + rate_dt * (single - prev[s]),
            };
            next.push((reaction[j] * mixed).min(T::one()).max(T::zero()));
        }
        values.extend(next);
    }
    Ok(values)
}

/// Solves the IPDE on `[0, horizon]` for a one-factor model.
pub fn solve_p_ipde<T: Real>(
    model: &CoefficientModel<T>,
    ou: &OuParams<T>,
    specs: &[SubordinatorSpec<T>],
    horizon: T,
    cfg: &IpdeConfig<T>,
) -> Result<IpdeSurface<T>> {
    if ou.dimension() != 1 || specs.len() != 1 {
        return Err(config("the IPDE evaluator supports exactly one factor"));
    }
    model.validate(1)?;
    if !(horizon > T::zero()) || !(cfg.time_step > T::zero()) {
        return Err(config("IPDE needs a positive horizon and time step"));
    }
    let lambda = ou.lambda[0];
    let y0 = ou.y0[0];
    let spec = &specs[0];
    spec.validate()?;
    let quad = spec.quadrature(cfg.tail_tolerance, cfg.quadrature_panels);
    let jump_rate = spec.time_scale * quad.mass();
    let steps = (horizon / cfg.time_step).ceil().to_usize().unwrap_or(1).max(1);
    let dtau = horizon / T::from_usize(steps).unwrap();
    let dx = lambda * dtau;
    let shadow_time = if jump_rate > T::zero() {
        T::lit(-(1e-12f64).ln()) / jump_rate
    } else {
        T::infinity()
    };
    // every state reachable within `min(T, shadow)` of decay stays trusted
    let span = lambda * (horizon.min(shadow_time) + shadow_time.min(horizon));
    let y_lo = y0 * (-span - dx - dx - dx).exp();
    let q = if quad.is_empty() {
        T::zero()
    } else {
        spec.quantile_bound(horizon, cfg.upper_quantile)
    };
    let y_top = T::lit(2.0) * (y0 + q) + quad.max_node();
    let coarse_nodes = ((y_top / y_lo).ln() / dx).ceil().to_usize().unwrap_or(2).max(2) + 1;
    let fine_nodes = 2 * coarse_nodes - 1;
    let storage = (steps + 1) * coarse_nodes
        + if cfg.richardson {
            (2 * steps + 1) * fine_nodes
        } else {
            0
        };
    if storage > cfg.max_storage {
        return Err(config(format!(
            "IPDE mesh needs {storage} values (limit {}); increase the time step",
            cfg.max_storage
        )));
    }
    let coarse = Mesh {
        y_lo,
        dx,
        nodes: coarse_nodes,
    };
    let mut values = march(model, lambda, jump_rate, &quad, &coarse, steps, dtau, cfg.jump_stepping)?;
    if cfg.richardson {
        let half = T::lit(0.5);
        let fine = Mesh {
            y_lo,
            dx: dx * half,
            nodes: fine_nodes,
        };
        let fv = march(
            model,
            lambda,
            jump_rate,
            &quad,
            &fine,
            2 * steps,
            dtau * half,
            cfg.jump_stepping,
        )?;
        let (four, three) = (T::lit(4.0), T::lit(3.0));
        for n in 0..=steps {
            for j in 0..coarse_nodes {
                let c = &mut values[n * coarse_nodes + j];
                let f = fv[2 * n * fine_nodes + 2 * j];
                *c = ((four * f - *c) / three).min(T::one()).max(f.min(*c) * half);
            }
        }
    }
    if values.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
        warn!("IPDE surface has nonpositive values; the mesh is too coarse for the reaction rate");
    }
    Ok(IpdeSurface {
        horizon,
        lambda,
        y_lo,
        dx,
        dtau,
        nodes: coarse_nodes,
        levels: steps + 1,
        shadow_time,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bns_setup() -> (CoefficientModel<f64>, OuParams<f64>, Vec<SubordinatorSpec<f64>>) {
        (
            CoefficientModel::bns(0.5, 0.02, 0.0),
            OuParams::new(vec![1.0], vec![10.0]).unwrap(),
            vec![SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 4.0).unwrap()],
        )
    }

    #[test]
    fn zero_rho_gives_unit_surface() {
        let (_, ou, specs) = bns_setup();
        let model = CoefficientModel::bns(0.0, 0.0, 0.0);
        let s = solve_p_ipde(&model, &ou, &specs, 1.0, &IpdeConfig::default()).unwrap();
        for n in 0..s.levels {
            assert!(s.level(n).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn constant_rho_separable_solution() {
        // ConstantBs coefficients forced through the mesh solver
        let (_, ou, specs) = bns_setup();
        let model = CoefficientModel::constant_bs(0.3, 0.5, 0.0);
        let s = solve_p_ipde(&model, &ou, &specs, 2.0, &IpdeConfig::default()).unwrap();
        let rho = 0.36;
        let mut worst: f64 = 0.0;
        for n in 0..s.levels {
            let exact = (-rho * n as f64 * s.dtau).exp();
            for &v in s.level(n) {
                worst = worst.max((v - exact).abs());
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn terminal_level_is_one_and_values_in_unit_interval() {
        let (model, ou, specs) = bns_setup();
        let s = solve_p_ipde(&model, &ou, &specs, 1.0, &IpdeConfig::default()).unwrap();
        assert!(s.level(0).iter().all(|&v| v == 1.0));
        assert!(s.level(s.levels - 1).iter().all(|&v| v > 0.0 && v <= 1.0));
        assert_eq!(s.eval(1.0, 10.0).0, 1.0);
    }

    #[test]
    fn explicit_stepping_rejects_large_steps() {
        let (model, ou, specs) = bns_setup();
        let cfg = IpdeConfig {
            time_step: 0.5,
            jump_stepping: JumpStepping::Explicit,
            ..IpdeConfig::default()
        };
        assert!(matches!(
            solve_p_ipde(&model, &ou, &specs, 1.0, &cfg),
            Err(Error::StepSize(_))
        ));
    }

    #[test]
    fn explicit_and_exponential_agree() {
        let (model, ou, specs) = bns_setup();
        let a = solve_p_ipde(&model, &ou, &specs, 1.0, &IpdeConfig::default()).unwrap();
        let cfg = IpdeConfig {
            jump_stepping: JumpStepping::Explicit,
            ..IpdeConfig::default()
        };
        let b = solve_p_ipde(&model, &ou, &specs, 1.0, &cfg).unwrap();
        for &y in &[5.0, 10.0, 15.0] {
            assert!((a.eval(0.0, y).0 - b.eval(0.0, y).0).abs() < 1e-5);
        }
    }

    #[test]
    fn longer_horizon_never_increases_p() {
        let (model, ou, specs) = bns_setup();
        let s1 = solve_p_ipde(&model, &ou, &specs, 1.0, &IpdeConfig::default()).unwrap();
        let s2 = solve_p_ipde(&model, &ou, &specs, 2.0, &IpdeConfig::default()).unwrap();
        for &y in &[6.0, 10.0, 20.0] {
            assert!(s2.eval(0.0, y).0 <= s1.eval(0.0, y).0 + 1e-12);
        }
    }
}
