//! The opportunity process `P(t, y)`, the adjustment process `a`, the
//! stochastic exponential and the variance-optimal density `Ẑ`, plus the
//! ingredients `F`, `B̄`, `Z̄` of the BSDE driver.

pub mod ipde;
pub mod mc;

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::levy::{JumpQuadrature, SubordinatorSpec};
use crate::market::{CoefficientModel, LocalCoefficients, PathBundle};
use crate::ngou::OuParams;
use crate::rng::derive_seed;
use crate::scalar::Real;

pub use ipde::{solve_p_ipde, IpdeConfig, IpdeSurface, JumpStepping, MeshRegion};
pub use mc::estimate_p_mc;

/// Monte-Carlo backed surface for multi-factor models: every evaluation
/// draws `n_inner` fresh factor paths from a seed derived from `(t, y)`.
#[derive(Debug, Clone)]
pub struct McSurface<T> {
    pub model: CoefficientModel<T>,
    pub ou: OuParams<T>,
    pub specs: Vec<SubordinatorSpec<T>>,
    pub horizon: T,
    pub n_inner: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum OpportunitySurface<T> {
    /// `P(t, y) = e^{-ρ(T - t)}` for constant `ρ`.
    Closed { rho: T, horizon: T },
    Grid(Box<IpdeSurface<T>>),
    MonteCarlo(Box<McSurface<T>>),
}

/// How to build a surface; `Auto` picks the closed form, then the IPDE for
/// one factor, then Monte Carlo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", bound = "T: Real")]
pub enum SurfaceMethod<T> {
    Auto {
        #[serde(default)]
        ipde: IpdeConfig<T>,
    },
    Ipde {
        #[serde(default)]
        ipde: IpdeConfig<T>,
    },
    MonteCarlo { n_inner: usize, seed: u64 },
}

impl<T: Real> Default for SurfaceMethod<T> {
    fn default() -> Self {
        SurfaceMethod::Auto {
            ipde: IpdeConfig::default(),
        }
    }
}

pub fn build_surface<T: Real>(
    model: &CoefficientModel<T>,
    ou: &OuParams<T>,
    specs: &[SubordinatorSpec<T>],
    horizon: T,
    method: &SurfaceMethod<T>,
) -> Result<OpportunitySurface<T>> {
    model.validate(ou.dimension())?;
    match method {
        SurfaceMethod::Auto { ipde } => {
            if let Some(rho) = model.constant_rho() {
                Ok(OpportunitySurface::Closed { rho, horizon })
            } else if ou.dimension() == 1 {
                Ok(OpportunitySurface::Grid(Box::new(solve_p_ipde(
                    model, ou, specs, horizon, ipde,
                )?)))
            } else {
                Ok(OpportunitySurface::MonteCarlo(Box::new(McSurface {
                    model: model.clone(),
                    ou: ou.clone(),
                    specs: specs.to_vec(),
                    horizon,
                    n_inner: 4096,
                    seed: 0x5eed,
                })))
            }
        }
        SurfaceMethod::Ipde { ipde } => Ok(OpportunitySurface::Grid(Box::new(solve_p_ipde(
            model, ou, specs, horizon, ipde,
        )?))),
        SurfaceMethod::MonteCarlo { n_inner, seed } => {
            if *n_inner < mc::MIN_INNER_SAMPLES {
                return Err(config("Monte-Carlo surface needs at least 100 inner samples"));
            }
            Ok(OpportunitySurface::MonteCarlo(Box::new(McSurface {
                model: model.clone(),
                ou: ou.clone(),
                specs: specs.to_vec(),
                horizon,
                n_inner: *n_inner,
                seed: *seed,
            })))
        }
    }
}

impl<T: Real> OpportunitySurface<T> {
    pub fn horizon(&self) -> T {
        match self {
            Self::Closed { horizon, .. } => *horizon,
            Self::Grid(g) => g.horizon,
            Self::MonteCarlo(m) => m.horizon,
        }
    }

    /// True when `P` does not depend on `y`.
    pub fn is_flat(&self) -> bool {
        matches!(self, Self::Closed { .. })
    }

    /// `P(t, y)` and whether the point lay in the trusted region.
    pub fn eval(&self, t: T, y: &[T]) -> Result<(T, MeshRegion)> {
        match self {
            Self::Closed { rho, horizon } => Ok(((-*rho * (*horizon - t)).exp(), MeshRegion::Inside)),
            Self::Grid(g) => Ok(g.eval(t, y[0])),
            Self::MonteCarlo(m) => {
                let mut label = t.as_f64().to_bits();
                for v in y {
                    label = derive_seed(label, v.as_f64().to_bits());
                }
                let est = estimate_p_mc(
                    &m.model,
                    &m.ou,
                    &m.specs,
                    m.horizon,
                    t,
                    y,
                    m.n_inner,
                    derive_seed(m.seed, label),
                )?;
                Ok((est.mean, MeshRegion::Inside))
            }
        }
    }

    pub fn p(&self, t: T, y: &[T]) -> Result<T> {
        Ok(self.eval(t, y)?.0)
    }

    /// `P(0, y)` for the shorter horizon `T' ≤ T`, using time homogeneity
    /// `P(0, y; T') = P(T - T', y; T)`.
    pub fn p0_for_horizon(&self, horizon: T, y: &[T]) -> Result<T> {
        if horizon > self.horizon() * (T::one() + T::lit(1e-12)) {
            return Err(domain("requested horizon exceeds the surface horizon"));
        }
        self.p((self.horizon() - horizon).max(T::zero()), y)
    }
}

/// Writes `t,y,P` for every `time_stride`-th level and `node_stride`-th node.
pub fn write_surface_csv<T: Real, W: Write>(
    out: &mut W,
    surface: &IpdeSurface<T>,
    time_stride: usize,
    node_stride: usize,
) -> Result<()> {
    writeln!(out, "t,y,P")?;
    let (ts, ns) = (time_stride.max(1), node_stride.max(1));
    let mut levels: Vec<usize> = (0..surface.levels).step_by(ts).collect();
    if levels.last() != Some(&(surface.levels - 1)) {
        levels.push(surface.levels - 1);
    }
    for n in levels.into_iter().rev() {
        let t = surface.horizon - surface.dtau * T::from_usize(n).unwrap();
        let level = surface.level(n);
        for j in (0..surface.nodes).step_by(ns) {
            writeln!(out, "{},{},{}", t.max(T::zero()), surface.node(j), level[j])?;
        }
    }
    Ok(())
}

/// `a = diag(D)⁻¹(σσ')⁻¹B` at the factor value `y_left`.
pub fn adjustment_a<T: Real>(model: &CoefficientModel<T>, d: &[T], y_left: &[T]) -> Result<Vec<T>> {
    let local = model.local(y_left)?;
    Ok(adjustment_from_local(&local, d))
}

pub(crate) fn adjustment_from_local<T: Real>(local: &LocalCoefficients<T>, d: &[T]) -> Vec<T> {
    local.kappa.iter().zip(d).map(|(&k, &dm)| k / dm).collect()
}

/// `ℰ(N) = exp(N - ½[N, N])` from a continuous path and its quadratic
/// variation sampled on the same grid.
pub fn stochastic_exponential<T: Real>(n: &[T], qv: &[T]) -> Result<Vec<T>> {
    if n.len() != qv.len() {
        return Err(config("path and quadratic variation lengths differ"));
    }
    if let Some(&n0) = n.first() {
        if n0 != T::zero() {
            return Err(domain("stochastic exponential needs N(0) = 0"));
        }
    }
    let half = T::lit(0.5);
    Ok(n.iter().zip(qv).map(|(&x, &q)| (x - half * q).exp()).collect())
}

/// Density quantities along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath<T> {
    pub o: Vec<T>,
    /// `P(t_k, Y(t_k⁻))`.
    pub o_left: Vec<T>,
    /// `N = -(a·D)`.
    pub n: Vec<T>,
    pub qv: Vec<T>,
    pub exponential: Vec<T>,
    pub z: Vec<T>,
    pub z_left: Vec<T>,
    pub o0: T,
    /// Evaluations outside the trusted surface region.
    pub flagged: usize,
}

impl<T: Real> DensityPath<T> {
    pub fn terminal(&self) -> T {
        *self.z.last().unwrap()
    }

    /// `Z̄(t_k) = Ẑ(t_k⁻)/Ẑ(t_k)`.
    pub fn zbar(&self, k: usize) -> T {
        self.z_left[k] / self.z[k]
    }
}

static FLAG_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Builds `O`, `ℰ(-a·D)` and `Ẑ = O ℰ(-a·D)/O₀` along `bundle`.
///
/// The integrand `a` is frozen at the start of each step, so
/// `a'dD = ρ dt + B̄'dW` gives `ΔN = -∫ρ(Y)ds - B̄(Y(t_k))'ΔW` with the `ρ`
/// integral taken along the exact factor path, and `Δ[N, N] = |B̄|²Δt`.
pub fn density_path<T: Real>(
    surface: &OpportunitySurface<T>,
    model: &CoefficientModel<T>,
    bundle: &PathBundle<T>,
) -> Result<DensityPath<T>> {
    let times = bundle.times();
    let horizon = *times.last().unwrap();
    let tol = T::lit(1e-9) * horizon.max(T::one());
    if (surface.horizon() - horizon).abs() > tol {
        return Err(config("surface horizon does not match the path horizon"));
    }
    let len = bundle.len();
    let factor = &bundle.factor;
    let mut flagged = 0;
    let mut eval = |t: T, y: &[T]| -> Result<T> {
        let (v, region) = surface.eval(t, y)?;
        if region != MeshRegion::Inside {
            flagged += 1;
        }
        Ok(v)
    };
    let mut o = Vec::with_capacity(len);
    let mut o_left = Vec::with_capacity(len);
    for k in 0..len {
        o.push(eval(times[k], factor.y(k))?);
        o_left.push(if factor.is_jump_point(k) {
            eval(times[k], factor.y_left(k))?
        } else {
            o[k]
        });
    }
    let mut n = Vec::with_capacity(len);
    let mut qv = Vec::with_capacity(len);
    n.push(T::zero());
    qv.push(T::zero());
    let mut local = LocalCoefficients::new(bundle.assets);
    for k in 0..len - 1 {
        let dt = times[k + 1] - times[k];
        model.local_into(factor.y(k), &mut local)?;
        let rho_int = if model.has_constant_rho() {
            local.rho * dt
        } else {
            let mut err = None;
            let v = factor.integrate_over_step(k, |y| match model.rho(y) {
                Ok(r) => r,
                Err(e) => {
                    err = Some(e);
                    T::zero()
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            v
        };
        let dw = bundle.dw(k);
        let theta_dw: T = local.theta.iter().zip(dw).map(|(&a, &b)| a * b).sum();
        n.push(n[k] - rho_int - theta_dw);
        qv.push(qv[k] + local.rho * dt);
    }
    let exponential = stochastic_exponential(&n, &qv)?;
    let o0 = o[0];
    let z: Vec<T> = o.iter().zip(&exponential).map(|(&a, &e)| a * e / o0).collect();
    let z_left: Vec<T> = o_left.iter().zip(&exponential).map(|(&a, &e)| a * e / o0).collect();
    if flagged > 0 && FLAG_WARNINGS.fetch_add(1, Ordering::Relaxed) < 5 {
        warn!("path {}: {flagged} surface evaluations outside the trusted region", bundle.index);
    }
    Ok(DensityPath {
        o,
        o_left,
        n,
        qv,
        exponential,
        z,
        z_left,
        o0,
        flagged,
    })
}

/// Ingredients of the BSDE driver at one time and state.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverIngredients<T> {
    /// `F(t, z eᵢ)` per factor component `i` and quadrature node.
    pub f: Vec<Vec<T>>,
    /// `B̄(Y(t⁻))`.
    pub bbar: Vec<T>,
    pub zbar: T,
}

/// `F(t, zᵢ) = (P(t, y⁻ + zᵢeᵢ) - P(t, y⁻))/P(t, y⁻)`, `B̄ = σ'(σσ')⁻¹B`.
pub fn driver_ingredients<T: Real>(
    surface: &OpportunitySurface<T>,
    model: &CoefficientModel<T>,
    t: T,
    y_left: &[T],
    zbar: T,
    quads: &[JumpQuadrature<T>],
) -> Result<DriverIngredients<T>> {
    let bbar = model.local(y_left)?.theta;
    let f = jump_sensitivity(surface, t, y_left, quads)?;
    Ok(DriverIngredients { f, bbar, zbar })
}

pub(crate) fn jump_sensitivity<T: Real>(
    surface: &OpportunitySurface<T>,
    t: T,
    y_left: &[T],
    quads: &[JumpQuadrature<T>],
) -> Result<Vec<Vec<T>>> {
    if surface.is_flat() {
        return Ok(quads.iter().map(|q| vec![T::zero(); q.len()]).collect());
    }
    let base = surface.p(t, y_left)?;
    let mut shifted = y_left.to_vec();
    quads
        .iter()
        .enumerate()
        .map(|(i, q)| {
            q.nodes
                .iter()
                .map(|&z| {
                    shifted[i] = y_left[i] + z;
                    let v = surface.p(t, &shifted);
                    shifted[i] = y_left[i];
                    Ok((v? - base) / base)
                })
                .collect()
        })
        .collect()
}

/// Ingredients at grid point `k` of a simulated path.
pub fn driver_ingredients_at<T: Real>(
    surface: &OpportunitySurface<T>,
    model: &CoefficientModel<T>,
    bundle: &PathBundle<T>,
    density: &DensityPath<T>,
    k: usize,
    quads: &[JumpQuadrature<T>],
) -> Result<DriverIngredients<T>> {
    driver_ingredients(
        surface,
        model,
        bundle.times()[k],
        bundle.factor.y_left(k),
        density.zbar(k),
        quads,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{PathSimulator, SimulationConfig};

    fn specs() -> Vec<SubordinatorSpec<f64>> {
        vec![SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 4.0).unwrap()]
    }

    fn ou() -> OuParams<f64> {
        OuParams::new(vec![1.0], vec![10.0]).unwrap()
    }

    #[test]
    fn adjustment_examples() {
        let m = CoefficientModel::<f64>::constant_bs(2.0, 100.0, 0.0);
        let a = adjustment_a(&m, &[100.0], &[1.0]).unwrap();
        assert!((a[0] - 2e-6).abs() < 1e-20);
        let flat = CoefficientModel::constant_bs(0.05, 0.2, 0.05);
        assert_eq!(adjustment_a(&flat, &[80.0], &[1.0]).unwrap(), vec![0.0]);
        let bns = CoefficientModel::<f64>::bns(0.5, 0.02, 0.01);
        for &(d, y) in &[(50.0, 3.0), (120.0, 11.0)] {
            let a = adjustment_a(&bns, &[d], &[y]).unwrap();
            let b: f64 = 0.5 + 0.02 * y - 0.01;
            assert!((a[0] * d * b - bns.rho(&[y]).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn stochastic_exponential_examples() {
        assert_eq!(stochastic_exponential(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        let n: Vec<f64> = (0..5).map(|k| 0.3 * k as f64).collect();
        let e = stochastic_exponential(&n, &[0.0; 5]).unwrap();
        assert!((e[4] - 1.2f64.exp()).abs() < 1e-15);
        assert!(stochastic_exponential(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn constant_model_density_is_girsanov() {
        let m = CoefficientModel::constant_bs(2.0, 100.0, 0.0);
        let sim = PathSimulator::new(
            m.clone(),
            ou(),
            specs(),
            SimulationConfig {
                horizon: 50.0,
                step: 0.5,
                s0: vec![100.0],
                seed: 4,
            },
        )
        .unwrap();
        let surface = build_surface(&m, &ou(), &specs(), 50.0, &SurfaceMethod::default()).unwrap();
        let b = sim.simulate(0).unwrap();
        let dp = density_path(&surface, &m, &b).unwrap();
        assert_eq!(dp.z[0], 1.0);
        let theta = 0.02;
        for k in 0..b.len() {
            let w = b.brownian(k)[0];
            let exact = (-theta * w - 0.5 * theta * theta * b.times()[k]).exp();
            assert!((dp.z[k] / exact - 1.0).abs() < 1e-10);
            assert_eq!(dp.zbar(k), 1.0);
        }
    }

    #[test]
    fn flat_surface_has_zero_f_and_bbar_is_b_over_sigma() {
        let m = CoefficientModel::constant_bs(2.0, 100.0, 0.0);
        let s = build_surface(&m, &ou(), &specs(), 1.0, &SurfaceMethod::default()).unwrap();
        let q = vec![specs()[0].quadrature(1e-8, 4)];
        let ing = driver_ingredients(&s, &m, 0.5, &[10.0], 1.0, &q).unwrap();
        assert!(ing.f[0].iter().all(|&f| f == 0.0));
        assert!((ing.bbar[0] - 0.02).abs() < 1e-16);
        let bns = CoefficientModel::bns(0.5, 0.02, 0.0);
        let s = build_surface(&bns, &ou(), &specs(), 1.0, &SurfaceMethod::default()).unwrap();
        let ing = driver_ingredients(&s, &bns, 0.5, &[9.0], 1.0, &q).unwrap();
        assert!((ing.bbar[0] - (0.5 + 0.18) / 3.0).abs() < 1e-15);
        // ρ decreases in y for y > (α/β) so larger y raises P: F > 0
        assert!(ing.f[0].iter().all(|&f| f.is_finite()));
    }

    #[test]
    fn jumps_only_move_density_at_jump_points() {
        let m = CoefficientModel::bns(0.5, 0.02, 0.0);
        let sim = PathSimulator::new(
            m.clone(),
            ou(),
            specs(),
            SimulationConfig {
                horizon: 1.0,
                step: 0.05,
                s0: vec![100.0],
                seed: 9,
            },
        )
        .unwrap();
        let surface = build_surface(&m, &ou(), &specs(), 1.0, &SurfaceMethod::default()).unwrap();
        let b = sim.simulate(2).unwrap();
        let dp = density_path(&surface, &m, &b).unwrap();
        for k in 0..b.len() {
            assert!(dp.z[k] > 0.0);
            if !b.factor.is_jump_point(k) {
                assert_eq!(dp.zbar(k), 1.0);
            }
        }
    }

    #[test]
    fn closed_surface_p0_for_horizon() {
        let s = OpportunitySurface::Closed {
            rho: 4e-4,
            horizon: 40_000.0,
        };
        let p = s.p0_for_horizon(40_000.0, &[1.0]).unwrap();
        assert!((p - (-16.0f64).exp()).abs() < 1e-20);
        assert!(s.p0_for_horizon(50_000.0, &[1.0]).is_err());
    }
}
