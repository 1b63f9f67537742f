//! Regression-based backward solution of the jump BSDE
//!
//! `V(t) = H - ∫ₜᵀ g ds - ∫ₜᵀ V̄ dW - Σᵢ ∫ₜᵀ∫ Ṽᵢ Ñᵢ(ds, dz)`
//!
//! for the mean-value process of a claim, with an independent
//! density-weighted Monte-Carlo oracle for `V(0) = E[Ẑ(T) H]`.

use std::collections::VecDeque;
use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::levy::{JumpQuadrature, SubordinatorSpec, DEFAULT_TAIL_TOLERANCE};
use crate::linalg::{dot, NormalEquations};
use crate::market::{CoefficientModel, PathBundle, PathSimulator};
use crate::ngou::TimeGrid;
use crate::opportunity::{density_path, jump_sensitivity, OpportunitySurface};
use crate::scalar::{mean_and_se, McEstimate, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", bound = "T: Real")]
pub enum Payoff<T> {
    ConstantP { value: T },
    /// `e^{-rT}(S(T) - K)⁺`.
    DiscountedCall { strike: T, asset: usize },
    /// `e^{-rT}(K - S(T))⁺`.
    DiscountedPut { strike: T, asset: usize },
}

impl<T: Real> Payoff<T> {
    pub fn validate(&self, assets: usize) -> Result<()> {
        match self {
            Payoff::ConstantP { value } if !value.is_finite() => Err(config("payoff must be finite")),
            Payoff::DiscountedCall { strike, asset } | Payoff::DiscountedPut { strike, asset } => {
                if *asset >= assets {
                    return Err(config(format!("payoff asset {asset} out of range")));
                }
                if !(*strike >= T::zero() && strike.is_finite()) {
                    return Err(config("strike must be nonnegative"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `H` from terminal discounted prices.
    pub fn from_terminal(&self, discounted: &[T], rate: T, horizon: T) -> T {
        let df = (-rate * horizon).exp();
        match self {
            Payoff::ConstantP { value } => *value,
            Payoff::DiscountedCall { strike, asset } => (discounted[*asset] - *strike * df).max(T::zero()),
            Payoff::DiscountedPut { strike, asset } => (*strike * df - discounted[*asset]).max(T::zero()),
        }
    }

    pub fn evaluate(&self, bundle: &PathBundle<T>, rate: T) -> T {
        let horizon = *bundle.times().last().unwrap();
        self.from_terminal(bundle.terminal_discounted(), rate, horizon)
    }

    pub fn constant_value(&self) -> Option<T> {
        match self {
            Payoff::ConstantP { value } => Some(*value),
            _ => None,
        }
    }
}

/// Which driver to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverForm {
    /// `g = Σ V̄ᵢB̄ᵢ - Σᵢ ∫ Ṽᵢ F Z̄ λᵢνᵢ(dz)`: makes `VẐ` a martingale, so that
    /// `V(t) = E[Ẑ(T)H | F_t]/Ẑ(t)`.
    #[default]
    MeanValue,
    /// `g = -Σ V̄ᵢB̄ᵢ + Σᵢ ∫ (Ṽᵢ F Z̄ + V⁻(F Z̄)²) λᵢνᵢ(dz)`.
    AsPublished,
}

/// Estimator of the jump coefficient `Ṽᵢ(t, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpEstimator {
    /// `V(t, D, Y⁻ + z eᵢ) - V(t, D, Y⁻)` from the fitted value function.
    #[default]
    StateShift,
    /// `-V(t⁻) F(t, z) Z̄(t)`.
    Structural,
}

/// Regression basis functions of the state, written in the normalised
/// variables `u = D/D(0)` and `w = Y/Y(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case", bound = "T: Real")]
pub enum BasisTerm<T> {
    Constant,
    Price { asset: usize },
    Factor { component: usize },
    Cross { asset: usize, component: usize },
    PriceSquared { asset: usize },
    FactorSquared { component: usize },
    LogPrice { asset: usize },
    PriceCubed { asset: usize },
    /// `(u - knot)⁺`.
    Hinge { asset: usize, knot: T },
}

/// `1, u, w, uw, u², w², log u` for every asset and factor component.
pub fn default_basis<T: Real>(assets: usize, factors: usize) -> Vec<BasisTerm<T>> {
    let mut b = vec![BasisTerm::Constant];
    b.extend((0..assets).map(|asset| BasisTerm::Price { asset }));
    b.extend((0..factors).map(|component| BasisTerm::Factor { component }));
    for asset in 0..assets {
        for component in 0..factors {
            b.push(BasisTerm::Cross { asset, component });
        }
    }
    b.extend((0..assets).map(|asset| BasisTerm::PriceSquared { asset }));
    b.extend((0..factors).map(|component| BasisTerm::FactorSquared { component }));
    b.extend((0..assets).map(|asset| BasisTerm::LogPrice { asset }));
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Basis<T> {
    pub terms: Vec<BasisTerm<T>>,
    pub price_scale: Vec<T>,
    pub factor_scale: Vec<T>,
}

impl<T: Real> Basis<T> {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval_into(&self, d: &[T], y: &[T], out: &mut [T]) {
        let u = |m: usize| d[m] / self.price_scale[m];
        let w = |i: usize| y[i] / self.factor_scale[i];
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = match *term {
                BasisTerm::Constant => T::one(),
                BasisTerm::Price { asset } => u(asset),
                BasisTerm::Factor { component } => w(component),
                BasisTerm::Cross { asset, component } => u(asset) * w(component),
                BasisTerm::PriceSquared { asset } => u(asset) * u(asset),
                BasisTerm::FactorSquared { component } => w(component) * w(component),
                BasisTerm::LogPrice { asset } => u(asset).ln(),
                BasisTerm::PriceCubed { asset } => u(asset).powi(3),
                BasisTerm::Hinge { asset, knot } => (u(asset) - knot).max(T::zero()),
            };
        }
    }

    pub fn eval(&self, d: &[T], y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.len()];
        self.eval_into(d, y, &mut out);
        out
    }

    pub fn len_with(&self, knots: &[Vec<T>]) -> usize {
        self.len() + knots.iter().map(Vec::len).sum::<usize>()
    }

    /// Base terms followed by `(u_m - κ)⁺` for every knot `κ` of asset `m`.
    pub fn eval_with_knots(&self, knots: &[Vec<T>], d: &[T], y: &[T], out: &mut [T]) {
        let p = self.len();
        self.eval_into(d, y, &mut out[..p]);
        let mut j = p;
        for (m, ks) in knots.iter().enumerate() {
            let u = d[m] / self.price_scale[m];
            for &k in ks {
                out[j] = (u - k).max(T::zero());
                j += 1;
            }
        }
    }

    fn validate(&self, assets: usize, factors: usize) -> Result<()> {
        for t in &self.terms {
            let ok = match *t {
                BasisTerm::Constant => true,
                BasisTerm::Price { asset }
                | BasisTerm::PriceSquared { asset }
                | BasisTerm::LogPrice { asset }
                | BasisTerm::PriceCubed { asset }
                | BasisTerm::Hinge { asset, .. } => asset < assets,
                BasisTerm::Factor { component } | BasisTerm::FactorSquared { component } => {
                    component < factors
                }
                BasisTerm::Cross { asset, component } => asset < assets && component < factors,
            };
            if !ok {
                return Err(config(format!("basis term {t:?} refers to a missing state variable")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real")]
pub struct BsdeConfig<T> {
    /// `None` selects [`default_basis`].
    pub basis: Option<Vec<BasisTerm<T>>>,
    /// Pivot threshold of the scaled normal equations.
    pub rcond: T,
    pub inner_sweeps: usize,
    pub driver: DriverForm,
    pub jump_estimator: JumpEstimator,
    /// Simulation mesh steps per BSDE step.
    pub stride: usize,
    pub quadrature_panels: usize,
    pub tail_tolerance: T,
    /// Length of the Brownian window behind the `V̄` regression, as a
    /// fraction of the horizon. The regression target is
    /// `Ṽ(W(t_{k+m}) - W(t_k))/(t_{k+m} - t_k)` with
    /// `Ṽ = V(t_{k+1}) - V(t_{k+m}) + V̂(t_{k+m})`: pathwise values with the
    /// noise beyond `t_{k+m}` replaced by the fitted `V̂`. `0` means one step.
    /// Longer windows trade a bias of order the window for much less noise
    /// where the cross-section of states is narrow.
    pub vbar_window: T,
    /// Hinge terms `(u - κ)⁺` added at each step, with knots `κ` at interior
    /// quantiles of the simulated `u = D/D(0)`.
    pub adaptive_knots: usize,
}

impl<T: Real> Default for BsdeConfig<T> {
    fn default() -> Self {
        Self {
            basis: None,
            rcond: T::lit(1e-10),
            inner_sweeps: 2,
            driver: DriverForm::MeanValue,
            jump_estimator: JumpEstimator::StateShift,
            stride: 1,
            quadrature_panels: 8,
            tail_tolerance: T::lit(DEFAULT_TAIL_TOLERANCE),
            vbar_window: T::lit(0.1),
            adaptive_knots: 0,
        }
    }
}

/// Driver ingredients for one path at one time, in the layout used by
/// [`driver_g`]: one row per factor component, one entry per jump node.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpTerms<'a, T> {
    /// `λᵢ wₖ`: compensator weights of the quadrature nodes.
    pub weights: &'a [Vec<T>],
    /// `F(t, zₖ eᵢ)`.
    pub f: &'a [Vec<T>],
    /// `Ṽᵢ(t, zₖ)`.
    pub vtilde: &'a [Vec<T>],
}

/// The BSDE driver `g` for one path at one time.
pub fn driver_g<T: Real>(
    form: DriverForm,
    v_left: T,
    vbar: &[T],
    bbar: &[T],
    zbar: T,
    jumps: &JumpTerms<'_, T>,
) -> T {
    let diffusion = dot(vbar, bbar);
    let mut linear = T::zero();
    let mut quadratic = T::zero();
    for ((w, f), vt) in jumps.weights.iter().zip(jumps.f).zip(jumps.vtilde) {
        for k in 0..w.len() {
            let fz = f[k] * zbar;
            linear += w[k] * vt[k] * fz;
            quadratic += w[k] * fz * fz;
        }
    }
    match form {
        DriverForm::MeanValue => diffusion - linear,
        DriverForm::AsPublished => -diffusion + linear + v_left * quadratic,
    }
}

/// Cross-sectional state of all paths on the BSDE time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshots<T> {
    pub paths: usize,
    pub steps: usize,
    pub assets: usize,
    pub factors: usize,
    pub times: Vec<T>,
    discounted: Vec<T>,
    factor: Vec<T>,
    dw: Vec<T>,
    pub payoff: Vec<T>,
    /// `Ẑ(T)` per path when a surface was supplied.
    pub density: Option<Vec<T>>,
    pub s0: Vec<T>,
    pub y0: Vec<T>,
}

impl<T: Real> Snapshots<T> {
    pub fn d(&self, step: usize, path: usize) -> &[T] {
        let o = (step * self.paths + path) * self.assets;
        &self.discounted[o..o + self.assets]
    }

    pub fn y(&self, step: usize, path: usize) -> &[T] {
        let o = (step * self.paths + path) * self.factors;
        &self.factor[o..o + self.factors]
    }

    pub fn dw(&self, step: usize, path: usize) -> &[T] {
        let o = (step * self.paths + path) * self.assets;
        &self.dw[o..o + self.assets]
    }
}

/// Mesh indices (into the uniform mesh) of the BSDE time grid.
fn bsde_mesh(mesh_len: usize, stride: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mesh_len).step_by(stride.max(1)).collect();
    if *idx.last().unwrap() != mesh_len - 1 {
        idx.push(mesh_len - 1);
    }
    idx
}

struct PathRecord<T> {
    d: Vec<T>,
    y: Vec<T>,
    dw: Vec<T>,
    h: T,
    z: Option<T>,
}

fn record_path<T: Real>(
    bundle: &PathBundle<T>,
    sel: &[usize],
    payoff: &Payoff<T>,
    model: &CoefficientModel<T>,
    surface: Option<&OpportunitySurface<T>>,
) -> Result<PathRecord<T>> {
    let pos = &bundle.factor.grid.mesh_positions;
    let d = bundle.assets;
    let mut rec = PathRecord {
        d: Vec::with_capacity(sel.len() * d),
        y: Vec::new(),
        dw: Vec::with_capacity((sel.len() - 1) * d),
        h: payoff.evaluate(bundle, model.rate),
        z: None,
    };
    for (j, &m) in sel.iter().enumerate() {
        let g = pos[m];
        rec.d.extend_from_slice(bundle.d(g));
        rec.y.extend_from_slice(bundle.factor.y(g));
        if j + 1 < sel.len() {
            let g_next = pos[sel[j + 1]];
            let mut acc = vec![T::zero(); d];
            for k in g..g_next {
                for (a, &x) in acc.iter_mut().zip(bundle.dw(k)) {
                    *a += x;
                }
            }
            rec.dw.extend(acc);
        }
    }
    if let Some(s) = surface {
        rec.z = Some(density_path(s, model, bundle)?.terminal());
    }
    Ok(rec)
}

/// Simulates `count` paths starting at index `first` and keeps the BSDE
/// state; with a surface, also records `Ẑ(T)` for the oracle.
pub fn collect_snapshots<T: Real>(
    sim: &PathSimulator<T>,
    payoff: &Payoff<T>,
    surface: Option<&OpportunitySurface<T>>,
    first: u64,
    count: usize,
    stride: usize,
) -> Result<Snapshots<T>> {
    payoff.validate(sim.assets())?;
    if count == 0 {
        return Err(config("at least one path is required"));
    }
    let mesh = TimeGrid::mesh_times(sim.sim.horizon, sim.sim.step)?;
    let sel = bsde_mesh(mesh.len(), stride);
    let times: Vec<T> = sel.iter().map(|&m| mesh[m]).collect();
    let steps = sel.len() - 1;
    let (d, h) = (sim.assets(), sim.ou.dimension());
    let mut discounted = vec![T::zero(); (steps + 1) * count * d];
    let mut factor = vec![T::zero(); (steps + 1) * count * h];
    let mut dw = vec![T::zero(); steps * count * d];
    let mut payoffs = Vec::with_capacity(count);
    let mut density = surface.map(|_| Vec::with_capacity(count));
    let chunk = 1024;
    let mut start = 0;
    while start < count {
        let len = chunk.min(count - start);
        let records: Vec<PathRecord<T>> = (0..len)
            .into_par_iter()
            .map(|i| {
                let bundle = sim.simulate(first + (start + i) as u64)?;
                record_path(&bundle, &sel, payoff, &sim.model, surface)
            })
            .collect::<Result<_>>()?;
        for (i, rec) in records.into_iter().enumerate() {
            let p = start + i;
            for j in 0..=steps {
                let o = (j * count + p) * d;
                discounted[o..o + d].copy_from_slice(&rec.d[j * d..(j + 1) * d]);
                let o = (j * count + p) * h;
                factor[o..o + h].copy_from_slice(&rec.y[j * h..(j + 1) * h]);
                if j < steps {
                    let o = (j * count + p) * d;
                    dw[o..o + d].copy_from_slice(&rec.dw[j * d..(j + 1) * d]);
                }
            }
            payoffs.push(rec.h);
            if let (Some(v), Some(z)) = (density.as_mut(), rec.z) {
                v.push(z);
            }
        }
        start += len;
    }
    Ok(Snapshots {
        paths: count,
        steps,
        assets: d,
        factors: h,
        times,
        discounted,
        factor,
        dw,
        payoff: payoffs,
        density,
        s0: sim.sim.s0.clone(),
        y0: sim.ou.y0.clone(),
    })
}

/// Regression output and diagnostics of one backward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StepFit<T> {
    pub t: T,
    /// Hinge knots per asset appended to the base basis at this step.
    pub knots: Vec<Vec<T>>,
    /// `Ê[V(t_{k+1}) | state]`.
    pub continuation: Vec<T>,
    /// Fitted `V(t_k, ·)`.
    pub value: Vec<T>,
    /// Fitted `V̄ₘ(t_k, ·)`.
    pub vbar: Vec<Vec<T>>,
    pub r2_continuation: T,
    pub r2_vbar: Vec<T>,
    pub rank: usize,
    pub condition: T,
    pub mean_value: T,
    pub mean_vbar: Vec<T>,
    /// Mean and standard error of `V(t_{k+1}) - Ê[V(t_{k+1}) | state]`.
    pub residual_mean: T,
    pub residual_se: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BsdeSolution<T> {
    pub basis: Basis<T>,
    pub times: Vec<T>,
    /// One entry per step `0..K`; the terminal value fit is stored separately.
    pub fits: Vec<StepFit<T>>,
    pub terminal_knots: Vec<Vec<T>>,
    pub terminal_fit: Vec<T>,
    pub value0: McEstimate<T>,
    pub driver: DriverForm,
    pub jump_estimator: JumpEstimator,
    /// Steps after the first where the design matrix lost rank.
    pub reduced_steps: usize,
}

/// Mean-value process used by the hedge: `V(t, D, Y)` and `V̄(t, D, Y)`.
pub trait MeanValueProcess<T: Real>: Sync {
    fn value(&self, t: T, d: &[T], y: &[T]) -> T;
    fn vbar(&self, t: T, d: &[T], y: &[T], out: &mut [T]);
}

/// `V ≡ p`, `V̄ ≡ 0`: the mean-value process of a constant claim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantValue<T>(pub T);

impl<T: Real> MeanValueProcess<T> for ConstantValue<T> {
    fn value(&self, _t: T, _d: &[T], _y: &[T]) -> T {
        self.0
    }

    fn vbar(&self, _t: T, _d: &[T], _y: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
}

impl<T: Real> BsdeSolution<T> {
    fn step_of(&self, t: T) -> (usize, T) {
        let k = self.fits.len();
        let j = self.times.partition_point(|&s| s <= t).saturating_sub(1).min(k - 1);
        let w = ((t - self.times[j]) / (self.times[j + 1] - self.times[j]))
            .max(T::zero())
            .min(T::one());
        (j, w)
    }

    fn eval_at(&self, knots: &[Vec<T>], coef: &[T], d: &[T], y: &[T]) -> T {
        let mut x = vec![T::zero(); self.basis.len_with(knots)];
        self.basis.eval_with_knots(knots, d, y, &mut x);
        dot(coef, &x)
    }

    /// Writes `t,mean_V,mean_Vbar_1..,R2`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let d = self.fits.first().map(|f| f.vbar.len()).unwrap_or(0);
        let mut header = vec!["t".to_string(), "mean_V".to_string()];
        header.extend((1..=d).map(|m| format!("mean_Vbar_{m}")));
        header.push("R2".to_string());
        writeln!(out, "{}", header.join(","))?;
        for f in &self.fits {
            let mut row = vec![f.t.to_string(), f.mean_value.to_string()];
            row.extend(f.mean_vbar.iter().map(|v| v.to_string()));
            row.push(f.r2_continuation.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

impl<T: Real> MeanValueProcess<T> for BsdeSolution<T> {
    fn value(&self, t: T, d: &[T], y: &[T]) -> T {
        let (k, w) = self.step_of(t);
        let now = &self.fits[k];
        let next = match self.fits.get(k + 1) {
            Some(f) => self.eval_at(&f.knots, &f.value, d, y),
            None => self.eval_at(&self.terminal_knots, &self.terminal_fit, d, y),
        };
        (T::one() - w) * self.eval_at(&now.knots, &now.value, d, y) + w * next
    }

    fn vbar(&self, t: T, d: &[T], y: &[T], out: &mut [T]) {
        let (k, w) = self.step_of(t);
        let now = &self.fits[k];
        let next = self.fits.get(k + 1).unwrap_or(now);
        for (m, o) in out.iter_mut().enumerate() {
            *o = (T::one() - w) * self.eval_at(&now.knots, &now.vbar[m], d, y)
                + w * self.eval_at(&next.knots, &next.vbar[m], d, y);
        }
    }
}

/// Hinge knots at `count` interior quantiles of `values`, strictly inside
/// their range and at least `1e-9` of the range apart.
fn quantile_knots<T: Real>(mut values: Vec<T>, count: usize) -> Vec<T> {
    if count == 0 || values.is_empty() {
        return Vec::new();
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let (lo, hi) = (values[0], values[values.len() - 1]);
    let tiny = (hi - lo) * T::lit(1e-9);
    if !(hi - lo > T::lit(1e-12) * hi.abs().max(T::one())) {
        return Vec::new();
    }
    let mut knots: Vec<T> = Vec::with_capacity(count);
    for j in 1..=count {
        let q = values[j * values.len() / (count + 1)];
        let fresh = knots.last().is_none_or(|&last| q > last + tiny);
        if q > lo + tiny && q < hi - tiny && fresh {
            knots.push(q);
        }
    }
    knots
}

/// Backward induction on the snapshot grid.
pub fn solve_backward<T: Real>(
    snap: &Snapshots<T>,
    surface: &OpportunitySurface<T>,
    model: &CoefficientModel<T>,
    specs: &[SubordinatorSpec<T>],
    cfg: &BsdeConfig<T>,
) -> Result<BsdeSolution<T>> {
    let (n, d, h) = (snap.paths, snap.assets, snap.factors);
    if n < 2 {
        return Err(config("the backward solver needs at least two paths"));
    }
    if specs.len() != h {
        return Err(config("one subordinator per factor component is required"));
    }
    let basis = Basis {
        terms: cfg
            .basis
            .clone()
            .unwrap_or_else(|| default_basis(d, model.factors().map_or(0, |_| h))),
        price_scale: snap.s0.clone(),
        factor_scale: snap.y0.clone(),
    };
    basis.validate(d, h)?;
    let quads: Vec<JumpQuadrature<T>> = specs
        .iter()
        .map(|s| s.quadrature(cfg.tail_tolerance, cfg.quadrature_panels))
        .collect();
    let weights: Vec<Vec<T>> = specs
        .iter()
        .zip(&quads)
        .map(|(s, q)| q.weights.iter().map(|&w| w * s.time_scale).collect())
        .collect();
    let flat = surface.is_flat();
    let bbar: Vec<Vec<T>> = if model.has_constant_rho() {
        vec![model.local(snap.y(0, 0))?.theta; 1]
    } else {
        Vec::new()
    };

    let knots_at = |step: usize| -> Vec<Vec<T>> {
        (0..d)
            .map(|m| {
                let u = (0..n).map(|i| snap.d(step, i)[m] / basis.price_scale[m]).collect();
                quantile_knots(u, cfg.adaptive_knots)
            })
            .collect()
    };
    let design = |step: usize, knots: &[Vec<T>]| -> (usize, Vec<T>) {
        let p = basis.len_with(knots);
        let mut x = vec![T::zero(); n * p];
        x.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
            basis.eval_with_knots(knots, snap.d(step, i), snap.y(step, i), row);
        });
        (p, x)
    };
    let fit = |p: usize, x: &[T], targets: &[Vec<T>]| {
        let mut ne = NormalEquations::new(p, targets.len());
        let mut ys = vec![T::zero(); targets.len()];
        for i in 0..n {
            for (y, t) in ys.iter_mut().zip(targets) {
                *y = t[i];
            }
            ne.add_row(&x[i * p..(i + 1) * p], &ys);
        }
        ne.solve(cfg.rcond)
    };

    let mut v: Vec<T> = snap.payoff.clone();
    let window_steps = if cfg.vbar_window > T::zero() {
        (cfg.vbar_window * T::from_usize(snap.steps).unwrap())
            .round()
            .to_usize()
            .unwrap_or(1)
            .max(1)
    } else {
        1
    };
    // pathwise and fitted V at t_{k+1}, ..., t_{k+m}, and Σ ΔW over the window
    let mut path_history: VecDeque<Vec<T>> = VecDeque::from([snap.payoff.clone()]);
    let mut fit_history: VecDeque<Vec<T>> = VecDeque::from([snap.payoff.clone()]);
    let mut window_dw = vec![T::zero(); n * d];
    let mut fits = Vec::with_capacity(snap.steps);
    let mut reduced_steps = 0;

    let terminal_knots = knots_at(snap.steps);
    let (p_term, x_term) = design(snap.steps, &terminal_knots);
    let terminal_fit = fit(p_term, &x_term, std::slice::from_ref(&v)).coefficients.remove(0);
    drop(x_term);

    for k in (0..snap.steps).rev() {
        let t = snap.times[k];
        let dt = snap.times[k + 1] - t;
        let knots = knots_at(k);
        let (p, x) = design(k, &knots);
        let row = |i: usize| &x[i * p..(i + 1) * p];
        let cont_fit = fit(p, &x, std::slice::from_ref(&v));
        let cont = cont_fit.coefficients[0].clone();
        if k > 0 && cont_fit.is_reduced() {
            reduced_steps += 1;
        }
        let resid: Vec<T> = (0..n).map(|i| v[i] - dot(&cont, row(i))).collect();
        let (residual_mean, residual_se) = mean_and_se(&resid);
        for i in 0..n {
            for m in 0..d {
                window_dw[i * d + m] += snap.dw(k, i)[m];
                if snap.steps - k > window_steps {
                    window_dw[i * d + m] -= snap.dw(k + window_steps, i)[m];
                }
            }
        }
        // V(t_{k+1}) with the pathwise noise beyond t_{k+m} replaced by the fit
        let span = snap.times[k + path_history.len()] - t;
        let (far_path, far_fit) = (path_history.back().unwrap(), fit_history.back().unwrap());
        let smoothed: Vec<T> = (0..n).map(|i| v[i] - far_path[i] + far_fit[i]).collect();
        let smoothed_cont = fit(p, &x, std::slice::from_ref(&smoothed)).coefficients.remove(0);
        let vbar_targets: Vec<Vec<T>> = (0..d)
            .map(|m| {
                (0..n)
                    .map(|i| (smoothed[i] - dot(&smoothed_cont, row(i))) * window_dw[i * d + m] / span)
                    .collect()
            })
            .collect();
        let vbar_fit = fit(p, &x, &vbar_targets);
        let vbar_coef = vbar_fit.coefficients.clone();

        // F(t_k, ·) per path; zero when P does not depend on y
        let f_all: Vec<Vec<Vec<T>>> = if flat {
            Vec::new()
        } else {
            (0..n)
                .into_par_iter()
                .map(|i| jump_sensitivity(surface, t, snap.y(k, i), &quads))
                .collect::<Result<_>>()?
        };
        let zero_f: Vec<Vec<T>> = quads.iter().map(|q| vec![T::zero(); q.len()]).collect();

        let mut value_coef = cont.clone();
        let mut v_now = v.clone();
        for _ in 0..cfg.inner_sweeps.max(1) {
            let coef = value_coef.clone();
            v_now = (0..n)
                .into_par_iter()
                .map(|i| -> Result<T> {
                    let (di, yi) = (snap.d(k, i), snap.y(k, i));
                    let xi = row(i);
                    let v_left = dot(&coef, xi);
                    let vbar: Vec<T> = vbar_coef.iter().map(|c| dot(c, xi)).collect();
                    let local_bbar;
                    let bb: &[T] = if let Some(b) = bbar.first() {
                        b
                    } else {
                        local_bbar = model.local(yi)?.theta;
                        &local_bbar
                    };
                    let f = if flat { &zero_f } else { &f_all[i] };
                    let vtilde: Vec<Vec<T>> = if flat {
                        zero_f.clone()
                    } else {
                        match cfg.jump_estimator {
                            JumpEstimator::Structural => {
                                f.iter().map(|row| row.iter().map(|&fz| -v_left * fz).collect()).collect()
                            }
                            JumpEstimator::StateShift => {
                                let mut shifted = yi.to_vec();
                                let mut row_x = vec![T::zero(); p];
                                quads
                                    .iter()
                                    .enumerate()
                                    .map(|(c, q)| {
                                        q.nodes
                                            .iter()
                                            .map(|&z| {
                                                shifted[c] = yi[c] + z;
                                                basis.eval_with_knots(&knots, di, &shifted, &mut row_x);
                                                shifted[c] = yi[c];
                                                dot(&coef, &row_x) - v_left
                                            })
                                            .collect()
                                    })
                                    .collect()
                            }
                        }
                    };
                    let jt = JumpTerms {
                        weights: &weights,
                        f,
                        vtilde: &vtilde,
                    };
                    // mesh points are almost surely not jump times: Z̄ = 1
                    let g = driver_g(cfg.driver, v_left, &vbar, bb, T::one(), &jt);
                    Ok(v[i] - g * dt)
                })
                .collect::<Result<_>>()?;
            value_coef = fit(p, &x, std::slice::from_ref(&v_now)).coefficients.remove(0);
        }
        let mean_vbar: Vec<T> = (0..d)
            .map(|m| (0..n).map(|i| dot(&vbar_coef[m], row(i))).sum::<T>() / T::from_usize(n).unwrap())
            .collect();
        let v_fitted: Vec<T> = (0..n).map(|i| dot(&value_coef, row(i))).collect();
        fits.push(StepFit {
            t,
            knots,
            continuation: cont,
            value: value_coef,
            vbar: vbar_coef,
            r2_continuation: cont_fit.r2[0],
            r2_vbar: vbar_fit.r2.clone(),
            rank: cont_fit.rank,
            condition: cont_fit.condition,
            mean_value: mean_and_se(&v_now).0,
            mean_vbar,
            residual_mean,
            residual_se,
        });
        path_history.push_front(v_now.clone());
        fit_history.push_front(v_fitted);
        if path_history.len() > window_steps {
            path_history.pop_back();
            fit_history.pop_back();
        }
        v = v_now;
    }
    fits.reverse();
    if reduced_steps > 0 {
        warn!("regression basis reduced at {reduced_steps} of {} steps", snap.steps);
    }
    let value0 = McEstimate::from_samples(&v);
    info!("BSDE V(0) = {} (SE {})", value0.mean, value0.se);
    Ok(BsdeSolution {
        basis,
        times: snap.times.clone(),
        fits,
        terminal_knots,
        terminal_fit,
        value0,
        driver: cfg.driver,
        jump_estimator: cfg.jump_estimator,
        reduced_steps,
    })
}

/// `E[Ẑ(T) H]` with its standard error.
pub fn mc_value_at_zero<T: Real>(payoffs: &[T], densities: &[T]) -> Result<McEstimate<T>> {
    if payoffs.len() != densities.len() || payoffs.is_empty() {
        return Err(config("payoff and density samples must be nonempty and of equal length"));
    }
    let xs: Vec<T> = payoffs.iter().zip(densities).map(|(&h, &z)| h * z).collect();
    Ok(McEstimate::from_samples(&xs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn driver_zero_when_everything_vanishes() {
        let w = vec![vec![1.0, 2.0]];
        let zero = vec![vec![0.0, 0.0]];
        let jt = JumpTerms {
            weights: &w,
            f: &zero,
            vtilde: &zero,
        };
        for form in [DriverForm::MeanValue, DriverForm::AsPublished] {
            assert_eq!(driver_g(form, 3.0, &[0.0], &[0.7], 1.0, &jt), 0.0);
        }
    }

    #[test]
    fn driver_diffusion_term() {
        let w = vec![vec![1.0]];
        let zero = vec![vec![0.0]];
        let jt = JumpTerms {
            weights: &w,
            f: &zero,
            vtilde: &zero,
        };
        // ConstantBs α = 2, β = 100: B̄ = 0.02
        let g: f64 = driver_g(DriverForm::AsPublished, 0.0, &[5.0], &[0.02], 1.0, &jt);
        assert!((g + 0.1).abs() < 1e-15);
        let g: f64 = driver_g(DriverForm::MeanValue, 0.0, &[5.0], &[0.02], 1.0, &jt);
        assert!((g - 0.1).abs() < 1e-15);
    }

    #[test]
    fn driver_atom_integral() {
        // table measure {(1, 2)}, λ = 1: weight 2 at z = 1
        let w = vec![vec![2.0]];
        let (f0, v1, v) = (0.3, 1.5, 4.0);
        let f = vec![vec![f0]];
        let vt = vec![vec![v1]];
        let jt = JumpTerms {
            weights: &w,
            f: &f,
            vtilde: &vt,
        };
        let g: f64 = driver_g(DriverForm::AsPublished, v, &[0.0], &[0.0], 1.0, &jt);
        assert!((g - 2.0 * (v1 * f0 + v * f0 * f0)).abs() < 1e-14);
        let g: f64 = driver_g(DriverForm::MeanValue, v, &[0.0], &[0.0], 1.0, &jt);
        assert!((g + 2.0 * v1 * f0).abs() < 1e-14);
    }

    #[test]
    fn payoffs() {
        let call = Payoff::DiscountedCall { strike: 100.0, asset: 0 };
        let put = Payoff::DiscountedPut { strike: 100.0, asset: 0 };
        let df = (-0.05f64).exp();
        assert!((call.from_terminal(&[110.0], 0.05, 1.0) - (110.0 - 100.0 * df)).abs() < 1e-12);
        assert_eq!(put.from_terminal(&[110.0], 0.05, 1.0), 0.0);
        assert_eq!(Payoff::ConstantP { value: 3e4 }.from_terminal(&[1.0], 0.0, 1.0), 3e4);
        assert!(call.validate(1).is_ok());
        assert!(Payoff::DiscountedCall { strike: 1.0, asset: 2 }.validate(1).is_err());
    }

    #[test]
    fn oracle_examples() {
        let est = mc_value_at_zero(&[0.0; 4], &[0.5, 1.5, 2.0, 0.0]).unwrap();
        assert_eq!(est.mean, 0.0);
        let est = mc_value_at_zero(&[7.0; 3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(est.mean, 7.0);
        assert!(mc_value_at_zero::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn basis_evaluation() {
        let b = Basis {
            terms: default_basis::<f64>(1, 1),
            price_scale: vec![100.0],
            factor_scale: vec![10.0],
        };
        let x = b.eval(&[200.0], &[5.0]);
        assert_eq!(x, vec![1.0, 2.0, 0.5, 1.0, 4.0, 0.25, 2f64.ln()]);
        assert!(b.validate(1, 1).is_ok());
        assert!(b.validate(1, 0).is_err());
    }

    #[test]
    fn constant_value_process() {
        let c = ConstantValue(3.0);
        let mut out = [1.0, 2.0];
        c.vbar(0.0, &[1.0, 1.0], &[1.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(c.value(0.3, &[1.0, 1.0], &[1.0]), 3.0);
    }
}
