//! Coefficient models `b(y)`, `σ(y)`, `r` and simulation of stock and
//! discounted price paths through the explicit log-solution.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::levy::{sample_jump_path_with, SubordinatorSpec};
use crate::linalg::{spd_inverse, Matrix};
use crate::ngou::{evolve, FactorPath, OuParams, TimeGrid};
use crate::rng::{path_rng, Stream};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", bound = "T: Real")]
pub enum ModelKind<T> {
    /// `b ≡ α`, `σ ≡ β`, one asset; the factor is ignored.
    ConstantBs { alpha: T, beta: T },
    /// `b(y) = α + β y`, `σ(y) = √y`, one asset driven by one factor.
    Bns { alpha: T, beta: T },
    /// `d = h` assets with `bₘ(y) = αₘ + βₘ yₘ` and `σ(y) = diag(√yₘ)`.
    DiagonalBns { alpha: Vec<T>, beta: Vec<T> },
    /// One asset, one factor, piecewise-linear `b` and `σ` on sorted knots
    /// with flat extrapolation.
    Tabulated {
        knots: Vec<T>,
        drift: Vec<T>,
        vol: Vec<T>,
    },
}

/// Declared constants of the growth and derivative bounds. Missing entries
/// are reported as implied values instead of being checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GrowthConstants<T> {
    pub a_b: Option<T>,
    pub b_b: Option<T>,
    pub a_sigma: Option<T>,
    pub b_sigma_growth: Option<T>,
    pub b_sigma: Option<T>,
    pub abar_b: Option<T>,
    pub bbar_b: Option<T>,
    pub abar_sigma: Option<T>,
    pub bbar_sigma: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CoefficientModel<T> {
    pub kind: ModelKind<T>,
    pub rate: T,
    #[serde(default)]
    pub constants: Option<GrowthConstants<T>>,
}

/// Everything derived from `(b, σ, r)` at one factor value.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCoefficients<T> {
    pub drift: Vec<T>,
    pub vol: Matrix<T>,
    pub cov_inv: Matrix<T>,
    /// `B(y) = b(y) - r`.
    pub excess: Vec<T>,
    /// `(σσ')⁻¹ B`.
    pub kappa: Vec<T>,
    /// `σ'(σσ')⁻¹ B`, the market price of risk `B̄`.
    pub theta: Vec<T>,
    /// `B'(σσ')⁻¹B`.
    pub rho: T,
    pub condition: T,
}

impl<T: Real> LocalCoefficients<T> {
    pub fn new(d: usize) -> Self {
        Self {
            drift: vec![T::zero(); d],
            vol: Matrix::zeros(d, d),
            cov_inv: Matrix::zeros(d, d),
            excess: vec![T::zero(); d],
            kappa: vec![T::zero(); d],
            theta: vec![T::zero(); d],
            rho: T::zero(),
            condition: T::one(),
        }
    }
}

impl<T: Real> CoefficientModel<T> {
    pub fn constant_bs(alpha: T, beta: T, rate: T) -> Self {
        Self {
            kind: ModelKind::ConstantBs { alpha, beta },
            rate,
            constants: None,
        }
    }

    pub fn bns(alpha: T, beta: T, rate: T) -> Self {
        Self {
            kind: ModelKind::Bns { alpha, beta },
            rate,
            constants: None,
        }
    }

    pub fn assets(&self) -> usize {
        match &self.kind {
            ModelKind::DiagonalBns { alpha, .. } => alpha.len(),
            _ => 1,
        }
    }

    /// Required factor dimension, `None` when any dimension is accepted.
    pub fn factors(&self) -> Option<usize> {
        match &self.kind {
            ModelKind::ConstantBs { .. } => None,
            ModelKind::Bns { .. } | ModelKind::Tabulated { .. } => Some(1),
            ModelKind::DiagonalBns { alpha, .. } => Some(alpha.len()),
        }
    }

    /// True when `ρ` does not depend on the factor.
    pub fn has_constant_rho(&self) -> bool {
        matches!(self.kind, ModelKind::ConstantBs { .. })
    }

    pub fn validate(&self, factor_dim: usize) -> Result<()> {
        if !(self.rate >= T::zero() && self.rate.is_finite()) {
            return Err(config("interest rate must be nonnegative"));
        }
        if let Some(h) = self.factors() {
            if h != factor_dim {
                return Err(config(format!(
                    "model needs {h} factor(s) but the OU process has {factor_dim}"
                )));
            }
        }
        match &self.kind {
            ModelKind::ConstantBs { alpha, beta } => {
                if !alpha.is_finite() || !(*beta > T::zero() && beta.is_finite()) {
                    return Err(config("constant model needs finite alpha and beta > 0"));
                }
            }
            ModelKind::Bns { alpha, beta } => {
                if !alpha.is_finite() || !beta.is_finite() {
                    return Err(config("BNS parameters must be finite"));
                }
            }
            ModelKind::DiagonalBns { alpha, beta } => {
                if alpha.is_empty() || alpha.len() != beta.len() {
                    return Err(config("diagonal BNS needs equal, nonzero alpha/beta lengths"));
                }
            }
            ModelKind::Tabulated { knots, drift, vol } => {
                if knots.is_empty() || knots.len() != drift.len() || knots.len() != vol.len() {
                    return Err(config("tabulated model needs equal, nonzero table lengths"));
                }
                if knots.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(config("tabulated knots must be strictly increasing"));
                }
                if vol.iter().any(|&v| !(v > T::zero())) {
                    return Err(config("tabulated volatilities must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn drift(&self, y: &[T]) -> Vec<T> {
        let mut b = vec![T::zero(); self.assets()];
        self.drift_into(y, &mut b);
        b
    }

    fn drift_into(&self, y: &[T], out: &mut [T]) {
        match &self.kind {
            ModelKind::ConstantBs { alpha, .. } => out[0] = *alpha,
            ModelKind::Bns { alpha, beta } => out[0] = *alpha + *beta * y[0],
            ModelKind::DiagonalBns { alpha, beta } => {
                for m in 0..alpha.len() {
                    out[m] = alpha[m] + beta[m] * y[m];
                }
            }
            ModelKind::Tabulated { knots, drift, .. } => out[0] = interpolate(knots, drift, y[0]),
        }
    }

    pub fn vol(&self, y: &[T]) -> Matrix<T> {
        let mut s = Matrix::zeros(self.assets(), self.assets());
        self.vol_into(y, &mut s);
        s
    }

    fn vol_into(&self, y: &[T], out: &mut Matrix<T>) {
        match &self.kind {
            ModelKind::ConstantBs { beta, .. } => out[(0, 0)] = *beta,
            ModelKind::Bns { .. } => out[(0, 0)] = y[0].max(T::zero()).sqrt(),
            ModelKind::DiagonalBns { .. } => {
                for (m, &ym) in y.iter().enumerate().take(out.rows()) {
                    out[(m, m)] = ym.max(T::zero()).sqrt();
                }
            }
            ModelKind::Tabulated { knots, vol, .. } => out[(0, 0)] = interpolate(knots, vol, y[0]),
        }
    }

    /// `B(y) = (b₁(y) - r, …, b_d(y) - r)'`.
    pub fn excess_drift(&self, y: &[T]) -> Vec<T> {
        self.drift(y).into_iter().map(|b| b - self.rate).collect()
    }

    /// All derived quantities at `y`, written into reusable buffers.
    pub fn local_into(&self, y: &[T], out: &mut LocalCoefficients<T>) -> Result<()> {
        self.drift_into(y, &mut out.drift);
        self.vol_into(y, &mut out.vol);
        let d = self.assets();
        for m in 0..d {
            out.excess[m] = out.drift[m] - self.rate;
        }
        if d == 1 {
            let s = out.vol[(0, 0)];
            let c = s * s;
            if !(c > T::zero()) || !c.is_finite() {
                return Err(Error::Singular {
                    context: format!("sigma sigma' at y = {:?}", y.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
                    condition: f64::INFINITY,
                });
            }
            out.cov_inv[(0, 0)] = T::one() / c;
            out.kappa[0] = out.excess[0] / c;
            out.theta[0] = out.excess[0] / s;
            out.rho = out.theta[0] * out.theta[0];
            out.condition = T::one();
            return Ok(());
        }
        let cov = out.vol.gram_outer();
        let (inv, cond) = spd_inverse(&cov, "sigma sigma'").map_err(|e| match e {
            Error::Singular { context, condition } => Error::Singular {
                context: format!("{context} at y = {:?}", y.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
                condition,
            },
            other => other,
        })?;
        out.cov_inv = inv;
        out.condition = cond;
        out.cov_inv.mat_vec_into(&out.excess, &mut out.kappa);
        out.vol.transpose_vec_into(&out.kappa, &mut out.theta);
        out.rho = out
            .excess
            .iter()
            .zip(&out.kappa)
            .map(|(&b, &k)| b * k)
            .sum::<T>()
            .max(T::zero());
        Ok(())
    }

    pub fn local(&self, y: &[T]) -> Result<LocalCoefficients<T>> {
        let mut out = LocalCoefficients::new(self.assets());
        self.local_into(y, &mut out)?;
        Ok(out)
    }

    /// `ρ(y) = B'(σσ')⁻¹B ≥ 0`.
    pub fn rho(&self, y: &[T]) -> Result<T> {
        match &self.kind {
            ModelKind::ConstantBs { alpha, beta } => {
                let th = (*alpha - self.rate) / *beta;
                Ok(th * th)
            }
            ModelKind::Bns { alpha, beta } => {
                if !(y[0] > T::zero()) {
                    return Err(Error::Singular {
                        context: format!("sigma sigma' at y = {}", y[0]),
                        condition: f64::INFINITY,
                    });
                }
                let b = *alpha + *beta * y[0] - self.rate;
                Ok(b * b / y[0])
            }
            _ => Ok(self.local(y)?.rho),
        }
    }

    /// `ρ` for constant-coefficient models.
    pub fn constant_rho(&self) -> Option<T> {
        if self.has_constant_rho() {
            self.rho(&[T::one()]).ok()
        } else {
            None
        }
    }

    /// Constants that the built-in models satisfy on all of `(0, ∞)^h`.
    pub fn builtin_constants(&self) -> GrowthConstants<T> {
        match &self.kind {
            ModelKind::ConstantBs { alpha, beta } => GrowthConstants {
                a_b: Some(alpha.abs()),
                b_b: Some(T::zero()),
                a_sigma: Some(*beta * *beta),
                b_sigma_growth: Some(T::zero()),
                abar_b: Some(T::zero()),
                bbar_b: Some(T::zero()),
                abar_sigma: Some(T::zero()),
                bbar_sigma: Some(T::zero()),
                ..Default::default()
            },
            ModelKind::Bns { alpha, beta } => GrowthConstants {
                a_b: Some(alpha.abs()),
                b_b: Some(beta.abs()),
                a_sigma: Some(T::zero()),
                b_sigma_growth: Some(T::one()),
                b_sigma: Some(T::one()),
                abar_b: Some(beta.abs()),
                bbar_b: Some(T::zero()),
                ..Default::default()
            },
            ModelKind::DiagonalBns { alpha, beta } => GrowthConstants {
                a_b: Some(alpha.iter().fold(T::zero(), |m, a| m.max(a.abs()))),
                b_b: Some(beta.iter().fold(T::zero(), |m, b| m.max(b.abs()))),
                a_sigma: Some(T::zero()),
                b_sigma_growth: Some(T::one()),
                abar_b: Some(beta.iter().fold(T::zero(), |m, b| m.max(b.abs()))),
                bbar_b: Some(T::zero()),
                ..Default::default()
            },
            ModelKind::Tabulated { .. } => GrowthConstants::default(),
        }
    }
}

fn interpolate<T: Real>(xs: &[T], ys: &[T], x: T) -> T {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|&k| k <= x) - 1;
    let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
    ys[j] + w * (ys[j + 1] - ys[j])
}

fn max_abs<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConditionCheck<T> {
    pub name: String,
    /// Smallest `rhs - lhs` over the samples; `None` when the bound has no
    /// declared constants.
    pub worst_margin: Option<T>,
    /// Factor value attaining the worst margin.
    pub worst_y: Vec<T>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConditionReport<T> {
    pub checks: Vec<ConditionCheck<T>>,
    /// Largest `b_σ` compatible with the samples, `min 1/(‖(σσ')⁻¹‖ ‖y‖)`.
    pub implied_b_sigma: T,
    /// Largest finite-difference derivative norm of `(σσ')⁻¹` seen.
    pub max_cov_inv_derivative: T,
    pub max_condition: T,
    pub singular_samples: usize,
}

impl<T: Real> ConditionReport<T> {
    pub fn all_satisfied(&self) -> bool {
        self.singular_samples == 0 && self.checks.iter().all(|c| c.satisfied)
    }
}

/// Evaluates the growth and derivative bounds at the sampled factor values,
/// with derivatives by central differences of relative step `1e-5`.
pub fn check_conditions<T: Real>(model: &CoefficientModel<T>, samples: &[Vec<T>]) -> ConditionReport<T> {
    let constants = model
        .constants
        .clone()
        .unwrap_or_else(|| model.builtin_constants());
    let names = [
        "drift growth",
        "covariance growth",
        "inverse covariance bound",
        "drift derivative",
        "inverse covariance derivative",
    ];
    let mut checks: Vec<ConditionCheck<T>> = names
        .iter()
        .map(|n| ConditionCheck {
            name: n.to_string(),
            worst_margin: None,
            worst_y: Vec::new(),
            satisfied: true,
        })
        .collect();
    let mut implied_b_sigma = T::infinity();
    let mut max_deriv = T::zero();
    let mut max_condition = T::zero();
    let mut singular = 0;
    let fd = T::lit(1e-5);

    let record = |check: &mut ConditionCheck<T>, rhs: T, lhs: T, y: &[T]| {
        let margin = rhs - lhs;
        if check.worst_margin.is_none_or(|m| margin < m) {
            check.worst_margin = Some(margin);
            check.worst_y = y.to_vec();
        }
        // relative slack absorbs rounding and finite-difference noise
        if !(margin >= -T::lit(1e-6) * (T::one() + rhs.abs() + lhs.abs())) {
            check.satisfied = false;
        }
    };

    for y in samples {
        let ny = max_abs(y);
        let local = match model.local(y) {
            Ok(l) => l,
            Err(_) => {
                singular += 1;
                checks[2].satisfied = false;
                continue;
            }
        };
        max_condition = max_condition.max(local.condition);
        if let (Some(a), Some(b)) = (constants.a_b, constants.b_b) {
            record(&mut checks[0], a + b * ny, max_abs(&local.drift), y);
        }
        let cov = local.vol.gram_outer();
        if let (Some(a), Some(b)) = (constants.a_sigma, constants.b_sigma_growth) {
            record(&mut checks[1], a + b * ny, cov.max_abs(), y);
        }
        let inv_norm = local.cov_inv.max_abs();
        if ny > T::zero() && inv_norm > T::zero() {
            implied_b_sigma = implied_b_sigma.min(T::one() / (inv_norm * ny));
        }
        if let Some(bs) = constants.b_sigma {
            record(&mut checks[2], T::one() / (bs * ny), inv_norm, y);
        }
        for i in 0..y.len() {
            let h = fd * y[i].abs().max(T::lit(1e-8));
            let mut up = y.clone();
            let mut dn = y.clone();
            up[i] += h;
            dn[i] -= h;
            let db: Vec<T> = model
                .drift(&up)
                .iter()
                .zip(model.drift(&dn))
                .map(|(&u, d)| (u - d) / (h + h))
                .collect();
            if let (Some(a), Some(b)) = (constants.abar_b, constants.bbar_b) {
                record(&mut checks[3], a + b * ny, max_abs(&db), y);
            }
            if let (Ok(lu), Ok(ld)) = (model.local(&up), model.local(&dn)) {
                let dinv = lu
                    .cov_inv
                    .as_slice()
                    .iter()
                    .zip(ld.cov_inv.as_slice())
                    .fold(T::zero(), |m, (&u, &d)| m.max(((u - d) / (h + h)).abs()));
                max_deriv = max_deriv.max(dinv);
                if let (Some(a), Some(b)) = (constants.abar_sigma, constants.bbar_sigma) {
                    record(&mut checks[4], a + b * ny, dinv, y);
                }
            }
        }
    }
    for c in &checks {
        if !c.satisfied {
            warn!("coefficient condition violated: {}", c.name);
        }
    }
    if singular > 0 {
        warn!("sigma sigma' singular at {singular} sampled factor values");
    }
    ConditionReport {
        checks,
        implied_b_sigma,
        max_cov_inv_derivative: max_deriv,
        max_condition,
        singular_samples: singular,
    }
}

/// One simulated scenario on the merged grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle<T> {
    pub seed: u64,
    pub index: u64,
    pub factor: FactorPath<T>,
    /// Brownian increments per grid step, `d` per step, flat.
    pub dw: Vec<T>,
    /// `S(t_k)`, `d` per point, flat.
    pub stock: Vec<T>,
    /// `D(t_k) = e^{-r t_k} S(t_k)`, `d` per point, flat.
    pub discounted: Vec<T>,
    pub assets: usize,
}

impl<T: Real> PathBundle<T> {
    pub fn len(&self) -> usize {
        self.factor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factor.is_empty()
    }

    pub fn times(&self) -> &[T] {
        self.factor.times()
    }

    pub fn dw(&self, k: usize) -> &[T] {
        &self.dw[k * self.assets..(k + 1) * self.assets]
    }

    pub fn s(&self, k: usize) -> &[T] {
        &self.stock[k * self.assets..(k + 1) * self.assets]
    }

    pub fn d(&self, k: usize) -> &[T] {
        &self.discounted[k * self.assets..(k + 1) * self.assets]
    }

    /// Brownian motion `W(t_k)`.
    pub fn brownian(&self, k: usize) -> Vec<T> {
        let mut w = vec![T::zero(); self.assets];
        for j in 0..k {
            for (a, &x) in w.iter_mut().zip(self.dw(j)) {
                *a += x;
            }
        }
        w
    }

    pub fn terminal_discounted(&self) -> &[T] {
        self.d(self.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SimulationConfig<T> {
    pub horizon: T,
    pub step: T,
    pub s0: Vec<T>,
    pub seed: u64,
}

/// Immutable, shareable path generator.
#[derive(Debug, Clone)]
pub struct PathSimulator<T> {
    pub model: CoefficientModel<T>,
    pub ou: OuParams<T>,
    pub specs: Vec<SubordinatorSpec<T>>,
    pub sim: SimulationConfig<T>,
}

impl<T: Real> PathSimulator<T> {
    pub fn new(
        model: CoefficientModel<T>,
        ou: OuParams<T>,
        specs: Vec<SubordinatorSpec<T>>,
        sim: SimulationConfig<T>,
    ) -> Result<Self> {
        model.validate(ou.dimension())?;
        if specs.len() != ou.dimension() {
            return Err(config("one subordinator per factor component is required"));
        }
        for s in &specs {
            s.validate()?;
        }
        if sim.s0.len() != model.assets() || sim.s0.iter().any(|&s| !(s > T::zero() && s.is_finite())) {
            return Err(config("initial prices must be positive, one per asset"));
        }
        if !(sim.horizon > T::zero()) || !(sim.step > T::zero()) {
            return Err(config("horizon and step must be positive"));
        }
        Ok(Self {
            model,
            ou,
            specs,
            sim,
        })
    }

    pub fn assets(&self) -> usize {
        self.model.assets()
    }

    /// Path `index`; identical for a given seed regardless of how many other
    /// paths are generated.
    pub fn simulate(&self, index: u64) -> Result<PathBundle<T>> {
        let seed = self.sim.seed;
        let mut jr = path_rng(seed, index, Stream::Jumps);
        let jumps = sample_jump_path_with(&self.specs, self.sim.horizon, &mut jr)?;
        let grid = TimeGrid::merged(self.sim.horizon, self.sim.step, &jumps)?;
        let factor = evolve(&self.ou, &jumps, grid)?;
        let dw = self.brownian_increments(&factor, index);
        self.assemble(seed, index, factor, dw)
    }

    /// Mesh increments come from their own stream and are split at jump times
    /// by Brownian bridges, so `W` on the mesh is independent of the jumps.
    fn brownian_increments(&self, factor: &FactorPath<T>, index: u64) -> Vec<T> {
        let d = self.assets();
        let times = factor.times();
        let mesh = &factor.grid.mesh_positions;
        let mut wr = path_rng(self.sim.seed, index, Stream::Brownian);
        let mut br = path_rng(self.sim.seed, index, Stream::Bridge);
        let mut dw = vec![T::zero(); (times.len().saturating_sub(1)) * d];
        let mut total = vec![T::zero(); d];
        for w in mesh.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = times[b] - times[a];
            let sq = len.sqrt();
            for x in total.iter_mut() {
                *x = T::standard_normal(&mut wr) * sq;
            }
            // remaining increment and time, consumed left to right
            let mut rem_t = len;
            for k in a..b {
                let dt = times[k + 1] - times[k];
                for m in 0..d {
                    let inc = if k + 1 == b {
                        total[m]
                    } else {
                        let frac = dt / rem_t;
                        let var = dt * (rem_t - dt) / rem_t;
                        total[m] * frac + var.max(T::zero()).sqrt() * T::standard_normal(&mut br)
                    };
                    dw[k * d + m] = inc;
                    total[m] -= inc;
                }
                rem_t -= dt;
            }
        }
        dw
    }

    /// Builds prices from a factor path and given Brownian increments.
    /// Coefficients on `(t_k, t_{k+1}]` are those at `Y(t_k)`.
    pub fn assemble(
        &self,
        seed: u64,
        index: u64,
        factor: FactorPath<T>,
        dw: Vec<T>,
    ) -> Result<PathBundle<T>> {
        let d = self.assets();
        let n = factor.len();
        if dw.len() != (n - 1) * d {
            return Err(config("Brownian increments do not match the grid"));
        }
        let times = factor.times().to_vec();
        let mut log_s: Vec<T> = self.sim.s0.iter().map(|s| s.ln()).collect();
        let mut stock = Vec::with_capacity(n * d);
        let mut discounted = Vec::with_capacity(n * d);
        stock.extend_from_slice(&self.sim.s0);
        discounted.extend_from_slice(&self.sim.s0);
        let mut drift = vec![T::zero(); d];
        let mut vol = Matrix::zeros(d, d);
        let half = T::lit(0.5);
        for k in 0..n - 1 {
            let dt = times[k + 1] - times[k];
            let y = factor.y(k);
            self.model.drift_into(y, &mut drift);
            self.model.vol_into(y, &mut vol);
            let inc = &dw[k * d..(k + 1) * d];
            for m in 0..d {
                let mut var = T::zero();
                let mut noise = T::zero();
                for j in 0..d {
                    let s = vol[(m, j)];
                    var += s * s;
                    noise += s * inc[j];
                }
                log_s[m] += (drift[m] - half * var) * dt + noise;
            }
            let disc = (-self.model.rate * times[k + 1]).exp();
            for &ls in &log_s {
                let s = ls.exp();
                stock.push(s);
                discounted.push(disc * s);
            }
        }
        Ok(PathBundle {
            seed,
            index,
            factor,
            dw,
            stock,
            discounted,
            assets: d,
        })
    }

    /// Path `index` simulated under the measure in which `W` has drift
    /// `tilt·θ(Y)`, with the log likelihood ratio `log dP/dQ` of the path.
    /// Averaging `f(path)·e^{log dP/dQ}` estimates `E[f]` under the model.
    pub fn simulate_tilted(&self, index: u64, tilt: T) -> Result<(PathBundle<T>, T)> {
        let seed = self.sim.seed;
        let mut jr = path_rng(seed, index, Stream::Jumps);
        let jumps = sample_jump_path_with(&self.specs, self.sim.horizon, &mut jr)?;
        let grid = TimeGrid::merged(self.sim.horizon, self.sim.step, &jumps)?;
        let factor = evolve(&self.ou, &jumps, grid)?;
        let mut dw = self.brownian_increments(&factor, index);
        let d = self.assets();
        let times = factor.times();
        let mut local = LocalCoefficients::new(d);
        let mut log_lr = T::zero();
        let half = T::lit(0.5);
        for k in 0..times.len() - 1 {
            let dt = times[k + 1] - times[k];
            self.model.local_into(factor.y(k), &mut local)?;
            for m in 0..d {
                let th = local.theta[m];
                let x = dw[k * d + m];
                log_lr -= tilt * th * x + half * tilt * tilt * th * th * dt;
                dw[k * d + m] = x + tilt * th * dt;
            }
        }
        Ok((self.assemble(seed, index, factor, dw)?, log_lr))
    }

    /// Paths `first..first + count`, generated in parallel, in index order.
    pub fn simulate_batch(&self, first: u64, count: usize) -> Result<Vec<PathBundle<T>>> {
        (first..first + count as u64)
            .into_par_iter()
            .map(|i| self.simulate(i))
            .collect()
    }
}

/// Writes `path,t,Y_1..Y_h,S_1..S_d,D_1..D_d`.
pub fn write_paths_csv<T: Real, W: Write>(out: &mut W, paths: &[PathBundle<T>]) -> Result<()> {
    let (h, d) = match paths.first() {
        Some(p) => (p.factor.dimension(), p.assets),
        None => (0, 0),
    };
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=h).map(|i| format!("Y_{i}")));
    header.extend((1..=d).map(|i| format!("S_{i}")));
    header.extend((1..=d).map(|i| format!("D_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for p in paths {
        for k in 0..p.len() {
            let mut row = vec![p.index.to_string(), p.times()[k].to_string()];
            row.extend(p.factor.y(k).iter().map(|v| v.to_string()));
            row.extend(p.s(k).iter().map(|v| v.to_string()));
            row.extend(p.d(k).iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}
