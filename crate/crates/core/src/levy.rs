//! Driving subordinators: Lévy measure descriptions, exact event-driven
//! sampling of `L(λt)` and exponential moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::rng::{path_rng, PathRng, Stream};
use crate::scalar::{Real, GAUSS_LEGENDRE_4};

/// Exponent used to validate `∫(e^{Cz} - 1) ν(dz) < ∞` when none is given.
pub const DEFAULT_MOMENT_EXPONENT: f64 = 4.0;

/// Relative Lévy tail mass dropped when a continuous measure is truncated.
pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", bound = "T: Real")]
pub enum LevyMeasure<T> {
    /// `ν(dz) = μ μ₁ e^{-μ₁ z} dz`: events at rate `μ` per unit of subordinator
    /// time, exponential jump sizes with mean `1/μ₁`.
    CompoundPoissonExp { event_rate: T, jump_rate: T },
    /// Finite atomic measure `Σ νₖ δ_{zₖ}` given as `(zₖ, νₖ)` pairs.
    Table { atoms: Vec<(T, T)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SubordinatorSpec<T> {
    pub measure: LevyMeasure<T>,
    /// `λᵢ`: the subordinator runs on the clock `λᵢ t`.
    pub time_scale: T,
}

impl<T: Real> SubordinatorSpec<T> {
    /// Validates the measure and checks the exponential moment condition for
    /// `moment_exponent`.
    pub fn new(measure: LevyMeasure<T>, time_scale: T, moment_exponent: T) -> Result<Self> {
        let spec = Self {
            measure,
            time_scale,
        };
        spec.validate()?;
        spec.check_moment(moment_exponent)?;
        Ok(spec)
    }

    pub fn compound_poisson_exp(
        event_rate: T,
        jump_rate: T,
        time_scale: T,
        moment_exponent: T,
    ) -> Result<Self> {
        Self::new(
            LevyMeasure::CompoundPoissonExp {
                event_rate,
                jump_rate,
            },
            time_scale,
            moment_exponent,
        )
    }

    pub fn table(atoms: Vec<(T, T)>, time_scale: T, moment_exponent: T) -> Result<Self> {
        Self::new(LevyMeasure::Table { atoms }, time_scale, moment_exponent)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time_scale > T::zero() && self.time_scale.is_finite()) {
            return Err(config("subordinator time scale must be positive"));
        }
        match &self.measure {
            LevyMeasure::CompoundPoissonExp {
                event_rate,
                jump_rate,
            } => {
                if !(*event_rate > T::zero() && event_rate.is_finite()) {
                    return Err(config("compound Poisson event rate must be positive"));
                }
                if !(*jump_rate > T::zero() && jump_rate.is_finite()) {
                    return Err(config("compound Poisson jump rate must be positive"));
                }
            }
            LevyMeasure::Table { atoms } => {
                for &(z, nu) in atoms {
                    if !(z > T::zero() && z.is_finite()) {
                        return Err(config("table jump sizes must be strictly positive"));
                    }
                    if !(nu >= T::zero() && nu.is_finite()) {
                        return Err(config("table intensities must be nonnegative"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Supremum of exponents `C` for which `ψ(C)` is finite.
    pub fn critical_exponent(&self) -> T {
        match &self.measure {
            LevyMeasure::CompoundPoissonExp { jump_rate, .. } => *jump_rate,
            LevyMeasure::Table { .. } => T::infinity(),
        }
    }

    pub fn check_moment(&self, c: T) -> Result<()> {
        let critical = self.critical_exponent();
        if c >= critical {
            return Err(Error::MomentCondition {
                c: c.as_f64(),
                critical: critical.as_f64(),
            });
        }
        Ok(())
    }

    /// Total mass `ν((0, ∞))`.
    pub fn total_intensity(&self) -> T {
        match &self.measure {
            LevyMeasure::CompoundPoissonExp { event_rate, .. } => *event_rate,
            LevyMeasure::Table { atoms } => atoms.iter().map(|a| a.1).sum(),
        }
    }

    /// `∫ z ν(dz)`.
    pub fn mean_jump_mass(&self) -> T {
        match &self.measure {
            LevyMeasure::CompoundPoissonExp {
                event_rate,
                jump_rate,
            } => *event_rate / *jump_rate,
            LevyMeasure::Table { atoms } => atoms.iter().map(|&(z, nu)| z * nu).sum(),
        }
    }

    /// Largest jump size retained by the truncated quadrature.
    pub fn truncation_point(&self, tail_tolerance: T) -> T {
        match &self.measure {
            LevyMeasure::CompoundPoissonExp { jump_rate, .. } => -tail_tolerance.ln() / *jump_rate,
            LevyMeasure::Table { atoms } => atoms
                .iter()
                .filter(|a| a.1 > T::zero())
                .map(|a| a.0)
                .fold(T::zero(), T::max),
        }
    }

    /// Upper `q`-quantile bound of `L(λ t)` from the Chernoff inequality
    /// `P(L > x) ≤ exp(λ t ψ(C) - C x)`, optimised over `C`.
    pub fn quantile_bound(&self, t: T, q: T) -> T {
        let clock = self.time_scale * t;
        let k = -(T::one() - q).ln();
        let upper = match &self.measure {
            LevyMeasure::CompoundPoissonExp { jump_rate, .. } => *jump_rate * T::lit(0.999_999),
            LevyMeasure::Table { .. } => {
                let zmax = self.truncation_point(T::lit(DEFAULT_TAIL_TOLERANCE));
                if zmax <= T::zero() {
                    return T::zero();
                }
                T::lit(60.0) / zmax
            }
        };
        let lower = upper * T::lit(1e-5);
        let steps = 400;
        let ratio = (upper / lower).ln() / T::from_usize(steps).unwrap();
        (0..=steps)
            .map(|j| lower * (ratio * T::from_usize(j).unwrap()).exp())
            .filter_map(|c| self.exp_moment_rate(c).ok().map(|psi| (clock * psi + k) / c))
            .fold(T::infinity(), T::min)
    }

    /// `ψ(C) = ∫(e^{Cz} - 1) ν(dz)`, so that `E[e^{C L(λt)}] = exp(λ t ψ(C))`.
    pub fn exp_moment_rate(&self, c: T) -> Result<T> {
        self.check_moment(c).map_err(|e| match e {
            Error::MomentCondition { c, critical } => Error::Domain(format!(
                "exponent {c} is at or above the critical exponent {critical}"
            )),
            other => other,
        })?;
        Ok(match &self.measure {
            LevyMeasure::CompoundPoissonExp {
                event_rate,
                jump_rate,
            } => *event_rate * c / (*jump_rate - c),
            LevyMeasure::Table { atoms } => atoms.iter().map(|&(z, nu)| nu * (c * z).exp_m1()).sum(),
        })
    }

    /// Quadrature representation of `ν` used by the IPDE jump term and the
    /// BSDE driver.
    pub fn quadrature(&self, tail_tolerance: T, panels: usize) -> JumpQuadrature<T> {
        match &self.measure {
            LevyMeasure::CompoundPoissonExp {
                event_rate,
                jump_rate,
            } => {
                let zmax = self.truncation_point(tail_tolerance);
                let panels = panels.max(1);
                let width = zmax / T::from_usize(panels).unwrap();
                let mut nodes = Vec::with_capacity(4 * panels);
                let mut weights = Vec::with_capacity(4 * panels);
                for p in 0..panels {
                    let a = width * T::from_usize(p).unwrap();
                    let mid = a + width * T::lit(0.5);
                    for &(x, w) in GAUSS_LEGENDRE_4.iter() {
                        let z = mid + width * T::lit(0.5 * x);
                        nodes.push(z);
                        weights.push(
                            T::lit(w) * width * T::lit(0.5) * *event_rate * *jump_rate
                                * (-*jump_rate * z).exp(),
                        );
                    }
                }
                JumpQuadrature { nodes, weights }
            }
            LevyMeasure::Table { atoms } => {
                let (nodes, weights) = atoms.iter().filter(|a| a.1 > T::zero()).copied().unzip();
                JumpQuadrature { nodes, weights }
            }
        }
    }

    fn sample_into<R: Rng + ?Sized>(
        &self,
        component: usize,
        horizon: T,
        rng: &mut R,
        out: &mut Vec<JumpEvent<T>>,
    ) {
        let mut stream = |rate: T, size: &mut dyn FnMut(&mut R) -> T, rng: &mut R| {
            if rate <= T::zero() {
                return;
            }
            let mut t = T::zero();
            loop {
                t += T::standard_exp(rng) / rate;
                if t > horizon {
                    break;
                }
                out.push(JumpEvent {
                    time: t,
                    component,
                    size: size(rng),
                });
            }
        };
        match &self.measure {
            LevyMeasure::CompoundPoissonExp {
                event_rate,
                jump_rate,
            } => {
                let mu1 = *jump_rate;
                stream(
                    self.time_scale * *event_rate,
                    &mut |r: &mut R| T::standard_exp(r) / mu1,
                    rng,
                );
            }
            LevyMeasure::Table { atoms } => {
                for &(z, nu) in atoms {
                    stream(self.time_scale * nu, &mut |_: &mut R| z, rng);
                }
            }
        }
    }
}

/// Nodes and weights with `∫ f(z) ν(dz) ≈ Σ wₖ f(zₖ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct JumpQuadrature<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> JumpQuadrature<T> {
    pub fn integrate<F: FnMut(T) -> T>(&self, mut f: F) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }

    pub fn mass(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_node(&self) -> T {
        self.nodes.iter().copied().fold(T::zero(), T::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct JumpEvent<T> {
    pub time: T,
    pub component: usize,
    pub size: T,
}

/// Jump events of `L(λ·)` on `(0, horizon]`, sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct JumpPath<T> {
    pub horizon: T,
    pub dimension: usize,
    pub events: Vec<JumpEvent<T>>,
}

impl<T: Real> JumpPath<T> {
    pub fn empty(horizon: T, dimension: usize) -> Self {
        Self {
            horizon,
            dimension,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `Lᵢ(λᵢ t)`: total jump mass of component `i` on `(0, t]`.
    pub fn cumulative(&self, component: usize, t: T) -> T {
        self.events
            .iter()
            .take_while(|e| e.time <= t)
            .filter(|e| e.component == component)
            .map(|e| e.size)
            .sum()
    }

    pub fn total(&self, component: usize) -> T {
        self.cumulative(component, self.horizon)
    }

    /// First time some component's cumulative mass exceeds `level`
    /// (localising stopping time), or `None` if it never does on the horizon.
    pub fn first_exceedance(&self, level: T) -> Option<T> {
        let mut acc = vec![T::zero(); self.dimension];
        for e in &self.events {
            acc[e.component] += e.size;
            if acc.iter().copied().fold(T::zero(), T::max) > level {
                return Some(e.time);
            }
        }
        None
    }
}

/// Samples `L(λ·)` on `(0, horizon]` from a dedicated stream of `seed`.
pub fn sample_jump_path<T: Real>(
    specs: &[SubordinatorSpec<T>],
    horizon: T,
    seed: u64,
) -> Result<JumpPath<T>> {
    let mut rng = path_rng(seed, 0, Stream::Jumps);
    sample_jump_path_with(specs, horizon, &mut rng)
}

pub fn sample_jump_path_with<T: Real>(
    specs: &[SubordinatorSpec<T>],
    horizon: T,
    rng: &mut PathRng,
) -> Result<JumpPath<T>> {
    if !(horizon >= T::zero()) {
        return Err(config("horizon must be nonnegative"));
    }
    let mut events = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        spec.sample_into(i, horizon, rng, &mut events);
    }
    events.sort_by(|a, b| {
        a.time
            .partial_cmp(&b.time)
            .unwrap()
            .then(a.component.cmp(&b.component))
    });
    Ok(JumpPath {
        horizon,
        dimension: specs.len(),
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::mean_and_se;

    fn example() -> SubordinatorSpec<f64> {
        SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 4.0).unwrap()
    }

    #[test]
    fn zero_horizon_is_empty() {
        let p = sample_jump_path(&[example()], 0.0, 99).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn event_count_matches_poisson_mean() {
        // λμT = 2000 events; mean over seeds within 3σ of the Poisson mean.
        let spec = [example()];
        let counts: Vec<f64> = (0..10_000u64)
            .map(|s| sample_jump_path(&spec, 200.0, s).unwrap().len() as f64)
            .collect();
        let (m, se) = mean_and_se(&counts);
        assert!((m - 2000.0).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn table_measure_mass_mean() {
        // λ ν z T = 1 * 2 * 1 * 5 = 10.
        let spec = [SubordinatorSpec::table(vec![(1.0, 2.0)], 1.0, 4.0).unwrap()];
        let mass: Vec<f64> = (0..4000u64)
            .map(|s| sample_jump_path(&spec, 5.0, s).unwrap().total(0))
            .collect();
        let (m, se) = mean_and_se(&mass);
        assert!((m - 10.0).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn psi_closed_forms() {
        let s = example();
        assert_eq!(s.exp_moment_rate(0.0).unwrap(), 0.0);
        assert!((s.exp_moment_rate(1.0).unwrap() - 10.0 / 7.0).abs() < 1e-14);
        let t = SubordinatorSpec::table(vec![(1.0, 2.0)], 1.0, 4.0).unwrap();
        let expected = 2.0 * (std::f64::consts::E - 1.0);
        assert!((t.exp_moment_rate(1.0).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn psi_matches_quadrature_oracle() {
        // Independent route: trapezoid rule on μ μ₁ ∫ (e^{z} - 1) e^{-μ₁ z} dz.
        let n = 400_000;
        let zmax = 6.0;
        let h = zmax / n as f64;
        let f = |z: f64| 80.0 * (z.exp() - 1.0) * (-8.0 * z).exp();
        let trap: f64 = (1..n).map(|k| f(k as f64 * h)).sum::<f64>() * h + 0.5 * h * f(zmax);
        assert!((trap - 10.0 / 7.0).abs() < 1e-6);
        assert!((example().exp_moment_rate(1.0).unwrap() - trap).abs() < 1e-6);
    }

    #[test]
    fn moment_condition_rejected() {
        let err = SubordinatorSpec::compound_poisson_exp(10.0, 8.0, 1.0, 8.0).unwrap_err();
        assert!(matches!(err, Error::MomentCondition { .. }));
        assert!(matches!(
            example().exp_moment_rate(8.0).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SubordinatorSpec::compound_poisson_exp(0.0, 8.0, 1.0, 1.0).is_err());
        assert!(SubordinatorSpec::compound_poisson_exp(1.0, 8.0, -1.0, 1.0).is_err());
        assert!(SubordinatorSpec::table(vec![(0.0, 1.0)], 1.0, 1.0).is_err());
        assert!(SubordinatorSpec::table(vec![(1.0, -1.0)], 1.0, 1.0).is_err());
    }

    #[test]
    fn quadrature_reproduces_moments() {
        let s = example();
        let q = s.quadrature(1e-8, 16);
        assert!((q.mass() - 10.0).abs() < 1e-6);
        assert!((q.integrate(|z| z) - 10.0 / 8.0).abs() < 1e-6);
        // the e^z weight makes the truncated tail about 1e-6 of the integral
        assert!((q.integrate(|z| z.exp_m1()) - 10.0 / 7.0).abs() < 1e-5);
    }

    #[test]
    fn exp_moment_monte_carlo() {
        // E[e^{C L(λt)}] = exp(λ t ψ(C)), 4 standard errors.
        let s = [example()];
        let (c, t) = (1.0, 0.5);
        let xs: Vec<f64> = (0..100_000u64)
            .map(|k| (c * sample_jump_path(&s, t, k).unwrap().total(0)).exp())
            .collect();
        let (m, se) = mean_and_se(&xs);
        let target = (t * s[0].exp_moment_rate(c).unwrap()).exp();
        assert!((m - target).abs() < 4.0 * se, "{m} vs {target} ({se})");
    }

    #[test]
    fn quantile_bound_is_conservative() {
        let s = [example()];
        let q = s[0].quantile_bound(1.0, 0.999);
        let exceed = (0..20_000u64)
            .filter(|&k| sample_jump_path(&s, 1.0, k).unwrap().total(0) > q)
            .count();
        assert!(exceed <= 20 + 15, "{exceed} exceedances above {q}");
    }

    #[test]
    fn first_exceedance_detects_level() {
        let p = JumpPath {
            horizon: 1.0,
            dimension: 1,
            events: vec![
                JumpEvent { time: 0.2, component: 0, size: 1.0 },
                JumpEvent { time: 0.6, component: 0, size: 2.0 },
            ],
        };
        assert_eq!(p.first_exceedance(2.5), Some(0.6));
        assert_eq!(p.first_exceedance(3.5), None);
        assert_eq!(p.cumulative(0, 0.5), 1.0);
    }
}
