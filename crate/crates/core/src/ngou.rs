//! Exact pathwise construction of the Lévy-driven OU factor
//! `dY = -ΛY dt + dL(λt)` and its closed-form time integrals.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::levy::JumpPath;
use crate::scalar::{gauss_legendre_4, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct OuParams<T> {
    /// Mean-reversion rates `λᵢ`.
    pub lambda: Vec<T>,
    /// Initial state `y₀`.
    pub y0: Vec<T>,
}

impl<T: Real> OuParams<T> {
    pub fn new(lambda: Vec<T>, y0: Vec<T>) -> Result<Self> {
        if lambda.is_empty() || lambda.len() != y0.len() {
            return Err(config("OU rate and initial state must have equal, nonzero length"));
        }
        if lambda.iter().any(|&l| !(l > T::zero() && l.is_finite())) {
            return Err(config("OU mean-reversion rates must be positive"));
        }
        if y0.iter().any(|&y| !(y > T::zero() && y.is_finite())) {
            return Err(config("OU initial state must be positive"));
        }
        Ok(Self { lambda, y0 })
    }

    pub fn dimension(&self) -> usize {
        self.lambda.len()
    }

    /// Domain floor `cᵢ = y₀ᵢ e^{-λᵢ T}`.
    pub fn floor(&self, horizon: T) -> Vec<T> {
        self.lambda
            .iter()
            .zip(&self.y0)
            .map(|(&l, &y)| y * (-l * horizon).exp())
            .collect()
    }
}

/// Uniform mesh merged with jump times. `mesh_positions[k]` is the index in
/// `times` of the `k`-th mesh point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TimeGrid<T> {
    pub times: Vec<T>,
    pub mesh_positions: Vec<usize>,
}

impl<T: Real> TimeGrid<T> {
    /// Mesh points `0, δ, 2δ, …, T` (last step possibly shorter).
    pub fn mesh_times(horizon: T, step: T) -> Result<Vec<T>> {
        if !(horizon >= T::zero()) || !(step > T::zero()) {
            return Err(config("grid requires horizon >= 0 and step > 0"));
        }
        let mut times = vec![T::zero()];
        if horizon == T::zero() {
            return Ok(times);
        }
        let n = (horizon / step).ceil().to_usize().unwrap_or(0).max(1);
        let tol = step * T::lit(1e-9);
        for k in 1..n {
            let t = step * T::from_usize(k).unwrap();
            if horizon - t > tol {
                times.push(t);
            }
        }
        times.push(horizon);
        Ok(times)
    }

    pub fn uniform(horizon: T, step: T) -> Result<Self> {
        let times = Self::mesh_times(horizon, step)?;
        let mesh_positions = (0..times.len()).collect();
        Ok(Self {
            times,
            mesh_positions,
        })
    }

    /// Union of the uniform mesh and every jump time of `jumps`.
    pub fn merged(horizon: T, step: T, jumps: &JumpPath<T>) -> Result<Self> {
        let mesh = Self::mesh_times(horizon, step)?;
        let mut jt: Vec<T> = jumps
            .events
            .iter()
            .map(|e| e.time)
            .filter(|&t| t > T::zero() && t <= horizon)
            .collect();
        jt.dedup();
        let mut times = Vec::with_capacity(mesh.len() + jt.len());
        let mut mesh_positions = Vec::with_capacity(mesh.len());
        let (mut i, mut j) = (0, 0);
        while i < mesh.len() || j < jt.len() {
            let take_mesh = j >= jt.len() || (i < mesh.len() && mesh[i] <= jt[j]);
            if take_mesh {
                if j < jt.len() && mesh[i] == jt[j] {
                    j += 1;
                }
                mesh_positions.push(times.len());
                times.push(mesh[i]);
                i += 1;
            } else {
                times.push(jt[j]);
                j += 1;
            }
        }
        Ok(Self {
            times,
            mesh_positions,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> T {
        *self.times.last().unwrap_or(&T::zero())
    }

    pub fn mesh_len(&self) -> usize {
        self.mesh_positions.len()
    }

    /// Index of the grid interval `[t_j, t_{j+1})` containing `t`.
    pub fn interval_of(&self, t: T) -> usize {
        let n = self.times.len();
        if n < 2 {
            return 0;
        }
        match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(j) => j.min(n - 2),
            Err(j) => j.saturating_sub(1).min(n - 2),
        }
    }
}

/// Exact factor path on a merged grid. Values are stored flat, `h` per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FactorPath<T> {
    pub grid: TimeGrid<T>,
    pub lambda: Vec<T>,
    pub y0: Vec<T>,
    values: Vec<T>,
    left: Vec<T>,
    cumulative: Vec<T>,
    pub jumps: JumpPath<T>,
}

impl<T: Real> FactorPath<T> {
    pub fn dimension(&self) -> usize {
        self.lambda.len()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn times(&self) -> &[T] {
        &self.grid.times
    }

    /// `Y(t_k)`.
    pub fn y(&self, k: usize) -> &[T] {
        let h = self.dimension();
        &self.values[k * h..(k + 1) * h]
    }

    /// `Y(t_k⁻)`.
    pub fn y_left(&self, k: usize) -> &[T] {
        let h = self.dimension();
        &self.left[k * h..(k + 1) * h]
    }

    /// `L(λ t_k)`.
    pub fn cumulative(&self, k: usize) -> &[T] {
        let h = self.dimension();
        &self.cumulative[k * h..(k + 1) * h]
    }

    pub fn is_jump_point(&self, k: usize) -> bool {
        self.y(k) != self.y_left(k)
    }

    /// Right-continuous value `Y(t)` for arbitrary `t` in `[0, T]`.
    pub fn value_at(&self, t: T) -> Vec<T> {
        let j = self.grid.interval_of(t);
        let dt = (t - self.grid.times[j]).max(T::zero());
        let mut y: Vec<T> = self
            .y(j)
            .iter()
            .zip(&self.lambda)
            .map(|(&y, &l)| y * (-l * dt).exp())
            .collect();
        if j + 1 < self.len() && t >= self.grid.times[j + 1] {
            y.copy_from_slice(self.y(j + 1));
        }
        y
    }

    /// `∫ₜ^{t̂} Y(s) ds` per component, closed form on each inter-jump segment.
    pub fn integrated_factor(&self, t: T, t_hat: T) -> Result<Vec<T>> {
        let horizon = self.grid.horizon();
        if !(T::zero() <= t && t <= t_hat && t_hat <= horizon) {
            return Err(domain(format!(
                "integration range must satisfy 0 <= t <= t_hat <= T, got [{t}, {t_hat}]"
            )));
        }
        let h = self.dimension();
        let mut acc = vec![T::zero(); h];
        if t == t_hat {
            return Ok(acc);
        }
        let times = self.times();
        let mut j = self.grid.interval_of(t);
        let mut start = t;
        while start < t_hat && j + 1 < times.len() {
            let end = times[j + 1].min(t_hat);
            let offset = start - times[j];
            for i in 0..h {
                let l = self.lambda[i];
                let y_start = self.y(j)[i] * (-l * offset).exp();
                acc[i] += segment_integral(y_start, l, end - start);
            }
            start = end;
            j += 1;
        }
        Ok(acc)
    }

    /// `∫ f(Y(s)) ds` over `[t_k, t_{k+1}]` with four Gauss-Legendre nodes on
    /// the exact exponential decay.
    pub fn integrate_over_step<F: FnMut(&[T]) -> T>(&self, k: usize, f: F) -> T {
        integrate_decay(self.y(k), &self.lambda, self.times()[k + 1] - self.times()[k], f)
    }
}

/// `∫₀^Δ y e^{-λs} ds`.
#[inline]
pub(crate) fn segment_integral<T: Real>(y: T, lambda: T, dt: T) -> T {
    -y * (-lambda * dt).exp_m1() / lambda
}

/// `∫₀^Δ f(y e^{-Λs}) ds` on a jump-free stretch. The interval is split so
/// that no panel spans more than half a mean-reversion time.
pub fn integrate_decay<T: Real, F: FnMut(&[T]) -> T>(
    y: &[T],
    lambda: &[T],
    dt: T,
    mut f: F,
) -> T {
    if dt <= T::zero() {
        return T::zero();
    }
    let lmax = lambda.iter().copied().fold(T::zero(), T::max);
    let panels = (lmax * dt / T::lit(0.5)).ceil().to_usize().unwrap_or(1).clamp(1, 10_000);
    let width = dt / T::from_usize(panels).unwrap();
    let mut buf = y.to_vec();
    let mut total = T::zero();
    for p in 0..panels {
        let a = width * T::from_usize(p).unwrap();
        total += gauss_legendre_4(a, a + width, |s| {
            for ((b, &y0), &l) in buf.iter_mut().zip(y).zip(lambda) {
                *b = y0 * (-l * s).exp();
            }
            f(&buf)
        });
    }
    total
}

/// Exact OU evolution along `grid`. Every jump time of `jumps` must be a grid
/// point; grids built with [`TimeGrid::merged`] satisfy this.
pub fn evolve<T: Real>(params: &OuParams<T>, jumps: &JumpPath<T>, grid: TimeGrid<T>) -> Result<FactorPath<T>> {
    let h = params.dimension();
    if jumps.dimension != h {
        return Err(config(format!(
            "jump path has {} components but the factor has {h}",
            jumps.dimension
        )));
    }
    if grid.is_empty() || grid.times[0] != T::zero() {
        return Err(config("grid must start at 0"));
    }
    let n = grid.len();
    let mut values = Vec::with_capacity(n * h);
    let mut left = Vec::with_capacity(n * h);
    let mut cumulative = Vec::with_capacity(n * h);
    values.extend_from_slice(&params.y0);
    left.extend_from_slice(&params.y0);
    cumulative.extend(std::iter::repeat_n(T::zero(), h));
    let mut next_event = 0;
    let events = &jumps.events;
    while next_event < events.len() && events[next_event].time <= T::zero() {
        next_event += 1;
    }
    for k in 1..n {
        let dt = grid.times[k] - grid.times[k - 1];
        for i in 0..h {
            let prev = values[(k - 1) * h + i];
            left.push(prev * (-params.lambda[i] * dt).exp());
            cumulative.push(cumulative[(k - 1) * h + i]);
        }
        values.extend_from_slice(&left[k * h..(k + 1) * h]);
        while next_event < events.len() && events[next_event].time <= grid.times[k] {
            let e = events[next_event];
            if e.time != grid.times[k] {
                return Err(Error::Internal(format!(
                    "jump at t = {} is not a grid point",
                    e.time
                )));
            }
            values[k * h + e.component] += e.size;
            cumulative[k * h + e.component] += e.size;
            next_event += 1;
        }
    }
    if next_event < events.len() && events[next_event].time <= grid.horizon() {
        return Err(Error::Internal("unconsumed jump events".into()));
    }
    Ok(FactorPath {
        grid,
        lambda: params.lambda.clone(),
        y0: params.y0.clone(),
        values,
        left,
        cumulative,
        jumps: jumps.clone(),
    })
}

/// Convenience: merges the mesh with `jumps` and evolves.
pub fn evolve_on_mesh<T: Real>(
    params: &OuParams<T>,
    jumps: &JumpPath<T>,
    step: T,
) -> Result<FactorPath<T>> {
    let grid = TimeGrid::merged(jumps.horizon, step, jumps)?;
    evolve(params, jumps, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::JumpEvent;

    fn params() -> OuParams<f64> {
        OuParams::new(vec![1.0], vec![10.0]).unwrap()
    }

    fn single_jump() -> JumpPath<f64> {
        JumpPath {
            horizon: 1.0,
            dimension: 1,
            events: vec![JumpEvent {
                time: 0.5,
                component: 0,
                size: 2.0,
            }],
        }
    }

    #[test]
    fn pure_decay() {
        let p = evolve_on_mesh(&params(), &JumpPath::empty(1.0, 1), 0.1).unwrap();
        let last = p.len() - 1;
        assert!((p.y(last)[0] - 10.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((p.y(last)[0] - 3.678_794_411_714_423).abs() < 1e-12);
    }

    #[test]
    fn single_jump_value() {
        let p = evolve_on_mesh(&params(), &single_jump(), 0.1).unwrap();
        let expected = 10.0 * (-1.0f64).exp() + 2.0 * (-0.5f64).exp();
        assert!((p.y(p.len() - 1)[0] - expected).abs() < 1e-12);
        assert!((expected - 4.891_856).abs() < 1e-6);
        let k = p.times().iter().position(|&t| t == 0.5).unwrap();
        assert!(p.is_jump_point(k));
        assert!((p.y(k)[0] - p.y_left(k)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jump_off_grid_mesh_point_inserted() {
        let mut j = single_jump();
        j.events[0].time = 0.537;
        let p = evolve_on_mesh(&params(), &j, 0.1).unwrap();
        assert!(p.times().contains(&0.537));
        assert_eq!(p.grid.mesh_len(), 11);
    }

    #[test]
    fn jump_missing_from_grid_is_internal_error() {
        let grid = TimeGrid::uniform(1.0, 0.3).unwrap();
        let mut j = single_jump();
        j.events[0].time = 0.55;
        assert!(matches!(evolve(&params(), &j, grid), Err(Error::Internal(_))));
    }

    #[test]
    fn integrals_closed_form() {
        let p = evolve_on_mesh(&params(), &JumpPath::empty(1.0, 1), 0.1).unwrap();
        let v = p.integrated_factor(0.0, 1.0).unwrap()[0];
        assert!((v - 10.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        let p = evolve_on_mesh(&params(), &single_jump(), 0.1).unwrap();
        let v = p.integrated_factor(0.0, 1.0).unwrap()[0];
        let expected = 10.0 * (1.0 - (-1.0f64).exp()) + 2.0 * (1.0 - (-0.5f64).exp());
        assert!((v - expected).abs() < 1e-12);
        assert!((expected - 7.108_144).abs() < 1e-6);
        // partial window inside segments
        let w = p.integrated_factor(0.25, 0.75).unwrap()[0];
        let y025 = 10.0 * (-0.25f64).exp();
        let y05 = 10.0 * (-0.5f64).exp() + 2.0;
        let expected = y025 * (1.0 - (-0.25f64).exp()) + y05 * (1.0 - (-0.25f64).exp());
        assert!((w - expected).abs() < 1e-12);
        assert!(p.integrated_factor(0.5, 0.2).is_err());
    }

    #[test]
    fn value_at_matches_grid() {
        let p = evolve_on_mesh(&params(), &single_jump(), 0.1).unwrap();
        assert_eq!(p.value_at(0.5)[0], p.y(p.times().iter().position(|&t| t == 0.5).unwrap())[0]);
        let v = p.value_at(0.45)[0];
        assert!((v - 10.0 * (-0.45f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn decay_quadrature_matches_closed_form() {
        let v = integrate_decay(&[3.0f64], &[2.0], 1.5, |y| y[0]);
        assert!((v - segment_integral(3.0, 2.0, 1.5)).abs() < 1e-10);
    }

    #[test]
    fn mesh_has_short_final_step() {
        let t = TimeGrid::<f64>::mesh_times(1.05, 0.1).unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(*t.last().unwrap(), 1.05);
        let t = TimeGrid::<f64>::mesh_times(1.0, 0.1).unwrap();
        assert_eq!(t.len(), 11);
    }
}
