//! Monte-Carlo evaluation of `P(t, y) = E_{t,y}[exp(-∫ₜᵀ ρ(Y(s)) ds)]`.

use rayon::prelude::*;

use crate::error::{config, Result};
use crate::levy::{sample_jump_path_with, SubordinatorSpec};
use crate::market::CoefficientModel;
use crate::ngou::{evolve, OuParams, TimeGrid};
use crate::rng::{path_rng, Stream};
use crate::scalar::{McEstimate, Real};

pub const MIN_INNER_SAMPLES: usize = 100;

/// `exp(-∫ρ)` along one factor path started from `y` with `remaining` time
/// to go; `∫ρ` uses Gauss-Legendre nodes on every inter-jump segment.
fn discount_sample<T: Real>(
    model: &CoefficientModel<T>,
    lambda: &[T],
    specs: &[SubordinatorSpec<T>],
    remaining: T,
    y: &[T],
    seed: u64,
    index: u64,
) -> Result<T> {
    let mut rng = path_rng(seed, index, Stream::Auxiliary);
    let jumps = sample_jump_path_with(specs, remaining, &mut rng)?;
    let grid = TimeGrid::merged(remaining, remaining, &jumps)?;
    let ou = OuParams {
        lambda: lambda.to_vec(),
        y0: y.to_vec(),
    };
    let path = evolve(&ou, &jumps, grid)?;
    let mut err = None;
    let mut total = T::zero();
    for k in 0..path.len() - 1 {
        total += path.integrate_over_step(k, |v| match model.rho(v) {
            Ok(r) => r,
            Err(e) => {
                err = Some(e);
                T::zero()
            }
        });
    }
    match err {
        Some(e) => Err(e),
        None => Ok((-total).exp()),
    }
}

/// Sample mean and standard error of `exp(-∫ₜᵀρ)` over `n_inner` factor paths.
#[allow(clippy::too_many_arguments)]
pub fn estimate_p_mc<T: Real>(
    model: &CoefficientModel<T>,
    ou: &OuParams<T>,
    specs: &[SubordinatorSpec<T>],
    horizon: T,
    t: T,
    y: &[T],
    n_inner: usize,
    seed: u64,
) -> Result<McEstimate<T>> {
    if n_inner < MIN_INNER_SAMPLES {
        return Err(config(format!("at least {MIN_INNER_SAMPLES} inner samples are required")));
    }
    if y.len() != ou.dimension() || y.iter().any(|&v| !(v > T::zero())) {
        return Err(config("factor value must be positive with one entry per component"));
    }
    if !(t >= T::zero() && t <= horizon) {
        return Err(config("evaluation time must lie in [0, T]"));
    }
    let remaining = horizon - t;
    if remaining == T::zero() {
        return Ok(McEstimate {
            mean: T::one(),
            se: T::zero(),
            samples: n_inner,
        });
    }
    let samples: Vec<T> = (0..n_inner as u64)
        .into_par_iter()
        .map(|i| discount_sample(model, &ou.lambda, specs, remaining, y, seed, i))
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_samples(&samples))
}
