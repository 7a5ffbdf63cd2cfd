//! Finite-difference verification of analytic gradients.
//!
//! The caller supplies the analytic gradients and a closure that recomputes
//! the scalar loss from a perturbed parameter store; this module owns the
//! central-difference sweep, the error metric, and the determinism guard.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::rng::{fnv1a, splitmix64_at, Rng64};

/// Central-difference check over a subset of parameters.
///
/// Returns the max over checked coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// * `subset`: parameter names to check; empty means every parameter.
/// * `max_coords`: per-tensor coordinate budget; larger tensors are
///   subsampled deterministically (seeded by the store seed and name).
/// * Parameters missing from `analytic` are treated as zero-gradient, which
///   the numeric sweep then has to confirm.
pub fn grad_check(
    params: &ParamStore,
    analytic: &Gradients,
    subset: &[String],
    epsilon: f64,
    max_coords: Option<usize>,
    forward: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::EpsilonRange(epsilon));
    }
    let base_a = forward(params)?;
    let base_b = forward(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let names: Vec<String> = if subset.is_empty() {
        params.names()
    } else {
        subset.to_vec()
    };

    let mut max_err = 0.0f64;
    for name in &names {
        let value = params.get(name)?;
        let n = value.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if n > k => {
                let mut rng =
                    Rng64::seed_from_u64(splitmix64_at(params.rng_seed(), fnv1a(name.as_bytes())));
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for &i in &coords {
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += epsilon;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= epsilon;
            let numeric = (forward(&plus)? - forward(&minus)?) / (2.0 * epsilon);
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
