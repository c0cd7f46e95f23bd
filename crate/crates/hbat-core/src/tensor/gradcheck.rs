//! Central finite differences over named parameter maps.
//!
//! This is the independent oracle the gradient tests compare `backward`
//! against; it only ever calls the supplied closure, never the reverse pass.

use crate::error::{Error, Result};
use crate::tensor::TensorData;
use indexmap::IndexMap;

pub type UnitMap = IndexMap<String, TensorData<f64>>;

/// Central-difference gradient estimate of `f` at `params`:
/// `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every scalar coordinate.
///
/// `f` must be deterministic; this is checked by evaluating it twice at the
/// base point and requiring bit-identical results.
pub fn finite_difference_grad<F>(f: F, params: &UnitMap, eps: f64) -> Result<UnitMap>
where
    F: Fn(&UnitMap) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("finite differences need eps > 0".into()));
    }
    let base1 = f(params)?;
    let base2 = f(params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::InvalidInput(
            "finite differences require a deterministic function".into(),
        ));
    }

    let mut work = params.clone();
    let mut out = UnitMap::new();
    for name in params.keys() {
        let n = params[name].numel();
        let mut grad = vec![0.0f64; n];
        for i in 0..n {
            let orig = params[name].data()[i];

            work[name].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[name].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[name].data_mut()[i] = orig;

            grad[i] = (plus - minus) / (2.0 * eps);
        }
        out.insert(
            name.clone(),
            TensorData::new(params[name].shape().to_vec(), grad)?,
        );
    }
    Ok(out)
}

/// Largest relative error between an analytic gradient map and the finite
/// difference estimate, using `max(|a|, |b|, floor)` as the denominator.
pub fn max_relative_error(analytic: &UnitMap, numeric: &UnitMap, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic {
        let b = &numeric[name];
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            let rel = (x - y).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
