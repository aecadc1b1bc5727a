//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the numbers it produces are
//! independent of the tape's backward rules.

use rand::seq::index::sample;
use rand::Rng;

use crate::optim::{ParamId, ParameterStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|)`, with a tiny floor so two exact zeros compare equal.
    pub fn relative_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-12);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for coordinate `index` of a flat buffer.
pub fn central_difference<T: Real>(
    values: &mut [T],
    index: usize,
    h: f64,
    mut f: impl FnMut(&[T]) -> f64,
) -> f64 {
    let orig = values[index];
    values[index] = T::from_f64(orig.as_f64() + h);
    let plus = f(values);
    values[index] = T::from_f64(orig.as_f64() - h);
    let minus = f(values);
    values[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Picks `count` distinct `(parameter, flat index)` coordinates uniformly over all weights.
pub fn sample_coordinates<T: Real, R: Rng>(
    store: &ParameterStore<T>,
    count: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let sizes: Vec<(ParamId, usize)> = store.iter().map(|(id, p)| (id, p.value().len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut picks: Vec<usize> = sample(rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut flat| {
            for &(id, n) in &sizes {
                if flat < n {
                    return (id, flat);
                }
                flat -= n;
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Compares accumulated gradients in `store` against central differences of `loss`.
pub fn check_parameters<T: Real>(
    store: &mut ParameterStore<T>,
    coords: &[(ParamId, usize)],
    h: f64,
    mut loss: impl FnMut(&ParameterStore<T>) -> f64,
) -> Vec<GradCheck> {
    coords
        .iter()
        .map(|&(id, index)| {
            let analytic = store.grad(id).map_or(0.0, |g| g.data()[index].as_f64());
            let orig = store.value(id).data()[index];
            store.value_mut(id).data_mut()[index] = T::from_f64(orig.as_f64() + h);
            let plus = loss(store);
            store.value_mut(id).data_mut()[index] = T::from_f64(orig.as_f64() - h);
            let minus = loss(store);
            store.value_mut(id).data_mut()[index] = orig;
            GradCheck {
                param: store.param(id).name().to_string(),
                index,
                analytic,
                numeric: (plus - minus) / (2.0 * h),
            }
        })
        .collect()
}
