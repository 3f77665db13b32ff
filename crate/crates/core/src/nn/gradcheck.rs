//! Central finite-difference checks of parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamStore;
use crate::real::Real;

/// `n` distinct `(parameter, flat index)` coordinates drawn uniformly over all
/// scalars whose name starts with `prefix`.
pub fn sample_coordinates<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    n: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = store
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(all.len());
    sample(&mut rng, all.len(), n).into_iter().map(|i| all[i].clone()).collect()
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` at `coords`.
pub fn finite_differences(
    params: &ParamStore<f64>,
    coords: &[(String, usize)],
    h: f64,
    f: impl Fn(&ParamStore<f64>) -> f64,
) -> Vec<f64> {
    let mut p = params.clone();
    coords
        .iter()
        .map(|(name, i)| {
            let orig = p.get(name).expect("coordinate names a parameter").data()[*i];
            p.get_mut(name).unwrap().data_mut()[*i] = orig + h;
            let up = f(&p);
            p.get_mut(name).unwrap().data_mut()[*i] = orig - h;
            let down = f(&p);
            p.get_mut(name).unwrap().data_mut()[*i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gradient entries at `coords`, widened to `f64`.
pub fn gather<T: Real>(grads: &ParamStore<T>, coords: &[(String, usize)]) -> Vec<f64> {
    coords
        .iter()
        .map(|(name, i)| grads.get(name).expect("gradient entry").data()[*i].to_f64().unwrap())
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
