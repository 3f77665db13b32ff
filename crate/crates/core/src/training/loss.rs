//! SSIM and the reconstruction loss `w1 * mean|x_ref - x| + w2 * (1 - SSIM)`.

use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::kernels::filter_valid_forward;
use crate::nn::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn check_pair(a: (usize, usize), b: (usize, usize), data_range: f64) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("SSIM inputs differ: {a:?} vs {b:?}")));
    }
    if a.0 < SSIM_WINDOW || a.1 < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a:?}"
        )));
    }
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "SSIM data range must be positive, got {data_range}"
        )));
    }
    Ok(())
}

/// Mean SSIM over all fully contained 7x7 Gaussian windows.
pub fn ssim<T: Real>(x: &Array2<T>, y: &Array2<T>, data_range: f64) -> Result<f64> {
    check_pair(x.dim(), y.dim(), data_range)?;
    let to64 = |a: &Array2<T>| Tensor::from_image(&a.mapv(|v| v.to_f64().unwrap()));
    let (xt, yt) = (to64(x), to64(y));
    let k = gaussian_taps();
    let filt = |t: &Tensor<f64>| filter_valid_forward(t, &k);
    let mux = filt(&xt);
    let muy = filt(&yt);
    let xx = filt(&xt.zip_map(&xt, |a, b| a * b));
    let yy = filt(&yt.zip_map(&yt, |a, b| a * b));
    let xy = filt(&xt.zip_map(&yt, |a, b| a * b));
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mux.len() {
        let (mx, my) = (mux.data()[i], muy.data()[i]);
        let mxy = mx * my;
        let mx2 = mx * mx;
        let my2 = my * my;
        let sx = xx.data()[i] - mx2;
        let sy = yy.data()[i] - my2;
        let sxy = xy.data()[i] - mxy;
        let num = (2.0 * mxy + c1) * (2.0 * sxy + c2);
        let den = ((mx2 + my2) + c1) * ((sx + sy) + c2);
        total += num / den;
    }
    Ok(total / mux.len() as f64)
}

/// SSIM between two `[1, 1, H, W]` graph nodes, as a scalar node.
pub fn ssim_graph<T: Real>(g: &Graph<T>, x: Var, y: Var, data_range: f64) -> Var {
    let k: Rc<Vec<T>> = Rc::new(gaussian_taps().iter().map(|&v| T::lit(v)).collect());
    let mux = g.filter_valid(x, k.clone());
    let muy = g.filter_valid(y, k.clone());
    let xx = g.filter_valid(g.mul(x, x), k.clone());
    let yy = g.filter_valid(g.mul(y, y), k.clone());
    let xy = g.filter_valid(g.mul(x, y), k);
    let mxy = g.mul(mux, muy);
    let mx2 = g.mul(mux, mux);
    let my2 = g.mul(muy, muy);
    let sx = g.sub(xx, mx2);
    let sy = g.sub(yy, my2);
    let sxy = g.sub(xy, mxy);
    let c1 = T::lit((SSIM_K1 * data_range).powi(2));
    let c2 = T::lit((SSIM_K2 * data_range).powi(2));
    let two = T::lit(2.0);
    let num = g.mul(g.affine(mxy, two, c1), g.affine(sxy, two, c2));
    let den = g.mul(
        g.affine(g.add(mx2, my2), T::one(), c1),
        g.affine(g.add(sx, sy), T::one(), c2),
    );
    g.mean(g.div(num, den))
}

/// Loss node for a prediction `x` (`[1, 1, H, W]`) against a reference image.
/// The SSIM data range is the maximum of the reference.
pub fn loss_graph<T: Real>(g: &Graph<T>, reference: &Array2<T>, x: Var, w1: f64, w2: f64) -> Result<Var> {
    let shape = g.shape(x);
    check_pair(reference.dim(), (shape[2], shape[3]), max_of(reference))?;
    let r = g.constant(Tensor::from_image(reference));
    let l1 = g.mean(g.abs(g.sub(r, x)));
    let s = ssim_graph(g, r, x, max_of(reference));
    Ok(g.add(
        g.affine(l1, T::lit(w1), T::zero()),
        g.affine(s, T::lit(-w2), T::lit(w2)),
    ))
}

pub(crate) fn max_of<T: Real>(a: &Array2<T>) -> f64 {
    a.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()))
}

/// `w1 * mean|x_ref - x| + w2 * (1 - ssim(x_ref, x))`.
pub fn training_loss<T: Real>(reference: &Array2<T>, x: &Array2<T>, w1: f64, w2: f64) -> Result<f64> {
    let s = ssim(reference, x, max_of(reference))?;
    let l1 = reference
        .iter()
        .zip(x.iter())
        .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
        .sum::<f64>()
        / reference.len() as f64;
    Ok(w1 * l1 + w2 * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0))
    }

    // Direct double sum over every window with the 2D Gaussian weights.
    fn ssim_oracle(x: &Array2<f64>, y: &Array2<f64>, range: f64) -> f64 {
        let n = SSIM_WINDOW;
        let mut w2 = vec![vec![0.0; n]; n];
        let mut s = 0.0;
        for (a, row) in w2.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let (da, db) = (a as f64 - 3.0, b as f64 - 3.0);
                *v = (-(da * da + db * db) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                s += *v;
            }
        }
        let (h, w) = x.dim();
        let c1 = (0.01 * range) * (0.01 * range);
        let c2 = (0.03 * range) * (0.03 * range);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - n {
            for j in 0..=w - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        let wt = w2[a][b] / s;
                        let (p, q) = (x[[i + a, j + b]], y[[i + a, j + b]]);
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        for seed in 0..5 {
            let x = random_image(20, seed);
            assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_images_follow_luminance_term() {
        let (a, b) = (0.3, 0.7);
        let x = Array2::from_elem((12, 12), a);
        let y = Array2::from_elem((12, 12), b);
        let c1: f64 = 0.01f64.powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&x, &y, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_window_sum() {
        let x = random_image(32, 10);
        let y = random_image(32, 11);
        let d = (ssim(&x, &y, 1.0).unwrap() - ssim_oracle(&x, &y, 1.0)).abs();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn rejects_bad_range_and_small_images() {
        let x = random_image(8, 1);
        assert!(ssim(&x, &x, 0.0).is_err());
        assert!(ssim(&x, &x, -1.0).is_err());
        let small = random_image(6, 1);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn graph_ssim_agrees_with_plain() {
        let x = random_image(16, 3);
        let y = random_image(16, 4);
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_image(&x));
        let b = g.constant(Tensor::from_image(&y));
        let s = g.value(ssim_graph(&g, a, b, 1.0)).data()[0];
        assert!((s - ssim(&x, &y, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let x = random_image(16, 5);
        assert_eq!(training_loss(&x, &x, 1.0, 1.0).unwrap(), 0.0);
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_image(&x));
        let l = loss_graph(&g, &x, v, 1.0, 1.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn pure_l1_loss_matches_direct_sum() {
        let x = random_image(10, 6);
        let y = random_image(10, 7);
        let mut direct = 0.0;
        for (a, b) in x.iter().zip(y.iter()) {
            direct += (a - b).abs();
        }
        direct /= 100.0;
        assert!((training_loss(&x, &y, 1.0, 0.0).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let r = random_image(12, 8);
        let x0 = random_image(12, 9).mapv(|v| v as f32);
        let rf = r.mapv(|v| v as f32);
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_image(&x0));
        let l = loss_graph(&g, &rf, x, 1.0, 1.0).unwrap();
        let grad = g.backward(l).get(x).unwrap().clone();
        let x64 = x0.mapv(|v| v as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (i, j) = (rng.random_range(0..12), rng.random_range(0..12));
            let h = 1e-6;
            let mut p = x64.clone();
            p[[i, j]] += h;
            let mut m = x64.clone();
            m[[i, j]] -= h;
            let fd = (training_loss(&r, &p, 1.0, 1.0).unwrap() - training_loss(&r, &m, 1.0, 1.0).unwrap())
                / (2.0 * h);
            let an = grad.data()[i * 12 + j] as f64;
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-4);
            assert!(rel < 1e-3, "({i},{j}) analytic {an} fd {fd}");
        }
    }
}
