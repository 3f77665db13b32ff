//! Coil sensitivity estimation from the auto-calibration region and the learned
//! refinement U-Net.

use ndarray::{Array2, Zip};
use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{conv, conv_same};
use crate::nn::{Bound, ConvGeom, Graph, ParamStore, Pads, PadMode, Var};
use crate::operators::{ifft2c, rss, CoilSensitivityMaps, MultiCoilKSpace};
use crate::real::Real;
use crate::sampling::{acs_extract, SamplingMask};
use crate::tensor::Tensor;

/// Default guard for the division by the RSS image, relative to its maximum.
pub const DEFAULT_EPS: f64 = 1e-9;

const IN_EPS: f64 = 1e-5;

/// Initial maps `ifft2c(U_ACS y) / (RSS + eps)`.
///
/// `eps` is relative: the absolute guard is `eps * max(RSS)`. Pixels whose RSS
/// does not exceed the guard are set to zero.
pub fn estimate_initial_maps<T: Real>(
    ksp: &MultiCoilKSpace<T>,
    mask: &SamplingMask,
    eps: f64,
) -> Result<CoilSensitivityMaps<T>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if mask.acs_count() == 0 {
        return Err(Error::EmptyAcs);
    }
    let acs = acs_extract(ksp, mask)?;
    let mut imgs = ifft2c(&acs.data)?;
    let denom = rss(imgs.view());
    let peak = denom.iter().fold(T::zero(), |m, &v| m.max(v));
    let guard = T::lit(eps) * peak;
    for mut coil in imgs.outer_iter_mut() {
        Zip::from(&mut coil).and(&denom).for_each(|s, &r| {
            *s = if r > guard && r > T::zero() {
                *s / (r + guard)
            } else {
                Complex::new(T::zero(), T::zero())
            };
        });
    }
    CoilSensitivityMaps::new(imgs)
}

/// Pixels where a set of maps carries energy; the refined maps are normalized
/// on this set.
pub fn map_support<T: Real>(maps: &CoilSensitivityMaps<T>) -> Array2<bool> {
    maps.sum_of_squares().mapv(|e| e > T::zero())
}

/// Registers the refinement U-Net parameters under `ser.`.
///
/// One block per entry of `filters`; all but the last are followed by 2x max
/// pooling on the way down and mirrored by an upsampling stage on the way up.
pub fn init_ser_params<T: Real>(store: &mut ParamStore<T>, filters: &[usize], rng: &mut impl Rng) {
    let mut cin = 2;
    for (i, &f) in filters.iter().enumerate() {
        store.add_conv(&format!("ser.enc{i}.conv1"), f, cin, 3, rng);
        store.add_conv(&format!("ser.enc{i}.conv2"), f, f, 3, rng);
        cin = f;
    }
    for i in (0..filters.len() - 1).rev() {
        let f = filters[i];
        store.add_conv(&format!("ser.up{i}"), f, filters[i + 1], 3, rng);
        store.add_conv(&format!("ser.dec{i}.conv1"), f, 2 * f, 3, rng);
        store.add_conv(&format!("ser.dec{i}.conv2"), f, f, 3, rng);
    }
    store.add_conv("ser.out", 2, filters[0], 1, rng);
}

/// Scalar parameter count of [`init_ser_params`].
pub fn ser_param_count(filters: &[usize]) -> usize {
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let mut n = 0;
    let mut cin = 2;
    for &f in filters {
        n += conv(f, cin, 3) + conv(f, f, 3);
        cin = f;
    }
    for i in 0..filters.len() - 1 {
        let f = filters[i];
        n += conv(f, filters[i + 1], 3) + conv(f, 2 * f, 3) + conv(f, f, 3);
    }
    n + conv(2, filters[0], 1)
}

fn norm_act<T: Real>(g: &Graph<T>, x: Var, slope: T) -> Var {
    let n = g.instance_norm(x, T::lit(IN_EPS));
    g.leaky_relu(n, slope)
}

fn unet_block<T: Real>(p: &Bound<T>, prefix: &str, x: Var, slope: T) -> Var {
    let a = norm_act(p.graph, conv_same(p, &format!("{prefix}.conv1"), x), slope);
    norm_act(p.graph, conv_same(p, &format!("{prefix}.conv2"), a), slope)
}

/// The refinement U-Net on `[n, 2, H, W]` input (one map per batch entry).
///
/// The input is zero padded to a multiple of `2^levels` and cropped back.
pub fn ser_unet<T: Real>(p: &Bound<T>, x: Var, filters: &[usize], slope: f64) -> Var {
    let g = p.graph;
    let slope = T::lit(slope);
    let shape = g.shape(x);
    let (h, w) = (shape[2], shape[3]);
    let m = 1usize << filters.len();
    let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
    let pads = Pads {
        top: ph / 2,
        bottom: ph - ph / 2,
        left: pw / 2,
        right: pw - pw / 2,
    };
    let mut cur = if ph + pw > 0 { g.pad(x, pads, PadMode::Zero) } else { x };

    let mut skips = Vec::with_capacity(filters.len());
    for i in 0..filters.len() {
        if i > 0 {
            cur = g.max_pool2(cur);
        }
        cur = unet_block(p, &format!("ser.enc{i}"), cur, slope);
        skips.push(cur);
    }
    for i in (0..filters.len() - 1).rev() {
        let up = g.upsample2(cur);
        let up = norm_act(g, conv_same(p, &format!("ser.up{i}"), up), slope);
        let cat = g.concat(&[skips[i], up]);
        cur = unet_block(p, &format!("ser.dec{i}"), cat, slope);
    }
    let out = conv(p, "ser.out", cur, ConvGeom::same(1, 1));
    if ph + pw > 0 {
        g.crop(out, pads.top, pads.left, h, w)
    } else {
        out
    }
}

/// Refined maps inside a graph: U-Net per coil, then renormalization so that
/// `sum_k |S^k|^2 = 1` on `support` and zero elsewhere.
pub fn refine_maps_graph<T: Real>(
    p: &Bound<T>,
    init: Var,
    support: &[bool],
    filters: &[usize],
    slope: f64,
) -> Var {
    let out = ser_unet(p, init, filters, slope);
    p.graph.coil_normalize(out, support)
}

/// Applies the refinement module to a set of initial maps.
pub fn refine_maps<T: Real>(
    init: &CoilSensitivityMaps<T>,
    params: &ParamStore<T>,
    filters: &[usize],
    slope: f64,
) -> Result<CoilSensitivityMaps<T>> {
    if init.maps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("initial sensitivity maps".into()));
    }
    let g = Graph::new();
    let p = Bound::new(&g, params, false);
    let x = g.constant(Tensor::from_complex(&init.maps));
    let support: Vec<bool> = map_support(init).iter().copied().collect();
    let out = refine_maps_graph(&p, x, &support, filters, slope);
    let val = g.value(out);
    if !val.is_finite() {
        return Err(Error::NonFinite("sensitivity refinement activations".into()));
    }
    CoilSensitivityMaps::new(val.to_complex())
}
