//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] replays the tape in reverse and returns the
//! gradient of a scalar with respect to every node that depends on a trainable
//! leaf. Complex quantities are NCHW tensors whose channel axis holds (re, im)
//! pairs; gradients of complex values follow the `dL/dRe + i dL/dIm` convention.

use std::cell::RefCell;
use std::rc::Rc;

use crate::nn::kernels::{self, ConvGeom, PadMode, Pads};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Pad { x: Var, pads: Pads, mode: PadMode },
    Crop { x: Var, top: usize, left: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: T },
    MaskConst { x: Var, mask: Rc<Vec<T>> },
    ScaleByScalar { x: Var, s: Var },
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Fft2c { x: Var, inverse: bool },
    Expand { img: Var, maps: Var },
    Reduce { coils: Var, maps: Var },
    Rss(Var),
    CoilNormalize { x: Var, norms: Vec<T> },
    FilterValid { x: Var, kernel: Rc<Vec<T>> },
    Mean(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn complex_planes<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 2, "complex tensor must have 2 channels, got shape {:?}", t.shape());
    (n, h * w)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A value that is not differentiated.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Input,
            needs_grad: true,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            kernels::conv2d_forward(&xv, &wv, bv.as_deref(), geom)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn pad(&self, x: Var, pads: Pads, mode: PadMode) -> Var {
        let out = kernels::pad_forward(&self.value(x), pads, mode);
        self.push(out, Op::Pad { x, pads, mode }, &[x])
    }

    pub fn crop(&self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let out = kernels::crop_forward(&self.value(x), top, left, h, w);
        self.push(out, Op::Crop { x, top, left }, &[x])
    }

    pub fn max_pool2(&self, x: Var) -> Var {
        let (out, argmax) = kernels::maxpool2_forward(&self.value(x));
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn upsample2(&self, x: Var) -> Var {
        let out = kernels::upsample2_forward(&self.value(x));
        self.push(out, Op::Upsample2 { x }, &[x])
    }

    pub fn instance_norm(&self, x: Var, eps: T) -> Var {
        let (out, inv_std) = kernels::instance_norm_forward(&self.value(x), eps);
        self.push(out, Op::InstanceNorm { x, inv_std }, &[x])
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn abs(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    /// Multiplies every trailing plane of `x` by a constant plane.
    pub fn mask(&self, x: Var, mask: Rc<Vec<T>>) -> Var {
        let out = {
            let xv = self.value(x);
            assert_eq!(xv.len() % mask.len(), 0, "mask does not tile the input");
            let mut out = (*xv).clone();
            for chunk in out.data_mut().chunks_exact_mut(mask.len()) {
                for (v, &m) in chunk.iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
            }
            out
        };
        self.push(out, Op::MaskConst { x, mask }, &[x])
    }

    /// `x * s` where `s` holds a single element.
    pub fn scale_by(&self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "scale must be a scalar");
        let k = sv.data()[0];
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::ScaleByScalar { x, s }, &[x, s])
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat(&self, xs: &[Var]) -> Var {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let c_total: usize = vals
            .iter()
            .map(|v| {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
                c
            })
            .sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for s in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        self.push(Tensor::new(vec![n, c_total, h, w], data), Op::Concat(xs.to_vec()), xs)
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(start + len <= c, "narrow out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            data.extend_from_slice(&xv.data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        self.push(Tensor::new(vec![n, len, h, w], data), Op::Narrow { x, start }, &[x])
    }

    /// Centered orthonormal FFT (or its inverse) of complex `[N, 2, H, W]` data.
    pub fn fft2c(&self, x: Var, inverse: bool) -> Var {
        let out = kernels::fft2c_channels(&self.value(x), inverse);
        self.push(out, Op::Fft2c { x, inverse }, &[x])
    }

    /// Coil images `S^k x` from an image `[1, 2, H, W]` and maps `[C, 2, H, W]`.
    pub fn expand(&self, img: Var, maps: Var) -> Var {
        let iv = self.value(img);
        let mv = self.value(maps);
        let (one, hw) = complex_planes(&iv);
        assert_eq!(one, 1, "expand takes a single image");
        let (nc, mhw) = complex_planes(&mv);
        assert_eq!(hw, mhw, "image and maps differ spatially");
        let mut out = Tensor::zeros(mv.shape());
        let (xr, xi) = iv.data().split_at(hw);
        for k in 0..nc {
            let m = &mv.data()[k * 2 * hw..(k + 1) * 2 * hw];
            let (sr, si) = m.split_at(hw);
            let (or, oi) = out.data_mut()[k * 2 * hw..(k + 1) * 2 * hw].split_at_mut(hw);
            for p in 0..hw {
                or[p] = sr[p] * xr[p] - si[p] * xi[p];
                oi[p] = sr[p] * xi[p] + si[p] * xr[p];
            }
        }
        self.push(out, Op::Expand { img, maps }, &[img, maps])
    }

    /// Coil combination `sum_k conj(S^k) z^k` producing `[1, 2, H, W]`.
    pub fn reduce(&self, coils: Var, maps: Var) -> Var {
        let cv = self.value(coils);
        let mv = self.value(maps);
        assert_eq!(cv.shape(), mv.shape(), "coil images and maps differ");
        let (nc, hw) = complex_planes(&cv);
        let (_, _, h, w) = cv.dims4();
        let mut out = Tensor::zeros(&[1, 2, h, w]);
        {
            let (or, oi) = out.data_mut().split_at_mut(hw);
            for k in 0..nc {
                let (zr, zi) = cv.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                let (sr, si) = mv.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                for p in 0..hw {
                    or[p] += sr[p] * zr[p] + si[p] * zi[p];
                    oi[p] += sr[p] * zi[p] - si[p] * zr[p];
                }
            }
        }
        self.push(out, Op::Reduce { coils, maps }, &[coils, maps])
    }

    /// Root-sum-of-squares over the coil axis of complex `[C, 2, H, W]` data.
    pub fn rss(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (nc, hw) = complex_planes(&xv);
        let (_, _, h, w) = xv.dims4();
        let mut acc = vec![T::zero(); hw];
        for v in xv.data()[..nc * 2 * hw].chunks_exact(hw) {
            for (a, &z) in acc.iter_mut().zip(v) {
                *a += z * z;
            }
        }
        acc.iter_mut().for_each(|a| *a = a.sqrt());
        self.push(Tensor::new(vec![1, 1, h, w], acc), Op::Rss(x), &[x])
    }

    /// Rescales complex coil maps `[C, 2, H, W]` so that `sum_k |S^k|^2 = 1` at
    /// every pixel of `support`; everything else becomes zero.
    pub fn coil_normalize(&self, x: Var, support: &[bool]) -> Var {
        let xv = self.value(x);
        let (nc, hw) = complex_planes(&xv);
        assert_eq!(support.len(), hw, "support size mismatch");
        let mut norms = vec![T::zero(); hw];
        for v in xv.data().chunks_exact(hw) {
            for (a, &z) in norms.iter_mut().zip(v) {
                *a += z * z;
            }
        }
        for (n, &inside) in norms.iter_mut().zip(support) {
            *n = if inside && *n > T::zero() { n.sqrt() } else { T::zero() };
        }
        let mut out = Tensor::zeros(xv.shape());
        for (o, v) in out.data_mut().chunks_exact_mut(hw).zip(xv.data().chunks_exact(hw)) {
            for p in 0..hw {
                o[p] = if norms[p] > T::zero() { v[p] / norms[p] } else { T::zero() };
            }
        }
        debug_assert_eq!(out.len(), nc * 2 * hw);
        self.push(out, Op::CoilNormalize { x, norms }, &[x])
    }

    /// Separable filtering of the last two axes keeping only full windows.
    pub fn filter_valid(&self, x: Var, kernel: Rc<Vec<T>>) -> Var {
        let out = kernels::filter_valid_forward(&self.value(x), &kernel);
        self.push(out, Op::FilterValid { x, kernel }, &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / T::from_usize(xv.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Gradients of the scalar `root` with respect to every node that depends on
    /// a trainable leaf.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::new(nodes[root.0].value.shape().to_vec(), vec![T::one()]));
        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Input) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let val = |v: Var| nodes[v.0].value.clone();
            let wants = |v: Var| nodes[v.0].needs_grad;
            let mut send = |v: Var, g: Tensor<T>| {
                if nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], g);
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv2d { x, w, b, geom } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let r = kernels::conv2d_backward(
                        &xv,
                        &wv,
                        &gy,
                        *geom,
                        (wants(*x), wants(*w), b.is_some_and(wants)),
                    );
                    if let Some(dx) = r.dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = r.dw {
                        send(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        send(*b, db);
                    }
                }
                Op::Pad { x, pads, mode } => {
                    let xs = val(*x).shape().to_vec();
                    send(*x, kernels::pad_backward(&gy, &xs, *pads, *mode));
                }
                Op::Crop { x, top, left } => {
                    let xs = val(*x).shape().to_vec();
                    send(*x, kernels::crop_backward(&gy, &xs, *top, *left));
                }
                Op::MaxPool2 { x, argmax } => {
                    let xs = val(*x).shape().to_vec();
                    send(*x, kernels::maxpool2_backward(&gy, &xs, argmax));
                }
                Op::Upsample2 { x } => {
                    let xs = val(*x).shape().to_vec();
                    send(*x, kernels::upsample2_backward(&gy, &xs));
                }
                Op::InstanceNorm { x, inv_std } => {
                    send(*x, kernels::instance_norm_backward(y, &gy, inv_std));
                }
                Op::Relu(x) => {
                    send(*x, y.zip_map(&gy, |o, g| if o > T::zero() { g } else { T::zero() }));
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    send(*x, val(*x).zip_map(&gy, |i, g| if i > T::zero() { g } else { g * s }));
                }
                Op::Sigmoid(x) => {
                    send(*x, y.zip_map(&gy, |o, g| g * o * (T::one() - o)));
                }
                Op::Tanh(x) => {
                    send(*x, y.zip_map(&gy, |o, g| g * (T::one() - o * o)));
                }
                Op::Abs(x) => {
                    send(
                        *x,
                        val(*x).zip_map(&gy, |i, g| {
                            if i > T::zero() {
                                g
                            } else if i < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        send(*b, gy.clone());
                    }
                    send(*a, gy);
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        send(*b, gy.map(|g| -g));
                    }
                    send(*a, gy);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, gy.zip_map(&val(*b), |g, v| g * v));
                    }
                    if wants(*b) {
                        send(*b, gy.zip_map(&val(*a), |g, v| g * v));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if wants(*a) {
                        send(*a, gy.zip_map(&bv, |g, d| g / d));
                    }
                    if wants(*b) {
                        let q = gy.zip_map(y, |g, o| g * o);
                        send(*b, q.zip_map(&bv, |go, d| -go / d));
                    }
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    send(*x, gy.map(|g| g * s));
                }
                Op::MaskConst { x, mask } => {
                    let mut g = gy;
                    for chunk in g.data_mut().chunks_exact_mut(mask.len()) {
                        for (v, &m) in chunk.iter_mut().zip(mask.iter()) {
                            *v *= m;
                        }
                    }
                    send(*x, g);
                }
                Op::ScaleByScalar { x, s } => {
                    let k = val(*s).data()[0];
                    if wants(*s) {
                        let xv = val(*x);
                        let ds: T = gy.data().iter().zip(xv.data()).map(|(&g, &v)| g * v).sum();
                        send(*s, Tensor::scalar(ds));
                    }
                    if wants(*x) {
                        send(*x, gy.map(|g| g * k));
                    }
                }
                Op::Concat(xs) => {
                    let (n, c_total, h, w) = gy.dims4();
                    let hw = h * w;
                    let mut offset = 0;
                    for &x in xs {
                        let c = val(x).shape()[1];
                        if wants(x) {
                            let mut data = Vec::with_capacity(n * c * hw);
                            for s in 0..n {
                                let start = (s * c_total + offset) * hw;
                                data.extend_from_slice(&gy.data()[start..start + c * hw]);
                            }
                            send(x, Tensor::new(vec![n, c, h, w], data));
                        }
                        offset += c;
                    }
                }
                Op::Narrow { x, start } => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4();
                    let len = gy.shape()[1];
                    let hw = h * w;
                    let mut dx = Tensor::zeros(xv.shape());
                    for s in 0..n {
                        let dst = (s * c + start) * hw;
                        dx.data_mut()[dst..dst + len * hw]
                            .copy_from_slice(&gy.data()[s * len * hw..(s + 1) * len * hw]);
                    }
                    send(*x, dx);
                }
                Op::Fft2c { x, inverse } => {
                    send(*x, kernels::fft2c_channels(&gy, !inverse));
                }
                Op::Expand { img, maps } => {
                    let iv = val(*img);
                    let mv = val(*maps);
                    let (nc, hw) = complex_planes(&mv);
                    let (xr, xi) = iv.data().split_at(hw);
                    if wants(*img) {
                        let mut gi = Tensor::zeros(iv.shape());
                        let (gr, gim) = gi.data_mut().split_at_mut(hw);
                        for k in 0..nc {
                            let (sr, si) = mv.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                            let (yr, yi) = gy.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                            for p in 0..hw {
                                // conj(S) * g
                                gr[p] += sr[p] * yr[p] + si[p] * yi[p];
                                gim[p] += sr[p] * yi[p] - si[p] * yr[p];
                            }
                        }
                        send(*img, gi);
                    }
                    if wants(*maps) {
                        let mut gm = Tensor::zeros(mv.shape());
                        for k in 0..nc {
                            let (yr, yi) = gy.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                            let (gr, gim) = gm.data_mut()[k * 2 * hw..(k + 1) * 2 * hw].split_at_mut(hw);
                            for p in 0..hw {
                                // g * conj(x)
                                gr[p] = yr[p] * xr[p] + yi[p] * xi[p];
                                gim[p] = yi[p] * xr[p] - yr[p] * xi[p];
                            }
                        }
                        send(*maps, gm);
                    }
                }
                Op::Reduce { coils, maps } => {
                    let cv = val(*coils);
                    let mv = val(*maps);
                    let (nc, hw) = complex_planes(&cv);
                    let (gr, gi) = gy.data().split_at(hw);
                    if wants(*coils) {
                        let mut gc = Tensor::zeros(cv.shape());
                        for k in 0..nc {
                            let (sr, si) = mv.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                            let (or, oi) = gc.data_mut()[k * 2 * hw..(k + 1) * 2 * hw].split_at_mut(hw);
                            for p in 0..hw {
                                // g * S
                                or[p] = gr[p] * sr[p] - gi[p] * si[p];
                                oi[p] = gr[p] * si[p] + gi[p] * sr[p];
                            }
                        }
                        send(*coils, gc);
                    }
                    if wants(*maps) {
                        let mut gm = Tensor::zeros(mv.shape());
                        for k in 0..nc {
                            let (zr, zi) = cv.data()[k * 2 * hw..(k + 1) * 2 * hw].split_at(hw);
                            let (or, oi) = gm.data_mut()[k * 2 * hw..(k + 1) * 2 * hw].split_at_mut(hw);
                            for p in 0..hw {
                                // conj(g) * z
                                or[p] = gr[p] * zr[p] + gi[p] * zi[p];
                                oi[p] = gr[p] * zi[p] - gi[p] * zr[p];
                            }
                        }
                        send(*maps, gm);
                    }
                }
                Op::Rss(x) => {
                    let xv = val(*x);
                    let (_, hw) = complex_planes(&xv);
                    let r = y.data();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (d, v) in dx.data_mut().chunks_exact_mut(hw).zip(xv.data().chunks_exact(hw)) {
                        for p in 0..hw {
                            if r[p] > T::zero() {
                                d[p] = gy.data()[p] * v[p] / r[p];
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::CoilNormalize { x, norms } => {
                    let hw = norms.len();
                    let mut dots = vec![T::zero(); hw];
                    for (g, o) in gy.data().chunks_exact(hw).zip(y.data().chunks_exact(hw)) {
                        for p in 0..hw {
                            dots[p] += g[p] * o[p];
                        }
                    }
                    let mut dx = Tensor::zeros(y.shape());
                    for ((d, g), o) in dx
                        .data_mut()
                        .chunks_exact_mut(hw)
                        .zip(gy.data().chunks_exact(hw))
                        .zip(y.data().chunks_exact(hw))
                    {
                        for p in 0..hw {
                            if norms[p] > T::zero() {
                                d[p] = (g[p] - o[p] * dots[p]) / norms[p];
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::FilterValid { x, kernel } => {
                    let xs = val(*x).shape().to_vec();
                    send(*x, kernels::filter_valid_backward(&gy, &xs, kernel));
                }
                Op::Mean(x) => {
                    let xs = val(*x).shape().to_vec();
                    let n = T::from_usize(xs.iter().product()).unwrap();
                    send(*x, Tensor::full(&xs, gy.data()[0] / n));
                }
            }
        }
        Gradients { grads }
    }
}
