//! Forward and backward kernels on raw NCHW buffers.

use num_complex::Complex;

use crate::operators::centered_fft2_plane;
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride-1 convolution geometry: symmetric zero padding and dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Zero padding that preserves the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_len(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad)
            .checked_sub(self.dilation * (k - 1))
            .expect("kernel larger than padded input")
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn hwo(&self) -> usize {
        self.ho * self.wo
    }
    /// Valid output column range `[lo, hi)` for kernel column offset `off = kx * d`.
    fn span(&self, off: usize, pad: usize, out: usize, inp: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(off).min(out);
        let hi = (inp + pad).saturating_sub(off).min(out).max(lo);
        (lo, hi)
    }
    fn is_pointwise(&self, g: ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, g: ConvGeom, cols: &mut [T]) {
    let hwo = d.hwo();
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let (ylo, yhi) = d.span(ky * g.dilation, g.pad, d.ho, d.h);
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * hwo..(row + 1) * hwo];
                let (xlo, xhi) = d.span(kx * g.dilation, g.pad, d.wo, d.w);
                for oy in 0..d.ho {
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if oy < ylo || oy >= yhi || xlo == xhi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy + ky * g.dilation - g.pad;
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    let ix0 = xlo + kx * g.dilation - g.pad;
                    line[xlo..xhi].copy_from_slice(&plane[iy * d.w + ix0..iy * d.w + ix0 + (xhi - xlo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, g: ConvGeom, dx: &mut [T]) {
    let hwo = d.hwo();
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let (ylo, yhi) = d.span(ky * g.dilation, g.pad, d.ho, d.h);
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * hwo..(row + 1) * hwo];
                let (xlo, xhi) = d.span(kx * g.dilation, g.pad, d.wo, d.w);
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy + ky * g.dilation - g.pad;
                    let ix0 = xlo + kx * g.dilation - g.pad;
                    let dst = &mut plane[iy * d.w + ix0..iy * d.w + ix0 + (xhi - xlo)];
                    for (o, &v) in dst.iter_mut().zip(&src[oy * d.wo + xlo..oy * d.wo + xhi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> (usize, usize, ConvDims) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv input channels {cin} vs weight {wcin}");
    let d = ConvDims {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho: g.out_len(h, kh),
        wo: g.out_len(wd, kw),
    };
    (n, cout, d)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (n, cout, d) = conv_dims(x, w, g);
    let (k, hwo) = (d.k(), d.hwo());
    let mut out = Tensor::zeros(&[n, cout, d.ho, d.wo]);
    let pointwise = d.is_pointwise(g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * hwo] };
    let xin = d.cin * d.h * d.w;
    for s in 0..n {
        let xs = &x.data()[s * xin..(s + 1) * xin];
        let b_ptr = if pointwise {
            xs.as_ptr()
        } else {
            im2col(xs, &d, g, &mut cols);
            cols.as_ptr()
        };
        let os = &mut out.data_mut()[s * cout * hwo..(s + 1) * cout * hwo];
        unsafe {
            T::gemm(
                cout,
                k,
                hwo,
                T::one(),
                w.data().as_ptr(),
                k as isize,
                1,
                b_ptr,
                hwo as isize,
                1,
                T::zero(),
                os.as_mut_ptr(),
                hwo as isize,
                1,
            );
        }
        if let Some(b) = b {
            for (co, chunk) in os.chunks_exact_mut(hwo).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, cout, d) = conv_dims(x, w, g);
    let (k, hwo) = (d.k(), d.hwo());
    let pointwise = d.is_pointwise(g);
    let xin = d.cin * d.h * d.w;
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut db = need.2.then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * hwo }];
    for s in 0..n {
        let gs = &gy.data()[s * cout * hwo..(s + 1) * cout * hwo];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gs.chunks_exact(hwo).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        let xs = &x.data()[s * xin..(s + 1) * xin];
        if let Some(dw) = dw.as_mut() {
            let c_ptr = if pointwise {
                xs.as_ptr()
            } else {
                im2col(xs, &d, g, &mut cols);
                cols.as_ptr()
            };
            unsafe {
                T::gemm(
                    cout,
                    hwo,
                    k,
                    T::one(),
                    gs.as_ptr(),
                    hwo as isize,
                    1,
                    c_ptr,
                    1,
                    hwo as isize,
                    T::one(),
                    dw.data_mut().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * xin..(s + 1) * xin];
            let target = if pointwise { dxs.as_mut_ptr() } else { cols.as_mut_ptr() };
            unsafe {
                T::gemm(
                    k,
                    cout,
                    hwo,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    k as isize,
                    gs.as_ptr(),
                    hwo as isize,
                    1,
                    T::zero(),
                    target,
                    hwo as isize,
                    1,
                );
            }
            if !pointwise {
                col2im(&cols, &d, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Padding amounts `(top, bottom, left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pads {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

fn planes<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    let nd = s.len();
    (s[..nd - 2].iter().product(), s[nd - 2], s[nd - 1])
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let nd = s.len();
    s[nd - 2] = h;
    s[nd - 1] = w;
    s
}

pub fn pad_forward<T: Real>(x: &Tensor<T>, p: Pads, mode: PadMode) -> Tensor<T> {
    let (np, h, w) = planes(x);
    let (ho, wo) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut out = Tensor::zeros(&with_spatial(x.shape(), ho, wo));
    for pl in 0..np {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out.data_mut()[pl * ho * wo..(pl + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let iy = oy as isize - p.top as isize;
                let ix = ox as isize - p.left as isize;
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                dst[oy * wo + ox] = match mode {
                    PadMode::Zero if !inside => T::zero(),
                    _ => {
                        let cy = iy.clamp(0, h as isize - 1) as usize;
                        let cx = ix.clamp(0, w as isize - 1) as usize;
                        src[cy * w + cx]
                    }
                };
            }
        }
    }
    out
}

pub fn pad_backward<T: Real>(gy: &Tensor<T>, x_shape: &[usize], p: Pads, mode: PadMode) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let (np, h, w) = planes(&dx);
    let (ho, wo) = (h + p.top + p.bottom, w + p.left + p.right);
    for pl in 0..np {
        let src = &gy.data()[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut dx.data_mut()[pl * h * w..(pl + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let iy = oy as isize - p.top as isize;
                let ix = ox as isize - p.left as isize;
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                if mode == PadMode::Zero && !inside {
                    continue;
                }
                let cy = iy.clamp(0, h as isize - 1) as usize;
                let cx = ix.clamp(0, w as isize - 1) as usize;
                dst[cy * w + cx] += src[oy * wo + ox];
            }
        }
    }
    dx
}

pub fn crop_forward<T: Real>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let (np, hi, wi) = planes(x);
    assert!(top + h <= hi && left + w <= wi, "crop out of bounds");
    let mut out = Tensor::zeros(&with_spatial(x.shape(), h, w));
    for pl in 0..np {
        for y in 0..h {
            let s = pl * hi * wi + (top + y) * wi + left;
            let d = pl * h * w + y * w;
            out.data_mut()[d..d + w].copy_from_slice(&x.data()[s..s + w]);
        }
    }
    out
}

pub fn crop_backward<T: Real>(gy: &Tensor<T>, x_shape: &[usize], top: usize, left: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let (np, hi, wi) = planes(&dx);
    let (_, h, w) = planes(gy);
    for pl in 0..np {
        for y in 0..h {
            let d = pl * hi * wi + (top + y) * wi + left;
            let s = pl * h * w + y * w;
            dx.data_mut()[d..d + w].copy_from_slice(&gy.data()[s..s + w]);
        }
    }
    dx
}

/// 2x2 max pooling with stride 2; returns the flat input index of each maximum.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (np, h, w) = planes(x);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&with_spatial(x.shape(), ho, wo));
    let mut arg = vec![0u32; np * ho * wo];
    for pl in 0..np {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                let o = pl * ho * wo + oy * wo + ox;
                out.data_mut()[o] = x.data()[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(gy: &Tensor<T>, x_shape: &[usize], arg: &[u32]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&g, &a) in gy.data().iter().zip(arg) {
        dx.data_mut()[a as usize] += g;
    }
    dx
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (np, h, w) = planes(x);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&with_spatial(x.shape(), ho, wo));
    for pl in 0..np {
        for oy in 0..ho {
            for ox in 0..wo {
                out.data_mut()[pl * ho * wo + oy * wo + ox] = x.data()[pl * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(gy: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let (np, h, w) = planes(&dx);
    let (ho, wo) = (2 * h, 2 * w);
    for pl in 0..np {
        for oy in 0..ho {
            for ox in 0..wo {
                dx.data_mut()[pl * h * w + (oy / 2) * w + ox / 2] += gy.data()[pl * ho * wo + oy * wo + ox];
            }
        }
    }
    dx
}

/// Per-plane normalisation to zero mean and unit (biased) variance.
pub fn instance_norm_forward<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (np, h, w) = planes(x);
    let hw = h * w;
    let inv_n = T::one() / T::from_usize(hw).unwrap();
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(np);
    for pl in 0..np {
        let src = &x.data()[pl * hw..(pl + 1) * hw];
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in out.data_mut()[pl * hw..(pl + 1) * hw].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>, inv_std: &[T]) -> Tensor<T> {
    let (np, h, w) = planes(y);
    let hw = h * w;
    let inv_n = T::one() / T::from_usize(hw).unwrap();
    let mut dx = Tensor::zeros(y.shape());
    for pl in 0..np {
        let ys = &y.data()[pl * hw..(pl + 1) * hw];
        let gs = &gy.data()[pl * hw..(pl + 1) * hw];
        let mean_g = gs.iter().copied().sum::<T>() * inv_n;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() * inv_n;
        for ((d, &g), &v) in dx.data_mut()[pl * hw..(pl + 1) * hw].iter_mut().zip(gs).zip(ys) {
            *d = inv_std[pl] * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

/// Separable filter over the last two axes keeping only fully covered windows.
pub fn filter_valid_forward<T: Real>(x: &Tensor<T>, k: &[T]) -> Tensor<T> {
    let (np, h, w) = planes(x);
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut out = Tensor::zeros(&with_spatial(x.shape(), ho, wo));
    let mut tmp = vec![T::zero(); h * wo];
    for pl in 0..np {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xo in 0..wo {
                let row = &src[y * w + xo..y * w + xo + n];
                tmp[y * wo + xo] = row.iter().zip(k).map(|(&a, &b)| a * b).sum();
            }
        }
        let dst = &mut out.data_mut()[pl * ho * wo..(pl + 1) * ho * wo];
        for yo in 0..ho {
            for xo in 0..wo {
                let mut acc = T::zero();
                for (a, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[(yo + a) * wo + xo];
                }
                dst[yo * wo + xo] = acc;
            }
        }
    }
    out
}

pub fn filter_valid_backward<T: Real>(gy: &Tensor<T>, x_shape: &[usize], k: &[T]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let (np, h, w) = planes(&dx);
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut gtmp = vec![T::zero(); h * wo];
    for pl in 0..np {
        gtmp.iter_mut().for_each(|v| *v = T::zero());
        let gs = &gy.data()[pl * ho * wo..(pl + 1) * ho * wo];
        for yo in 0..ho {
            for xo in 0..wo {
                let g = gs[yo * wo + xo];
                for (a, &kv) in k.iter().enumerate() {
                    gtmp[(yo + a) * wo + xo] += kv * g;
                }
            }
        }
        let dst = &mut dx.data_mut()[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xo in 0..wo {
                let g = gtmp[y * wo + xo];
                for (b, &kv) in k.iter().enumerate() {
                    dst[y * w + xo + b] += kv * g;
                }
            }
        }
    }
    dx
}

/// Centered orthonormal FFT of every `[2, H, W]` (re, im) pair of an NCHW tensor
/// with C = 2.
pub fn fft2c_channels<T: Real>(x: &Tensor<T>, inverse: bool) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 2, "complex tensors carry (re, im) in the channel axis");
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut buf = vec![Complex::new(T::zero(), T::zero()); hw];
    let mut work = Vec::with_capacity(hw);
    for s in 0..n {
        let base = s * 2 * hw;
        let (re, im) = x.data()[base..base + 2 * hw].split_at(hw);
        for (z, (&r, &i)) in buf.iter_mut().zip(re.iter().zip(im)) {
            *z = Complex::new(r, i);
        }
        centered_fft2_plane(&mut buf, h, w, inverse, &mut work);
        let (ore, oim) = out.data_mut()[base..base + 2 * hw].split_at_mut(hw);
        for ((r, i), z) in ore.iter_mut().zip(oim.iter_mut()).zip(&buf) {
            *r = z.re;
            *i = z.im;
        }
    }
    out
}
