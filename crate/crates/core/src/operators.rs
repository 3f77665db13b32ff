//! Linear k-space and coil operators in native complex arithmetic.
//!
//! Conventions: the Fourier transform is centered (DC at index `floor(n / 2)` along
//! each axis) and orthonormal, so [`ifft2c`] is both the inverse and the adjoint of
//! [`fft2c`]. Multi-coil arrays are laid out `[n_c, n_y, n_x]`; the readout
//! dimension is `n_y` and phase encoding runs along `n_x`.

use ndarray::{Array, Array2, Array3, Array4, ArrayView3, Axis, Dimension, Zip};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampling::SamplingMask;

/// Smallest spatial extent accepted for k-space and sensitivity data.
pub const MIN_SPATIAL: usize = 4;

/// Multi-coil frequency-domain data, `[n_c, n_y, n_x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilKSpace<T: Real = f64> {
    pub data: Array3<Complex<T>>,
}

/// A single complex image, `[n_y, n_x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T: Real = f64> {
    pub data: Array2<Complex<T>>,
}

/// Per-coil complex sensitivities, `[n_c, n_y, n_x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivityMaps<T: Real = f64> {
    pub maps: Array3<Complex<T>>,
}

fn check_spatial(what: &str, dims: &[usize]) -> Result<()> {
    let n = dims.len();
    if dims[0] == 0 {
        return Err(Error::Shape(format!("{what}: at least one coil is required")));
    }
    if dims[n - 2] < MIN_SPATIAL || dims[n - 1] < MIN_SPATIAL {
        return Err(Error::Shape(format!(
            "{what}: spatial dims {}x{} below the minimum {MIN_SPATIAL}x{MIN_SPATIAL}",
            dims[n - 2],
            dims[n - 1]
        )));
    }
    Ok(())
}

impl<T: Real> MultiCoilKSpace<T> {
    pub fn new(data: Array3<Complex<T>>) -> Result<Self> {
        check_spatial("k-space", data.shape())?;
        Ok(Self { data })
    }

    pub fn zeros(n_c: usize, n_y: usize, n_x: usize) -> Self {
        Self {
            data: Array3::zeros((n_c, n_y, n_x)),
        }
    }

    pub fn n_coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn to_channels(&self) -> Array4<T> {
        complex_to_channels(&self.data)
    }

    pub fn from_channels(channels: &Array4<T>) -> Result<Self> {
        Self::new(channels_to_complex(channels)?)
    }

    pub fn cast<U: Real>(&self) -> MultiCoilKSpace<U> {
        MultiCoilKSpace {
            data: cast_complex(&self.data),
        }
    }
}

impl<T: Real> Image<T> {
    pub fn new(data: Array2<Complex<T>>) -> Self {
        Self { data }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl<T: Real> CoilSensitivityMaps<T> {
    pub fn new(maps: Array3<Complex<T>>) -> Result<Self> {
        check_spatial("sensitivity maps", maps.shape())?;
        Ok(Self { maps })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    /// Pixelwise `sum_k conj(S^k) S^k`.
    pub fn sum_of_squares(&self) -> Array2<T> {
        let (ny, nx) = self.spatial();
        let mut out = Array2::<T>::zeros((ny, nx));
        for coil in self.maps.outer_iter() {
            Zip::from(&mut out).and(&coil).for_each(|o, s| *o += s.norm_sqr());
        }
        out
    }

    /// Rescales every pixel so that `sum_k |S^k|^2 = 1`. Pixels outside `support`
    /// (or with zero energy) become exactly zero.
    pub fn normalized(&self, support: Option<&Array2<bool>>) -> Self {
        let energy = self.sum_of_squares();
        let mut maps = self.maps.clone();
        for mut coil in maps.outer_iter_mut() {
            Zip::indexed(&mut coil).for_each(|(y, x), s| {
                let inside = support.is_none_or(|m| m[[y, x]]);
                let e = energy[[y, x]];
                if inside && e > T::zero() {
                    *s = *s / e.sqrt();
                } else {
                    *s = Complex::new(T::zero(), T::zero());
                }
            });
        }
        Self { maps }
    }

    pub fn cast<U: Real>(&self) -> CoilSensitivityMaps<U> {
        CoilSensitivityMaps {
            maps: cast_complex(&self.maps),
        }
    }
}

pub(crate) fn cast_complex<U: Real, T: Real, D: Dimension>(
    a: &Array<Complex<T>, D>,
) -> Array<Complex<U>, D> {
    a.mapv(|z| {
        Complex::new(
            U::from_f64(z.re.to_f64().unwrap()).unwrap(),
            U::from_f64(z.im.to_f64().unwrap()).unwrap(),
        )
    })
}

/// Centered orthonormal 2D FFT of one contiguous `h x w` plane, in place.
pub(crate) fn centered_fft2_plane<T: Real>(
    data: &mut [Complex<T>],
    h: usize,
    w: usize,
    inverse: bool,
    work: &mut Vec<Complex<T>>,
) {
    debug_assert_eq!(data.len(), h * w);
    work.clear();
    work.resize(h * w, Complex::new(T::zero(), T::zero()));
    let (sh, sw) = (h / 2, w / 2);
    // ifftshift
    for i in 0..h {
        let src = ((i + sh) % h) * w;
        let dst = &mut work[i * w..(i + 1) * w];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = data[src + (j + sw) % w];
        }
    }
    T::fft_plan(w, inverse).process(work);
    for i in 0..h {
        for j in 0..w {
            data[j * h + i] = work[i * w + j];
        }
    }
    T::fft_plan(h, inverse).process(data);
    let scale = T::one() / T::from_usize(h * w).unwrap().sqrt();
    // fftshift on the way back from the transposed layout
    for j in 0..w {
        let dj = (j + sw) % w;
        for i in 0..h {
            work[((i + sh) % h) * w + dj] = data[j * h + i] * scale;
        }
    }
    data.copy_from_slice(work);
}

fn fft2c_impl<T: Real, D: Dimension>(
    input: &Array<Complex<T>, D>,
    inverse: bool,
) -> Result<Array<Complex<T>, D>> {
    let nd = input.ndim();
    if nd < 2 {
        return Err(Error::Shape("fft2c needs at least two dimensions".into()));
    }
    if input.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("fft2c input".into()));
    }
    let (h, w) = (input.shape()[nd - 2], input.shape()[nd - 1]);
    let mut out = input.as_standard_layout().into_owned();
    if h == 0 || w == 0 {
        return Ok(out);
    }
    let mut work = Vec::new();
    let slice = out.as_slice_mut().expect("standard layout");
    for plane in slice.chunks_exact_mut(h * w) {
        centered_fft2_plane(plane, h, w, inverse, &mut work);
    }
    Ok(out)
}

/// Centered, orthonormal 2D Fourier transform over the last two axes.
pub fn fft2c<T: Real, D: Dimension>(img: &Array<Complex<T>, D>) -> Result<Array<Complex<T>, D>> {
    fft2c_impl(img, false)
}

/// Inverse (and adjoint) of [`fft2c`].
pub fn ifft2c<T: Real, D: Dimension>(ksp: &Array<Complex<T>, D>) -> Result<Array<Complex<T>, D>> {
    fft2c_impl(ksp, true)
}

fn check_mask_shape(mask: &SamplingMask, ny: usize, nx: usize) -> Result<()> {
    if mask.shape() != (ny, nx) {
        return Err(Error::Shape(format!(
            "mask is {:?} but data is {ny}x{nx}",
            mask.shape()
        )));
    }
    Ok(())
}

/// Multiplies every coil by the same binary mask.
pub fn apply_mask<T: Real>(
    ksp: &MultiCoilKSpace<T>,
    mask: &SamplingMask,
) -> Result<MultiCoilKSpace<T>> {
    let (ny, nx) = ksp.spatial();
    check_mask_shape(mask, ny, nx)?;
    Ok(MultiCoilKSpace {
        data: mask_stack(ksp.data.view(), &mask.mask),
    })
}

pub(crate) fn mask_stack<T: Real>(
    data: ArrayView3<Complex<T>>,
    mask: &Array2<bool>,
) -> Array3<Complex<T>> {
    let mut out = data.to_owned();
    for mut coil in out.outer_iter_mut() {
        Zip::from(&mut coil).and(mask).for_each(|z, &m| {
            if !m {
                *z = Complex::new(T::zero(), T::zero());
            }
        });
    }
    out
}

fn check_maps<T: Real>(maps: &CoilSensitivityMaps<T>, ny: usize, nx: usize) -> Result<()> {
    if maps.spatial() != (ny, nx) {
        return Err(Error::Shape(format!(
            "sensitivity maps are {:?} but data is {ny}x{nx}",
            maps.spatial()
        )));
    }
    Ok(())
}

/// `E(x) = (S^1 x, ..., S^{n_c} x)`.
pub fn expand<T: Real>(img: &Image<T>, maps: &CoilSensitivityMaps<T>) -> Result<Array3<Complex<T>>> {
    let (ny, nx) = img.shape();
    check_maps(maps, ny, nx)?;
    let mut out = maps.maps.clone();
    for mut coil in out.outer_iter_mut() {
        Zip::from(&mut coil).and(&img.data).for_each(|s, &x| *s = *s * x);
    }
    Ok(out)
}

/// `R(z) = sum_k conj(S^k) z^k`.
pub fn reduce<T: Real>(
    coil_imgs: ArrayView3<Complex<T>>,
    maps: &CoilSensitivityMaps<T>,
) -> Result<Image<T>> {
    let (nc, ny, nx) = coil_imgs.dim();
    if maps.maps.dim() != (nc, ny, nx) {
        return Err(Error::Shape(format!(
            "coil images {:?} vs sensitivity maps {:?}",
            coil_imgs.dim(),
            maps.maps.dim()
        )));
    }
    let mut out = Array2::<Complex<T>>::zeros((ny, nx));
    for (coil, s) in coil_imgs.outer_iter().zip(maps.maps.outer_iter()) {
        Zip::from(&mut out)
            .and(&coil)
            .and(&s)
            .for_each(|o, &z, &s| *o = *o + s.conj() * z);
    }
    Ok(Image { data: out })
}

/// `A = U . F . E`.
pub fn forward_a<T: Real>(
    img: &Image<T>,
    maps: &CoilSensitivityMaps<T>,
    mask: &SamplingMask,
) -> Result<MultiCoilKSpace<T>> {
    let coils = expand(img, maps)?;
    let ksp = MultiCoilKSpace { data: fft2c(&coils)? };
    apply_mask(&ksp, mask)
}

/// `A* = R . F^-1 . U`.
pub fn adjoint_a<T: Real>(
    ksp: &MultiCoilKSpace<T>,
    maps: &CoilSensitivityMaps<T>,
    mask: &SamplingMask,
) -> Result<Image<T>> {
    let masked = apply_mask(ksp, mask)?;
    let coils = ifft2c(&masked.data)?;
    reduce(coils.view(), maps)
}

/// Root-sum-of-squares coil combination.
pub fn rss<T: Real>(coil_imgs: ArrayView3<Complex<T>>) -> Array2<T> {
    let (_, ny, nx) = coil_imgs.dim();
    let mut acc = Array2::<T>::zeros((ny, nx));
    for coil in coil_imgs.outer_iter() {
        Zip::from(&mut acc).and(&coil).for_each(|a, z| *a += z.norm_sqr());
    }
    acc.mapv_inplace(|v| v.sqrt());
    acc
}

/// SENSE coil combination `R . F^-1` of (possibly sub-sampled) k-space.
pub fn sense_reconstruct<T: Real>(
    ksp: &MultiCoilKSpace<T>,
    maps: &CoilSensitivityMaps<T>,
) -> Result<Image<T>> {
    let coils = ifft2c(&ksp.data)?;
    reduce(coils.view(), maps)
}

/// `[n_c, n_y, n_x]` complex to `[2, n_c, n_y, n_x]` real (real part first).
pub fn complex_to_channels<T: Real>(data: &Array3<Complex<T>>) -> Array4<T> {
    let (nc, ny, nx) = data.dim();
    let mut out = Array4::<T>::zeros((2, nc, ny, nx));
    Zip::from(out.index_axis_mut(Axis(0), 0))
        .and(data)
        .for_each(|o, z| *o = z.re);
    Zip::from(out.index_axis_mut(Axis(0), 1))
        .and(data)
        .for_each(|o, z| *o = z.im);
    out
}

/// Inverse of [`complex_to_channels`].
pub fn channels_to_complex<T: Real>(channels: &Array4<T>) -> Result<Array3<Complex<T>>> {
    if channels.shape()[0] != 2 {
        return Err(Error::Shape(format!(
            "expected a leading channel axis of 2, got {}",
            channels.shape()[0]
        )));
    }
    let re = channels.index_axis(Axis(0), 0);
    let im = channels.index_axis(Axis(0), 1);
    Ok(Zip::from(&re).and(&im).map_collect(|&r, &i| Complex::new(r, i)))
}
