//! Synthetic multi-coil acquisitions and the on-disk dataset.
//!
//! Phantoms are seed-perturbed modified Shepp-Logan slices with a smooth phase;
//! coil profiles are Gaussian bumps placed around the field of view. Volumes
//! are stored as a fixed-size header followed by interleaved little-endian
//! `f32` real/imaginary k-space samples.

use std::f64::consts::PI;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis, Zip};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::operators::{fft2c, ifft2c, rss, CoilSensitivityMaps, Image, MultiCoilKSpace};
use crate::seed::derive_seed;

pub const VOLUME_MAGIC: &[u8; 8] = b"RVNVOL\0\0";
pub const VOLUME_VERSION: u32 = 1;
/// Bytes before the first k-space sample.
pub const VOLUME_HEADER_LEN: usize = 48;
/// Dtype tag of the payload: complex `f32`, real part first.
pub const DTYPE_COMPLEX_F32: u8 = 1;

/// Width of the Gaussian coil profiles in normalized coordinates.
const COIL_WIDTH: f64 = 0.9;
/// Distance of the coil centres from the image centre.
const COIL_RADIUS: f64 = 1.3;
/// Largest linear phase slope of a coil.
const COIL_PHASE_SLOPE: f64 = 0.5;

// Modified Shepp-Logan: intensity, semi-axes, centre, rotation (degrees).
const ELLIPSES: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

fn coords(ny: usize, nx: usize, y: usize, x: usize) -> (f64, f64) {
    let u = (2 * x + 1) as f64 / nx as f64 - 1.0;
    let v = 1.0 - (2 * y + 1) as f64 / ny as f64;
    (u, v)
}

/// Phantom magnitude in `[0, 1]`.
pub fn phantom_magnitude(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let (ny, nx) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = ELLIPSES;
    for (i, e) in ellipses.iter_mut().enumerate() {
        let (shift, scale, turn, gain) = if i < 2 { (0.0, 0.03, 0.0, 0.0) } else { (0.03, 0.1, 8.0, 0.25) };
        e[0] *= 1.0 + rng.random_range(-1.0..=1.0) * gain;
        let s = 1.0 + rng.random_range(-1.0..=1.0) * scale;
        e[1] *= s;
        e[2] *= s;
        e[3] += rng.random_range(-1.0..=1.0) * shift;
        e[4] += rng.random_range(-1.0..=1.0) * shift;
        e[5] += rng.random_range(-1.0..=1.0) * turn;
    }
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let (u, v) = coords(ny, nx, y, x);
        let mut val = 0.0;
        for &[a, ax, ay, cx, cy, deg] in &ellipses {
            let (s, c) = (deg * PI / 180.0).sin_cos();
            let (du, dv) = (u - cx, v - cy);
            let (p, q) = (c * du + s * dv, -s * du + c * dv);
            if (p / ax).powi(2) + (q / ay).powi(2) <= 1.0 {
                val += a;
            }
        }
        val.clamp(0.0, 1.0)
    })
}

/// Ellipse phantom with a smooth low-order phase.
pub fn generate_phantom(shape: (usize, usize), seed: u64) -> Image<f64> {
    let (ny, nx) = shape;
    let mag = phantom_magnitude(shape, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let data = Array2::from_shape_fn((ny, nx), |(y, x)| {
        let (u, v) = coords(ny, nx, y, x);
        let phase = PI / 6.0 * (c[0] * u + c[1] * v + c[2] * u * v);
        Complex::from_polar(mag[[y, x]], phase)
    });
    Image::new(data)
}

/// Smooth coil profiles normalized so that `sum_k |S^k|^2 = 1` at every pixel.
/// A single coil is the constant map 1.
pub fn simulate_coil_maps(shape: (usize, usize), n_coils: usize, seed: u64) -> Result<CoilSensitivityMaps<f64>> {
    let (ny, nx) = shape;
    if n_coils == 0 {
        return Err(Error::InvalidArgument("at least one coil is required".into()));
    }
    if n_coils == 1 {
        return CoilSensitivityMaps::new(Array3::from_elem((1, ny, nx), Complex::new(1.0, 0.0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0.0..2.0 * PI / n_coils as f64);
    let mut maps = Array3::<Complex<f64>>::zeros((n_coils, ny, nx));
    for (k, mut coil) in maps.outer_iter_mut().enumerate() {
        let theta = offset + 2.0 * PI * k as f64 / n_coils as f64;
        let (cx, cy) = (COIL_RADIUS * theta.cos(), COIL_RADIUS * theta.sin());
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let slope = rng.random_range(-COIL_PHASE_SLOPE..=COIL_PHASE_SLOPE);
        Zip::indexed(&mut coil).for_each(|(y, x), s| {
            let (u, v) = coords(ny, nx, y, x);
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            let mag = (-d2 / (2.0 * COIL_WIDTH * COIL_WIDTH)).exp();
            let phase = phase0 + slope * (u * theta.cos() + v * theta.sin());
            *s = Complex::from_polar(mag, phase);
        });
    }
    Ok(CoilSensitivityMaps::new(maps)?.normalized(None))
}

/// Upper bound on `|S(p) - S(q)|` between neighbouring pixels of any map from
/// [`simulate_coil_maps`], independent of the seed.
///
/// Each normalized map has a spatial derivative of magnitude at most
/// `2 * d_max / w^2 + slope` (log-derivative of the Gaussian, of the
/// normalizer, and the phase ramp), with `d_max` the largest pixel-to-coil
/// distance. Neighbours are `2 / n` apart in normalized coordinates.
pub fn coil_map_gradient_bound(shape: (usize, usize)) -> f64 {
    let d_max = 2f64.sqrt() + COIL_RADIUS;
    let lipschitz = 2.0 * d_max / (COIL_WIDTH * COIL_WIDTH) + COIL_PHASE_SLOPE;
    lipschitz * 2.0 / shape.0.min(shape.1) as f64
}

/// A fully sampled acquisition and its ground truth.
#[derive(Clone, Debug)]
pub struct AcquisitionSample {
    pub kspace: MultiCoilKSpace<f64>,
    /// `rss(ifft2c(kspace))`.
    pub reference: Array2<f64>,
    pub maps: CoilSensitivityMaps<f64>,
    pub sigma: f64,
}

/// `y^k = fft2c(S^k x) + n^k` with complex Gaussian noise of standard deviation
/// `sigma` per entry (`sigma / sqrt(2)` per real component).
pub fn simulate_acquisition(
    phantom: &Image<f64>,
    maps: &CoilSensitivityMaps<f64>,
    sigma: f64,
    seed: u64,
) -> Result<AcquisitionSample> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {sigma}")));
    }
    let coils = crate::operators::expand(phantom, maps)?;
    let mut ksp = fft2c(&coils)?;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma / 2f64.sqrt()).expect("valid std");
        ksp.iter_mut()
            .for_each(|z| *z += Complex::new(normal.sample(&mut rng), normal.sample(&mut rng)));
    }
    let reference = rss(ifft2c(&ksp)?.view());
    Ok(AcquisitionSample {
        kspace: MultiCoilKSpace::new(ksp)?,
        reference,
        maps: maps.clone(),
        sigma,
    })
}

/// Fully sampled multi-slice k-space, `[n_slices, n_c, n_y, n_x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub kspace: Array4<Complex<f32>>,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeHeader {
    pub version: u32,
    pub dtype: u8,
    pub n_slices: usize,
    pub n_coils: usize,
    pub n_y: usize,
    pub n_x: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeInfo {
    pub header: VolumeHeader,
    pub sigma: f64,
    pub seed: u64,
}

impl VolumeInfo {
    pub fn payload_len(&self) -> usize {
        let h = &self.header;
        h.n_slices * h.n_coils * h.n_y * h.n_x * 8
    }
}

impl Volume {
    pub fn n_slices(&self) -> usize {
        self.kspace.shape()[0]
    }

    pub fn slice(&self, i: usize) -> MultiCoilKSpace<f32> {
        MultiCoilKSpace {
            data: self.kspace.index_axis(Axis(0), i).to_owned(),
        }
    }

    /// Fully sampled RSS reference of slice `i`.
    pub fn reference(&self, i: usize) -> Result<Array2<f32>> {
        Ok(rss(ifft2c(&self.slice(i).data)?.view()))
    }
}

fn encode_header(info: &VolumeInfo) -> Vec<u8> {
    let h = &info.header;
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.push(h.dtype);
    out.extend_from_slice(&[0, 0, 0]);
    for d in [h.n_slices, h.n_coils, h.n_y, h.n_x] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&info.sigma.to_le_bytes());
    out.extend_from_slice(&info.seed.to_le_bytes());
    debug_assert_eq!(out.len(), VOLUME_HEADER_LEN);
    out
}

fn decode_header(r: &mut Reader) -> Result<VolumeInfo> {
    if r.take(8)? != VOLUME_MAGIC {
        return Err(Error::format(r.path(), "not a volume file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VOLUME_VERSION {
        return Err(Error::format(r.path(), format!("unsupported volume version {version}")));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_COMPLEX_F32 {
        return Err(Error::format(r.path(), format!("unsupported volume dtype {dtype}")));
    }
    r.take(3)?;
    let n_slices = r.u32()? as usize;
    let n_coils = r.u32()? as usize;
    let n_y = r.u32()? as usize;
    let n_x = r.u32()? as usize;
    let sigma = r.f64()?;
    let seed = r.u64()?;
    Ok(VolumeInfo {
        header: VolumeHeader {
            version,
            dtype,
            n_slices,
            n_coils,
            n_y,
            n_x,
        },
        sigma,
        seed,
    })
}

pub fn volume_to_bytes(volume: &Volume) -> Vec<u8> {
    let (ns, nc, ny, nx) = volume.kspace.dim();
    let info = VolumeInfo {
        header: VolumeHeader {
            version: VOLUME_VERSION,
            dtype: DTYPE_COMPLEX_F32,
            n_slices: ns,
            n_coils: nc,
            n_y: ny,
            n_x: nx,
        },
        sigma: volume.sigma,
        seed: volume.seed,
    };
    let mut out = encode_header(&info);
    out.reserve(info.payload_len());
    for z in volume.kspace.iter() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

pub fn volume_from_bytes(bytes: &[u8], path: &Path) -> Result<Volume> {
    let mut r = Reader::new(bytes, path);
    let info = decode_header(&mut r)?;
    let expected = VOLUME_HEADER_LEN + info.payload_len();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let h = info.header;
    let vals: Vec<f32> = r.reals(1, info.payload_len() / 4)?;
    let data: Vec<Complex<f32>> = vals.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
    let kspace = Array4::from_shape_vec((h.n_slices, h.n_coils, h.n_y, h.n_x), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Volume {
        kspace,
        sigma: info.sigma,
        seed: info.seed,
    })
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    write_file(path, &volume_to_bytes(volume))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    volume_from_bytes(&read_file(path)?, path)
}

/// Reads only the fixed-size header.
pub fn read_volume_header(path: &Path) -> Result<VolumeInfo> {
    let mut buf = Vec::with_capacity(VOLUME_HEADER_LEN);
    std::fs::File::open(path)
        .and_then(|f| f.take(VOLUME_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_header(&mut Reader::new(&buf, path))
}

/// Simulates one volume: per-slice phantoms sharing one set of coil maps.
pub fn simulate_volume(
    shape: (usize, usize),
    n_coils: usize,
    n_slices: usize,
    sigma: f64,
    seed: u64,
) -> Result<Volume> {
    let maps = simulate_coil_maps(shape, n_coils, derive_seed(seed, &[0]))?;
    let mut kspace = Array4::<Complex<f32>>::zeros((n_slices, n_coils, shape.0, shape.1));
    for s in 0..n_slices {
        let phantom = generate_phantom(shape, derive_seed(seed, &[1, s as u64]));
        let acq = simulate_acquisition(&phantom, &maps, sigma, derive_seed(seed, &[2, s as u64]))?;
        Zip::from(kspace.index_axis_mut(Axis(0), s))
            .and(&acq.kspace.data)
            .for_each(|o, z| *o = Complex::new(z.re as f32, z.im as f32));
    }
    Ok(Volume { kspace, sigma, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub slices: usize,
    pub coils: usize,
    pub shape: [usize; 2],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sigma: f64,
    pub volumes: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut m: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.volumes.iter().filter(move |e| e.split == split)
    }

    pub fn volume_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn total_slices(&self) -> usize {
        self.volumes.iter().map(|e| e.slices).sum()
    }
}

/// Writes `cfg.train_volumes + cfg.val_volumes + cfg.test_volumes` volumes and
/// a manifest into `out_dir`. Splits are assigned by a seeded shuffle of the
/// volume indices.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let n = cfg.train_volumes + cfg.val_volumes + cfg.test_volumes;
    if n == 0 {
        return Err(Error::EmptyDataset("no volumes requested".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD5])));
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < cfg.train_volumes {
            Split::Train
        } else if rank < cfg.train_volumes + cfg.val_volumes {
            Split::Val
        } else {
            Split::Test
        };
    }
    let shape = (cfg.shape[0], cfg.shape[1]);
    let mut volumes = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let vseed = derive_seed(seed, &[0xA0, i as u64]);
        let vol = simulate_volume(shape, cfg.coils, cfg.slices_per_volume, cfg.sigma, vseed)?;
        let name = format!("vol_{i:03}.rvv");
        write_volume(&out_dir.join(&name), &vol)?;
        volumes.push(ManifestEntry {
            path: name,
            split,
            slices: cfg.slices_per_volume,
            coils: cfg.coils,
            shape: cfg.shape,
            seed: vseed,
        });
    }
    let manifest = Manifest {
        seed,
        sigma: cfg.sigma,
        volumes,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// One fully sampled slice ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct SliceData {
    /// `<volume file>#<slice>`.
    pub id: String,
    pub kspace: MultiCoilKSpace<f32>,
    pub reference: Array2<f32>,
}

/// All slices of the volumes in `split`.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<SliceData>> {
    let mut out = Vec::new();
    for entry in manifest.entries(split) {
        let vol = read_volume(&manifest.volume_path(entry))?;
        for s in 0..vol.n_slices() {
            out.push(SliceData {
                id: format!("{}#{s}", entry.path),
                kspace: vol.slice(s),
                reference: vol.reference(s)?,
            });
        }
    }
    Ok(out)
}
