//! Sub-sampling masks and the auto-calibration (ACS) operator.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::operators::{mask_stack, MultiCoilKSpace};
use crate::real::Real;

const MASK_MAGIC: &[u8; 8] = b"RVNMASK\0";
const MASK_VERSION: u32 = 1;
const MASK_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 8;

/// Binary k-space sampling pattern with its auto-calibration sub-region.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub mask: Array2<bool>,
    pub acs: Array2<bool>,
    /// Requested acceleration factor R.
    pub acceleration: f64,
    /// Seed the mask was drawn with (0 for hand-built masks).
    pub seed: u64,
}

/// Family of generated masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Random phase-encode columns with a fully sampled centre block.
    Cartesian,
    /// 2D point mask with a fully sampled central disc.
    VariableDensity,
}

impl SamplingMask {
    pub fn new(mask: Array2<bool>, acs: Array2<bool>, acceleration: f64, seed: u64) -> Result<Self> {
        if mask.dim() != acs.dim() {
            return Err(Error::Shape(format!(
                "mask {:?} and acs {:?} differ",
                mask.dim(),
                acs.dim()
            )));
        }
        if Zip::from(&mask).and(&acs).any(|&m, &a| a && !m) {
            return Err(Error::InvalidArgument(
                "acs region must be a subset of the sampling mask".into(),
            ));
        }
        if !(acceleration >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "acceleration must be >= 1, got {acceleration}"
            )));
        }
        Ok(Self {
            mask,
            acs,
            acceleration,
            seed,
        })
    }

    /// Fully sampled mask; the whole frame doubles as the ACS region.
    pub fn full(n_y: usize, n_x: usize) -> Self {
        Self {
            mask: Array2::from_elem((n_y, n_x), true),
            acs: Array2::from_elem((n_y, n_x), true),
            acceleration: 1.0,
            seed: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn nonzero(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn acs_count(&self) -> usize {
        self.acs.iter().filter(|&&m| m).count()
    }

    /// True when every row of the mask is identical (Cartesian column sampling).
    pub fn is_column_constant(&self) -> bool {
        let first = self.mask.row(0);
        self.mask.rows().into_iter().all(|r| r == first)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (ny, nx) = self.shape();
        let mut out = Vec::with_capacity(MASK_HEADER_LEN + 2 * (ny * nx).div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(ny as u32).to_le_bytes());
        out.extend_from_slice(&(nx as u32).to_le_bytes());
        out.extend_from_slice(&self.acceleration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        pack_bits(self.mask.iter().copied(), &mut out);
        pack_bits(self.acs.iter().copied(), &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MASK_HEADER_LEN {
            return Err(Error::Truncated {
                path: origin.into(),
                expected: MASK_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MASK_MAGIC {
            return Err(Error::format(origin, "not a sampling mask file (bad magic)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != MASK_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported mask version {version}"),
            ));
        }
        let ny = u32_at(12) as usize;
        let nx = u32_at(16) as usize;
        let acceleration = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let plane = (ny * nx).div_ceil(8);
        let expected = MASK_HEADER_LEN + 2 * plane;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                path: origin.into(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let body = &bytes[MASK_HEADER_LEN..];
        let mask = unpack_bits(&body[..plane], ny, nx);
        let acs = unpack_bits(&body[plane..], ny, nx);
        Self::new(mask, acs, acceleration, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        if b {
            byte |= 1 << n;
        }
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8], ny: usize, nx: usize) -> Array2<bool> {
    Array2::from_shape_fn((ny, nx), |(i, j)| {
        let k = i * nx + j;
        bytes[k / 8] >> (k % 8) & 1 == 1
    })
}

/// ACS fraction used for a given acceleration: 8% at R = 4 and 4% at R = 8,
/// extended to other factors by the same `0.32 / R` rule.
pub fn default_acs_fraction(acceleration: f64) -> f64 {
    0.32 / acceleration
}

/// Index of the first ACS column: centred, biased to the left on ties.
fn centered_start(n: usize, count: usize) -> usize {
    (n - count) / 2
}

/// Random Cartesian column mask along the last (`n_x`) axis.
///
/// The centred `acs_fraction` of columns is always sampled; further columns are
/// drawn uniformly without replacement until `round(n_x / R)` are selected.
pub fn random_cartesian_mask(
    shape: (usize, usize),
    acceleration: f64,
    acs_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let (ny, nx) = shape;
    if ny == 0 || nx == 0 {
        return Err(Error::Shape("empty mask shape".into()));
    }
    if !(acceleration >= 1.0) || acceleration > nx as f64 {
        return Err(Error::InvalidArgument(format!(
            "acceleration {acceleration} outside [1, {nx}]"
        )));
    }
    if !(acs_fraction > 0.0 && acs_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "acs fraction {acs_fraction} outside (0, 1]"
        )));
    }
    let n_acs = ((acs_fraction * nx as f64).round() as usize).clamp(1, nx);
    let acs_start = centered_start(nx, n_acs);
    let mut acs_cols = vec![false; nx];
    acs_cols[acs_start..acs_start + n_acs].fill(true);

    let budget = (nx as f64 / acceleration).round() as usize;
    let cols = if acceleration == 1.0 {
        vec![true; nx]
    } else {
        if n_acs > budget {
            return Err(Error::InfeasibleMask(format!(
                "{n_acs} ACS columns exceed the budget of {budget} for R = {acceleration}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outer: Vec<usize> = (0..nx).filter(|&c| !acs_cols[c]).collect();
        let extra = budget - n_acs;
        outer.partial_shuffle(&mut rng, extra);
        let mut cols = acs_cols.clone();
        for &c in &outer[..extra] {
            cols[c] = true;
        }
        cols
    };
    let mask = Array2::from_shape_fn((ny, nx), |(_, j)| cols[j]);
    let acs = Array2::from_shape_fn((ny, nx), |(_, j)| acs_cols[j]);
    SamplingMask::new(mask, acs, acceleration, seed)
}

/// 2D variable-density point mask.
///
/// A central disc of radius `center_radius * min(n_y, n_x) / 2` is fully
/// sampled; the remaining budget of `round(n_y n_x / R)` points is drawn without
/// replacement with a Gaussian preference for low frequencies.
pub fn variable_density_mask(
    shape: (usize, usize),
    acceleration: f64,
    center_radius: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let (ny, nx) = shape;
    if ny == 0 || nx == 0 {
        return Err(Error::Shape("empty mask shape".into()));
    }
    let total = ny * nx;
    if !(acceleration >= 1.0) || acceleration > total as f64 {
        return Err(Error::InvalidArgument(format!(
            "acceleration {acceleration} outside [1, {total}]"
        )));
    }
    if !(0.0..=1.0).contains(&center_radius) {
        return Err(Error::InvalidArgument(format!(
            "center radius {center_radius} outside [0, 1]"
        )));
    }
    let (cy, cx) = ((ny / 2) as f64, (nx / 2) as f64);
    let half = ny.min(nx) as f64 / 2.0;
    let radius = center_radius * half;
    let rho = |i: usize, j: usize| ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
    let acs = Array2::from_shape_fn((ny, nx), |(i, j)| rho(i, j) <= radius);
    let n_acs = acs.iter().filter(|&&a| a).count();

    if acceleration == 1.0 {
        return SamplingMask::new(Array2::from_elem((ny, nx), true), acs, 1.0, seed);
    }
    let budget = (total as f64 / acceleration).round() as usize;
    if n_acs > budget {
        return Err(Error::InfeasibleMask(format!(
            "central disc of {n_acs} samples exceeds the budget of {budget} for R = {acceleration}"
        )));
    }
    // Weighted sampling without replacement (exponential keys).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(total - n_acs);
    for i in 0..ny {
        for j in 0..nx {
            let u: f64 = rng.random();
            if acs[[i, j]] {
                continue;
            }
            let r = rho(i, j) / half;
            let weight = (-r * r / (2.0 * 0.35 * 0.35)).exp() + 0.02;
            keyed.push((u.max(f64::MIN_POSITIVE).ln() / weight, i * nx + j));
        }
    }
    let extra = budget - n_acs;
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut mask = acs.clone();
    for &(_, flat) in &keyed[..extra] {
        mask[[flat / nx, flat % nx]] = true;
    }
    SamplingMask::new(mask, acs, acceleration, seed)
}

/// Generates a mask of the given family with that family's default ACS size.
pub fn generate_mask(
    kind: MaskKind,
    shape: (usize, usize),
    acceleration: f64,
    center_radius: f64,
    seed: u64,
) -> Result<SamplingMask> {
    match kind {
        MaskKind::Cartesian => {
            random_cartesian_mask(shape, acceleration, default_acs_fraction(acceleration), seed)
        }
        MaskKind::VariableDensity => variable_density_mask(shape, acceleration, center_radius, seed),
    }
}

/// The `U_ACS` operator: keeps only the auto-calibration samples.
pub fn acs_extract<T: Real>(
    ksp: &MultiCoilKSpace<T>,
    mask: &SamplingMask,
) -> Result<MultiCoilKSpace<T>> {
    let (ny, nx) = ksp.spatial();
    if mask.shape() != (ny, nx) {
        return Err(Error::Shape(format!(
            "mask is {:?} but data is {ny}x{nx}",
            mask.shape()
        )));
    }
    let restricted = Zip::from(&mask.mask)
        .and(&mask.acs)
        .map_collect(|&m, &a| m && a);
    Ok(MultiCoilKSpace {
        data: mask_stack(ksp.data.view(), &restricted),
    })
}

/// Total sample count over acquired sample count.
pub fn effective_acceleration(mask: &SamplingMask) -> f64 {
    let n = mask.nonzero();
    if n == 0 {
        f64::INFINITY
    } else {
        mask.mask.len() as f64 / n as f64
    }
}
