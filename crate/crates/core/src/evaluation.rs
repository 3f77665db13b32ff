//! Image-quality metrics, dataset evaluation reports and figure panels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::write_file;
use crate::config::Config;
use crate::data::{read_volume, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{ModelInput, RecurrentVarNet};
use crate::operators::{apply_mask, ifft2c, rss, MultiCoilKSpace};
use crate::real::Real;
use crate::sampling::generate_mask;
use crate::seed::derive_seed;
use crate::training::loss::ssim;

const TAG_EVAL: u64 = 0xE0;

fn check_same<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn f(v: impl Real) -> f64 {
    v.to_f64().unwrap()
}

/// `10 log10(max(x_ref)^2 / MSE)`; identical images give `+inf`.
pub fn psnr<T: Real>(x_ref: &Array2<T>, x_pred: &Array2<T>) -> Result<f64> {
    check_same(x_ref, x_pred)?;
    let peak = x_ref.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f(v)));
    let mse = x_ref
        .iter()
        .zip(x_pred.iter())
        .map(|(&a, &b)| (f(a) - f(b)).powi(2))
        .sum::<f64>()
        / x_ref.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `||x_pred - x_ref||^2 / ||x_ref||^2`.
pub fn nmse<T: Real>(x_ref: &Array2<T>, x_pred: &Array2<T>) -> Result<f64> {
    check_same(x_ref, x_pred)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &b) in x_ref.iter().zip(x_pred.iter()) {
        num += (f(b) - f(a)).powi(2);
        den += f(a).powi(2);
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("NMSE of an all-zero reference".into()));
    }
    Ok(num / den)
}

/// `rss(ifft2c(y))`.
pub fn zero_filled_recon<T: Real>(ksp: &MultiCoilKSpace<T>) -> Result<Array2<T>> {
    Ok(rss(ifft2c(&ksp.data)?.view()))
}

/// What produces reconstructions from sub-sampled k-space.
pub enum Method<'a> {
    ZeroFilled,
    Model { name: String, net: &'a RecurrentVarNet<f32> },
    /// Any other reconstructor, e.g. an oracle in tests.
    Custom {
        name: String,
        #[allow(clippy::type_complexity)]
        run: Box<dyn Fn(&ModelInput<f32>, &Array2<f32>) -> Result<Array2<f32>> + 'a>,
    },
}

impl Method<'_> {
    pub fn name(&self) -> &str {
        match self {
            Method::ZeroFilled => "zero-filled",
            Method::Model { name, .. } | Method::Custom { name, .. } => name,
        }
    }

    pub fn reconstruct(&self, input: &ModelInput<f32>, reference: &Array2<f32>) -> Result<Array2<f32>> {
        match self {
            Method::ZeroFilled => zero_filled_recon(&input.kspace),
            Method::Model { net, .. } => Ok(net.forward(input)?.image),
            Method::Custom { run, .. } => run(input, reference),
        }
    }
}

/// Floats that may be infinite are written as the strings `"inf"` / `"-inf"`.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice: usize,
    pub ssim: f64,
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub volume: String,
    pub method: String,
    pub acceleration: f64,
    pub slices: Vec<SliceMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub acceleration: f64,
    pub n_slices: usize,
    pub ssim: f64,
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    pub nmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<VolumeRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Metrics of one slice against its reference.
pub fn slice_metrics(slice: usize, reference: &Array2<f32>, pred: &Array2<f32>) -> Result<SliceMetrics> {
    let peak = reference.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    Ok(SliceMetrics {
        slice,
        ssim: ssim(reference, pred, peak)?,
        psnr: psnr(reference, pred)?,
        nmse: nmse(reference, pred)?,
    })
}

/// The mask used for evaluating `(volume, slice)` at acceleration index `ri`;
/// identical for every method.
pub fn evaluation_mask_seed(seed: u64, volume: usize, slice: usize, ri: usize) -> u64 {
    derive_seed(seed, &[TAG_EVAL, volume as u64, slice as u64, ri as u64])
}

fn evaluate_volume(
    path: &Path,
    vi: usize,
    method: &Method,
    r: f64,
    ri: usize,
    cfg: &Config,
    seed: u64,
) -> Result<Vec<SliceMetrics>> {
    let vol = read_volume(path)?;
    let mut out = Vec::with_capacity(vol.n_slices());
    for s in 0..vol.n_slices() {
        let full = vol.slice(s);
        let reference = vol.reference(s)?;
        let mask = generate_mask(
            cfg.sampling.kind,
            full.spatial(),
            r,
            cfg.sampling.center_radius,
            evaluation_mask_seed(seed, vi, s, ri),
        )?;
        let input = ModelInput {
            kspace: apply_mask(&full, &mask)?,
            mask,
        };
        let pred = method.reconstruct(&input, &reference)?;
        out.push(slice_metrics(s, &reference, &pred)?);
    }
    Ok(out)
}

/// Evaluates every volume at every acceleration. Failures of individual volumes
/// become error records; the summary averages over slices (each slice weighs
/// the same).
pub fn evaluate_dataset(
    volumes: &[PathBuf],
    method: &Method,
    accelerations: &[f64],
    cfg: &Config,
) -> Result<EvaluationReport> {
    let seed = cfg.require_seed()?;
    let mut report = EvaluationReport::default();
    for (ri, &r) in accelerations.iter().enumerate() {
        let mut all = Vec::new();
        for (vi, path) in volumes.iter().enumerate() {
            let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
            let (slices, error) = match evaluate_volume(path, vi, method, r, ri, cfg, seed) {
                Ok(s) => (s, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            all.extend(slices.iter().cloned());
            report.records.push(VolumeRecord {
                volume: name,
                method: method.name().to_string(),
                acceleration: r,
                slices,
                error,
            });
        }
        report.summary.push(summarize(method.name(), r, &all));
    }
    Ok(report)
}

/// All volumes of a manifest split.
pub fn split_paths(manifest: &Manifest, split: Split) -> Vec<PathBuf> {
    manifest.entries(split).map(|e| manifest.volume_path(e)).collect()
}

fn summarize(method: &str, r: f64, slices: &[SliceMetrics]) -> SummaryRow {
    let n = slices.len();
    let mean = |f: fn(&SliceMetrics) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            slices.iter().map(f).sum::<f64>() / n as f64
        }
    };
    SummaryRow {
        method: method.to_string(),
        acceleration: r,
        n_slices: n,
        ssim: mean(|m| m.ssim),
        psnr: mean(|m| m.psnr),
        nmse: mean(|m| m.nmse),
    }
}

impl EvaluationReport {
    pub fn merge(&mut self, other: EvaluationReport) {
        self.records.extend(other.records);
        self.summary.extend(other.summary);
    }

    pub fn row(&self, method: &str, r: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.method == method && s.acceleration == r)
    }

    /// One JSON record per volume followed by one summary record.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let mut summary = BTreeMap::new();
        summary.insert("summary", &self.summary);
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>6} {:>7} {:>8} {:>9} {:>9}\n",
            "method", "R", "slices", "SSIM", "pSNR", "NMSE"
        );
        for s in &self.summary {
            out.push_str(&format!(
                "{:<24} {:>6} {:>7} {:>8.4} {:>9.2} {:>9.5}\n",
                s.method, s.acceleration, s.n_slices, s.ssim, s.psnr, s.nmse
            ));
        }
        let failed: Vec<_> = self.records.iter().filter(|r| r.error.is_some()).collect();
        for r in failed {
            out.push_str(&format!("error: {} (R={}): {}\n", r.volume, r.acceleration, r.error.as_deref().unwrap_or("")));
        }
        out
    }

    /// Writes `report.json`, `report.jsonl` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_file(&dir.join("report.json"), json.as_bytes())?;
        write_file(&dir.join("report.jsonl"), self.to_json_lines()?.as_bytes())?;
        write_file(&dir.join("report.txt"), self.render_table().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// A zoom region `(top, left, height, width)` in pixels.
pub type Zoom = (usize, usize, usize, usize);

/// Side-by-side panels (one column per image) over a second row of nearest-
/// neighbour enlarged crops. Intensities are scaled by the first image's peak.
pub fn figure_panel(images: &[&Array2<f32>], zoom: Option<Zoom>) -> Result<GrayImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("figure needs at least one image".into()))?;
    let (h, w) = first.dim();
    if images.iter().any(|im| im.dim() != (h, w)) {
        return Err(Error::Shape("figure panels differ in size".into()));
    }
    let peak = first.iter().fold(0f32, |m, &v| m.max(v)).max(f32::MIN_POSITIVE);
    let gap = 2;
    let rows = if zoom.is_some() { 2 } else { 1 };
    let width = images.len() * w + (images.len() - 1) * gap;
    let height = rows * h + (rows - 1) * gap;
    let mut img = GrayImage::from_pixel(width as u32, height as u32, Luma([255]));
    let level = |v: f32| Luma([((v / peak).clamp(0.0, 1.0) * 255.0).round() as u8]);
    for (i, im) in images.iter().enumerate() {
        let x0 = i * (w + gap);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel((x0 + x) as u32, y as u32, level(im[[y, x]]));
            }
        }
        if let Some((top, left, zh, zw)) = zoom {
            if zh == 0 || zw == 0 || top + zh > h || left + zw > w {
                return Err(Error::InvalidArgument(format!("zoom {zoom:?} outside {h}x{w}")));
            }
            let y0 = h + gap;
            for y in 0..h {
                for x in 0..w {
                    let v = im[[top + y * zh / h, left + x * zw / w]];
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, level(v));
                }
            }
        }
    }
    Ok(img)
}

pub fn write_figure(path: &Path, images: &[&Array2<f32>], zoom: Option<Zoom>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    figure_panel(images, zoom)?.save(path)?;
    Ok(())
}

/// A centred zoom covering a quarter of each side.
pub fn default_zoom(shape: (usize, usize)) -> Zoom {
    let (h, w) = shape;
    let (zh, zw) = ((h / 4).max(1), (w / 4).max(1));
    ((h - zh) / 2, (w - zw) / 2, zh, zw)
}
