//! Synthetic image corruptions at five severities and accuracy under them.

mod robustness;

pub use robustness::{
    evaluate_precorrupted, evaluate_robustness, read_results_csv, write_results_csv, ResultRow, RobustnessReport,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, TAG_CORRUPT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Contrast,
    Brightness,
    Pixelate,
    DefocusBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
        CorruptionKind::DefocusBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::DefocusBlur => "defocus_blur",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(self, CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise | CorruptionKind::ImpulseNoise)
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }

    /// Parses a comma-separated list, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<CorruptionKind>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|k| k.trim().parse()).collect()
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

/// A kind at severity 1 to 5; severity 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::param("severity", format!("{severity} is outside 0..=5")));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    /// Every kind in `kinds` at severities 1 to 5.
    pub fn grid(kinds: &[CorruptionKind]) -> Vec<CorruptionSpec> {
        kinds.iter().flat_map(|&kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity })).collect()
    }
}

/// Per-kind constants for severities 1 to 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityTable {
    /// Noise std.
    pub gaussian_noise: [f64; 5],
    /// Photon count scale.
    pub shot_noise: [f64; 5],
    /// Fraction of values replaced by 0 or 1.
    pub impulse_noise: [f64; 5],
    /// Contrast factor.
    pub contrast: [f64; 5],
    /// Additive offset.
    pub brightness: [f64; 5],
    /// Downscale ratio.
    pub pixelate: [f64; 5],
    /// Disk radius in pixels.
    pub defocus_blur: [f64; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        SeverityTable {
            gaussian_noise: [0.04, 0.08, 0.12, 0.15, 0.18],
            shot_noise: [250.0, 100.0, 50.0, 30.0, 15.0],
            impulse_noise: [0.01, 0.02, 0.05, 0.08, 0.14],
            contrast: [0.4, 0.3, 0.2, 0.1, 0.05],
            brightness: [0.1, 0.2, 0.3, 0.4, 0.5],
            pixelate: [0.9, 0.8, 0.7, 0.6, 0.5],
            defocus_blur: [1.0, 1.5, 2.0, 2.5, 3.0],
        }
    }
}

impl SeverityTable {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let t: SeverityTable = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in CorruptionKind::ALL {
            for s in 1..=5 {
                let v = self.param(kind, s);
                let ok = match kind {
                    CorruptionKind::GaussianNoise | CorruptionKind::DefocusBlur | CorruptionKind::Contrast => {
                        v >= 0.0 && v.is_finite()
                    }
                    CorruptionKind::Brightness => v.is_finite(),
                    CorruptionKind::ShotNoise => v > 0.0 && v.is_finite(),
                    CorruptionKind::ImpulseNoise => (0.0..=1.0).contains(&v),
                    CorruptionKind::Pixelate => v > 0.0 && v <= 1.0,
                };
                if !ok {
                    return Err(Error::param("severity table", format!("{kind} severity {s} has invalid value {v}")));
                }
            }
        }
        Ok(())
    }

    /// Constant for `severity` in 1 to 5.
    pub fn param(&self, kind: CorruptionKind, severity: u8) -> f64 {
        let row = match kind {
            CorruptionKind::GaussianNoise => &self.gaussian_noise,
            CorruptionKind::ShotNoise => &self.shot_noise,
            CorruptionKind::ImpulseNoise => &self.impulse_noise,
            CorruptionKind::Contrast => &self.contrast,
            CorruptionKind::Brightness => &self.brightness,
            CorruptionKind::Pixelate => &self.pixelate,
            CorruptionKind::DefocusBlur => &self.defocus_blur,
        };
        row[usize::from(severity) - 1]
    }
}

/// Corrupts one unnormalized `[C, H, W]` image.
pub fn corrupt<R: Rng + ?Sized>(image: &Array3<f32>, spec: CorruptionSpec, table: &SeverityTable, rng: &mut R) -> Result<Array3<f32>> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    apply(image, spec.kind, table.param(spec.kind, spec.severity), rng)
}

/// Applies `kind` with an explicit constant. The result is clamped to
/// `[0, 1]`.
pub fn apply<R: Rng + ?Sized>(image: &Array3<f32>, kind: CorruptionKind, param: f64, rng: &mut R) -> Result<Array3<f32>> {
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let d = Normal::new(0.0, param).map_err(|e| Error::param("gaussian_noise", e.to_string()))?;
            image.mapv(|x| (x as f64 + d.sample(rng)) as f32)
        }
        CorruptionKind::ShotNoise => {
            if param.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::param("shot_noise", "photon scale must be positive"));
            }
            image.mapv(|x| {
                let lambda = x.max(0.0) as f64 * param;
                if lambda > 0.0 {
                    (Poisson::new(lambda).expect("positive rate").sample(rng) / param) as f32
                } else {
                    0.0
                }
            })
        }
        CorruptionKind::ImpulseNoise => {
            if !(0.0..=1.0).contains(&param) {
                return Err(Error::param("impulse_noise", "rate must lie in [0, 1]"));
            }
            image.mapv(|x| {
                if rng.gen_bool(param) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    x
                }
            })
        }
        CorruptionKind::Contrast => {
            let mut out = image.clone();
            for mut plane in out.axis_iter_mut(Axis(0)) {
                let m = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
                plane.mapv_inplace(|x| ((x as f64 - m) * param + m) as f32);
            }
            out
        }
        CorruptionKind::Brightness => image.mapv(|x| (x as f64 + param) as f32),
        CorruptionKind::Pixelate => pixelate(image, param)?,
        CorruptionKind::DefocusBlur => defocus(image, param)?,
    };
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Area-average downscale to `round(ratio * size)`, then nearest-neighbour
/// upscale.
fn pixelate(image: &Array3<f32>, ratio: f64) -> Result<Array3<f32>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param("pixelate", "ratio must lie in (0, 1]"));
    }
    let (c, h, w) = image.dim();
    let sh = ((h as f64 * ratio).round() as usize).max(1);
    let sw = ((w as f64 * ratio).round() as usize).max(1);
    if (sh, sw) == (h, w) {
        return Ok(image.clone());
    }
    let ry = area_weights(h, sh);
    let rx = area_weights(w, sw);
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let small = ry.dot(&image.index_axis(Axis(0), ch).mapv(|v| v as f64)).dot(&rx.t());
        for y in 0..h {
            let yy = ((y as f64 + 0.5) * sh as f64 / h as f64) as usize;
            for x in 0..w {
                let xx = ((x as f64 + 0.5) * sw as f64 / w as f64) as usize;
                out[[ch, y, x]] = small[[yy.min(sh - 1), xx.min(sw - 1)]] as f32;
            }
        }
    }
    Ok(out)
}

/// `[m, n]` row-stochastic matrix of overlap between output cell `i`,
/// covering `[i n / m, (i + 1) n / m)`, and input pixel `j`.
fn area_weights(n: usize, m: usize) -> Array2<f64> {
    let step = n as f64 / m as f64;
    let mut a = Array2::zeros((m, n));
    for i in 0..m {
        let (lo, hi) = (i as f64 * step, (i + 1) as f64 * step);
        for j in lo.floor() as usize..(hi.ceil() as usize).min(n) {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            a[[i, j]] = overlap / step;
        }
    }
    a
}

/// Normalized disk of radius `r`, side `2 ceil(r) + 1`.
pub fn disk_kernel(r: f64) -> Array2<f64> {
    let k = r.ceil().max(0.0) as isize;
    let side = (2 * k + 1) as usize;
    let mut d = Array2::from_shape_fn((side, side), |(y, x)| {
        let (dy, dx) = (y as isize - k, x as isize - k);
        if ((dx * dx + dy * dy) as f64) <= r * r + 1e-9 {
            1.0
        } else {
            0.0
        }
    });
    let s = d.sum();
    d /= s;
    d
}

/// Index under reflect-101 padding.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn defocus(image: &Array3<f32>, radius: f64) -> Result<Array3<f32>> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::param("defocus_blur", "radius must be finite and non-negative"));
    }
    let ker = disk_kernel(radius);
    let k = (ker.shape()[0] / 2) as isize;
    let (c, h, w) = image.dim();
    let taps: Vec<(isize, isize, f64)> =
        ker.indexed_iter().filter(|(_, &v)| v > 0.0).map(|((y, x), &v)| (y as isize - k, x as isize - k, v)).collect();
    Ok(Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        taps.iter()
            .map(|&(dy, dx, v)| v * image[[ch, reflect101(y as isize + dy, h), reflect101(x as isize + dx, w)]] as f64)
            .sum::<f64>() as f32
    }))
}

/// Corrupted copy of `set`; image `i` uses a stream keyed by
/// `(seed, kind, severity, i)`.
pub fn corrupt_set(set: &ImageSet, spec: CorruptionSpec, table: &SeverityTable, seed: u64) -> Result<ImageSet> {
    use rayon::prelude::*;
    let images = set
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| corrupt(img, spec, table, &mut image_rng(seed, spec, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageSet { images, labels: set.labels.clone(), class_names: set.class_names.clone() })
}

/// Noise stream for image `i` of a set under `spec`.
pub fn image_rng(seed: u64, spec: CorruptionSpec, i: usize) -> rand_chacha::ChaCha8Rng {
    derived_rng(seed, TAG_CORRUPT, spec.kind.index() * 8 + u64::from(spec.severity), i as u64)
}
