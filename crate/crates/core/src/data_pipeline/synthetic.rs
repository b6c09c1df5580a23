//! Ten-class grating dataset. Class `c` is a Gaussian-windowed grating at
//! orientation `18 c` degrees and one of ten spatial frequencies; position,
//! carrier phase, orientation, frequency, contrast and background colour are
//! jittered per image.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_image, ImageSet};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, TAG_SYNTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Carrier frequencies are geometric between these, in cycles per image.
    pub min_cycles: f64,
    pub max_cycles: f64,
    pub envelope_sigma: (f64, f64),
    pub position_jitter: f64,
    pub phase_jitter: f64,
    pub orientation_jitter_deg: f64,
    pub frequency_jitter: f64,
    pub amplitude: (f64, f64),
    pub background: (f64, f64),
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 10,
            n_per_class: 100,
            image_size: 64,
            min_cycles: 4.0,
            max_cycles: 16.0,
            envelope_sigma: (16.0, 18.0),
            position_jitter: 8.0,
            phase_jitter: PI / 4.0,
            orientation_jitter_deg: 5.0,
            frequency_jitter: 0.05,
            amplitude: (0.25, 0.4),
            background: (0.3, 0.7),
            noise_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticClass {
    pub theta_deg: f64,
    pub cycles_per_image: f64,
}

impl SyntheticConfig {
    pub fn class(&self, c: usize) -> SyntheticClass {
        let k = self.n_classes.max(1);
        let idx = (3 * c) % k;
        let t = if k > 1 { idx as f64 / (k - 1) as f64 } else { 0.0 };
        SyntheticClass {
            theta_deg: 180.0 * c as f64 / k as f64,
            cycles_per_image: self.min_cycles * (self.max_cycles / self.min_cycles).powf(t),
        }
    }
}

/// One image of class `c`, `[3, size, size]` in `[0, 1]`.
pub fn synthetic_image<R: Rng + ?Sized>(cfg: &SyntheticConfig, c: usize, rng: &mut R) -> Array3<f32> {
    let n = cfg.image_size;
    let class = cfg.class(c);
    let theta = (class.theta_deg + rng.gen_range(-1.0..=1.0) * cfg.orientation_jitter_deg).to_radians();
    let f = class.cycles_per_image * (1.0 + rng.gen_range(-1.0..=1.0) * cfg.frequency_jitter) / n as f64;
    let phase = rng.gen_range(-1.0..=1.0) * cfg.phase_jitter;
    let sigma = rng.gen_range(cfg.envelope_sigma.0..=cfg.envelope_sigma.1);
    let centre = (n as f64 - 1.0) / 2.0;
    let ex = centre + rng.gen_range(-1.0..=1.0) * cfg.position_jitter;
    let ey = centre + rng.gen_range(-1.0..=1.0) * cfg.position_jitter;
    let amp = rng.gen_range(cfg.amplitude.0..=cfg.amplitude.1);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(cfg.background.0..=cfg.background.1));
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let (sin, cos) = theta.sin_cos();
    let mut img = Array3::<f32>::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 - centre;
            let dy = centre - y as f64;
            let carrier = (2.0 * PI * f * (dx * cos + dy * sin) + phase).cos();
            let r2 = (x as f64 - ex).powi(2) + (y as f64 - ey).powi(2);
            let g = amp * (-r2 / (2.0 * sigma * sigma)).exp() * carrier;
            for ch in 0..3 {
                let v = bg[ch] + g + noise.sample(rng);
                img[[ch, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

/// In-memory dataset; `split` selects an independent stream of images.
pub fn synthetic_set(cfg: &SyntheticConfig, seed: u64) -> ImageSet {
    synthetic_split(cfg, seed, 0)
}

fn synthetic_split(cfg: &SyntheticConfig, seed: u64, split: u64) -> ImageSet {
    let mut set = ImageSet { class_names: (0..cfg.n_classes).map(class_name).collect(), ..Default::default() };
    for c in 0..cfg.n_classes {
        for i in 0..cfg.n_per_class {
            let mut rng = derived_rng(seed, TAG_SYNTH, split * 1_000_003 + c as u64, i as u64);
            set.images.push(synthetic_image(cfg, c, &mut rng));
            set.labels.push(c);
        }
    }
    set
}

/// Writes `root/<split>/class_XX/NNNNN.png` for each `(split, n_per_class)`.
pub fn make_synthetic_dataset(root: impl AsRef<Path>, cfg: &SyntheticConfig, splits: &[(&str, usize)], seed: u64) -> Result<usize> {
    let root = root.as_ref();
    let mut written = 0;
    for (s, &(split, n)) in splits.iter().enumerate() {
        let cfg = SyntheticConfig { n_per_class: n, ..cfg.clone() };
        let set = synthetic_split(&cfg, seed, s as u64);
        for (k, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
            let dir = root.join(split).join(class_name(label));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_image(dir.join(format!("{:05}.png", k % n.max(1))), img)?;
            written += 1;
        }
    }
    Ok(written)
}
