use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Peak spatial frequency range in cycles/degree.
pub const SF_RANGE: (f64, f64) = (0.5, 11.3);
/// Range of `nx` and `ny`, in multiples of the Gabor wavelength.
pub const N_RANGE: (f64, f64) = (0.1, 1.585);
/// Orientation period in degrees.
pub const THETA_PERIOD: f64 = 180.0;

/// Receptive-field parameters of one Gabor channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    /// Preferred orientation in degrees, `[0, 180)`.
    pub theta: f64,
    /// Peak spatial frequency in cycles/degree.
    pub sf: f64,
    /// Carrier phase in radians.
    pub phase: f64,
    /// Envelope extent perpendicular to the stripes, in wavelengths.
    pub nx: f64,
    /// Envelope extent parallel to the stripes, in wavelengths.
    pub ny: f64,
}

impl GaborParams {
    /// Envelope standard deviation across the stripes, in degrees.
    pub fn sigma_x(&self) -> f64 {
        self.nx / self.sf
    }

    /// Envelope standard deviation along the stripes, in degrees.
    pub fn sigma_y(&self) -> f64 {
        self.ny / self.sf
    }

    /// Orientation reduced into `[0, 180)`.
    pub fn canonical_theta(&self) -> f64 {
        let t = self.theta.rem_euclid(THETA_PERIOD);
        // rem_euclid can round up to the period itself for tiny negative inputs
        if t >= THETA_PERIOD {
            0.0
        } else {
            t
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(Error::param("theta", "must be finite"));
        }
        if !self.phase.is_finite() {
            return Err(Error::param("phase", "must be finite"));
        }
        check_range("sf", self.sf, SF_RANGE)?;
        check_range("nx", self.nx, N_RANGE)?;
        check_range("ny", self.ny, N_RANGE)?;
        Ok(())
    }
}

fn check_range(name: &'static str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::param(name, format!("{v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellType {
    Simple,
    Complex,
}

impl CellType {
    pub fn as_str(self) -> &'static str {
        match self {
            CellType::Simple => "simple",
            CellType::Complex => "complex",
        }
    }

    /// Number of linear kernels backing one channel of this type.
    pub fn kernels_per_channel(self) -> usize {
        match self {
            CellType::Simple => 1,
            CellType::Complex => 2,
        }
    }
}

/// One V1 output channel: its cell type and receptive field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub cell_type: CellType,
    pub params: GaborParams,
    pub channel_index: usize,
}

/// A discretized, unit-norm Gabor kernel.
#[derive(Debug, Clone)]
pub struct GaborKernel {
    pub weights: Array2<f64>,
    /// Set when either envelope sigma is below one pixel; the kernel is still
    /// produced but aliases.
    pub undersampled: bool,
}

/// Evaluates
/// `exp(-(x'^2 / 2sx^2 + y'^2 / 2sy^2)) * cos(2 pi sf x' + phase)`
/// on a `size x size` pixel grid centred on the middle pixel, then scales the
/// result to unit L2 norm.
///
/// Pixel columns map to +x and rows to -y (image rows grow downwards), both
/// divided by `ppd` to get degrees; `(x', y')` is that point rotated by
/// `theta`.
pub fn make_gabor_kernel(params: &GaborParams, ppd: f64, size: usize) -> Result<GaborKernel> {
    if size.is_multiple_of(2) {
        return Err(Error::param("kernel_size", format!("{size} is not odd")));
    }
    if !(ppd.is_finite() && ppd > 0.0) {
        return Err(Error::param("ppd", format!("{ppd} must be positive")));
    }
    params.validate()?;

    let theta = params.canonical_theta().to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let sx = params.sigma_x();
    let sy = params.sigma_y();
    let centre = (size / 2) as f64;

    let mut weights = Array2::from_shape_fn((size, size), |(row, col)| {
        let x = (col as f64 - centre) / ppd;
        let y = (centre - row as f64) / ppd;
        let xr = x * cos_t + y * sin_t;
        let yr = -x * sin_t + y * cos_t;
        let envelope = (-(xr * xr / (2.0 * sx * sx) + yr * yr / (2.0 * sy * sy))).exp();
        envelope * (2.0 * PI * params.sf * xr + params.phase).cos()
    });

    let norm = weights.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::param("params", "kernel has zero energy on this grid"));
    }
    weights.mapv_inplace(|v| v / norm);

    let undersampled = sx * ppd < 1.0 || sy * ppd < 1.0;
    Ok(GaborKernel { weights, undersampled })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(theta: f64, sf: f64, phase: f64, nx: f64, ny: f64) -> GaborParams {
        GaborParams { theta, sf, phase, nx, ny }
    }

    fn grating(size: usize, ppd: f64, theta_deg: f64, sf: f64, phase: f64) -> Array2<f64> {
        let c = (size / 2) as f64;
        let t = theta_deg.to_radians();
        Array2::from_shape_fn((size, size), |(i, j)| {
            let x = (j as f64 - c) / ppd;
            let y = (c - i as f64) / ppd;
            (2.0 * PI * sf * (x * t.cos() + y * t.sin()) + phase).cos()
        })
    }

    #[test]
    fn centre_is_maximum_for_cosine_phase_at_zero_orientation() {
        for &(sf, nx, ny) in &[(2.0, 0.5, 0.5), (8.0, 1.2, 0.3), (0.6, 0.1, 1.5)] {
            let k = make_gabor_kernel(&params(0.0, sf, 0.0, nx, ny), 32.0, 25).unwrap();
            let centre = k.weights[[12, 12]];
            let max = k.weights.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(centre, max);
        }
    }

    #[test]
    fn orientation_wraps_every_180_degrees() {
        let a = make_gabor_kernel(&params(45.0, 3.0, 0.0, 0.7, 0.9), 32.0, 25).unwrap();
        let b = make_gabor_kernel(&params(225.0, 3.0, 0.0, 0.7, 0.9), 32.0, 25).unwrap();
        assert_eq!(a.weights, b.weights);
        // holds for any phase since theta is reduced before evaluation
        let c = make_gabor_kernel(&params(10.0, 3.0, 1.1, 0.7, 0.9), 32.0, 25).unwrap();
        let d = make_gabor_kernel(&params(-170.0, 3.0, 1.1, 0.7, 0.9), 32.0, 25).unwrap();
        assert_eq!(c.weights, d.weights);
    }

    #[test]
    fn unit_norm() {
        let k = make_gabor_kernel(&params(33.0, 5.0, 2.0, 0.4, 1.1), 32.0, 25).unwrap();
        let n: f64 = k.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matched_grating_beats_orthogonal_by_factor_ten() {
        let (sf, ppd, size) = (2.0, 32.0, 25);
        for &theta in &[0.0, 30.0, 75.0, 120.0] {
            let k = make_gabor_kernel(&params(theta, sf, 0.0, 1.0, 1.0), ppd, size).unwrap();
            let matched = (&k.weights * &grating(size, ppd, theta, sf, 0.0)).sum();
            let ortho = (&k.weights * &grating(size, ppd, theta + 90.0, sf, 0.0)).sum();
            assert!(matched > 10.0 * ortho.abs(), "theta {theta}: {matched} vs {ortho}");
        }
    }

    #[test]
    fn rejects_even_size_and_bad_ppd() {
        let p = params(0.0, 2.0, 0.0, 0.5, 0.5);
        assert!(make_gabor_kernel(&p, 32.0, 24).is_err());
        assert!(make_gabor_kernel(&p, 0.0, 25).is_err());
        assert!(make_gabor_kernel(&params(0.0, 20.0, 0.0, 0.5, 0.5), 32.0, 25).is_err());
    }

    #[test]
    fn flags_sub_pixel_envelope() {
        // sigma_x = 0.1 / 11 deg = 0.29 px at 32 ppd
        let k = make_gabor_kernel(&params(0.0, 11.0, 0.0, 0.1, 1.0), 32.0, 25).unwrap();
        assert!(k.undersampled);
        let k = make_gabor_kernel(&params(0.0, 2.0, 0.0, 0.5, 0.5), 32.0, 25).unwrap();
        assert!(!k.undersampled);
    }
}
