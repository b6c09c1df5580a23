//! Training-time augmentation: zoom, rotation, horizontal flip and
//! translation in one inverse-mapped bilinear warp with zero fill.

use ndarray::Array3;
use rand::Rng;

use crate::vone_block::normalize_image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Zoom factor, at least 1; the centre crop keeps the input size.
    pub scale: f64,
    pub angle_deg: f64,
    pub flip: bool,
    /// Shift in pixels along x (columns) and y (rows).
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { scale: 1.0, angle_deg: 0.0, flip: false, shift: (0.0, 0.0) };

    /// Scale U[1, 1.2], angle U[-30, 30], flip p = 0.5, shift U[-5%, 5%] of
    /// each side.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        AugmentParams {
            scale: rng.gen_range(1.0..=1.2),
            angle_deg: rng.gen_range(-30.0..=30.0),
            flip: rng.gen_bool(0.5),
            shift: (rng.gen_range(-0.05..=0.05) * width as f64, rng.gen_range(-0.05..=0.05) * height as f64),
        }
    }
}

/// Applies the geometric transform to `[C, H, W]` pixels, without
/// normalization.
pub fn warp(image: &Array3<f32>, p: &AugmentParams) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let sample = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image[[ch, y as usize, x as usize]] as f64
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            // undo shift, rotation, zoom, flip in that order
            let dx = ox as f64 - cx - p.shift.0;
            let dy = oy as f64 - cy - p.shift.1;
            let rx = (cos * dx + sin * dy) / p.scale;
            let ry = (-sin * dx + cos * dy) / p.scale;
            let sx = if p.flip { cx - rx } else { cx + rx };
            let sy = cy + ry;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * sample(ch, y0, x0) + fx * sample(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * sample(ch, y0 + 1, x0) + fx * sample(ch, y0 + 1, x0 + 1));
                out[[ch, oy, ox]] = v as f32;
            }
        }
    }
    out
}

/// Random warp followed by normalization.
pub fn augment<R: Rng + ?Sized>(image: &Array3<f32>, rng: &mut R) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let p = AugmentParams::draw(rng, h, w);
    let mut out = warp(image, &p);
    normalize_image(&mut out);
    out
}
