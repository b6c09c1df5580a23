//! Forward pass of the fixed V1 front-end: strided correlation with the
//! filter bank, then simple (rectification) and complex (quadrature energy)
//! nonlinearities.

mod direct;
mod spectral;

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, ArrayViewMut3, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gfb::{CellType, ChannelDescriptor, FilterBank};
use spectral::SpectralConv;

/// Per-channel normalization `(x - mean) / std` applied to every input.
pub const NORMALIZE_MEAN: f32 = 0.5;
pub const NORMALIZE_STD: f32 = 0.5;

pub fn normalize_image(image: &mut Array3<f32>) {
    image.mapv_inplace(|v| (v - NORMALIZE_MEAN) / NORMALIZE_STD);
}

/// Images `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f32>,
    normalized: bool,
}

impl ImageBatch {
    /// Pixels in `[0, 1]`, not yet normalized.
    pub fn raw(data: Array4<f32>) -> Self {
        ImageBatch { data, normalized: false }
    }

    /// Pixels already passed through [`normalize_image`].
    pub fn normalized(data: Array4<f32>) -> Self {
        ImageBatch { data, normalized: true }
    }

    /// Stacks `[C, H, W]` images; all must share a shape.
    pub fn stack(images: &[&Array3<f32>], normalized: bool) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image list".into()))?;
        let (c, h, w) = first.dim();
        let mut data = Array4::<f32>::zeros((images.len(), c, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (c, h, w) {
                return Err(Error::Shape(format!("image {i} is {:?}, expected {:?}", img.dim(), (c, h, w))));
            }
            data.index_axis_mut(Axis(0), i).assign(img);
        }
        Ok(ImageBatch { data, normalized })
    }

    pub fn normalize(mut self) -> Self {
        if !self.normalized {
            self.data.mapv_inplace(|v| (v - NORMALIZE_MEAN) / NORMALIZE_STD);
            self.normalized = true;
        }
        self
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Post-nonlinearity V1 responses `[batch, channels, H_out, W_out]`, simple
/// channels first, in descriptor order.
#[derive(Debug, Clone, PartialEq)]
pub struct V1Activations {
    pub data: Array4<f32>,
}

/// A filter bank prepared for repeated forward passes at one input size.
pub struct VOneBlock<'a> {
    bank: &'a FilterBank,
    spectral: SpectralConv,
}

impl<'a> VOneBlock<'a> {
    /// Prepares kernel spectra for inputs of the bank's configured size.
    pub fn new(bank: &'a FilterBank) -> Self {
        let n = bank.geometry().input_size;
        VOneBlock { bank, spectral: SpectralConv::new(bank, n, n) }
    }

    pub fn bank(&self) -> &FilterBank {
        self.bank
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.spectral.output_shape()
    }

    fn check_image(&self, dim: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = dim;
        let g = self.bank.geometry();
        if c != g.input_channels || (h, w) != self.spectral.input_shape() {
            return Err(Error::Shape(format!(
                "image {c}x{h}x{w} does not match bank geometry {}x{}x{}",
                g.input_channels, g.input_size, g.input_size
            )));
        }
        Ok(())
    }

    fn check_batch(&self, images: &ImageBatch) -> Result<()> {
        if !images.is_normalized() {
            return Err(Error::param("images", "batch must be normalized before the V1 block"));
        }
        let (_, c, h, w) = images.data().dim();
        self.check_image((c, h, w))
    }

    /// Raw linear responses `[batch, num_kernels, H_out, W_out]`.
    pub fn conv(&self, images: &ImageBatch) -> Result<Array4<f32>> {
        self.check_batch(images)?;
        let (ho, wo) = self.output_shape();
        let mut out = Array4::<f32>::zeros((images.len(), self.bank.num_kernels(), ho, wo));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(images.data().axis_iter(Axis(0)).into_par_iter())
            .for_each(|(o, img)| self.spectral.correlate(img, o));
        Ok(out)
    }

    /// Activations for one normalized image `[C, H, W]`.
    pub fn forward_image(&self, image: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
        self.check_image(image.dim())?;
        let (ho, wo) = self.output_shape();
        let mut raw = Array3::<f32>::zeros((self.bank.num_kernels(), ho, wo));
        self.spectral.correlate(image, raw.view_mut());
        let mut out = Array3::<f32>::zeros((self.bank.num_channels(), ho, wo));
        nonlinear_image(self.bank, raw.view(), out.view_mut());
        Ok(out)
    }

    pub fn forward(&self, images: &ImageBatch) -> Result<V1Activations> {
        self.check_batch(images)?;
        let (ho, wo) = self.output_shape();
        let nk = self.bank.num_kernels();
        let mut data = Array4::<f32>::zeros((images.len(), self.bank.num_channels(), ho, wo));
        data.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(images.data().axis_iter(Axis(0)).into_par_iter())
            .for_each(|(o, img)| {
                let mut raw = Array3::<f32>::zeros((nk, ho, wo));
                self.spectral.correlate(img, raw.view_mut());
                nonlinear_image(self.bank, raw.view(), o);
            });
        Ok(V1Activations { data })
    }
}

/// Strided cross-correlation of a normalized batch with every bank kernel,
/// zero padding `(k-1)/2`, output `ceil(H/stride) x ceil(W/stride)`.
pub fn conv_forward(bank: &FilterBank, images: &ImageBatch) -> Result<Array4<f32>> {
    VOneBlock::new(bank).conv(images)
}

/// Same contract as [`conv_forward`], computed by im2col and matrix
/// multiplication in the spatial domain. Accepts any input size.
pub fn conv_forward_direct(bank: &FilterBank, images: &ImageBatch) -> Result<Array4<f32>> {
    if !images.is_normalized() {
        return Err(Error::param("images", "batch must be normalized before the V1 block"));
    }
    let (b, c, h, w) = images.data().dim();
    let g = bank.geometry();
    if c != g.input_channels {
        return Err(Error::Shape(format!("{c} input channels, bank expects {}", g.input_channels)));
    }
    let mut out = Array4::<f32>::zeros((b, bank.num_kernels(), h.div_ceil(g.stride), w.div_ceil(g.stride)));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(images.data().axis_iter(Axis(0)).into_par_iter())
        .for_each(|(o, img)| direct::correlate_direct(bank, img, o));
    Ok(out)
}

fn nonlinear_image(bank: &FilterBank, raw: ArrayView3<'_, f32>, mut out: ArrayViewMut3<'_, f32>) {
    for (i, d) in bank.descriptors().iter().enumerate() {
        let j = bank.first_kernel_of(i);
        let dst = out.index_axis_mut(Axis(0), i);
        match d.cell_type {
            CellType::Simple => {
                Zip::from(dst).and(raw.index_axis(Axis(0), j)).for_each(|o, &r| *o = r.max(0.0));
            }
            CellType::Complex => {
                Zip::from(dst)
                    .and(raw.index_axis(Axis(0), j))
                    .and(raw.index_axis(Axis(0), j + 1))
                    .for_each(|o, &a, &b| *o = complex_energy(a, b));
            }
        }
    }
}

/// `sqrt((q0^2 + q90^2) / 2)`.
#[inline]
pub fn complex_energy(q0: f32, q90: f32) -> f32 {
    ((q0 * q0 + q90 * q90) * 0.5).sqrt()
}

/// Applies simple/complex nonlinearities to raw kernel responses
/// `[batch, n_simple + 2 n_complex, H, W]`.
pub fn apply_nonlinearities(raw: ArrayView4<'_, f32>, descriptors: &[ChannelDescriptor]) -> Result<V1Activations> {
    let expected: usize = descriptors.iter().map(|d| d.cell_type.kernels_per_channel()).sum();
    let (b, nk, h, w) = raw.dim();
    if nk != expected {
        return Err(Error::Shape(format!("{nk} raw kernels for descriptors needing {expected}")));
    }
    let n_simple = descriptors.iter().take_while(|d| d.cell_type == CellType::Simple).count();
    if descriptors[n_simple..].iter().any(|d| d.cell_type == CellType::Simple) {
        return Err(Error::param("descriptors", "simple channels must precede complex channels"));
    }
    let mut data = Array4::<f32>::zeros((b, descriptors.len(), h, w));
    for bi in 0..b {
        for (i, d) in descriptors.iter().enumerate() {
            let j = if i < n_simple { i } else { n_simple + 2 * (i - n_simple) };
            let dst = data.slice_mut(s![bi, i, .., ..]);
            match d.cell_type {
                CellType::Simple => Zip::from(dst)
                    .and(raw.slice(s![bi, j, .., ..]))
                    .for_each(|o, &r| *o = r.max(0.0)),
                CellType::Complex => Zip::from(dst)
                    .and(raw.slice(s![bi, j, .., ..]))
                    .and(raw.slice(s![bi, j + 1, .., ..]))
                    .for_each(|o, &a, &q| *o = complex_energy(a, q)),
            }
        }
    }
    Ok(V1Activations { data })
}

/// Conv followed by the nonlinearities; deterministic, no noise.
pub fn vone_forward(bank: &FilterBank, images: &ImageBatch) -> Result<V1Activations> {
    VOneBlock::new(bank).forward(images)
}
