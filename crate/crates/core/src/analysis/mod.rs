//! Per-channel response statistics, binning of channels into
//! sub-populations, downstream weights and impact, and cross-variant
//! correlations.

mod bins;
mod compare;
mod pearson;

pub use bins::{
    bin_by_response, bin_by_rf, bin_index, downstream_impact, quantile_edges, BinAxes, BinCell, BinTable,
    ResponseEdges, RfEdges,
};
pub use compare::{
    compare_variants, correlate_tables, write_bins_csv, write_correlations_csv, write_impact_csv, write_stats_csv,
    Comparison, NamedCorrelation, Quantity, StatsRow, VariantAnalysis,
};
pub use pearson::{ln_gamma, pearson, regularized_incomplete_beta, student_t_two_sided, CorrelationResult, InclusionRule};

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;

use crate::data_pipeline::ImageSet;
use crate::error::{Error, Result};
use crate::gfb::FilterBank;
use crate::rng::{derived_rng, TAG_STATS};
use crate::vone_block::{normalize_image, VOneBlock};

/// Default number of images in the statistics batch.
pub const STATS_BATCH: usize = 1000;

/// Sparseness of one unit's responses `a` over `b = a.len()` stimuli:
/// `(1 - (sum a / b)^2 / (sum a^2 / b)) / (1 - 1 / b)`. An all-zero response
/// has sparseness 0.
pub fn sparseness(a: &[f64]) -> Result<f64> {
    let b = a.len();
    if b < 2 {
        return Err(Error::InsufficientData(format!("sparseness needs at least 2 responses, got {b}")));
    }
    let s1: f64 = a.iter().sum();
    let s2: f64 = a.iter().map(|v| v * v).sum();
    Ok(sparseness_from_sums(s1, s2, b))
}

fn sparseness_from_sums(s1: f64, s2: f64, b: usize) -> f64 {
    if s2 <= 0.0 {
        return 0.0;
    }
    let b = b as f64;
    let m1 = s1 / b;
    let m2 = s2 / b;
    ((1.0 - m1 * m1 / m2) / (1.0 - 1.0 / b)).clamp(0.0, 1.0)
}

/// Per-channel mean activation and mean sparseness.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseStats {
    pub mean_activation: Vec<f64>,
    pub sparseness: Vec<f64>,
    /// Images in the batch.
    pub batch: usize,
}

impl ResponseStats {
    pub fn len(&self) -> usize {
        self.mean_activation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_activation.is_empty()
    }
}

/// Running per-unit sums over images.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    sum: Array2<f64>,
    sum_sq: Array2<f64>,
    dims: (usize, usize, usize),
    images: usize,
}

impl StatsAccumulator {
    /// For activations `[channels, height, width]`.
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        StatsAccumulator {
            sum: Array2::zeros((channels, height * width)),
            sum_sq: Array2::zeros((channels, height * width)),
            dims: (channels, height, width),
            images: 0,
        }
    }

    pub fn push(&mut self, acts: ArrayView3<'_, f32>) -> Result<()> {
        if acts.dim() != self.dims {
            return Err(Error::Shape(format!("activations {:?}, accumulator {:?}", acts.dim(), self.dims)));
        }
        let a = acts.as_standard_layout();
        let a = a.view().into_shape_with_order((self.dims.0, self.dims.1 * self.dims.2)).expect("standard layout");
        self.sum.zip_mut_with(&a, |s, &v| *s += v as f64);
        self.sum_sq.zip_mut_with(&a, |s, &v| *s += (v as f64) * (v as f64));
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn finish(&self) -> Result<ResponseStats> {
        let b = self.images;
        if b < 2 {
            return Err(Error::InsufficientData(format!("statistics need at least 2 images, got {b}")));
        }
        let units = self.sum.shape()[1] as f64;
        let mean_activation = self.sum.axis_iter(Axis(0)).map(|r| r.sum() / (units * b as f64)).collect();
        let sparseness = self
            .sum
            .axis_iter(Axis(0))
            .zip(self.sum_sq.axis_iter(Axis(0)))
            .map(|(s, q)| s.iter().zip(q.iter()).map(|(&s, &q)| sparseness_from_sums(s, q, b)).sum::<f64>() / units)
            .collect();
        Ok(ResponseStats { mean_activation, sparseness, batch: b })
    }
}

/// Statistics from V1 activations `[C, H, W]`, one per image.
pub fn response_stats(acts: &[ArrayView3<'_, f32>]) -> Result<ResponseStats> {
    let first = acts.first().ok_or_else(|| Error::InsufficientData("no activations".into()))?;
    let (c, h, w) = first.dim();
    let mut acc = StatsAccumulator::new(c, h, w);
    for a in acts {
        acc.push(a.view())?;
    }
    acc.finish()
}

/// Indices of at most `n` images, chosen with a fixed stream when the set
/// is larger than `n`, in ascending order.
pub fn stats_batch(set_len: usize, n: usize, seed: u64) -> Vec<usize> {
    if set_len <= n {
        return (0..set_len).collect();
    }
    let mut idx = sample_indices(&mut derived_rng(seed, TAG_STATS, 0, 0), set_len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Statistics of `bank` on clean images `idx` of `set`, computed in
/// parallel chunks and accumulated in order.
pub fn response_stats_for_images(bank: &FilterBank, set: &ImageSet, idx: &[usize]) -> Result<ResponseStats> {
    let block = VOneBlock::new(bank);
    let (h, w) = block.output_shape();
    let mut acc = StatsAccumulator::new(bank.num_channels(), h, w);
    for chunk in idx.chunks(64) {
        let acts: Vec<_> = chunk
            .par_iter()
            .map(|&i| {
                let mut x = set.images[i].clone();
                normalize_image(&mut x);
                block.forward_image(x.view())
            })
            .collect::<Result<_>>()?;
        for a in &acts {
            acc.push(a.view())?;
        }
    }
    acc.finish()
}

/// Mean absolute bottleneck weight per input channel, for weights
/// `[outputs, channels]` without bias.
pub fn mean_abs_downstream_weights(w: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let outputs = w.shape()[0];
    if outputs == 0 || w.shape()[1] == 0 {
        return Err(Error::Shape(format!("bottleneck weights {:?}", w.shape())));
    }
    Ok(w.axis_iter(Axis(1)).map(|col| col.iter().map(|v| v.abs()).sum::<f64>() / outputs as f64).collect())
}
