use crate::error::{Error, Result};
use crate::gfb::{CellType, ChannelDescriptor, N_RANGE, SF_RANGE};
use crate::sampling::{linear_edges, log_edges};

use super::ResponseStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinAxes {
    /// Spatial frequency by nx.
    Rf,
    /// Mean activation by sparseness.
    Response,
}

impl BinAxes {
    pub fn names(self) -> (&'static str, &'static str) {
        match self {
            BinAxes::Rf => ("sf", "nx"),
            BinAxes::Response => ("activation", "sparseness"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BinAxes::Rf => "rf",
            BinAxes::Response => "response",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfEdges {
    pub sf: Vec<f64>,
    pub nx: Vec<f64>,
}

impl Default for RfEdges {
    /// 5 log-spaced SF bins and 3 linear nx bins over the full ranges.
    fn default() -> Self {
        RfEdges { sf: log_edges(SF_RANGE.0, SF_RANGE.1, 5), nx: linear_edges(N_RANGE.0, N_RANGE.1, 3) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseEdges {
    pub activation: Vec<f64>,
    pub sparseness: Vec<f64>,
}

impl ResponseEdges {
    /// Quantile edges of the pooled statistics of all `variants`.
    pub fn pooled(variants: &[&ResponseStats], activation_bins: usize, sparseness_bins: usize) -> Result<Self> {
        let act: Vec<f64> = variants.iter().flat_map(|s| s.mean_activation.iter().copied()).collect();
        let sp: Vec<f64> = variants.iter().flat_map(|s| s.sparseness.iter().copied()).collect();
        Ok(ResponseEdges { activation: quantile_edges(&act, activation_bins)?, sparseness: quantile_edges(&sp, sparseness_bins)? })
    }
}

/// One sub-population. Empty cells hold zeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinCell {
    pub cell_type: CellType,
    pub a: usize,
    pub b: usize,
    pub count: usize,
    pub mean_activation: f64,
    pub mean_sparseness: f64,
    pub mean_abs_weight: f64,
    pub impact: f64,
}

/// Cells ordered by cell type (simple first), then `a`, then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTable {
    pub axes: BinAxes,
    pub a_edges: Vec<f64>,
    pub b_edges: Vec<f64>,
    pub cells: Vec<BinCell>,
}

impl BinTable {
    pub fn shape(&self) -> (usize, usize, usize) {
        (2, self.a_edges.len() - 1, self.b_edges.len() - 1)
    }

    pub fn cell(&self, cell_type: CellType, a: usize, b: usize) -> &BinCell {
        let (_, na, nb) = self.shape();
        let t = usize::from(cell_type == CellType::Complex);
        &self.cells[(t * na + a) * nb + b]
    }

    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn same_edges(&self, other: &BinTable) -> bool {
        self.axes == other.axes && self.a_edges == other.a_edges && self.b_edges == other.b_edges
    }
}

fn check_edges(axis: &'static str, edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::param("edges", format!("axis `{axis}` needs at least two edges")));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("edges", format!("axis `{axis}` edges must be finite and strictly increasing")));
    }
    Ok(())
}

/// Bin of `v`: intervals are `[e_i, e_{i+1})` except the last, which is
/// closed.
pub fn bin_index(axis: &'static str, edges: &[f64], v: f64) -> Result<usize> {
    check_edges(axis, edges)?;
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    if !(lo..=hi).contains(&v) {
        return Err(Error::OutOfRange { axis, value: v, lo, hi });
    }
    Ok((edges.partition_point(|&e| e <= v) - 1).min(edges.len() - 2))
}

/// `count x mean_activation x mean_abs_weight`; zero for an empty bin.
pub fn downstream_impact(count: usize, mean_activation: f64, mean_abs_weight: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        count as f64 * mean_activation * mean_abs_weight
    }
}

/// `bins + 1` linearly interpolated quantiles of `values`, with repeated
/// edges merged. A constant input gives a single bin.
pub fn quantile_edges(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() || bins == 0 {
        return Err(Error::InsufficientData("quantile edges need values and at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("values", "non-finite value"));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let mut edges: Vec<f64> = Vec::with_capacity(bins + 1);
    for i in 0..=bins {
        let h = (n - 1) as f64 * i as f64 / bins as f64;
        let lo = h.floor() as usize;
        let v = if lo + 1 < n { x[lo] + (h - lo as f64) * (x[lo + 1] - x[lo]) } else { x[n - 1] };
        if edges.last().is_none_or(|&last| v > last) {
            edges.push(v);
        }
    }
    *edges.last_mut().expect("non-empty") = x[n - 1];
    if edges.len() == 1 {
        let v = edges[0];
        edges.push(v + v.abs().max(1.0) * 1e-12);
    }
    Ok(edges)
}

struct Assignment {
    cell_type: CellType,
    a: usize,
    b: usize,
}

fn build(
    axes: BinAxes,
    a_edges: &[f64],
    b_edges: &[f64],
    assign: Vec<Assignment>,
    stats: &ResponseStats,
    weights: &[f64],
) -> BinTable {
    let (na, nb) = (a_edges.len() - 1, b_edges.len() - 1);
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0); 2 * na * nb];
    for (ch, x) in assign.iter().enumerate() {
        let t = usize::from(x.cell_type == CellType::Complex);
        let s = &mut sums[(t * na + x.a) * nb + x.b];
        s.0 += 1;
        s.1 += stats.mean_activation[ch];
        s.2 += stats.sparseness[ch];
        s.3 += weights[ch];
    }
    let mut cells = Vec::with_capacity(sums.len());
    for (t, cell_type) in [CellType::Simple, CellType::Complex].into_iter().enumerate() {
        for a in 0..na {
            for b in 0..nb {
                let (count, act, sp, w) = sums[(t * na + a) * nb + b];
                let k = count.max(1) as f64;
                let (mean_activation, mean_sparseness, mean_abs_weight) = (act / k, sp / k, w / k);
                cells.push(BinCell {
                    cell_type,
                    a,
                    b,
                    count,
                    mean_activation,
                    mean_sparseness,
                    mean_abs_weight,
                    impact: downstream_impact(count, mean_activation, mean_abs_weight),
                });
            }
        }
    }
    BinTable { axes, a_edges: a_edges.to_vec(), b_edges: b_edges.to_vec(), cells }
}

fn check_lengths(descriptors: &[ChannelDescriptor], stats: &ResponseStats, weights: &[f64]) -> Result<()> {
    if descriptors.len() != stats.len() || weights.len() != stats.len() {
        return Err(Error::Shape(format!(
            "{} descriptors, {} channel statistics, {} channel weights",
            descriptors.len(),
            stats.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// Bins channels by cell type, spatial frequency and nx.
pub fn bin_by_rf(descriptors: &[ChannelDescriptor], stats: &ResponseStats, weights: &[f64], edges: &RfEdges) -> Result<BinTable> {
    check_lengths(descriptors, stats, weights)?;
    let assign = descriptors
        .iter()
        .map(|d| {
            Ok(Assignment {
                cell_type: d.cell_type,
                a: bin_index("sf", &edges.sf, d.params.sf)?,
                b: bin_index("nx", &edges.nx, d.params.nx)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(build(BinAxes::Rf, &edges.sf, &edges.nx, assign, stats, weights))
}

/// Bins channels by cell type, mean activation and sparseness.
pub fn bin_by_response(
    descriptors: &[ChannelDescriptor],
    stats: &ResponseStats,
    weights: &[f64],
    edges: &ResponseEdges,
) -> Result<BinTable> {
    check_lengths(descriptors, stats, weights)?;
    let assign = descriptors
        .iter()
        .enumerate()
        .map(|(ch, d)| {
            Ok(Assignment {
                cell_type: d.cell_type,
                a: bin_index("activation", &edges.activation, stats.mean_activation[ch])?,
                b: bin_index("sparseness", &edges.sparseness, stats.sparseness[ch])?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(build(BinAxes::Response, &edges.activation, &edges.sparseness, assign, stats, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfb::GaborParams;

    fn desc(cell_type: CellType, sf: f64, nx: f64, i: usize) -> ChannelDescriptor {
        ChannelDescriptor { cell_type, params: GaborParams { theta: 0.0, sf, phase: 0.0, nx, ny: 0.5 }, channel_index: i }
    }

    #[test]
    fn interval_conventions() {
        let e = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(bin_index("x", &e, 0.0).unwrap(), 0);
        assert_eq!(bin_index("x", &e, 1.0).unwrap(), 1);
        assert_eq!(bin_index("x", &e, 2.999).unwrap(), 2);
        assert_eq!(bin_index("x", &e, 3.0).unwrap(), 2);
        assert!(matches!(bin_index("x", &e, 3.0001), Err(Error::OutOfRange { .. })));
        assert!(bin_index("x", &e, -1e-9).is_err());
        assert!(bin_index("x", &e, f64::NAN).is_err());
        assert!(bin_index("x", &[0.0, 1.0, 1.0], 0.5).is_err());
        assert!(bin_index("x", &[0.0, 2.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn default_rf_edges() {
        let e = RfEdges::default();
        assert_eq!((e.sf.len(), e.nx.len()), (6, 4));
        let d = [desc(CellType::Simple, 0.6, 0.15, 0)];
        let stats = ResponseStats { mean_activation: vec![1.0], sparseness: vec![0.5], batch: 2 };
        let t = bin_by_rf(&d, &stats, &[0.2], &e).unwrap();
        assert_eq!(t.cells.len(), 30);
        assert_eq!(t.cell(CellType::Simple, 0, 0).count, 1);
        assert!((t.cell(CellType::Simple, 0, 0).impact - 0.2).abs() < 1e-15);
        assert_eq!(t.total_count(), 1);
    }

    #[test]
    fn impact_product() {
        assert_eq!(downstream_impact(0, 3.0, 2.0), 0.0);
        assert!((downstream_impact(10, 0.5, 0.2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantiles() {
        let e = quantile_edges(&[4.0, 1.0, 3.0, 2.0, 5.0], 4).unwrap();
        assert_eq!(e, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let e = quantile_edges(&[0.3; 10], 4).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(bin_index("a", &e, 0.3).unwrap(), 0);
        let e = quantile_edges(&[0.0, 0.0, 0.0, 1.0, 2.0], 4).unwrap();
        assert!(e.windows(2).all(|w| w[1] > w[0]));
        assert!(quantile_edges(&[], 4).is_err());
    }

    #[test]
    fn length_mismatch() {
        let d = [desc(CellType::Simple, 0.6, 0.15, 0)];
        let stats = ResponseStats { mean_activation: vec![1.0, 2.0], sparseness: vec![0.5, 0.1], batch: 2 };
        assert!(matches!(bin_by_rf(&d, &stats, &[0.2, 0.1], &RfEdges::default()), Err(Error::Shape(_))));
    }
}
