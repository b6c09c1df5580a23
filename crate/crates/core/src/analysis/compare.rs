use std::path::Path;

use serde::Serialize;

use super::bins::{bin_by_response, bin_by_rf, BinAxes, BinCell, BinTable, ResponseEdges, RfEdges};
use super::pearson::{pearson, CorrelationResult, InclusionRule};
use super::ResponseStats;
use crate::error::{Error, Result};
use crate::gfb::ChannelDescriptor;

/// Everything the binning needs about one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantAnalysis {
    pub name: String,
    pub descriptors: Vec<ChannelDescriptor>,
    pub stats: ResponseStats,
    /// Mean absolute bottleneck weight per channel.
    pub weights: Vec<f64>,
}

impl VariantAnalysis {
    pub fn rf_table(&self, edges: &RfEdges) -> Result<BinTable> {
        bin_by_rf(&self.descriptors, &self.stats, &self.weights, edges)
    }

    pub fn response_table(&self, edges: &ResponseEdges) -> Result<BinTable> {
        bin_by_response(&self.descriptors, &self.stats, &self.weights, edges)
    }

    pub fn stats_rows(&self) -> Vec<StatsRow> {
        self.descriptors
            .iter()
            .enumerate()
            .map(|(ch, d)| StatsRow {
                channel: ch,
                cell_type: d.cell_type.as_str(),
                theta: d.params.theta,
                sf: d.params.sf,
                nx: d.params.nx,
                ny: d.params.ny,
                mean_act: self.stats.mean_activation[ch],
                sparseness: self.stats.sparseness[ch],
                mean_abs_w: self.weights[ch],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    MeanActivation,
    MeanSparseness,
    MeanAbsWeight,
    Impact,
}

impl Quantity {
    pub fn of(self, c: &BinCell) -> f64 {
        match self {
            Quantity::MeanActivation => c.mean_activation,
            Quantity::MeanSparseness => c.mean_sparseness,
            Quantity::MeanAbsWeight => c.mean_abs_weight,
            Quantity::Impact => c.impact,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::MeanActivation => "mean_activation",
            Quantity::MeanSparseness => "mean_sparseness",
            Quantity::MeanAbsWeight => "mean_abs_weight",
            Quantity::Impact => "impact",
        }
    }
}

/// Pearson correlation of `q` between matching cells of two tables.
pub fn correlate_tables(a: &BinTable, b: &BinTable, q: Quantity, rule: InclusionRule) -> Result<CorrelationResult> {
    if !a.same_edges(b) {
        return Err(Error::param("edges", "bin edges differ between variants"));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .cells
        .iter()
        .zip(&b.cells)
        .filter(|(ca, cb)| rule == InclusionRule::AllBins || (ca.count > 0 && cb.count > 0))
        .map(|(ca, cb)| (q.of(ca), q.of(cb)))
        .unzip();
    let (r, p) = pearson(&x, &y)?;
    Ok(CorrelationResult { r, p, n: x.len(), inclusion_rule: rule })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCorrelation {
    pub name: &'static str,
    pub axes: BinAxes,
    pub quantity: Quantity,
    pub rule: InclusionRule,
    /// The error text when the correlation is undefined.
    pub result: std::result::Result<CorrelationResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: [String; 2],
    pub rf: [BinTable; 2],
    pub response: [BinTable; 2],
    pub correlations: Vec<NamedCorrelation>,
}

/// Bins both variants on shared edges and computes the four
/// correlations: weights and impact, by RF bin and by response bin.
/// Response edges are quantiles of the pooled statistics.
pub fn compare_variants(
    a: &VariantAnalysis,
    b: &VariantAnalysis,
    rf_edges: &RfEdges,
    response_bins: (usize, usize),
) -> Result<Comparison> {
    let resp_edges = ResponseEdges::pooled(&[&a.stats, &b.stats], response_bins.0, response_bins.1)?;
    let rf = [a.rf_table(rf_edges)?, b.rf_table(rf_edges)?];
    let response = [a.response_table(&resp_edges)?, b.response_table(&resp_edges)?];
    let plan = [
        ("weights_by_rf", BinAxes::Rf, Quantity::MeanAbsWeight, InclusionRule::BothNonempty),
        ("weights_by_response", BinAxes::Response, Quantity::MeanAbsWeight, InclusionRule::BothNonempty),
        ("impact_by_rf", BinAxes::Rf, Quantity::Impact, InclusionRule::AllBins),
        ("impact_by_response", BinAxes::Response, Quantity::Impact, InclusionRule::AllBins),
    ];
    let correlations = plan
        .into_iter()
        .map(|(name, axes, quantity, rule)| {
            let t = if axes == BinAxes::Rf { &rf } else { &response };
            let result = correlate_tables(&t[0], &t[1], quantity, rule).map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("{name}: {e}");
            }
            NamedCorrelation { name, axes, quantity, rule, result }
        })
        .collect();
    Ok(Comparison { names: [a.name.clone(), b.name.clone()], rf, response, correlations })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub channel: usize,
    pub cell_type: &'static str,
    pub theta: f64,
    pub sf: f64,
    pub nx: f64,
    pub ny: f64,
    pub mean_act: f64,
    pub sparseness: f64,
    pub mean_abs_w: f64,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(Some(path.to_path_buf()), e.to_string()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(Some(path.to_path_buf()), e.to_string())
}

pub fn write_stats_csv(path: impl AsRef<Path>, rows: &[StatsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per cell of each named table; all tables must share axes.
pub fn write_bins_csv(path: impl AsRef<Path>, tables: &[(&str, &BinTable)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    let (an, bn) = tables.first().map_or(("a", "b"), |t| t.1.axes.names());
    w.write_record([
        "variant".to_string(),
        "cell_type".into(),
        format!("{an}_bin"),
        format!("{bn}_bin"),
        format!("{an}_lo"),
        format!("{an}_hi"),
        format!("{bn}_lo"),
        format!("{bn}_hi"),
        "count".into(),
        "mean_act".into(),
        "mean_sparseness".into(),
        "mean_abs_w".into(),
        "impact".into(),
    ])
    .map_err(csv_err(path))?;
    for (name, t) in tables {
        for c in &t.cells {
            w.write_record([
                name.to_string(),
                c.cell_type.as_str().into(),
                c.a.to_string(),
                c.b.to_string(),
                t.a_edges[c.a].to_string(),
                t.a_edges[c.a + 1].to_string(),
                t.b_edges[c.b].to_string(),
                t.b_edges[c.b + 1].to_string(),
                c.count.to_string(),
                c.mean_activation.to_string(),
                c.mean_sparseness.to_string(),
                c.mean_abs_weight.to_string(),
                c.impact.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Impact heatmap data of every table.
pub fn write_impact_csv(path: impl AsRef<Path>, tables: &[(&str, &BinTable)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["table", "variant", "cell_type", "a_bin", "b_bin", "count", "impact"]).map_err(csv_err(path))?;
    for (name, t) in tables {
        for c in &t.cells {
            w.write_record([
                t.axes.as_str().to_string(),
                name.to_string(),
                c.cell_type.as_str().into(),
                c.a.to_string(),
                c.b.to_string(),
                c.count.to_string(),
                c.impact.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_correlations_csv(path: impl AsRef<Path>, correlations: &[NamedCorrelation]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["name", "table", "quantity", "rule", "n", "r", "p", "note"]).map_err(csv_err(path))?;
    for c in correlations {
        let (n, r, p, note) = match &c.result {
            Ok(res) => (res.n.to_string(), res.r.to_string(), res.p.to_string(), String::new()),
            Err(e) => (String::new(), String::new(), String::new(), e.clone()),
        };
        w.write_record([c.name, c.axes.as_str(), c.quantity.as_str(), c.rule.as_str(), &n, &r, &p, &note])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
