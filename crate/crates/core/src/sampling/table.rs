use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gfb::{N_RANGE, SF_RANGE, THETA_PERIOD};

pub const TABLE_SCHEMA_VERSION: u32 = 1;
const SUM_TOLERANCE: f64 = 1e-9;
const DEFAULT_TABLE: &str = include_str!("../../data/default_distribution_table.toml");

/// `bins + 1` edges, `min * (max/min)^(i/bins)`, last edge exactly `max`.
pub fn log_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let ratio = max / min;
    let mut edges: Vec<f64> =
        (0..=bins).map(|i| min * ratio.powf(i as f64 / bins as f64)).collect();
    edges[0] = min;
    edges[bins] = max;
    edges
}

/// `bins + 1` edges, `min + (max - min) * i/bins`, last edge exactly `max`.
pub fn linear_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let mut edges: Vec<f64> =
        (0..=bins).map(|i| min + (max - min) * (i as f64 / bins as f64)).collect();
    edges[bins] = max;
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    LogSpaced { min: f64, max: f64, bins: usize },
    Linear { min: f64, max: f64, bins: usize },
}

/// Bin edges, either listed or generated from a rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeSpec {
    Explicit(Vec<f64>),
    Generated(EdgeRule),
}

impl EdgeSpec {
    pub fn edges(&self) -> Vec<f64> {
        match self {
            EdgeSpec::Explicit(e) => e.clone(),
            EdgeSpec::Generated(EdgeRule::LogSpaced { min, max, bins }) => {
                log_edges(*min, *max, *bins)
            }
            EdgeSpec::Generated(EdgeRule::Linear { min, max, bins }) => {
                linear_edges(*min, *max, *bins)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: EdgeSpec,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeJoint {
    pub nx_edges: EdgeSpec,
    pub ny_edges: EdgeSpec,
    /// `joint[nx_bin][ny_bin]`.
    pub joint: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCoupling {
    /// `rows[sf_bin][nx_bin] = P(nx_bin | sf_bin)`.
    pub rows: Vec<Vec<f64>>,
}

/// Empirical RF-property histograms driving the Biological regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub orientation: Histogram,
    pub spatial_frequency: Histogram,
    pub size: SizeJoint,
    pub coupling: SizeCoupling,
}

impl DistributionTable {
    /// The table shipped with the crate.
    pub fn default_table() -> DistributionTable {
        DistributionTable::from_toml_str(DEFAULT_TABLE).expect("shipped table is valid")
    }

    pub fn from_toml_str(s: &str) -> Result<DistributionTable> {
        let table: DistributionTable = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("table serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn orientation_edges(&self) -> Vec<f64> {
        self.orientation.edges.edges()
    }
    pub fn sf_edges(&self) -> Vec<f64> {
        self.spatial_frequency.edges.edges()
    }
    pub fn nx_edges(&self) -> Vec<f64> {
        self.size.nx_edges.edges()
    }
    pub fn ny_edges(&self) -> Vec<f64> {
        self.size.ny_edges.edges()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != TABLE_SCHEMA_VERSION {
            return Err(table_err(
                "schema_version",
                format!("unsupported version {} (expected {TABLE_SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let theta = check_edges("orientation.edges", &self.orientation_edges(), (0.0, THETA_PERIOD))?;
        check_probabilities("orientation.probabilities", &self.orientation.probabilities, theta)?;
        let sf = check_edges("spatial_frequency.edges", &self.sf_edges(), SF_RANGE)?;
        check_probabilities("spatial_frequency.probabilities", &self.spatial_frequency.probabilities, sf)?;
        let nx = check_edges("size.nx_edges", &self.nx_edges(), N_RANGE)?;
        let ny = check_edges("size.ny_edges", &self.ny_edges(), N_RANGE)?;

        if self.size.joint.len() != nx {
            return Err(table_err("size.joint", format!("{} rows for {nx} nx bins", self.size.joint.len())));
        }
        let mut total = 0.0;
        for (i, row) in self.size.joint.iter().enumerate() {
            let field = format!("size.joint[{i}]");
            if row.len() != ny {
                return Err(table_err(&field, format!("{} columns for {ny} ny bins", row.len())));
            }
            check_non_negative(&field, row)?;
            total += row.iter().sum::<f64>();
        }
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(table_err("size.joint", format!("probabilities sum to {total}")));
        }

        if self.coupling.rows.len() != sf {
            return Err(table_err(
                "coupling.rows",
                format!("{} rows for {sf} SF bins", self.coupling.rows.len()),
            ));
        }
        for (i, row) in self.coupling.rows.iter().enumerate() {
            check_probabilities(&format!("coupling.rows[{i}]"), row, nx)?;
            for (j, &p) in row.iter().enumerate() {
                if p > 0.0 && self.size.joint[j].iter().sum::<f64>() <= 0.0 {
                    return Err(table_err(
                        &format!("coupling.rows[{i}]"),
                        format!("assigns mass to nx bin {j}, which has no ny distribution"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a table file.
pub fn load_distribution_table(path: impl AsRef<Path>) -> Result<DistributionTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DistributionTable::from_toml_str(&text)
}

fn table_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Table { field: field.to_string(), reason: reason.into() }
}

/// Returns the number of bins.
fn check_edges(field: &str, edges: &[f64], (lo, hi): (f64, f64)) -> Result<usize> {
    if edges.len() < 2 {
        return Err(table_err(field, "needs at least two edges"));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(table_err(field, "edges must be strictly increasing"));
    }
    let (first, last) = (edges[0], edges[edges.len() - 1]);
    if first < lo || last > hi {
        return Err(table_err(field, format!("edges [{first}, {last}] leave the range [{lo}, {hi}]")));
    }
    Ok(edges.len() - 1)
}

fn check_non_negative(field: &str, p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(table_err(field, format!("invalid probability {v}")));
    }
    Ok(())
}

fn check_probabilities(field: &str, p: &[f64], bins: usize) -> Result<()> {
    if p.len() != bins {
        return Err(table_err(field, format!("{} probabilities for {bins} bins", p.len())));
    }
    check_non_negative(field, p)?;
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(table_err(field, format!("probabilities sum to {sum}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_loads() {
        let t = DistributionTable::default_table();
        assert_eq!(t.sf_edges().len(), 11);
        assert_eq!(t.nx_edges().len(), 7);
        assert_eq!(t.sf_edges()[10], 11.3);
    }

    #[test]
    fn refined_edges_align_with_coarse_ones() {
        let fine = log_edges(0.5, 11.3, 10);
        let coarse = log_edges(0.5, 11.3, 5);
        for j in 0..=5 {
            assert_eq!(fine[2 * j], coarse[j]);
        }
        let fine = linear_edges(0.1, 1.585, 6);
        let coarse = linear_edges(0.1, 1.585, 3);
        for j in 0..=3 {
            assert_eq!(fine[2 * j], coarse[j]);
        }
    }

    #[test]
    fn bad_row_is_named() {
        let mut t = DistributionTable::default_table();
        t.coupling.rows[3] = vec![0.1, 0.2, 0.3, 0.2, 0.1, 0.0];
        match t.validate() {
            Err(Error::Table { field, reason }) => {
                assert_eq!(field, "coupling.rows[3]");
                assert!(reason.contains("0.9"), "{reason}");
            }
            other => panic!("expected table error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_edges_outside_range_and_wrong_counts() {
        let mut t = DistributionTable::default_table();
        t.spatial_frequency.edges = EdgeSpec::Generated(EdgeRule::LogSpaced { min: 0.4, max: 11.3, bins: 10 });
        assert!(matches!(t.validate(), Err(Error::Table { field, .. }) if field == "spatial_frequency.edges"));

        let mut t = DistributionTable::default_table();
        t.coupling.rows.pop();
        assert!(matches!(t.validate(), Err(Error::Table { field, .. }) if field == "coupling.rows"));

        let mut t = DistributionTable::default_table();
        t.schema_version = 7;
        assert!(t.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.toml");
        let t = DistributionTable::default_table();
        t.save(&path).unwrap();
        let back = load_distribution_table(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.checksum(), t.checksum());
    }
}
