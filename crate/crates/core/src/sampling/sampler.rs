use std::f64::consts::TAU;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::WeightedIndex;
use serde::{Deserialize, Serialize};

use super::table::DistributionTable;
use crate::error::{Error, Result};
use crate::gfb::{CellType, ChannelDescriptor, GaborParams, N_RANGE, SF_RANGE, THETA_PERIOD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Biological,
    Uniform,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bio" | "biological" => Ok(Regime::Biological),
            "uniform" | "uni" => Ok(Regime::Uniform),
            other => Err(Error::param("regime", format!("unknown regime `{other}`"))),
        }
    }
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Biological => "biological",
            Regime::Uniform => "uniform",
        }
    }
}

/// Scale on which the Uniform regime spreads spatial frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SfScale {
    /// Uniform in log(sf): equal mass per octave.
    #[default]
    Log,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub regime: Regime,
    pub n_simple: usize,
    pub n_complex: usize,
    pub seed: u64,
    #[serde(default)]
    pub uniform_sf_scale: SfScale,
    /// Required for the Biological regime.
    #[serde(skip)]
    pub table: Option<DistributionTable>,
}

impl SamplerConfig {
    /// 256 simple + 256 complex channels.
    pub fn new(regime: Regime, seed: u64) -> Self {
        let table = match regime {
            Regime::Biological => Some(DistributionTable::default_table()),
            Regime::Uniform => None,
        };
        SamplerConfig {
            regime,
            n_simple: 256,
            n_complex: 256,
            seed,
            uniform_sf_scale: SfScale::Log,
            table,
        }
    }

    pub fn total(&self) -> usize {
        self.n_simple + self.n_complex
    }

    fn check(&self, regime: Regime) -> Result<()> {
        if self.regime != regime {
            return Err(Error::param(
                "regime",
                format!("config is {}, sampler is {}", self.regime.as_str(), regime.as_str()),
            ));
        }
        if self.total() == 0 {
            return Err(Error::param("n_simple/n_complex", "no channels requested"));
        }
        Ok(())
    }
}

/// Dispatches on `config.regime`.
pub fn sample(config: &SamplerConfig) -> Result<Vec<ChannelDescriptor>> {
    match config.regime {
        Regime::Uniform => sample_uniform(config),
        Regime::Biological => sample_biological(config),
    }
}

fn cell_type_at(config: &SamplerConfig, i: usize) -> CellType {
    if i < config.n_simple {
        CellType::Simple
    } else {
        CellType::Complex
    }
}

/// Independent uniform draws over the full parameter ranges.
pub fn sample_uniform(config: &SamplerConfig) -> Result<Vec<ChannelDescriptor>> {
    config.check(Regime::Uniform)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (sf_lo, sf_hi) = SF_RANGE;
    let out = (0..config.total())
        .map(|i| {
            let theta = rng.gen_range(0.0..THETA_PERIOD);
            let sf = match config.uniform_sf_scale {
                SfScale::Log => rng.gen_range(sf_lo.ln()..=sf_hi.ln()).exp().clamp(sf_lo, sf_hi),
                SfScale::Linear => rng.gen_range(sf_lo..=sf_hi),
            };
            let phase = rng.gen_range(0.0..TAU);
            let nx = rng.gen_range(N_RANGE.0..=N_RANGE.1);
            let ny = rng.gen_range(N_RANGE.0..=N_RANGE.1);
            ChannelDescriptor {
                cell_type: cell_type_at(config, i),
                params: GaborParams { theta, sf, phase, nx, ny },
                channel_index: i,
            }
        })
        .collect();
    Ok(out)
}

fn weighted(field: &str, p: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(p).map_err(|e| Error::Table { field: field.to_string(), reason: e.to_string() })
}

fn within(rng: &mut impl Rng, edges: &[f64], bin: usize) -> f64 {
    rng.gen_range(edges[bin]..edges[bin + 1])
}

/// Draws from the table: orientation independently, SF from its histogram,
/// the nx bin conditioned on the SF bin, and the ny bin conditioned on the
/// nx bin through the joint size histogram. Values are uniform within bins.
pub fn sample_biological(config: &SamplerConfig) -> Result<Vec<ChannelDescriptor>> {
    config.check(Regime::Biological)?;
    let table = config
        .table
        .as_ref()
        .ok_or_else(|| Error::param("table", "biological regime needs a distribution table"))?;
    table.validate()?;

    let theta_edges = table.orientation_edges();
    let sf_edges = table.sf_edges();
    let nx_edges = table.nx_edges();
    let ny_edges = table.ny_edges();
    let theta_dist = weighted("orientation.probabilities", &table.orientation.probabilities)?;
    let sf_dist = weighted("spatial_frequency.probabilities", &table.spatial_frequency.probabilities)?;
    let nx_given_sf = table
        .coupling
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| weighted(&format!("coupling.rows[{i}]"), row))
        .collect::<Result<Vec<_>>>()?;
    // rows without mass are never selected (validated against the coupling)
    let ny_given_nx: Vec<Option<WeightedIndex<f64>>> =
        table.size.joint.iter().map(|row| WeightedIndex::new(row).ok()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.total());
    for i in 0..config.total() {
        let theta_bin = theta_dist.sample(&mut rng);
        let theta = within(&mut rng, &theta_edges, theta_bin);
        let sf_bin = sf_dist.sample(&mut rng);
        let sf = within(&mut rng, &sf_edges, sf_bin);
        let nx_bin = nx_given_sf[sf_bin].sample(&mut rng);
        let nx = within(&mut rng, &nx_edges, nx_bin);
        let ny_dist = ny_given_nx[nx_bin].as_ref().expect("validated table");
        let ny_bin = ny_dist.sample(&mut rng);
        let ny = within(&mut rng, &ny_edges, ny_bin);
        let phase = rng.gen_range(0.0..TAU);
        out.push(ChannelDescriptor {
            cell_type: cell_type_at(config, i),
            params: GaborParams { theta: theta.min(THETA_PERIOD), sf, phase, nx, ny },
            channel_index: i,
        });
    }
    Ok(out)
}
