//! Receptive-field parameter populations for the Uniform and Biological
//! regimes.

mod sampler;
mod table;

pub use sampler::{sample, sample_biological, sample_uniform, Regime, SamplerConfig, SfScale};
pub use table::{
    linear_edges, load_distribution_table, log_edges, DistributionTable, EdgeRule, EdgeSpec,
    Histogram, SizeCoupling, SizeJoint, TABLE_SCHEMA_VERSION,
};
