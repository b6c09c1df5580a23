use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{corrupt, image_rng, CorruptionKind, CorruptionSpec, SeverityTable};
use crate::backend_train::{evaluate_transformed, Backend};
use crate::data_pipeline::{load_directory_dataset, ImageSet};
use crate::error::{Error, Result};
use crate::gfb::FilterBank;
use crate::vone_block::VOneBlock;

/// Top-1 accuracy on clean images and per corruption cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub clean: f64,
    pub cells: Vec<(CorruptionSpec, f64)>,
    /// Images scored per cell.
    pub n_images: usize,
}

/// One line of the results CSV. Clean accuracy is kind `clean`, severity 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub seed: u64,
    pub kind: String,
    pub severity: u8,
    pub top1: f64,
}

impl RobustnessReport {
    pub fn top1(&self, kind: CorruptionKind, severity: u8) -> Option<f64> {
        if severity == 0 {
            return Some(self.clean);
        }
        self.cells.iter().find(|(s, _)| s.kind == kind && s.severity == severity).map(|c| c.1)
    }

    /// Mean over severities 1 to 5 that were evaluated.
    pub fn kind_mean(&self, kind: CorruptionKind) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|(s, _)| s.kind == kind && s.severity > 0).map(|c| c.1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn kinds(&self) -> Vec<CorruptionKind> {
        let mut k: Vec<CorruptionKind> = self.cells.iter().map(|(s, _)| s.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Mean of the per-kind means over `kinds`.
    pub fn mean_over(&self, kinds: &[CorruptionKind]) -> Option<f64> {
        let v: Vec<f64> = kinds.iter().filter_map(|&k| self.kind_mean(k)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn rows(&self, model: &str, seed: u64) -> Vec<ResultRow> {
        let row = |kind: &str, severity, top1| ResultRow { model: model.into(), seed, kind: kind.into(), severity, top1 };
        std::iter::once(row("clean", 0, self.clean))
            .chain(self.cells.iter().map(|(s, a)| row(s.kind.name(), s.severity, *a)))
            .collect()
    }
}

/// Accuracy on `set` and on every spec, corrupting on the fly with
/// per-image streams keyed by `seed`.
pub fn evaluate_robustness(
    bank: &FilterBank,
    backend: &Backend<f32>,
    set: &ImageSet,
    specs: &[CorruptionSpec],
    table: &SeverityTable,
    seed: u64,
) -> Result<RobustnessReport> {
    table.validate()?;
    for s in specs {
        CorruptionSpec::new(s.kind, s.severity)?;
    }
    let block = VOneBlock::new(bank);
    let clean = evaluate_transformed(&block, backend, set, |_, img| img.clone())?;
    let mut cells = Vec::with_capacity(specs.len());
    for &spec in specs {
        let ev = evaluate_transformed(&block, backend, set, |i, img| {
            corrupt(img, spec, table, &mut image_rng(seed, spec, i)).expect("validated spec")
        })?;
        debug_assert_eq!(ev.predictions.len(), set.len());
        log::info!("{} severity {}: top1 {:.4}", spec.kind, spec.severity, ev.accuracy);
        cells.push((spec, ev.accuracy));
    }
    Ok(RobustnessReport { clean: clean.accuracy, cells, n_images: set.len() })
}

/// Accuracy on a pre-corrupted tree laid out as
/// `root/<kind>/<severity>/<class>/<image>`.
pub fn evaluate_precorrupted(
    bank: &FilterBank,
    backend: &Backend<f32>,
    clean: &ImageSet,
    root: impl AsRef<Path>,
    kinds: &[CorruptionKind],
    image_size: usize,
) -> Result<RobustnessReport> {
    let root = root.as_ref();
    let block = VOneBlock::new(bank);
    let base = evaluate_transformed(&block, backend, clean, |_, img| img.clone())?;
    let mut cells = Vec::new();
    for &kind in kinds {
        for severity in 1..=5u8 {
            let index = load_directory_dataset(root.join(kind.name()), &severity.to_string(), image_size)?;
            if index.class_names != clean.class_names {
                return Err(Error::Dataset(format!("{kind}/{severity} class directories differ from the clean split")));
            }
            let (set, _) = index.load()?;
            let ev = evaluate_transformed(&block, backend, &set, |_, img| img.clone())?;
            cells.push((CorruptionSpec { kind, severity }, ev.accuracy));
        }
    }
    Ok(RobustnessReport { clean: base.accuracy, cells, n_images: clean.len() })
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::format(Some(path.to_path_buf()), e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::format(Some(path.to_path_buf()), e.to_string());
    csv::Reader::from_path(path).map_err(err)?.deserialize().collect::<std::result::Result<_, _>>().map_err(err)
}
