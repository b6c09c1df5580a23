//! Training loop, evaluation and checkpoints.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::net::{argmax, cross_entropy, Backend, BackendConfig, BN_MOMENTUM};
use super::optim::{plateau_schedule, sgd_step, PlateauState, TrainConfig};
use crate::container::TensorFile;
use crate::data_pipeline::{batch_indices, ImageSet};
use crate::error::{Error, Result};
use crate::gfb::FilterBank;
use crate::rng::{derived_rng, TAG_AUGMENT};
use crate::vone_block::{normalize_image, VOneBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub backend: Backend<f32>,
    /// Momentum buffers, same layout as the parameters.
    pub velocity: Backend<f32>,
    pub plateau: PlateauState,
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Mean training loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub bank_checksum: String,
}

impl TrainState {
    pub fn new(bank: &FilterBank, config: &BackendConfig, train: &TrainConfig) -> Result<TrainState> {
        if config.in_channels != bank.num_channels() {
            return Err(Error::Shape(format!(
                "backend expects {} V1 channels, bank has {}",
                config.in_channels,
                bank.num_channels()
            )));
        }
        let backend = Backend::new(config, train.seed)?;
        Ok(TrainState {
            velocity: backend.zeros_like(),
            backend,
            plateau: PlateauState::new(train.lr0),
            epoch: 0,
            metrics: Vec::new(),
            step_losses: Vec::new(),
            bank_checksum: bank.checksum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Evaluates on `set` after `transform(index, raw_image)`, which must return
/// pixels in `[0, 1]`; normalization is applied here.
pub fn evaluate_transformed<F>(block: &VOneBlock<'_>, backend: &Backend<f32>, set: &ImageSet, transform: F) -> Result<Evaluation>
where
    F: Fn(usize, &Array3<f32>) -> Array3<f32> + Sync,
{
    if set.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let per_image: Vec<Result<(f64, usize)>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut img = transform(i, &set.images[i]);
            normalize_image(&mut img);
            let v1 = block.forward_image(img.view())?;
            let logits = backend.forward_image(v1.view())?;
            let label = set.labels[i];
            if label >= logits.len() {
                return Err(Error::LabelOutOfRange { label, num_classes: logits.len() });
            }
            let (loss, _) = cross_entropy(logits.view(), label);
            Ok((loss as f64, argmax(logits.view())))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(set.len());
    for (i, r) in per_image.into_iter().enumerate() {
        let (l, p) = r?;
        loss += l;
        correct += usize::from(p == set.labels[i]);
        predictions.push(p);
    }
    let n = set.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n, predictions })
}

pub fn evaluate(bank: &FilterBank, backend: &Backend<f32>, set: &ImageSet) -> Result<Evaluation> {
    evaluate_transformed(&VOneBlock::new(bank), backend, set, |_, img| img.clone())
}

/// Fresh state, then `train_cfg.epochs` epochs.
pub fn train(bank: &FilterBank, backend_cfg: &BackendConfig, train_cfg: &TrainConfig, train_set: &ImageSet, val_set: &ImageSet) -> Result<TrainState> {
    let mut state = TrainState::new(bank, backend_cfg, train_cfg)?;
    train_epochs(&mut state, bank, train_cfg, train_set, val_set, train_cfg.epochs)?;
    Ok(state)
}

/// Continues training for `epochs` more epochs.
pub fn train_epochs(
    state: &mut TrainState,
    bank: &FilterBank,
    cfg: &TrainConfig,
    train_set: &ImageSet,
    val_set: &ImageSet,
    epochs: usize,
) -> Result<()> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("training and validation splits must be non-empty".into()));
    }
    train_set.validate()?;
    val_set.validate()?;
    if bank.checksum() != state.bank_checksum {
        return Err(Error::param("bank", "filter bank differs from the one this state was trained with"));
    }
    let block = VOneBlock::new(bank);
    let cached: Option<Vec<Array3<f32>>> = if cfg.cache_features {
        Some(
            train_set
                .images
                .par_iter()
                .map(|img| {
                    let mut x = img.clone();
                    normalize_image(&mut x);
                    block.forward_image(x.view())
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    for _ in 0..epochs {
        let epoch = state.epoch;
        let lr = state.plateau.lr;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in batch_indices(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64, true) {
            let fresh: Vec<Array3<f32>> = match &cached {
                Some(_) => Vec::new(),
                None => batch
                    .par_iter()
                    .map(|&i| {
                        let x = if cfg.augment {
                            let mut rng = derived_rng(cfg.seed, TAG_AUGMENT, epoch as u64, i as u64);
                            augment(&train_set.images[i], &mut rng)
                        } else {
                            let mut x = train_set.images[i].clone();
                            normalize_image(&mut x);
                            x
                        };
                        block.forward_image(x.view())
                    })
                    .collect::<Result<_>>()?,
            };
            let views: Vec<ArrayView3<'_, f32>> = match &cached {
                Some(f) => batch.iter().map(|&i| f[i].view()).collect(),
                None => fresh.iter().map(|a| a.view()).collect(),
            };
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let r = state.backend.batch_grad(&views, &labels)?;
            let batch_loss = r.loss as f64;
            correct += r.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += batch_loss * batch.len() as f64;
            state.step_losses.push(batch_loss);
            sgd_step(&mut state.backend, &mut state.velocity, &r.grads, lr, cfg)?;
            state.backend.update_running_stats(&r.stats, BN_MOMENTUM);
        }
        let val = evaluate_transformed(&block, &state.backend, val_set, |_, img| img.clone())?;
        plateau_schedule(&mut state.plateau, val.loss, cfg.lr0, &cfg.plateau);
        state.epoch += 1;
        let m = EpochMetrics {
            epoch: state.epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
            train_acc: correct as f64 / train_set.len() as f64,
        };
        log::info!(
            "epoch {} train_loss {:.4} train_acc {:.3} val_loss {:.4} val_acc {:.3} lr {}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc,
            m.lr
        );
        state.metrics.push(m);
    }
    if bank.checksum() != state.bank_checksum {
        return Err(Error::param("bank", "filter bank changed during training"));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    epoch: usize,
    bank_checksum: String,
    plateau: PlateauState,
    backend: BackendConfig,
    train: TrainConfig,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes `backend.bin`, `optimizer.bin`, `state.toml` and `metrics.csv`.
pub fn save_checkpoint(dir: impl AsRef<Path>, state: &TrainState, train_cfg: &TrainConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.backend.to_tensor_file().save(dir.join("backend.bin"))?;
    state.velocity.to_tensor_file().save(dir.join("optimizer.bin"))?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        epoch: state.epoch,
        bank_checksum: state.bank_checksum.clone(),
        plateau: state.plateau,
        backend: state.backend.config().clone(),
        train: train_cfg.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    let p = dir.join("state.toml");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::format(Some(p.clone()), e.to_string()))?;
    for m in &state.metrics {
        w.serialize(m).map_err(|e| Error::format(Some(p.clone()), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Inverse of [`save_checkpoint`]; also returns the stored training config.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainState, TrainConfig)> {
    let dir = dir.as_ref();
    let p = dir.join("state.toml");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::format(Some(p.clone()), e.to_string()))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(Some(p), format!("unsupported checkpoint version {}", meta.format_version)));
    }
    let backend = Backend::from_tensor_file(&meta.backend, &TensorFile::load(dir.join("backend.bin"))?)?;
    let velocity = Backend::from_tensor_file(&meta.backend, &TensorFile::load(dir.join("optimizer.bin"))?)?;
    let p = dir.join("metrics.csv");
    let mut r = csv::Reader::from_path(&p).map_err(|e| Error::format(Some(p.clone()), e.to_string()))?;
    let metrics = r
        .deserialize()
        .collect::<std::result::Result<Vec<EpochMetrics>, _>>()
        .map_err(|e| Error::format(Some(p.clone()), e.to_string()))?;
    Ok((
        TrainState {
            backend,
            velocity,
            plateau: meta.plateau,
            epoch: meta.epoch,
            metrics,
            step_losses: Vec::new(),
            bank_checksum: meta.bank_checksum,
        },
        meta.train,
    ))
}

/// V1 activations of raw images.
pub fn v1_features(bank: &FilterBank, images: &[Array3<f32>]) -> Result<Vec<Array3<f32>>> {
    let block = VOneBlock::new(bank);
    images
        .par_iter()
        .map(|img| {
            let mut x = img.clone();
            normalize_image(&mut x);
            block.forward_image(x.view())
        })
        .collect()
}
