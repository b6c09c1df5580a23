//! Trainable backend on top of the V1 block, its optimizer, augmentation
//! and training loop.

mod augment;
mod net;
mod optim;
mod train;

pub use augment::{augment, warp, AugmentParams};
pub use net::{
    cross_entropy, Backend, BackendConfig, BatchGrad, BatchNorm, BatchStats, Conv2d, HeadBlock, Layer, Linear, Scalar,
    BN_EPS, BN_MOMENTUM,
};
pub use optim::{plateau_schedule, sgd_step, sgd_update, PlateauConfig, PlateauState, TrainConfig};
pub use train::{
    evaluate, evaluate_transformed, load_checkpoint, save_checkpoint, train, train_epochs, v1_features, EpochMetrics,
    Evaluation, TrainState,
};
