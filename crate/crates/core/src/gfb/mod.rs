//! Gabor filter bank: discretized oriented Gabor kernels and the fixed-weight
//! bank that pairs them into simple and complex V1 channels.

mod bank;
mod kernel;

pub use bank::{build_filter_bank, BankGeometry, FilterBank, KernelSlot};
pub use kernel::{
    make_gabor_kernel, CellType, ChannelDescriptor, GaborKernel, GaborParams, N_RANGE, SF_RANGE,
    THETA_PERIOD,
};
