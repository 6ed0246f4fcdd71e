//! Convolutional networks with low-rank composite filter layers: tensor
//! operations, architecture specs and a model zoo, cost analysis,
//! variance-preserving initialization and a small SGD trainer.
//!
//! All arithmetic is 64-bit. With the `parallel` feature (default) work is
//! spread over the batch with rayon; results are bit-identical either way.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod arch;
pub mod composite;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod ops;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use analyzer::{analyze, compare, report_csv, CostReport, CostRow, Savings};
pub use arch::{ArchSpec, LayerSpec};
pub use composite::{CompositeConvSpec, CompositeParams, FilterGroup};
pub use error::{Error, Result};
pub use init::{composite_stddev, he_stddev, init_network, variance_probe, InitScheme, InitSpec};
pub use model::{LayerParams, ModelParams};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
pub use train::{evaluate, load_cifar10, lr_schedule, sgd_step, train, Dataset, TrainConfig, TrainHistory};
