//! Readout fitting for voxelwise encoding models: tensor I/O, hand-written
//! gradients, bilinear affine sampling, the readout family, training,
//! evaluation and synthetic ground-truth data.

pub mod diffcore;
pub mod error;
pub mod eval;
pub mod fit;
pub mod gradcheck;
pub mod readouts;
pub mod sampler;
pub mod synth;
pub mod tensor_io;
pub mod training;

pub use diffcore::{adam_step, finite_diff_check, AdamConfig, AdamState, GradCheckReport, ParamBundle};
pub use error::{Error, Result};
pub use readouts::{param_count, Model, Readout, ReadoutKind, SampleInput};
pub use sampler::{AffineParams, Padding, Theta, IDENTITY};
pub use tensor_io::{load_dataset, read_tensor, write_tensor, Dataset, DatasetManifest, Split, Splits, Tensor};
pub use training::{train, TrainConfig, TrainHistory};
