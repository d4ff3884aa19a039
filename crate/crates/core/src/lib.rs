//! Constrained data-feature models (MgNet, ResNet variants, GDFI) on a
//! small CPU tensor and autodiff core, with numerical checks of their
//! structural identities.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Eval, Executor, GradStore, ParamId, ParamKind, ParamStore, Tape};
pub use data::{load_cifar_binary, load_mnist_idx, synthetic_batch, CifarVariant, Dataset, Normalizer};
pub use error::{Error, Result};
pub use model::{
    build_model, count_parameters, parse_model_spec, Bank, BuildOptions, Family, ModelGraph, ModelSpec, OperatorForm,
    ParamCount, Sharing, Stem,
};
pub use ops::norm::Mode;
pub use tensor::{Precision, Scalar, Shape4, Tensor4};
pub use train::{kaiming_init, lr_at, sgd_step, train_and_evaluate, EpochRecord, History, OptimizerState, TrainConfig};
