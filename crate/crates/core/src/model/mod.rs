//! Model families, their notation and their forward passes.

pub mod forward;
pub mod graph;
pub mod spec;

pub use forward::{features, forward_record, gdfi_forward, logits, loss, mgnet_forward, preact_resnet_forward, resnet_forward, MgTrace};
pub use graph::{build_model, count_parameters, Bank, BuildOptions, ConvUnit, Levels, MgLevel, ModelGraph, ParamCount, ResBlock, ResLevel};
pub use spec::{parse_model_spec, Family, ModelSpec, OperatorForm, Sharing, Stem, GRAMMAR};
