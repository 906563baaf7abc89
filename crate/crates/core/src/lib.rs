//! Heat-conduction vision backbone over paired RGB and event-camera streams.
//!
//! The core pipeline treats feature maps as temperature fields: a stack of
//! two-stream blocks mixes each modality in the cosine-frequency domain with
//! learned per-frequency diffusivities, a policy router picks one of three
//! fusion strategies per sample, and a linear head classifies the fused
//! features. Everything runs on a small hand-rolled tensor/autodiff layer so
//! gradients can be audited against finite differences.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod events;
pub mod fusion;
pub mod head;
pub mod model;
pub mod net;
pub mod ops;
pub mod profiler;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{fd_check, fd_check_sampled, Graph, Param, ParamId, ParamStore, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use events::{parse_events, stack_events, EventPoint, EventStream, PairedSample, Split};
pub use fusion::{FusionBundle, FusionMode, FusionParams};
pub use head::{topk_accuracy, LossMode, Prediction};
pub use model::{Backbone, ModelSpec};
pub use net::{Classifier, StreamMask};
pub use profiler::{count_costs, scaling_bench, CostReport, ScalingReport};
pub use spectral::{build_decay, dct2, hco_forward, idct2, DecayMatrix, FrequencyGrid};
pub use tensor::{DType, Element, Tensor, TensorError, TensorResult};
