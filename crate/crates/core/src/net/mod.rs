//! Minimal differentiable network core: conv / max-pool / linear layers with
//! hand-written backward passes, losses, and SGD.

mod forward;
mod gemm;
mod layers;
mod loss;
mod optim;

pub use forward::{FilterMask, ForwardOptions, ForwardOutput, GradientSet, HookMasks, Mode};
pub use layers::{small_conv, Activation, HookConfig, HookInfo, Layer, LayerSpec, NetworkState};
pub use loss::{cross_entropy, mse, softmax};
pub use optim::{sgd_step, Sgd, SgdConfig};
