//! Small encoder-decoder network with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use model::{backward, build_network, forward, ForwardPass, NetworkConfig, NetworkParams, FINAL_HEAD, HEAD_COUNT};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tensor::Tensor;
pub use train::{predict_joints, train, Objective, Sample, TrainConfig, TrainOutcome};
