//! Feed-forward network engine: tensors, layers, loss, Adam, and
//! finite-difference gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod io;
pub mod layer;
pub mod loss;
pub mod network;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{gradient_check, layer_gradient_check, GradCheckConfig, GradReport};
pub use io::{load_model, save_model, ModelManifest, ModelMeta, MODEL_FORMAT};
pub use layer::LayerSpec;
pub use loss::{softmax, softmax_cross_entropy};
pub use network::{
    micro_cnn_param_count, micro_cnn_specs, Layer, Network, FEATURE_DIM, MICRO_CNN_FEATURE_LAYERS,
};
pub use tensor::Tensor;
