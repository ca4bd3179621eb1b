pub mod adam;
pub mod layers;
pub mod models;
pub mod store;
pub mod weights;

pub use adam::{adam_step, AdamState};
pub use layers::{init_store, LayerKind, LayerSpec};
pub use models::{residual_block, Arch, ClassifierNet, GeneratorNet, VaeNet};
pub use store::{Bound, ParameterStore};
pub use weights::{decode_weights, encode_weights, load_into, load_weights, save_weights};
