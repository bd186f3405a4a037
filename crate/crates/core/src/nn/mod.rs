//! Layer composition, the built-in teacher/student presets, model files and
//! size accounting.

mod io;
mod layer;
mod model;

pub use io::{decode, encode, encoded_len, load_model, save_model, DESCRIPTOR_BYTES, HEADER_BYTES, MAGIC, VERSION};
pub use layer::{LayerKind, LayerSpec, ModelPreset};
pub use model::{Architecture, Forward, Model, Param, DEFAULT_INPUT_SIZE};
