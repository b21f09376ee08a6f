//! Image-adaptive color style transfer built on deterministic per-pixel
//! color mapping.

pub mod augment;
pub mod bench;
pub mod calibration;
pub mod dncm;
pub mod encoder;
pub mod evaluation;
pub mod imaging;
pub mod pipeline;
pub mod presets;
pub mod synth;
pub mod tensor;
pub mod trainer;
