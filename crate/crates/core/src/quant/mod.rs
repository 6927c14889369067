//! Scale calibration, quantize/dequantize, simulated integer linear layers
//! and the Walsh–Hadamard rotation.

mod calib;
mod hadamard;
mod linear;
mod ops;
mod scheme;

pub use calib::{calibrate, make_affine_params, make_scales, CalibrationStats};
pub use hadamard::{fwht_in_place, hadamard_rotate, Side};
pub(crate) use linear::integer_linear_unit;
pub use linear::{
    per_channel_oracle, quantize_weights, quantized_linear, QuantizedLinear, WeightQuantizer, WeightScheme,
};
pub use ops::{dequantize, quantize, quantize_affine, quantize_per_token_dynamic, QuantizedTensor};
pub use scheme::{Granularity, Mode, QuantScheme};

/// Scale used for channels whose calibrated range is zero.
pub const SCALE_FLOOR: f64 = 1e-8;
