//! Controlled-differential-equation encoder/decoder over spline control paths.

pub mod features;
mod model;
pub mod spline;

pub use features::{
    build_control_path, decoder_knots, encoder_channels, encoder_knots, prepare_window, ControlPath, Interpolation,
    PreparedWindow, TreatmentEncoding, DECODER_CHANNELS, DOSE_SCALE,
};
pub use model::{cde_integrate, rk4_step, Batch, CdeModel, Forward, Heads, ModelConfig, Routing};
pub use spline::{CubicSpline, LinearInterp};
