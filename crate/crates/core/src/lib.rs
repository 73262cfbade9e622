//! Threshold-based MAC skipping for fixed-point CNN inference on
//! microcontroller-class targets.

pub mod calibration;
pub mod cli;
pub mod costmodel;
pub mod divapprox;
pub mod kernels;
pub mod modelio;
pub mod numerics;
pub mod tensor;
pub mod trainer;
