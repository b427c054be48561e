//! WiFi CSI crowd counting: capture I/O, channel simulation, preprocessing,
//! wavelet features, HMM activity recognition, and neural crowd counting.

pub mod cli;
pub mod counting;
pub mod csi_io;
pub mod dwt;
pub mod error;
pub mod hmm;
pub mod neural;
pub mod preprocess;
pub mod sim;
pub mod tensor_file;

pub use error::{Error, Result};
