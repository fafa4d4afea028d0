pub mod bench;
pub mod dsp;
pub mod gradsuite;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;
