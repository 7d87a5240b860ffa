pub mod analysis;
pub mod dsp;
pub mod formats;
pub mod model;
pub mod pipeline;
pub mod signal;
pub mod tensor;
pub mod training;
