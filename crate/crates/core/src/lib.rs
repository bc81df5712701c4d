pub mod checkpoint;
pub mod ctc;
pub mod formats;
pub mod geometry;
pub mod interp;
pub mod layout;
pub mod metrics;
pub mod nn;
pub mod ocrnet;
pub mod raster;
pub mod synth;
pub mod train;
