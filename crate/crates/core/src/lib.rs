//! Segment-shuffle-stitch layers for time series, together with the small
//! autodiff engine, baselines, data loading and training loop they need.

pub mod autodiff;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod data;
pub mod io;
pub mod models;
pub mod s3;
pub mod train;
