pub mod attention;
pub mod config;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod input;
pub mod model;
pub mod gradcheck;
pub mod infer;
pub mod train;
