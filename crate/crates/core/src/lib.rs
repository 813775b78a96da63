pub mod dataset;
pub mod experiment;
pub mod fmcw;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod qsim;
pub mod scatter;
pub mod scene;
