//! Video sequence classification at desk scale: temporal feature-pooling
//! architectures and stacked LSTMs over shared-weight per-frame convolutional
//! encoders, with an optical-flow second stream, trained and evaluated on
//! synthetic video tasks.

pub mod arch;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
