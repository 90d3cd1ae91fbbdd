//! Joint speech-to-intent models trained with sequence-level losses.

pub mod corpus;
pub mod exec;
pub mod grad;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod decode;
pub mod seqloss;
pub mod trainer;
pub mod toy;
pub mod config;
