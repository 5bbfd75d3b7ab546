//! Toolkit for administering perceptual "eye examinations" to vision-language
//! models: stimulus rendering, dataset generation, candidate-answer scoring
//! against a model endpoint, and the sensitivity metrics computed from the
//! resulting score fields.

pub mod color;
pub mod colorcorrect;
pub mod datasetgen;
pub mod exams;
pub mod field;
pub mod font;
pub mod metrics;
pub mod modelclient;
pub mod par;
pub mod questionbank;
pub mod report;
pub mod runner;
pub mod stimuli;

pub use color::ColorSpec;
pub use par::Parallelism;
