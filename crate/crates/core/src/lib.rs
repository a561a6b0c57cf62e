//! Vision-language segmentation experiments on echocardiography data:
//! dataset ingestion, prompt synthesis, a VQA-backed shape attribute, model
//! adapters, the three training strategies and the evaluation protocol.

pub mod dataset;
pub mod imageio;
pub mod prompt;
pub mod vqa;
pub mod model;
pub mod loader;
pub mod train;
pub mod eval;
pub mod fixtures;
pub mod config;
pub mod pipeline;
