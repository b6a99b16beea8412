//! Class-imbalance mitigation for small image-classification datasets with
//! conditional GANs.
//!
//! The pipeline trains a label- or pose-conditioned GAN on the (imbalanced)
//! real data, synthesizes a balanced dataset, optionally keeps only the
//! samples a real-data classifier scores highest, and trains the final
//! classifier with one of four strategies that mix synthetic and real data.
//!
//! Modules follow the pipeline: [`datasets`] and [`pose`] ingest data,
//! [`gan`] trains generators, [`synthesis`] produces and filters synthetic
//! sets, [`classifier`] trains and evaluates, [`metrics`] measures generator
//! quality, and [`experiments`] wires everything into a resumable run.

pub mod classifier;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod gan;
pub mod io;
pub mod metrics;
pub mod pose;
pub mod seed;
pub mod synthesis;

pub use error::{Error, Result};
