//! Continual active learning on domain-shifted image streams.
//!
//! Incoming images are embedded by gram-matrix style statistics, routed to
//! pseudo-domains by isolation forests, and labelled through a budgeted
//! oracle only while their pseudo-domain still needs training. A
//! quota-balanced rehearsal memory keeps rare domains represented, and an
//! outlier memory collects unassigned images until a dense group of them
//! forms a new pseudo-domain.

pub mod config;
pub mod controller;
pub mod domains;
pub mod error;
pub mod eval;
pub mod iforest;
pub mod image;
pub mod learner;
pub mod memory;
pub mod outliers;
pub mod report;
pub mod stream;
pub mod style;

pub use config::{parse_config, ExperimentConfig};
pub use error::{CasaError, Result};
pub use image::Image;
