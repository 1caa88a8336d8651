//! Feature bank enhancement for distance-based out-of-distribution detection.
//!
//! Extreme training features are clamped per dimension to a percentile
//! band around the bank mean before the bank is used by a distance score.
//!
//! ```
//! use fbe_core::bank::FeatureBank;
//! use fbe_core::fbe::enhance;
//! use fbe_core::scores::knn_score;
//!
//! let bank = FeatureBank::from_rows(&[[1.0f32, 0.0], [0.0, 1.0], [9.0, 0.5]]).unwrap();
//! let (clamped, _bounds) = enhance(&bank, 90.0).unwrap();
//! let queries = FeatureBank::from_rows(&[[1.0f32, 0.1]]).unwrap();
//! let s = knn_score(&clamped, &queries, 1).unwrap();
//! assert_eq!(s.len(), 1);
//! ```

pub mod bank;
pub mod cli;
pub mod error;
pub mod fbe;
pub mod kernel;
pub mod metrics;
pub mod scores;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};

/// Version string embedded in reports and file manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
