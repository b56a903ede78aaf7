//! Simulation and detection for watermarked linear time-varying control
//! loops.
//!
//! The library covers the full closed loop: describing a time-varying
//! system with feedback and observer gains ([`model`]), simulating
//! watermarked trajectories with reproducible randomness ([`simulate`]),
//! injecting spoofing and replay attacks ([`attacks`]), building the
//! whitening and temporal-correlation tables the test needs
//! ([`normalization`]), scoring sliding windows against a calibrated
//! threshold ([`detector`]), and ready-made benchmark systems
//! ([`scenarios`]).

pub mod attacks;
pub mod detector;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod normalization;
pub mod scenarios;
pub mod simulate;

pub use attacks::{AttackMode, AttackSpec, CovarianceSequence};
pub use detector::{DetectionReport, DetectionSummary, DetectorConfig};
pub use error::{Error, Result};
pub use model::{AssumptionId, SystemTrajectory, ValidationReport, Violation};
pub use normalization::{GnStore, NormalizationTables, Provenance};
pub use scenarios::{ExperimentManifest, ReferencePath, ScenarioBundle, VehicleNoise};
pub use simulate::{EnsembleRun, Realization, RunOptions};
