//! Simulation library for distributed goodness-of-fit testing under
//! differential privacy in the Gaussian sequence model.
//!
//! The library provides signal generation in Besov balls (`seq`), the
//! clipping / Gaussian-mechanism layer (`privacy`), the non-private
//! benchmark test plus three private procedures (`protocol`), their
//! smoothness-adaptive combinations (`adaptive`), closed-form minimax
//! separation rates and regime classification (`rates`), and a Monte Carlo
//! experiment harness (`harness`).

pub mod adaptive;
pub mod config;
pub mod harness;
pub mod privacy;
pub mod protocol;
pub mod rates;
pub mod rng;
pub mod seq;

pub use config::ModelConfig;
pub use harness::{BoundaryEstimate, RiskEstimate};
pub use privacy::{MechanismRecord, PrivacyBudget};
pub use protocol::{ProtocolTag, SharedRandomness, TestOutcome, Transcript};
pub use rates::RegimeReport;
pub use seq::{DistributedData, Signal};
