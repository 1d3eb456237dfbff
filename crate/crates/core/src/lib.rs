//! Simulation of decentralized averaging over a virtual grid of groups,
//! with the all-reduce, matchmaking, and local SGD pieces it is built from.
//!
//! ```
//! use moshpit_core::protocols::{run_moshpit, MoshpitConfig, Placement, TrialSettings};
//! use moshpit_core::{GridConfig, ParamVector, TrialRng};
//!
//! let grid = GridConfig::new(3, 2, 2).unwrap();
//! let peers: Vec<ParamVector> = (0..9).map(|i| ParamVector::scalar(i as f64)).collect();
//! let cfg = MoshpitConfig::new(grid).placement(Placement::Dense);
//! let report = run_moshpit(&cfg, &peers, &TrialSettings::default(), &TrialRng::new(7)).unwrap();
//! assert!(report.final_distortion() < 1e-24);
//! ```

pub mod allreduce;
pub mod dht;
pub mod error;
pub mod matchmaking;
pub mod metrics;
pub mod optimizer;
pub mod protocols;
pub mod rng;
pub mod theory;
pub mod types;

pub use error::{Error, Result};
pub use rng::{Stream, TrialRng};
pub use types::{FailureMode, FailureModel, GridConfig, GroupKey, ParamVector, PeerId};
