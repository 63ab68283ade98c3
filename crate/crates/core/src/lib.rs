//! Evidence-seeking diagnostic agent over a synthetic imaging environment.
//!
//! The agent keeps a scalar belief in its hypothesis box, decides at every
//! step whether to probe an external evidence tool, claim, abstain or stop,
//! and records every decision in an auditable trace. The crate covers:
//!
//! - [`belief`]: probability/log-odds math, evidence fusion, calibration.
//! - [`environment`]: deterministic synthetic cases with planted signal ROIs.
//! - [`kbcs`]: the tiered evidence scorer with provenance, plus the training proxy.
//! - [`policy`]: the tabular action policy with masking and analytic gradients.
//! - [`episode`]: the reasoning loop that produces traces.
//! - [`rl`]: conservative policy-gradient alignment.
//! - [`eval`]: metrics, interventions, occlusion analysis, sweeps and overlays.
//! - [`config`] and [`cli`]: the flat run config and the command-line front door.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod cli;
pub mod config;
pub mod environment;
pub mod episode;
pub mod error;
pub mod eval;
pub mod kbcs;
pub mod policy;
pub mod report;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};
