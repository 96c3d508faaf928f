//! Fixed-point hierarchical NMPC.
//!
//! A coordinator chooses set-points for a network of coupled subsystems and
//! enforces consistency of the exchanged coupling profiles through filtered
//! fixed-point iterations. Controlled subsystems solve their local NMPC
//! problems with a truncated projected fast gradient method, or evaluate a
//! trained feed-forward surrogate of that solver.
//!
//! Module map:
//!
//! - [`network`]: profiles, the coupling topology and the routing of outgoing
//!   to incoming coupling profiles.
//! - [`plant`]: the subsystem model interface, local costs, rollouts and the
//!   synthetic four-subsystem benchmark.
//! - [`fastgrad`]: the truncated fast gradient solver and a converged
//!   projected-gradient reference.
//! - [`coordinator`]: fixed-point coordination, set-point search and
//!   closed-loop simulation.
//! - [`surrogate`]: MLP surrogate, RPROP training, PRBS excitation and
//!   closed-loop data generation.
//! - [`bench`]: the solver and closed-loop comparison harnesses.

pub mod bench;
pub mod coordinator;
mod error;
pub mod fastgrad;
pub mod linalg;
pub mod network;
pub mod plant;
pub mod surrogate;

pub use error::{Error, Result};
