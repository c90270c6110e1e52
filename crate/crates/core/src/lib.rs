//! Signed vehicle-to-infrastructure congestion detection and alarm protocols,
//! layered on a deterministic discrete-event traffic simulator.
//!
//! Two protocol variants are modeled: [`protocol::Variant::S1`] for vehicles
//! that only dead-reckon their path, and [`protocol::Variant::S2`] for vehicles
//! with precise positioning. Roadside units announce segments, vehicles report
//! status under per-segment pseudonyms, the segment's main RSU runs the
//! congestion predicate, and local base stations reschedule traffic lights.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod adversary;
pub mod control;
pub mod detection;
pub mod experiment;
pub mod geometry;
pub mod identity;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod wire;

/// Identifier of any simulated agent: vehicle, RSU, main RSU, base station or attacker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}
