//! Continuous-time system level synthesis: spiral pole selection, H2 and H-infinity
//! synthesis of structured closed-loop responses, controller realization and simulation.

pub mod analysis;
pub mod constraints;
pub mod error;
pub mod h2;
pub mod hinf;
pub mod linalg;
pub mod plant;
pub mod poles;
pub mod sdp;
pub mod simulate;

pub use error::{Error, Result};
