//! Modeling, identification and task-space control of pneumatic soft arms
//! described with piecewise-constant-curvature coordinates.

pub mod actuation;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod plant;
pub mod polynomial;
pub mod rigid;
pub mod sysid;
pub mod trajectory;

pub use error::{Error, Result};
