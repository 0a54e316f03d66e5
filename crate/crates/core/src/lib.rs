//! Search for extremal unstable periodic orbits of polynomial ODEs.
//!
//! A sum-of-squares program bounds a long-time average from above. The
//! resulting gap polynomial vanishes where extremal trajectories must live,
//! so its minimizers seed a search for periodic orbits in a controlled system
//! that are then continued back to the uncontrolled dynamics.

pub mod continuation;
pub mod flow;
pub mod gapmin;
pub mod pipeline;
pub mod polyalg;
pub mod recurrence;
pub mod sdpsolve;
pub mod sosbound;
pub mod systems;
pub mod varorbit;
