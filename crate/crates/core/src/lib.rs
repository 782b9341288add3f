//! Certification and simulation of event-triggered exponential stabilization
//! for finite-dimensional skew-adjoint linear control systems.
//!
//! The library is organized around four pieces:
//!
//! - [`system`]: Gram-weighted control systems `(A, B, C, K)` with skew-adjoint
//!   drift, induced operator norms, and numerical exponential-stability
//!   certificates `(alpha, M)`.
//! - [`lyapunov`]: the quadratic Lyapunov functional `V(z) = 1/2 |z|^2 + eta z'Qz`
//!   for the closed loop, its explicit constants, and the trigger-design
//!   quantities (radius `r`, admissible `gamma`, guaranteed decay rates).
//! - [`trigger`]: event-triggered closed-loop simulation with exact hold-interval
//!   propagation, bisection-localized events, dwell-time statistics, and the
//!   runtime verification of the norm-envelope and derivative estimates.
//! - [`models`]: builders for the worked examples (a family of transport
//!   equations, a damped 1-d wave equation, the periodic linear KdV equation,
//!   and random skew systems for fuzzing).

pub mod error;
pub mod linalg;
pub mod lyapunov;
pub mod models;
pub mod system;
pub mod trigger;

pub use error::{Error, Result};
pub use lyapunov::{LyapunovFunctional, TriggerDesign};
pub use models::ModelSpec;
pub use system::{ControlSystem, GramSpace, StabilityCertificate};
pub use trigger::{TriggerConfig, TriggeredTrajectory};
