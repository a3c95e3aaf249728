//! Model-independent upper bounds for Asian-style options written on the
//! running average, given the terminal law of the underlying.
//!
//! The bound is the value of a control problem over measure-valued
//! martingales on the support of the terminal law. [`hjb`] solves it on a
//! grid, [`oracle`] holds closed forms for convex payoffs and the call
//! spread on three atoms, and [`simulate`] replays controls by Monte Carlo.

pub mod error;
pub mod hjb;
pub mod measures;
pub mod oracle;
pub mod payoffs;
pub mod simulate;

pub use error::{Error, Result};
pub use hjb::{solve, SolverConfig, ValueSurface};
pub use measures::{AtomicMeasure, CallQuoteCurve, TransportPlan};
pub use oracle::{RegionLabel, SpreadState};
pub use payoffs::{Payoff, PayoffSpec, TimeWeight};
pub use simulate::{ControlPolicy, MvmState, PathEnsemble, SimConfig};
