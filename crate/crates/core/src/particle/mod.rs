//! Exact event-driven simulation of the two-species jump process on the
//! discrete torus, with online martingale decomposition and jump accounting.

pub mod io;
pub mod run;
pub mod state;
pub mod sumtree;
pub mod tracker;

pub use run::{run, tau_leap_run, LeapControls, PathTrace, ReferenceTarget, RunControls, Sample};
pub use state::{init_particles, Event, EventKind, InitialCondition, ParticleState};
pub use tracker::{JumpAccount, MartingaleSummary, MartingaleTracker, TransitionClass};
