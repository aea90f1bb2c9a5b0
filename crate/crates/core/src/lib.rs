//! Monte Carlo wave-function trajectories with stepwise adaptive jump control,
//! a norm-integrating reference engine, a Lindblad master-equation solver and
//! birth-death chain oracles for the thermal mode.

pub mod engine;
pub mod ensemble;
pub mod error;
pub mod evolution;
pub mod hilbert;
pub mod integrating;
pub mod master;
pub mod models;
pub mod ode;
pub mod oracle;
pub mod rng;
pub mod series;

pub use error::{Error, Result};
pub use hilbert::{CoherentState, Operator, StateVector};
pub use models::{
    make_mode_system, make_particle_system, ModeParams, ParticleParams, Picture, QuantumSystem,
};
pub use num_complex::Complex64 as C64;
pub use ode::StepControl;
