//! Simulation and analysis toolkit for the q-voter model and voter-model
//! perturbations on the three-dimensional torus.

pub mod duality;
pub mod dynamics;
pub mod equilibrium;
pub mod experiments;
pub mod greens;
pub mod lattice;
pub mod ode;
pub mod poly;
pub mod reaction;
pub mod rng;
pub mod statistics;
pub mod unionfind;
