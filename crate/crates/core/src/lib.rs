//! Finite-element toolkit for time-harmonic acoustic scattering of plane waves
//! by periodic surfaces with a compactly supported perturbation.

pub mod geometry;
pub mod mesh;
pub mod quasiperiodic;
pub mod bloch;
pub mod coupled;
pub mod highorder;
