//! Study harness for the scattering toolkit: configuration files,
//! convergence tables, deterministic exports, and analytic oracles.

use thiserror::Error;

pub mod config;
pub mod export;
pub mod oracles;
pub mod study;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] periodic_helmholtz::geometry::GeometryError),
    #[error(transparent)]
    Mesh(#[from] periodic_helmholtz::mesh::MeshError),
    #[error(transparent)]
    Cell(#[from] periodic_helmholtz::quasiperiodic::CellError),
    #[error(transparent)]
    Bloch(#[from] periodic_helmholtz::bloch::BlochError),
    #[error(transparent)]
    Coupled(#[from] periodic_helmholtz::coupled::CoupledError),
    #[error(transparent)]
    HighOrder(#[from] periodic_helmholtz::highorder::HighOrderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
