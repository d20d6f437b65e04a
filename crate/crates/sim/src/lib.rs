//! Desk-scale simulator: a kinematic continuum robot carrying ToF, gyro and
//! strain sensors in a scene of labelled triangle meshes.

pub mod robot;
pub mod scene;
pub mod sensors;
pub mod mapgen;
pub mod mesh_io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("no mesh labelled '{0}'")]
    UnknownLabel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] crloc_core::Error),
}
