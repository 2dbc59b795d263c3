//! Event-camera classification with spatio-temporal event graphs.

pub mod cnn3d;
pub mod complexity;
pub mod diffengine;
pub mod error;
pub mod event_io;
pub mod gnn;
pub mod graph2grid;
pub mod graph_build;
pub mod graph_pool;
pub mod params;
pub mod sampling;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
