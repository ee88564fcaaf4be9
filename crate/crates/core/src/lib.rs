pub mod cli;
pub mod error;
pub mod gmrf;
pub mod graph;
pub mod inference;
pub mod io;
pub mod model;
pub mod search;
pub mod simulate;
pub mod sparse;
pub mod standardize;

pub use error::{Error, Result};
