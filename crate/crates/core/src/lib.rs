pub mod domain;
pub mod engine;
pub mod error;
pub mod io;
pub mod matern;
pub mod mesh;
pub mod models;
pub mod par;
pub mod sparse;
pub mod synth;
pub mod validation;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
