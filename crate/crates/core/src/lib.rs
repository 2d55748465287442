pub mod analysis;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod harmonic;
pub mod hartree;
pub mod par;
pub mod shin_metiu;
pub mod trajectory;

pub use error::{Error, Result};
