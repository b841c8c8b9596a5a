//! Differentiable mapping and localization: a view-embedding map built from
//! posed context images, read through egocentric spatial attention by a
//! learned observation model inside a differentiable particle filter.

pub mod attention;
pub mod cli;
pub mod envgen;
pub mod error;
pub mod evaluation;
pub mod filter;
pub mod geometry;
pub mod gradcheck;
mod io_util;
pub mod mapnet;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use io_util::{parse_key_values, render_key_values};
