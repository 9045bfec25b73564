//! Frame, event and class-prompt fusion for action recognition, built on a
//! small reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod events;
pub mod fusion;
pub mod harness;
pub mod image;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod text;
pub mod trainer;

#[cfg(test)]
mod reference;

pub use error::{Error, Result};
