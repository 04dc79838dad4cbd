//! Visual in-context learning for OCT-style retinal B-scans.
//!
//! The crate covers the whole pipeline: phantom data generation
//! ([`phantom`], [`manifest`]), task synthesis ([`tasks`]), class/color
//! coding ([`palette`]), the context-conditioned UNet ([`nn`]), training
//! ([`train`]), evaluation protocols ([`eval`]) and the HTTP inference
//! service ([`service`]).

pub mod config;
pub mod context;
pub mod error;
pub mod eval;
pub mod image;
pub mod manifest;
pub mod nn;
pub mod palette;
pub mod phantom;
pub mod rng;
pub mod service;
pub mod tasks;
pub mod train;

pub use context::{ContextPair, ContextSet};
pub use error::{Error, Result};
pub use image::{Image, LabelMap};
