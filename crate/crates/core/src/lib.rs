//! Attribute-based explanations of classifier decisions.
//!
//! A bilinear attribute-embedding classifier is trained on feature vectors
//! and per-class attribute signatures. Inputs are pushed into counter classes
//! with iterative sign-gradient steps, and each class change is explained by
//! the attributes that shifted, by distances in attribute space, and by the
//! nearest real samples of the counter class.

pub mod data;
pub mod embed;
pub mod error;
pub mod explain;
pub mod linalg;
pub mod model_io;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod robust;

pub use error::{Error, Result};
