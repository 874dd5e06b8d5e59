#![allow(dead_code)]

pub mod assembly;
pub mod cache;
pub mod corpus;
pub mod programs;
pub mod propagation;
pub mod tree_model;

use std::path::PathBuf;

/// The repository's `fixtures/` directory.
pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}
