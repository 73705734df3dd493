//! Command line and HTTP front end for the explainer: training commands,
//! a model registry, explanation sessions persisted on disk, and JSON
//! schemas for the payloads the API returns.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod registry;
pub mod report;
pub mod schema;
pub mod store;
