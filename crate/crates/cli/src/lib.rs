//! Pipelines and study runners behind the `ttal` command.

pub mod annotate;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod evaluate;
pub mod external;
pub mod report;
pub mod run;
pub mod study;

pub use config::RunConfig;
