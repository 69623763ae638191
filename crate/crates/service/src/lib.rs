//! Project storage, run orchestration, HTTP API and CLI for the qualcode
//! workbench.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod plot;
pub mod run;
pub mod state;
pub mod store;
pub mod workspace;

pub use error::ServiceError;
pub use workspace::Workspace;
