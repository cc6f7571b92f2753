//! A runtime for formal skills: packaged agent capabilities with typed action
//! schemas, deterministic executors, a four-stage hook pipeline, skill-local
//! state and completion gates, driven by a single-step planner.

pub mod backend;
pub mod cli;
pub mod config;
pub mod hooks;
pub mod planner;
pub mod registry;
pub mod repair;
pub mod router;
pub mod session;
pub mod workspace;
