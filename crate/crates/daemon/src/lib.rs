//! qmw daemon: the REST front of the quantum middleware.

pub mod events;
pub mod http;
pub mod service;
pub mod state;

pub use http::{serve, spawn, DaemonHandle};
pub use service::{ApiError, Caller, Service, Settings};
