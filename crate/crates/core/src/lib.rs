//! Core of the qmw hybrid quantum middleware.

pub mod clock;
pub mod config;
pub mod emulator;
pub mod model;
pub mod par;
pub mod resource;
pub mod scheduler;
pub mod telemetry;
