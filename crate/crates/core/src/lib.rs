//! Coordination middleware for heterogeneous IoT devices.
//!
//! Services are written once as device-independent coordination logic
//! ([`dsl`]). At request time the [`planner`] binds each role to a concrete
//! device from the [`registry`], and the [`runtime`] dispatches abstract
//! instructions: directly for REST/SOAP devices, through a [`gateway`] for
//! devices that only speak a native protocol.

pub mod clock;
pub mod dsl;
pub mod planner;
pub mod registry;
pub mod runtime;
pub mod gateway;
pub mod capture;
pub mod devsim;
pub mod fixtures;
pub mod facade;
