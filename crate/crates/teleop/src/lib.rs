//! Websocket bridge between a live operator console and the simulation.

pub mod client;
pub mod protocol;
pub mod service;
