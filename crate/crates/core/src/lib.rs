//! Contact-tracing simulation: node agents exchange proximity broadcasts and
//! publish contact reports through a durable broker into a document store.

pub mod model;
pub mod broker;
pub mod frame;
pub mod store;
pub mod transport;
pub mod agent;
pub mod consumer;
pub mod api;
pub mod harness;
