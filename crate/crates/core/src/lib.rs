//! Scheduling library and discrete-event simulator for a finite pool of
//! surface-code window decoders.

pub mod config;
pub mod decoder_model;
pub mod metrics;
pub mod schedulers;
pub mod sim_engine;
pub mod slice_graph;
pub mod timeline;
pub mod sweep;
pub mod workload;
