//! Task management service: domain model, file-backed store with a mutation
//! event log, authentication, dashboard aggregation and an HTTP API.

pub mod api;
pub mod auth;
pub mod cli;
pub mod clock;
pub mod config;
pub mod dashboard;
pub mod domain;
pub mod events;
pub mod id;
pub mod seed;
pub mod service;
pub mod store;

mod fsutil;
