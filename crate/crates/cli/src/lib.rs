// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end and HTTP service for attrigraph.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;
pub mod store;
