//! Split deployment: a stateless server turns thumbnails into color-map
//! parameters; clients map full-resolution pixels locally.

pub mod client;
pub mod relay;
pub mod server;
pub mod wire;

pub use client::{remote_transfer, ClientError, ClientSession, RemoteClient};
pub use relay::CountingRelay;
pub use server::{router, run, spawn, Health, ServerConfig, ServerHandle, ServerState};
pub use wire::{ParamResponse, ProjectionsResponse, WireError};
