//! Networking for faro: the RPC transport, TLS channels, multicast
//! discovery, the service node and the client.

pub mod client;
pub mod discovery;
pub mod proto;
pub mod rpc;
pub mod secure;
pub mod service;

pub use client::{Client, ClientConfig, ClientError, RetryPolicy, StreamSummary, Target};
pub use rpc::{CallError, RpcError};
pub use secure::{generate_identity, KeyAlgo, SecurityConfig, SecurityError};
pub use service::{start_service, start_with_registry, GalleryConfig, ServiceConfig, ServiceError, ServiceHandle};
