//! External adapter protocol: message codec, subprocess client and a stub server.

pub mod client;
pub mod protocol;
pub mod stub;

pub use client::AdapterClient;
pub use protocol::{DType, Op, Request, Response, WireTensor, PROTOCOL_VERSION};
pub use stub::StubMode;
