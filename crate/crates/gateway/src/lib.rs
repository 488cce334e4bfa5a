//! Service gateway for the skylane engine: a request/response API, a live
//! frame stream and a bridge for running the authority or traffic manager
//! out of process. See `docs/protocol.md` for the wire format.

pub mod bridge;
pub mod client;
pub mod protocol;
pub mod server;
pub mod worker;

pub use client::{attach_role, PassThroughAuthority, RoleHandler};
pub use protocol::{ApiRequest, ApiResponse, ErrorCode, Role, RoleMessage};
pub use server::{router, serve};
pub use worker::{Gateway, GatewayConfig};

/// Environment variable holding the API token.
pub const TOKEN_ENV: &str = "SKYLANE_TOKEN";
