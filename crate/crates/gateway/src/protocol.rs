//! Wire types shared by the HTTP endpoint, the client stream and the role
//! bridge. Every message is one JSON document; on a stream each one is a
//! single text message (one line).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use skylane::bus::{Envelope, Publication};

/// Verbs accepted by the gateway.
pub const VERBS: &[&str] = &[
    "scenario.load",
    "sim.start",
    "sim.pause",
    "sim.resume",
    "sim.stop",
    "sim.status",
    "network.get",
    "plan.submit",
    "plan.query",
    "uav.command",
    "uav.telemetry.subscribe",
    "anomaly.inject",
    "airspace.control",
    "stats.get",
];

/// The one verb that needs no token.
pub const OPEN_VERB: &str = "sim.status";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRequest {
    /// Echoed back unchanged in the response.
    #[serde(default)]
    pub id: Value,
    pub verb: String,
    #[serde(default)]
    pub body: Value,
    /// Alternative to the connection-level token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl ApiRequest {
    pub fn new(id: impl Into<Value>, verb: &str, body: Value) -> Self {
        Self { id: id.into(), verb: verb.to_owned(), body, token: None }
    }

    pub fn with_token(mut self, token: &str) -> Self {
        self.token = Some(token.to_owned());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Auth,
    Protocol,
    State,
    Invalid,
    NotFound,
    Engine,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::Auth => 401,
            ErrorCode::Protocol => 400,
            ErrorCode::State => 409,
            ErrorCode::Invalid => 422,
            ErrorCode::NotFound => 404,
            ErrorCode::Engine => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub id: Value,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
    #[serde(default)]
    pub body: Value,
}

impl ApiResponse {
    pub fn ok(id: Value, body: Value) -> Self {
        Self { id, status: Status::Ok, error: None, body }
    }

    pub fn error(id: Value, code: ErrorCode, message: impl Into<String>) -> Self {
        Self { id, status: Status::Error, error: Some(ApiError { code, message: message.into() }), body: Value::Null }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn code(&self) -> Option<ErrorCode> {
        self.error.as_ref().map(|e| e.code)
    }
}

/// A subsystem role that may run outside the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Authority,
    #[serde(alias = "traffic-management", alias = "traffic_management")]
    Traffic,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Authority => "authority",
            Role::Traffic => "traffic",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "authority" => Ok(Role::Authority),
            "traffic" | "traffic-management" | "traffic_management" => Ok(Role::Traffic),
            _ => Err(format!("unknown role `{s}` (expected authority or traffic)")),
        }
    }
}

/// Messages on an attached role connection. The gateway sends `phase` once
/// per tick; the tick does not continue until the matching `ack` arrives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RoleMessage {
    Phase { role: Role, tick: u64, inbox: Vec<Envelope> },
    Ack {
        tick: u64,
        #[serde(default)]
        publications: Vec<Publication>,
    },
}
