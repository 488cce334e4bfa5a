//! HTTP and WebSocket front end.
//!
//! * `POST /api`: one [`ApiRequest`] in, one [`ApiResponse`] out.
//! * `GET /stream`: requests and responses plus the live frame feed.
//! * `GET /attach/{role}`: an external authority or traffic manager.
//!
//! Tokens go in an `Authorization: Bearer` header, a `token` query
//! parameter, or the request's own `token` field.

use std::collections::{BTreeSet, HashMap};

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use skylane::engine::FrameKind;
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;

use crate::bridge::Conn;
use crate::protocol::{ApiRequest, ApiResponse, ErrorCode, Role, RoleMessage};
use crate::worker::{Gateway, Outbound};

/// Close code sent to a stream client that fell too far behind.
pub const CLOSE_SLOW_CONSUMER: u16 = 4008;

pub fn router(gw: Gateway) -> Router {
    Router::new()
        .route("/api", post(api))
        .route("/stream", get(stream))
        .route("/attach/{role}", get(attach))
        .with_state(gw)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, gw: Gateway) -> std::io::Result<()> {
    axum::serve(listener, router(gw)).await
}

fn request_token(headers: &HeaderMap, query: &HashMap<String, String>) -> Option<String> {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_owned())
        .or_else(|| query.get("token").cloned())
}

fn respond(r: ApiResponse) -> Response {
    let status = r.error.as_ref().map_or(200, |e| e.code.http_status());
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, axum::Json(r)).into_response()
}

async fn api(State(gw): State<Gateway>, headers: HeaderMap, Query(q): Query<HashMap<String, String>>, body: Bytes) -> Response {
    let req: ApiRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return respond(ApiResponse::error(Value::Null, ErrorCode::Protocol, format!("malformed request: {e}"))),
    };
    if req.verb == "uav.telemetry.subscribe" && gw.precheck(&req, request_token(&headers, &q).as_deref()).is_none() {
        return respond(ApiResponse::error(req.id, ErrorCode::Protocol, "uav.telemetry.subscribe needs a stream connection"));
    }
    let token = request_token(&headers, &q);
    respond(gw.call(req, token.as_deref()).await)
}

/// Which frames a stream connection wants.
#[derive(Debug, Clone, PartialEq, Deserialize)]
struct Subscription {
    #[serde(default = "all_kinds")]
    kinds: BTreeSet<FrameKindKey>,
    /// Telemetry only for these UAVs; `None` means all.
    #[serde(default)]
    uavs: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
enum FrameKindKey {
    Telemetry,
    Event,
    Stats,
}

fn all_kinds() -> BTreeSet<FrameKindKey> {
    [FrameKindKey::Telemetry, FrameKindKey::Event, FrameKindKey::Stats].into()
}

impl Default for Subscription {
    fn default() -> Self {
        Self { kinds: all_kinds(), uavs: None }
    }
}

impl Subscription {
    fn wants(&self, f: &Outbound) -> bool {
        let key = match f.kind {
            FrameKind::Telemetry => FrameKindKey::Telemetry,
            FrameKind::Event => FrameKindKey::Event,
            FrameKind::Stats => FrameKindKey::Stats,
        };
        if !self.kinds.contains(&key) {
            return false;
        }
        match (&self.uavs, &f.uav) {
            (Some(set), Some(u)) => set.contains(u),
            _ => true,
        }
    }
}

async fn stream(State(gw): State<Gateway>, headers: HeaderMap, Query(q): Query<HashMap<String, String>>, ws: WebSocketUpgrade) -> Response {
    let token = request_token(&headers, &q);
    ws.on_upgrade(move |socket| client_loop(gw, socket, token))
}

async fn client_loop(gw: Gateway, socket: WebSocket, token: Option<String>) {
    let (mut tx, mut rx) = socket.split();
    let mut frames = gw.subscribe();
    let mut sub = Subscription::default();
    loop {
        tokio::select! {
            msg = rx.next() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let resp = match serde_json::from_str::<ApiRequest>(line) {
                        Err(e) => ApiResponse::error(Value::Null, ErrorCode::Protocol, format!("malformed request: {e}")),
                        Ok(req) if req.verb == "uav.telemetry.subscribe" => match gw.precheck(&req, token.as_deref()) {
                            Some(err) => err,
                            None => match serde_json::from_value::<Subscription>(if req.body.is_null() { json!({}) } else { req.body.clone() }) {
                                Ok(s) => {
                                    sub = s;
                                    ApiResponse::ok(req.id, json!({"kinds": sub.kinds, "uavs": sub.uavs}))
                                }
                                Err(e) => ApiResponse::error(req.id, ErrorCode::Invalid, e.to_string()),
                            },
                        },
                        Ok(req) => gw.call(req, token.as_deref()).await,
                    };
                    let line = serde_json::to_string(&resp).expect("response serializes");
                    if tx.send(Message::Text(line.into())).await.is_err() {
                        return;
                    }
                }
            }
            f = frames.recv() => match f {
                Ok(f) => {
                    if sub.wants(&f) && tx.send(Message::Text(f.line.to_string().into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    let reason = format!("slow consumer: {n} frames behind");
                    let _ = tx.send(Message::Close(Some(CloseFrame { code: CLOSE_SLOW_CONSUMER, reason: reason.into() }))).await;
                    return;
                }
                Err(RecvError::Closed) => return,
            },
        }
    }
}

async fn attach(
    State(gw): State<Gateway>,
    Path(role): Path<String>,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> Response {
    let role: Role = match role.parse() {
        Ok(r) => r,
        Err(e) => return respond(ApiResponse::error(Value::Null, ErrorCode::Protocol, e)),
    };
    if !gw.token_ok(request_token(&headers, &q).as_deref()) {
        return respond(ApiResponse::error(Value::Null, ErrorCode::Auth, "missing or wrong token"));
    }
    let slot = gw.slot(role).clone();
    if !slot.claim() {
        return respond(ApiResponse::error(Value::Null, ErrorCode::State, format!("{} already attached", role.as_str())));
    }
    let on_fail = {
        let slot = slot.clone();
        move |_| slot.release()
    };
    ws.on_failed_upgrade(on_fail).on_upgrade(move |socket| async move {
        let (to_client, mut outbox) = tokio::sync::mpsc::unbounded_channel::<String>();
        let (ack_tx, acks) = std::sync::mpsc::channel();
        {
            let slot = slot.clone();
            // the engine thread may hold the slot while it waits on a dead link
            let _ = tokio::task::spawn_blocking(move || slot.install(Conn { to_client, acks })).await;
        }
        let (mut tx, mut rx) = socket.split();
        loop {
            tokio::select! {
                out = outbox.recv() => match out {
                    Some(line) => {
                        if tx.send(Message::Text(line.into())).await.is_err() {
                            break;
                        }
                    }
                    None => break,
                },
                msg = rx.next() => match msg {
                    Some(Ok(Message::Text(t))) => {
                        for line in t.lines().filter(|l| !l.trim().is_empty()) {
                            match serde_json::from_str::<RoleMessage>(line) {
                                Ok(RoleMessage::Ack { tick, publications }) => {
                                    let _ = ack_tx.send((tick, publications));
                                }
                                // anything else is ignored; the engine times out if no ack follows
                                _ => {}
                            }
                        }
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                },
            }
        }
        drop(ack_tx);
        slot.release();
    })
}
