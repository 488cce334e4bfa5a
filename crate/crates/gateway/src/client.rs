//! Client side of the role bridge, and a pass-through authority that
//! approves every plan at its requested time.

use std::collections::BTreeMap;

use futures::{SinkExt, StreamExt};
use serde_json::json;
use skylane::authority::{ApprovalDecision, Verdict, TOPIC_DECISION, TOPIC_SUBMIT};
use skylane::bus::{Envelope, Publication};
use skylane::traffic::PlanRequest;
use tokio_tungstenite::tungstenite::Message;

use crate::protocol::{Role, RoleMessage};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connection: {0}")]
    Connection(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("bad message from gateway: {0}")]
    Protocol(String),
}

/// Something that can play a role for one tick at a time.
pub trait RoleHandler: Send {
    fn phase(&mut self, tick: u64, inbox: &[Envelope]) -> Vec<Publication>;
}

impl<F: FnMut(u64, &[Envelope]) -> Vec<Publication> + Send> RoleHandler for F {
    fn phase(&mut self, tick: u64, inbox: &[Envelope]) -> Vec<Publication> {
        self(tick, inbox)
    }
}

/// Attaches to `ws://addr/attach/{role}` and answers phases until the
/// gateway closes the connection. Returns the number of phases answered.
pub async fn attach_role(addr: &str, token: &str, role: Role, mut handler: impl RoleHandler) -> Result<u64, ClientError> {
    let url = format!("ws://{addr}/attach/{}?token={token}", role.as_str());
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await?;
    let mut answered = 0;
    while let Some(msg) = ws.next().await {
        let text = match msg? {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let (tick, inbox) = match serde_json::from_str::<RoleMessage>(&text) {
            Ok(RoleMessage::Phase { tick, inbox, .. }) => (tick, inbox),
            Ok(other) => return Err(ClientError::Protocol(format!("unexpected {other:?}"))),
            Err(e) => return Err(ClientError::Protocol(e.to_string())),
        };
        let publications = handler.phase(tick, &inbox);
        let ack = serde_json::to_string(&RoleMessage::Ack { tick, publications }).expect("ack serializes");
        ws.send(Message::Text(ack.into())).await?;
        answered += 1;
    }
    Ok(answered)
}

/// Approves every submitted plan for its requested departure, or now if
/// that has passed. A resubmitted plan gets its first decision back.
#[derive(Debug, Default)]
pub struct PassThroughAuthority {
    decided: BTreeMap<String, ApprovalDecision>,
}

impl RoleHandler for PassThroughAuthority {
    fn phase(&mut self, tick: u64, inbox: &[Envelope]) -> Vec<Publication> {
        let mut submits = BTreeMap::new();
        for env in inbox.iter().filter(|e| e.topic == TOPIC_SUBMIT) {
            if let Ok(req) = serde_json::from_value::<PlanRequest>(env.payload.clone()) {
                submits.insert(req.plan_id.clone(), req);
            }
        }
        let mut out = Vec::new();
        for (id, req) in submits {
            let d = self.decided.entry(id.clone()).or_insert_with(|| ApprovalDecision {
                plan_id: id,
                verdict: Verdict::Approved,
                assigned_departure: Some(req.requested_departure.max(tick)),
                tick,
            });
            out.push(Publication::new(TOPIC_DECISION, json!(d)));
        }
        out
    }
}
