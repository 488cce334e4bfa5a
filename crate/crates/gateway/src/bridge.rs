//! Engine side of an externally attached subsystem.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use skylane::bus::{Envelope, Publication};
use skylane::engine::RoleLink;
use skylane::{Result, SimError};
use tokio::sync::mpsc::UnboundedSender;

use crate::protocol::{Role, RoleMessage};

/// An open role connection as seen from the engine thread.
pub(crate) struct Conn {
    pub to_client: UnboundedSender<String>,
    pub acks: Receiver<(u64, Vec<Publication>)>,
}

/// Where an attached connection for one role lives.
#[derive(Default)]
pub struct Slot {
    attached: AtomicBool,
    conn: Mutex<Option<Conn>>,
}

impl Slot {
    pub fn is_attached(&self) -> bool {
        self.attached.load(Ordering::SeqCst)
    }

    /// Claims the slot; false when another connection holds it.
    pub(crate) fn claim(&self) -> bool {
        !self.attached.swap(true, Ordering::SeqCst)
    }

    pub(crate) fn install(&self, conn: Conn) {
        *self.conn.lock().unwrap() = Some(conn);
    }

    pub(crate) fn release(&self) {
        self.attached.store(false, Ordering::SeqCst);
    }
}

/// [`RoleLink`] that forwards each phase over an attached connection and
/// blocks until it is acknowledged.
pub struct ExternalLink {
    role: Role,
    slot: Arc<Slot>,
    timeout: Duration,
}

impl ExternalLink {
    pub fn new(role: Role, slot: Arc<Slot>, timeout: Duration) -> Self {
        Self { role, slot, timeout }
    }
}

impl RoleLink for ExternalLink {
    fn phase(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Vec<Publication>> {
        let mut guard = self.slot.conn.lock().unwrap();
        let Some(conn) = guard.as_ref() else {
            return Err(SimError::External(format!("{} not attached", self.role.as_str())));
        };
        let msg = RoleMessage::Phase { role: self.role, tick, inbox: inbox.to_vec() };
        let line = serde_json::to_string(&msg).expect("phase serializes");
        if conn.to_client.send(line).is_err() {
            *guard = None;
            return Err(SimError::External(format!("{} disconnected", self.role.as_str())));
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match conn.acks.recv_timeout(left) {
                Ok((t, pubs)) if t == tick => return Ok(pubs),
                // a late ack for an earlier tick
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => return Err(SimError::External("external timeout".into())),
                Err(RecvTimeoutError::Disconnected) => {
                    *guard = None;
                    return Err(SimError::External(format!("{} disconnected", self.role.as_str())));
                }
            }
        }
    }
}
