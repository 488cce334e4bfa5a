//! In-process topic bus with simulated latency, loss and congestion.
//!
//! Delays are whole ticks. A message published during tick `t` with zero
//! delay is handed out by the next `deliver_due(t + 1)` call at the latest.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SimError};
use crate::world::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    #[serde(default)]
    pub base_delay: u64,
    /// Extra delay drawn uniformly from `0..=jitter`.
    #[serde(default)]
    pub jitter: u64,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default = "LinkModel::unbounded")]
    pub queue_capacity: u64,
    /// Messages served per tick.
    #[serde(default = "LinkModel::unbounded")]
    pub service_rate: u64,
}

impl LinkModel {
    fn unbounded() -> u64 {
        1 << 40
    }

    pub fn lossy(loss_prob: f64) -> Self {
        Self { loss_prob, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.loss_prob) && self.loss_prob != 1.0 {
            return Err(SimError::validation("loss_prob must lie in [0, 1]"));
        }
        if self.queue_capacity == 0 || self.service_rate == 0 {
            return Err(SimError::validation("queue capacity and service rate must be positive"));
        }
        Ok(())
    }
}

impl Default for LinkModel {
    /// Lossless, zero delay, unbounded queue.
    fn default() -> Self {
        Self { base_delay: 0, jitter: 0, loss_prob: 0.0, queue_capacity: Self::unbounded(), service_rate: Self::unbounded() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Loss,
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "fate", content = "reason")]
pub enum Fate {
    Delivered,
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub payload: Value,
    pub publish_tick: u64,
    pub deliver_tick: u64,
    #[serde(flatten)]
    pub fate: Fate,
    pub sequence: u64,
}

/// A message waiting to be published.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Publication {
    pub topic: String,
    pub payload: Value,
}

impl Publication {
    pub fn new(topic: impl Into<String>, payload: Value) -> Self {
        Self { topic: topic.into(), payload }
    }
}

/// `/`-separated, non-empty segments, no wildcard.
pub fn validate_topic(topic: &str) -> Result<()> {
    if topic.is_empty() || topic.split('/').any(|s| s.is_empty() || s == "*" || s.chars().any(char::is_whitespace)) {
        return Err(SimError::validation(format!("malformed topic `{topic}`")));
    }
    Ok(())
}

/// A topic pattern; a trailing `*` segment matches one or more further segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern {
    segments: Vec<String>,
    wildcard: bool,
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let mut segments: Vec<String> = pattern.split('/').map(str::to_owned).collect();
        let wildcard = segments.last().is_some_and(|s| s == "*");
        if wildcard {
            segments.pop();
        }
        let bad = pattern.is_empty()
            || segments.iter().any(|s| s.is_empty() || s == "*" || s.chars().any(char::is_whitespace));
        if bad {
            return Err(SimError::validation(format!("invalid topic pattern `{pattern}`")));
        }
        Ok(Self { segments, wildcard })
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut parts = topic.split('/');
        for seg in &self.segments {
            if parts.next() != Some(seg.as_str()) {
                return false;
            }
        }
        let rest = parts.count();
        if self.wildcard {
            rest >= 1
        } else {
            rest == 0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubscriptionId(pub usize);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusCounters {
    pub published: u64,
    pub delivered: u64,
    pub dropped_loss: u64,
    pub dropped_overflow: u64,
}

#[derive(Debug, Clone, Default)]
struct Queue {
    backlog: u64,
    drained_at: u64,
}

#[derive(Debug)]
struct Subscription {
    pattern: TopicPattern,
    inbox: Vec<Envelope>,
}

#[derive(Debug)]
pub struct Bus {
    links: BTreeMap<String, LinkModel>,
    default_link: LinkModel,
    queues: HashMap<String, Queue>,
    sequences: HashMap<String, u64>,
    pending: BTreeMap<(u64, String, u64), Envelope>,
    subs: Vec<Subscription>,
    dropped: Vec<Envelope>,
    counters: BusCounters,
    rng: RandomStream,
}

impl Bus {
    pub fn new(seed: u64) -> Self {
        Self {
            links: BTreeMap::new(),
            default_link: LinkModel::default(),
            queues: HashMap::new(),
            sequences: HashMap::new(),
            pending: BTreeMap::new(),
            subs: Vec::new(),
            dropped: Vec::new(),
            counters: BusCounters::default(),
            rng: RandomStream::new(seed, "bus"),
        }
    }

    /// Installs (or with `None` removes) the link for a topic prefix and
    /// returns the one it replaces.
    pub fn set_link(&mut self, prefix: &str, link: Option<LinkModel>) -> Result<Option<LinkModel>> {
        validate_topic(prefix)?;
        if let Some(l) = &link {
            l.validate()?;
        }
        Ok(match link {
            Some(l) => self.links.insert(prefix.to_owned(), l),
            None => self.links.remove(prefix),
        })
    }

    pub fn link(&self, prefix: &str) -> Option<&LinkModel> {
        self.links.get(prefix)
    }

    pub fn links(&self) -> &BTreeMap<String, LinkModel> {
        &self.links
    }

    /// Longest configured prefix covering `topic`, matched on whole segments.
    fn link_key(&self, topic: &str) -> Option<&str> {
        let mut best: Option<&str> = None;
        for key in self.links.keys() {
            let hit = topic == key || (topic.starts_with(key.as_str()) && topic.as_bytes().get(key.len()) == Some(&b'/'));
            if hit && best.is_none_or(|b| key.len() > b.len()) {
                best = Some(key);
            }
        }
        best
    }

    pub fn publish(&mut self, topic: &str, payload: Value, now: u64) -> Result<Envelope> {
        validate_topic(topic)?;
        let key = self.link_key(topic).map(str::to_owned);
        let link = key.as_ref().map_or(self.default_link, |k| self.links[k]);
        let seq = self.sequences.entry(topic.to_owned()).or_insert(0);
        *seq += 1;
        let sequence = *seq;
        self.counters.published += 1;

        // one loss draw and one jitter draw per publish keeps the stream aligned
        let lost = self.rng.chance(link.loss_prob);
        let jitter = self.rng.uniform_inclusive(link.jitter);

        let queue = self.queues.entry(key.unwrap_or_default()).or_default();
        let served = link.service_rate.saturating_mul(now.saturating_sub(queue.drained_at));
        queue.backlog = queue.backlog.saturating_sub(served);
        queue.drained_at = now;

        let mut env = Envelope { topic: topic.to_owned(), payload, publish_tick: now, deliver_tick: now, fate: Fate::Delivered, sequence };
        if lost {
            env.fate = Fate::Dropped(DropReason::Loss);
            self.counters.dropped_loss += 1;
        } else if queue.backlog >= link.queue_capacity {
            env.fate = Fate::Dropped(DropReason::Overflow);
            self.counters.dropped_overflow += 1;
        } else {
            // position p (1-based) is served in the ceil(p/rate)-th slot, the first being this tick
            let wait = queue.backlog / link.service_rate;
            queue.backlog += 1;
            env.deliver_tick = now + link.base_delay + jitter + wait;
            self.pending.insert((env.deliver_tick, env.topic.clone(), sequence), env.clone());
            return Ok(env);
        }
        self.dropped.push(env.clone());
        Ok(env)
    }

    /// Every envelope due at `now`, ordered by `(deliver_tick, topic, sequence)`.
    /// Matching subscriptions receive their own copies.
    pub fn deliver_due(&mut self, now: u64) -> Vec<Envelope> {
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if entry.key().0 > now {
                break;
            }
            out.push(entry.remove());
        }
        self.counters.delivered += out.len() as u64;
        for sub in &mut self.subs {
            sub.inbox.extend(out.iter().filter(|e| sub.pattern.matches(&e.topic)).cloned());
        }
        out
    }

    pub fn subscribe(&mut self, pattern: &str) -> Result<SubscriptionId> {
        let pattern = TopicPattern::parse(pattern)?;
        self.subs.push(Subscription { pattern, inbox: Vec::new() });
        Ok(SubscriptionId(self.subs.len() - 1))
    }

    pub fn take_inbox(&mut self, id: SubscriptionId) -> Vec<Envelope> {
        self.subs.get_mut(id.0).map(|s| std::mem::take(&mut s.inbox)).unwrap_or_default()
    }

    /// Envelopes dropped since the last call, in publish order.
    pub fn take_dropped(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.dropped)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn counters(&self) -> BusCounters {
        self.counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn link(base_delay: u64, jitter: u64, loss_prob: f64) -> LinkModel {
        LinkModel { base_delay, jitter, loss_prob, ..LinkModel::default() }
    }

    #[test]
    fn fixed_delay() {
        let mut bus = Bus::new(1);
        bus.set_link("plan", Some(link(2, 0, 0.0))).unwrap();
        let e = bus.publish("plan/submit", json!({"x": 1}), 10).unwrap();
        assert_eq!(e.fate, Fate::Delivered);
        assert_eq!(e.deliver_tick, 12);
        assert!(bus.deliver_due(11).is_empty());
        assert_eq!(bus.deliver_due(12).len(), 1);
        assert!(bus.deliver_due(13).is_empty());
    }

    #[test]
    fn certain_loss() {
        let mut bus = Bus::new(1);
        bus.set_link("uav", Some(link(0, 0, 1.0))).unwrap();
        for t in 0..100 {
            assert_eq!(bus.publish("uav/cmd/1", json!(t), t).unwrap().fate, Fate::Dropped(DropReason::Loss));
        }
        assert_eq!(bus.take_dropped().len(), 100);
        assert_eq!(bus.pending_len(), 0);
    }

    #[test]
    fn loss_rate_within_three_sigma() {
        let mut bus = Bus::new(42);
        bus.set_link("a", Some(link(0, 0, 0.1))).unwrap();
        let drops = (0..10_000).filter(|&i| bus.publish("a/b", Value::Null, i).unwrap().fate != Fate::Delivered).count();
        assert!((901..=1099).contains(&drops), "{drops}");
    }

    #[test]
    fn delivery_order_is_tick_topic_sequence() {
        let mut bus = Bus::new(3);
        bus.publish("z/a", json!(1), 0).unwrap();
        bus.publish("b/a", json!(2), 0).unwrap();
        bus.publish("b/a", json!(3), 0).unwrap();
        let got: Vec<_> = bus.deliver_due(1).into_iter().map(|e| (e.topic, e.sequence)).collect();
        assert_eq!(got, vec![("b/a".into(), 1), ("b/a".into(), 2), ("z/a".into(), 1)]);
        assert!(bus.deliver_due(2).is_empty());
    }

    #[test]
    fn longest_prefix_wins() {
        let mut bus = Bus::new(3);
        bus.set_link("uav", Some(link(5, 0, 0.0))).unwrap();
        bus.set_link("uav/cmd", Some(link(1, 0, 0.0))).unwrap();
        assert_eq!(bus.publish("uav/cmd/7", Value::Null, 0).unwrap().deliver_tick, 1);
        assert_eq!(bus.publish("uav/telemetry/7", Value::Null, 0).unwrap().deliver_tick, 5);
        assert_eq!(bus.publish("uavx/cmd", Value::Null, 0).unwrap().deliver_tick, 0);
    }

    #[test]
    fn patterns() {
        let p = TopicPattern::parse("uav/telemetry/*").unwrap();
        assert!(p.matches("uav/telemetry/7"));
        assert!(p.matches("uav/telemetry/7/x"));
        assert!(!p.matches("uav/telemetry"));
        assert!(!p.matches("plan/state"));
        let exact = TopicPattern::parse("plan/state").unwrap();
        assert!(exact.matches("plan/state"));
        assert!(!exact.matches("plan/state/x"));
        assert!(TopicPattern::parse("a/*/b").is_err());
        assert!(TopicPattern::parse("").is_err());
        assert!(validate_topic("a//b").is_err());
        assert!(validate_topic("a/*").is_err());
    }

    #[test]
    fn fan_out_copies() {
        let mut bus = Bus::new(0);
        let subs: Vec<_> = (0..3).map(|_| bus.subscribe("uav/telemetry/*").unwrap()).collect();
        let other = bus.subscribe("plan/*").unwrap();
        bus.publish("uav/telemetry/1", json!(1), 0).unwrap();
        bus.publish("uav/telemetry/2", json!(2), 0).unwrap();
        bus.deliver_due(1);
        for s in subs {
            assert_eq!(bus.take_inbox(s).len(), 2);
        }
        assert!(bus.take_inbox(other).is_empty());
    }

    #[test]
    fn fifo_without_jitter() {
        let mut bus = Bus::new(9);
        bus.set_link("q", Some(LinkModel { base_delay: 1, service_rate: 2, ..LinkModel::default() })).unwrap();
        for t in 0..20 {
            for k in 0..3 {
                bus.publish("q/x", json!([t, k]), t).unwrap();
            }
        }
        let mut seen = Vec::new();
        for t in 0..200 {
            seen.extend(bus.deliver_due(t).into_iter().map(|e| e.sequence));
        }
        assert_eq!(seen.len(), 60);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn congestion_threshold() {
        // service 4/tick, capacity 10: offered 3/tick never overflows, 6/tick does
        let cfg = LinkModel { queue_capacity: 10, service_rate: 4, ..LinkModel::default() };
        for (load, expect_drops) in [(3, false), (4, false), (6, true)] {
            let mut bus = Bus::new(1);
            bus.set_link("c", Some(cfg)).unwrap();
            for t in 0..500 {
                for _ in 0..load {
                    bus.publish("c/m", Value::Null, t).unwrap();
                }
                bus.deliver_due(t);
            }
            assert_eq!(bus.counters().dropped_overflow > 0, expect_drops, "load {load}");
        }
    }

    #[test]
    fn replay_is_identical() {
        let run = |seed| {
            let mut bus = Bus::new(seed);
            bus.set_link("n", Some(LinkModel { base_delay: 1, jitter: 3, loss_prob: 0.2, queue_capacity: 8, service_rate: 2 })).unwrap();
            let mut sched = RandomStream::new(77, "schedule");
            let mut transcript = String::new();
            for t in 0..300 {
                for _ in 0..sched.uniform_inclusive(4) {
                    let topic = format!("n/{}", sched.uniform_inclusive(3));
                    let e = bus.publish(&topic, json!(t), t).unwrap();
                    transcript.push_str(&serde_json::to_string(&e).unwrap());
                }
                for e in bus.deliver_due(t) {
                    transcript.push_str(&serde_json::to_string(&e).unwrap());
                }
            }
            transcript
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
