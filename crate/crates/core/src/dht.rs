//! In-process rendezvous table keyed by `(group key, round)`.
//!
//! Routing is not simulated; [`lookup_cost`] charges the request count a
//! Kademlia-style lookup would need.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{GroupKey, PeerId};

/// Logical time in ticks.
pub type Tick = u64;

pub const DEFAULT_TTL: Tick = 2;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DhtKey {
    pub group_key: GroupKey,
    pub round: u64,
}

impl DhtKey {
    pub fn new(group_key: GroupKey, round: u64) -> Self {
        Self { group_key, round }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhtEntry {
    pub peer: PeerId,
    /// Timestamp reported by the declaring peer (its local clock).
    pub declared_at: i64,
    /// Entry is visible while `now < expiration`.
    pub expiration: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    Stored,
    /// The declaring peer failed during the call; nothing was stored.
    Dropped,
}

#[derive(Debug, Clone)]
pub struct SimDht {
    entries: BTreeMap<DhtKey, Vec<DhtEntry>>,
    ttl: Tick,
    replication: u32,
    requests: u64,
}

impl Default for SimDht {
    fn default() -> Self {
        Self::new(DEFAULT_TTL)
    }
}

impl SimDht {
    pub fn new(ttl: Tick) -> Self {
        Self {
            entries: BTreeMap::new(),
            ttl,
            replication: 1,
            requests: 0,
        }
    }

    pub fn with_replication(mut self, k: u32) -> Self {
        self.replication = k;
        self
    }

    pub fn ttl(&self) -> Tick {
        self.ttl
    }

    /// Declares `peer` under `key` with its local timestamp equal to `now`.
    pub fn declare(&mut self, key: DhtKey, peer: PeerId, now: Tick) -> Ack {
        self.declare_at(key, peer, now as i64, now, true)
    }

    /// Full form: `declared_at` is the peer's (possibly skewed) local clock,
    /// `alive` is false when the peer fail-stops during the call.
    pub fn declare_at(
        &mut self,
        key: DhtKey,
        peer: PeerId,
        declared_at: i64,
        now: Tick,
        alive: bool,
    ) -> Ack {
        if !alive {
            return Ack::Dropped;
        }
        let entry = DhtEntry {
            peer,
            declared_at,
            expiration: now + self.ttl,
        };
        let list = self.entries.entry(key).or_default();
        list.retain(|e| e.peer != peer);
        let pos = list
            .binary_search_by(|e| (e.declared_at, e.peer).cmp(&(declared_at, peer)))
            .unwrap_or_else(|p| p);
        list.insert(pos, entry);
        self.requests += 1;
        Ack::Stored
    }

    /// Non-expired entries for `key`, ordered by `(declared_at, peer)`.
    pub fn get_entries(&mut self, key: &DhtKey, now: Tick) -> Vec<DhtEntry> {
        self.requests += 1;
        self.entries
            .get(key)
            .map(|list| {
                list.iter()
                    .filter(|e| now < e.expiration)
                    .copied()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn get(&mut self, key: &DhtKey, now: Tick) -> Vec<PeerId> {
        self.get_entries(key, now).into_iter().map(|e| e.peer).collect()
    }

    /// Drops expired entries and keys left empty.
    pub fn prune(&mut self, now: Tick) {
        self.entries.retain(|_, list| {
            list.retain(|e| now < e.expiration);
            !list.is_empty()
        });
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of declare/get calls served so far.
    pub fn requests(&self) -> u64 {
        self.requests
    }

    /// Estimated request count of one lookup among `n_peers`.
    pub fn lookup_cost(&self, n_peers: usize) -> u64 {
        lookup_cost(n_peers, self.replication)
    }
}

/// `ceil(log2 n) + k` requests per lookup.
pub fn lookup_cost(n_peers: usize, k: u32) -> u64 {
    let n = n_peers.max(1);
    let ceil_log2 = usize::BITS - (n - 1).leading_zeros();
    u64::from(ceil_log2) + u64::from(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(c: usize, t: u64) -> DhtKey {
        DhtKey::new(GroupKey::new(vec![c]), t)
    }

    #[test]
    fn read_your_write() {
        let mut dht = SimDht::default();
        dht.declare(key(0, 1), PeerId(3), 0);
        assert_eq!(dht.get(&key(0, 1), 0), vec![PeerId(3)]);
        assert!(dht.get(&key(0, 2), 0).is_empty());
        assert!(dht.get(&key(1, 1), 0).is_empty());
    }

    #[test]
    fn ordering_by_timestamp_then_id() {
        let mut dht = SimDht::default();
        dht.declare_at(key(0, 1), PeerId(9), 5, 0, true);
        dht.declare_at(key(0, 1), PeerId(4), 5, 0, true);
        dht.declare_at(key(0, 1), PeerId(7), 2, 0, true);
        assert_eq!(dht.get(&key(0, 1), 0), vec![PeerId(7), PeerId(4), PeerId(9)]);
    }

    #[test]
    fn expiry() {
        let mut dht = SimDht::new(2);
        dht.declare(key(0, 1), PeerId(1), 10);
        assert_eq!(dht.get(&key(0, 1), 11).len(), 1);
        assert!(dht.get(&key(0, 1), 10 + 2 + 1).is_empty());
        dht.prune(13);
        assert!(dht.is_empty());
    }

    #[test]
    fn failed_declare_is_noop() {
        let mut dht = SimDht::default();
        assert_eq!(dht.declare_at(key(0, 1), PeerId(1), 0, 0, false), Ack::Dropped);
        assert!(dht.get(&key(0, 1), 0).is_empty());
    }

    #[test]
    fn redeclare_replaces() {
        let mut dht = SimDht::default();
        dht.declare(key(0, 1), PeerId(1), 0);
        dht.declare(key(0, 1), PeerId(1), 1);
        assert_eq!(dht.get(&key(0, 1), 1).len(), 1);
    }

    #[test]
    fn five_declares() {
        let mut dht = SimDht::default();
        for i in 0..5 {
            dht.declare(key(2, 4), PeerId(i), 0);
        }
        assert_eq!(dht.get(&key(2, 4), 1).len(), 5);
    }

    #[test]
    fn lookup_cost_examples() {
        assert_eq!(lookup_cost(1, 1), 1);
        assert_eq!(lookup_cost(1, 3), 3);
        assert_eq!(lookup_cost(1024, 1), 11);
        assert_eq!(lookup_cost(1025, 1), 12);
        assert_eq!(SimDht::default().lookup_cost(2), 2);
    }
}
