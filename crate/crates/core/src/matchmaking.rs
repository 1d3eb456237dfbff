//! Group keys and leader-based group formation.
//!
//! Each round, every peer declares `(key, round)` in the DHT, reads the
//! listing back and then asks lower-priority peers, lowest first, to let it
//! join their group (`REQUEST_JOIN_GROUP`). A peer that runs out of
//! candidates becomes a leader, collects followers, and seals the group by
//! broadcasting one member list.
//!
//! Requests only ever travel towards strictly lower priority, so the wait
//! graph is acyclic and the lowest live peer of every cohort always ends up
//! leading a group.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dht::{DhtKey, SimDht, Tick};
use crate::error::{invalid, Error, Result};
use crate::types::{GridConfig, GroupKey, PeerId};

/// Matchmaking priority. Lower is better; ties on the local timestamp are
/// broken by peer id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Priority {
    pub timestamp: i64,
    pub peer: PeerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Declared,
    LeaderCollecting,
    FollowerCommitted,
    GroupSealed,
    RunningAllReduce,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchState {
    pub phase: Phase,
    pub leader: Option<PeerId>,
    pub members: Vec<PeerId>,
}

/// The key a peer at grid cell `i` starts from: digits `1..d` of `i` in base `M`.
///
/// Cells sharing a key differ only in digit 0, so no initial group exceeds `M`.
pub fn initial_index(i: usize, grid: &GridConfig) -> Result<GroupKey> {
    let cap = grid
        .capacity()
        .ok_or_else(|| invalid("grid capacity overflows"))?;
    if i >= cap {
        return Err(Error::OutOfRange {
            what: "grid cell",
            value: i,
            bound: cap,
        });
    }
    let mut rest = i / grid.m;
    let digits = (1..grid.d)
        .map(|_| {
            let digit = rest % grid.m;
            rest /= grid.m;
            digit
        })
        .collect();
    Ok(GroupKey::new(digits))
}

/// Drops the oldest chunk index and appends `chunk`.
pub fn next_group_key(prev: &GroupKey, chunk: usize, m: usize) -> Result<GroupKey> {
    if chunk >= m {
        return Err(Error::OutOfRange {
            what: "chunk index",
            value: chunk,
            bound: m,
        });
    }
    if prev.is_empty() {
        return Ok(GroupKey::empty());
    }
    let mut next: Vec<usize> = prev.indices()[1..].to_vec();
    next.push(chunk);
    Ok(GroupKey::new(next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Ticks before an unresponsive peer is given up on; also the quiescence
    /// window after which a leader seals a partially filled group.
    pub timeout: Tick,
    /// Maximum group size; extra joiners are rejected.
    pub max_group: usize,
}

impl MatchConfig {
    pub fn new(timeout: Tick, max_group: usize) -> Result<Self> {
        let cfg = Self { timeout, max_group };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // replies take two ticks; a shorter timeout could expire on a live peer
        if self.timeout < 3 {
            return Err(invalid("matchmaking timeout must be >= 3 ticks"));
        }
        if self.max_group == 0 {
            return Err(invalid("maximum group size must be >= 1"));
        }
        Ok(())
    }

    /// Logical time within which every live peer of a cohort of `n` is sealed.
    pub fn tick_budget(&self, n: usize, failures: usize) -> Tick {
        let per_attempt = self.timeout + 2;
        (n as Tick + 2) * per_attempt * (failures as Tick + 1) + 2 * self.timeout + 4
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            timeout: 3,
            max_group: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPeer {
    pub id: PeerId,
    pub key: GroupKey,
    /// Tick at which the peer starts matchmaking (injected latency).
    pub start: Tick,
    /// Offset of the peer's local clock; only affects its priority.
    pub clock_skew: i64,
}

impl MatchPeer {
    pub fn new(id: PeerId, key: GroupKey) -> Self {
        Self {
            id,
            key,
            start: 0,
            clock_skew: 0,
        }
    }

    pub fn priority(&self) -> Priority {
        Priority {
            timestamp: self.start as i64 + self.clock_skew,
            peer: self.id,
        }
    }
}

/// Fail-stop ticks per peer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub fail_at: BTreeMap<PeerId, Tick>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn fail(mut self, peer: PeerId, at: Tick) -> Self {
        self.fail_at.insert(peer, at);
        self
    }

    pub fn len(&self) -> usize {
        self.fail_at.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fail_at.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedGroup {
    pub key: GroupKey,
    pub leader: PeerId,
    /// Members in priority order; a member's position is its chunk index.
    pub members: Vec<PeerId>,
    pub sealed_at: Tick,
}

impl SealedGroup {
    pub fn chunk_of(&self, peer: PeerId) -> Option<usize> {
        self.members.iter().position(|&p| p == peer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Sealed groups, ordered by leader priority.
    pub groups: Vec<SealedGroup>,
    pub states: BTreeMap<PeerId, MatchState>,
    /// Tick of the last processed event.
    pub finished_at: Tick,
    pub messages: u64,
}

impl MatchOutcome {
    pub fn group_of(&self, peer: PeerId) -> Option<&SealedGroup> {
        self.groups.iter().find(|g| g.members.contains(&peer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reply {
    Wait,
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Fail(usize),
    Declare(usize),
    Lookup(usize),
    JoinRequest { from: usize, to: usize, attempt: u64 },
    JoinReply { to: usize, from: usize, attempt: u64, reply: Reply },
    /// No reply for this attempt, or (`forced`) the waited-on peer died.
    GiveUp { peer: usize, attempt: u64, forced: bool },
    LeaderCheck { leader: usize, epoch: u64 },
    Sealed { to: usize, leader: usize, members: Vec<PeerId> },
    LeaderLost { peer: usize, leader: usize },
}

#[derive(Debug, Clone)]
struct Outstanding {
    target: usize,
    attempt: u64,
    acked: bool,
}

#[derive(Debug, Clone)]
struct PeerRt {
    spec: MatchPeer,
    priority: Priority,
    failed: bool,
    phase: Phase,
    candidates: Vec<usize>,
    next: usize,
    given_up: BTreeSet<usize>,
    attempt: u64,
    outstanding: Option<Outstanding>,
    pending: Vec<(usize, u64)>,
    leader: Option<usize>,
    followers: Vec<usize>,
    epoch: u64,
    last_change: Tick,
    sealed: Option<Vec<PeerId>>,
}

struct Sim<'a> {
    round: u64,
    cfg: MatchConfig,
    dht: &'a mut SimDht,
    peers: Vec<PeerRt>,
    index: BTreeMap<PeerId, usize>,
    queue: BTreeMap<(Tick, u64), Event>,
    seq: u64,
    now: Tick,
    messages: u64,
    groups: Vec<SealedGroup>,
}

const EVENT_LIMIT: u64 = 50_000_000;

/// Runs matchmaking for one round and returns the sealed groups.
///
/// Peers only group with peers declaring the same key. Peers listed in
/// `faults` fail-stop at the given tick; leaders exclude failed followers
/// when sealing, and followers of a failed leader restart after `timeout`.
pub fn form_groups(
    round: u64,
    peers: &[MatchPeer],
    dht: &mut SimDht,
    cfg: &MatchConfig,
    faults: &FaultPlan,
) -> Result<MatchOutcome> {
    cfg.validate()?;
    let mut index = BTreeMap::new();
    for (i, p) in peers.iter().enumerate() {
        if index.insert(p.id, i).is_some() {
            return Err(invalid(format!("duplicate peer {}", p.id)));
        }
    }
    let runtime = peers
        .iter()
        .map(|p| PeerRt {
            priority: p.priority(),
            spec: p.clone(),
            failed: false,
            phase: Phase::Declared,
            candidates: Vec::new(),
            next: 0,
            given_up: BTreeSet::new(),
            attempt: 0,
            outstanding: None,
            pending: Vec::new(),
            leader: None,
            followers: Vec::new(),
            epoch: 0,
            last_change: 0,
            sealed: None,
        })
        .collect();
    let mut sim = Sim {
        round,
        cfg: *cfg,
        dht,
        peers: runtime,
        index,
        queue: BTreeMap::new(),
        seq: 0,
        now: 0,
        messages: 0,
        groups: Vec::new(),
    };
    // failures first so that a peer failing at its start tick never declares
    for (&peer, &at) in &faults.fail_at {
        if let Some(&i) = sim.index.get(&peer) {
            sim.schedule(at, Event::Fail(i));
        }
    }
    for i in 0..peers.len() {
        let start = sim.peers[i].spec.start;
        sim.schedule(start, Event::Declare(i));
        sim.schedule(start + 1, Event::Lookup(i));
    }
    sim.run()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn schedule(&mut self, at: Tick, event: Event) {
        self.queue.insert((at, self.seq), event);
        self.seq += 1;
    }

    fn send(&mut self, event: Event) {
        self.messages += 1;
        self.schedule(self.now + 1, event);
    }

    fn run(&mut self) -> Result<()> {
        let mut processed = 0u64;
        while let Some(((at, _), event)) = self.queue.pop_first() {
            self.now = at;
            self.handle(event);
            processed += 1;
            if processed > EVENT_LIMIT {
                return Err(invalid("matchmaking did not terminate"));
            }
        }
        Ok(())
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Fail(i) => self.on_fail(i),
            Event::Declare(i) => {
                if !self.peers[i].failed {
                    let p = &self.peers[i];
                    let key = DhtKey::new(p.spec.key.clone(), self.round);
                    let (id, ts) = (p.spec.id, p.priority.timestamp);
                    self.dht.declare_at(key, id, ts, self.round, true);
                }
            }
            Event::Lookup(i) => {
                if !self.peers[i].failed {
                    self.refresh_candidates(i);
                    self.try_next(i);
                }
            }
            Event::JoinRequest { from, to, attempt } => self.on_request(from, to, attempt),
            Event::JoinReply {
                to,
                from,
                attempt,
                reply,
            } => self.on_reply(to, from, attempt, reply),
            Event::GiveUp {
                peer,
                attempt,
                forced,
            } => {
                let p = &mut self.peers[peer];
                if p.failed || p.phase != Phase::Declared {
                    return;
                }
                // an acknowledged target is alive and will answer
                match &p.outstanding {
                    Some(o) if o.attempt == attempt && (forced || !o.acked) => {
                        let target = o.target;
                        p.given_up.insert(target);
                        p.outstanding = None;
                        self.try_next(peer);
                    }
                    _ => {}
                }
            }
            Event::LeaderCheck { leader, epoch } => {
                let p = &self.peers[leader];
                if !p.failed && p.phase == Phase::LeaderCollecting && p.epoch == epoch {
                    self.maybe_seal(leader, true);
                }
            }
            Event::Sealed {
                to,
                leader,
                members,
            } => {
                let p = &mut self.peers[to];
                if p.failed || p.leader != Some(leader) || p.phase != Phase::FollowerCommitted {
                    return;
                }
                p.phase = Phase::GroupSealed;
                p.sealed = Some(members);
            }
            Event::LeaderLost { peer, leader } => {
                let p = &mut self.peers[peer];
                if p.failed || p.phase != Phase::FollowerCommitted || p.leader != Some(leader) {
                    return;
                }
                p.phase = Phase::Declared;
                p.leader = None;
                p.given_up.insert(leader);
                self.refresh_candidates(peer);
                self.try_next(peer);
            }
        }
    }

    fn refresh_candidates(&mut self, i: usize) {
        let key = DhtKey::new(self.peers[i].spec.key.clone(), self.round);
        let listing = self.dht.get_entries(&key, self.round);
        let own = self.peers[i].priority;
        let candidates: Vec<usize> = listing
            .iter()
            .filter_map(|e| {
                let prio = Priority {
                    timestamp: e.declared_at,
                    peer: e.peer,
                };
                (prio < own).then(|| self.index.get(&e.peer).copied()).flatten()
            })
            .collect();
        let p = &mut self.peers[i];
        p.candidates = candidates;
        p.next = 0;
    }

    fn try_next(&mut self, i: usize) {
        if self.peers[i].phase != Phase::Declared || self.peers[i].outstanding.is_some() {
            return;
        }
        let target = {
            let p = &mut self.peers[i];
            let mut found = None;
            while p.next < p.candidates.len() {
                let c = p.candidates[p.next];
                p.next += 1;
                if !p.given_up.contains(&c) {
                    found = Some(c);
                    break;
                }
            }
            found
        };
        match target {
            Some(target) => {
                let p = &mut self.peers[i];
                p.attempt += 1;
                let attempt = p.attempt;
                p.outstanding = Some(Outstanding {
                    target,
                    attempt,
                    acked: false,
                });
                self.send(Event::JoinRequest {
                    from: i,
                    to: target,
                    attempt,
                });
                self.schedule(
                    self.now + self.cfg.timeout,
                    Event::GiveUp {
                        peer: i,
                        attempt,
                        forced: false,
                    },
                );
            }
            None => self.become_leader(i),
        }
    }

    fn become_leader(&mut self, i: usize) {
        let p = &mut self.peers[i];
        p.phase = Phase::LeaderCollecting;
        p.followers.clear();
        p.last_change = self.now;
        let pending = std::mem::take(&mut p.pending);
        for (from, attempt) in pending {
            self.admit(i, from, attempt);
        }
        self.maybe_seal(i, false);
    }

    fn admit(&mut self, leader: usize, from: usize, attempt: u64) {
        let size = 1 + self.peers[leader].followers.len();
        let reply = if size < self.cfg.max_group {
            let p = &mut self.peers[leader];
            p.followers.push(from);
            p.last_change = self.now;
            Reply::Accept
        } else {
            Reply::Reject
        };
        self.send(Event::JoinReply {
            to: from,
            from: leader,
            attempt,
            reply,
        });
    }

    fn on_request(&mut self, from: usize, to: usize, attempt: u64) {
        if self.peers[to].failed {
            return;
        }
        match self.peers[to].phase {
            Phase::Declared => {
                self.peers[to].pending.push((from, attempt));
                self.send(Event::JoinReply {
                    to: from,
                    from: to,
                    attempt,
                    reply: Reply::Wait,
                });
            }
            Phase::LeaderCollecting => {
                self.admit(to, from, attempt);
                self.maybe_seal(to, false);
            }
            _ => self.send(Event::JoinReply {
                to: from,
                from: to,
                attempt,
                reply: Reply::Reject,
            }),
        }
    }

    fn on_reply(&mut self, to: usize, from: usize, attempt: u64, reply: Reply) {
        let p = &mut self.peers[to];
        if p.failed || p.phase != Phase::Declared {
            return;
        }
        let current = matches!(&p.outstanding, Some(o) if o.attempt == attempt && o.target == from);
        if !current {
            return;
        }
        match reply {
            Reply::Wait => {
                if let Some(o) = p.outstanding.as_mut() {
                    o.acked = true;
                }
                // the target may already be dead; its failure handler only
                // covers peers that were acknowledged before it failed
                if self.peers[from].failed {
                    self.schedule(
                        self.now + self.cfg.timeout,
                        Event::GiveUp {
                            peer: to,
                            attempt,
                            forced: true,
                        },
                    );
                }
            }
            Reply::Reject => {
                p.outstanding = None;
                p.given_up.insert(from);
                self.try_next(to);
            }
            Reply::Accept => {
                p.outstanding = None;
                p.phase = Phase::FollowerCommitted;
                p.leader = Some(from);
                let pending = std::mem::take(&mut p.pending);
                for (requester, att) in pending {
                    self.send(Event::JoinReply {
                        to: requester,
                        from: to,
                        attempt: att,
                        reply: Reply::Reject,
                    });
                }
                if self.peers[from].failed {
                    self.schedule(
                        self.now + self.cfg.timeout,
                        Event::LeaderLost { peer: to, leader: from },
                    );
                }
            }
        }
    }

    /// Seals when the group is full, when every listed peer has joined, or
    /// (on a timer) when nothing changed for `timeout` ticks.
    fn maybe_seal(&mut self, leader: usize, timer_fired: bool) {
        let size = 1 + self.peers[leader].followers.len();
        let full = size >= self.cfg.max_group;
        let everyone_joined = {
            let key = DhtKey::new(self.peers[leader].spec.key.clone(), self.round);
            let listed = self.dht.get(&key, self.round);
            let p = &self.peers[leader];
            listed.iter().all(|id| {
                *id == p.spec.id
                    || self
                        .index
                        .get(id)
                        .is_some_and(|j| p.followers.contains(j))
            })
        };
        let quiet = timer_fired && self.now >= self.peers[leader].last_change + self.cfg.timeout;
        if full || everyone_joined || quiet {
            self.seal(leader);
        } else {
            let p = &mut self.peers[leader];
            p.epoch += 1;
            let (epoch, at) = (p.epoch, p.last_change.max(self.now) + self.cfg.timeout);
            self.schedule(at, Event::LeaderCheck { leader, epoch });
        }
    }

    fn seal(&mut self, leader: usize) {
        // the leader pings its followers; failed ones are dropped
        let mut members: Vec<usize> = std::iter::once(leader)
            .chain(
                self.peers[leader]
                    .followers
                    .iter()
                    .copied()
                    .filter(|&f| !self.peers[f].failed),
            )
            .collect();
        members.sort_by_key(|&m| self.peers[m].priority);
        let ids: Vec<PeerId> = members.iter().map(|&m| self.peers[m].spec.id).collect();
        {
            let p = &mut self.peers[leader];
            p.phase = Phase::GroupSealed;
            p.sealed = Some(ids.clone());
        }
        for &m in &members {
            if m != leader {
                self.send(Event::Sealed {
                    to: m,
                    leader,
                    members: ids.clone(),
                });
            }
        }
        self.groups.push(SealedGroup {
            key: self.peers[leader].spec.key.clone(),
            leader: self.peers[leader].spec.id,
            members: ids,
            sealed_at: self.now,
        });
    }

    fn on_fail(&mut self, i: usize) {
        if self.peers[i].failed {
            return;
        }
        {
            let p = &mut self.peers[i];
            p.failed = true;
            p.phase = Phase::Failed;
        }
        let detect = self.now + self.cfg.timeout;
        let mut follow_up = Vec::new();
        for (j, p) in self.peers.iter().enumerate() {
            if p.failed {
                continue;
            }
            if p.phase == Phase::Declared {
                if let Some(o) = &p.outstanding {
                    if o.target == i && o.acked {
                        follow_up.push(Event::GiveUp {
                            peer: j,
                            attempt: o.attempt,
                            forced: true,
                        });
                    }
                }
            }
            if p.phase == Phase::FollowerCommitted && p.leader == Some(i) {
                follow_up.push(Event::LeaderLost { peer: j, leader: i });
            }
        }
        for e in follow_up {
            self.schedule(detect, e);
        }
    }

    fn finish(mut self) -> MatchOutcome {
        self.groups.sort_by_key(|g| {
            let i = self.index[&g.leader];
            self.peers[i].priority
        });
        let states = self
            .peers
            .iter()
            .map(|p| {
                let leader = p.leader.map(|l| self.peers[l].spec.id).or(
                    (p.phase == Phase::GroupSealed && p.leader.is_none()).then_some(p.spec.id),
                );
                (
                    p.spec.id,
                    MatchState {
                        phase: p.phase,
                        leader,
                        members: p.sealed.clone().unwrap_or_default(),
                    },
                )
            })
            .collect();
        MatchOutcome {
            groups: self.groups,
            states,
            finished_at: self.now,
            messages: self.messages,
        }
    }
}
