//! Join and leave events end to end: key generation by QKA sessions along the
//! update path, distribution by rekey messages, and consistency checks.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bits::BitString;
use crate::counters::ResourceCounters;
use crate::keytree::{numbered_users, GroupKey, KeyId, KeyTree, KeyTreeError, TreeSnapshot, TreeStats, UserId};
use crate::qka::{
    run_session_with, AbortCause, ChannelModel, DecoyAllocator, DecoyPolicy, HopRecord, LeaderSchedule,
    ParticipantId, PositionRecord, QkaConfig, QkaError,
};
use crate::rekey::{
    apply_rekey, build_join_messages, build_leave_messages, encrypt, NonceSource, RekeyError, RekeyMessage,
    SimCipherText, UserView,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("{0} is already a member")]
    AlreadyMember(UserId),
    #[error("{0} is not a member")]
    NotMember(UserId),
    #[error("cannot remove {0}: the group would drop below two members")]
    GroupTooSmall(UserId),
    #[error("key agreement for {key} aborted: {cause}")]
    Aborted { key: KeyId, cause: AbortCause },
    #[error(transparent)]
    Qka(#[from] QkaError),
    #[error(transparent)]
    Tree(#[from] KeyTreeError),
    #[error(transparent)]
    Rekey(#[from] RekeyError),
}

impl ProtocolError {
    pub fn is_abort(&self) -> bool {
        matches!(self, ProtocolError::Aborted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Join,
    Leave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupEvent {
    pub kind: EventKind,
    pub user: UserId,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub key_len: usize,
    pub xi: f64,
    pub decoy_policy: DecoyPolicy,
    pub schedule: LeaderSchedule,
    pub channel: ChannelModel,
    /// Keep a per-user copy of its keys and deliver every rekey message to it.
    pub track_views: bool,
    /// Record tree snapshots in each trace.
    pub snapshots: bool,
    /// Include key bits in snapshots.
    pub reveal_keys: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            key_len: 1,
            xi: 0.0,
            decoy_policy: DecoyPolicy::default(),
            schedule: LeaderSchedule::RoundRobin,
            channel: ChannelModel::honest(),
            track_views: true,
            snapshots: true,
            reveal_keys: false,
        }
    }
}

/// One QKA session as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionTrace {
    pub key_id: KeyId,
    pub participants: Vec<ParticipantId>,
    pub positions: Vec<PositionRecord>,
    pub hops: Vec<HopRecord>,
    pub counters: ResourceCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveryFailure {
    pub user: UserId,
    pub message: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventTrace {
    pub event: GroupEvent,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_before: Option<TreeSnapshot>,
    pub sessions: Vec<SessionTrace>,
    /// Agent chosen for each child key, leave events only.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub agents: BTreeMap<KeyId, UserId>,
    pub rekey_messages: Vec<RekeyMessage>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub delivery_failures: Vec<DeliveryFailure>,
    pub counters: ResourceCounters,
    pub stats: TreeStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_after: Option<TreeSnapshot>,
    /// A leaver's keys just before it left.
    #[serde(skip)]
    pub former_keys: Vec<GroupKey>,
}

impl EventTrace {
    pub fn keys_updated(&self) -> usize {
        self.sessions.len()
    }

    pub fn ciphertexts(&self) -> impl Iterator<Item = &SimCipherText> {
        self.rekey_messages.iter().flat_map(|m| m.items.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mismatch {
    MissingView(UserId),
    StaleView(UserId),
    Keys { user: UserId, expected: Vec<(KeyId, u64)>, actual: Vec<(KeyId, u64)> },
    Bits { user: UserId, key: KeyId },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsistencyReport {
    pub mismatches: Vec<Mismatch>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares every member's view with its keyset in the server tree.
pub fn verify_consistency(tree: &KeyTree, views: &BTreeMap<UserId, UserView>) -> ConsistencyReport {
    let mut report = ConsistencyReport::default();
    for u in tree.users() {
        let Some(view) = views.get(&u) else {
            report.mismatches.push(Mismatch::MissingView(u));
            continue;
        };
        let expected: Vec<&GroupKey> = tree
            .keyset(u)
            .expect("member")
            .into_iter()
            .map(|k| tree.key(k).expect("keyset key exists"))
            .collect();
        let mut exp_ids: Vec<(KeyId, u64)> = expected.iter().map(|k| (k.key_id, k.version)).collect();
        exp_ids.sort();
        let actual: Vec<(KeyId, u64)> = view.keys.values().map(|k| (k.key_id, k.version)).collect();
        if exp_ids != actual {
            report.mismatches.push(Mismatch::Keys { user: u, expected: exp_ids, actual });
            continue;
        }
        for k in expected {
            if view.keys[&k.key_id].bits != k.bits {
                report.mismatches.push(Mismatch::Bits { user: u, key: k.key_id });
            }
        }
    }
    for u in views.keys() {
        if !tree.contains_user(*u) {
            report.mismatches.push(Mismatch::StaleView(*u));
        }
    }
    report
}

/// Server-side group state plus (optionally) every member's view.
#[derive(Debug, Clone)]
pub struct Group {
    tree: KeyTree,
    views: BTreeMap<UserId, UserView>,
    config: ProtocolConfig,
    rng: ChaCha8Rng,
    nonces: NonceSource,
    decoys: DecoyAllocator,
    step: u64,
    corrupt_next: Option<usize>,
}

impl Group {
    pub fn new(tree: KeyTree, config: ProtocolConfig, seed: u64) -> Self {
        let views = if config.track_views {
            tree.users().map(|u| (u, UserView::from_tree(&tree, u).expect("member"))).collect()
        } else {
            BTreeMap::new()
        };
        Self {
            decoys: DecoyAllocator::new(config.decoy_policy, config.xi),
            tree,
            views,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nonces: NonceSource::default(),
            step: 0,
            corrupt_next: None,
        }
    }

    /// A balanced tree over `u1..=u{users}`, built from the same seeded stream.
    pub fn balanced(users: usize, degree: usize, config: ProtocolConfig, seed: u64) -> Result<Self, ProtocolError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = KeyTree::build_balanced(degree, &numbered_users(users), config.key_len, &mut rng)?;
        let mut g = Self::new(tree, config, 0);
        g.rng = rng;
        Ok(g)
    }

    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }

    pub fn views(&self) -> &BTreeMap<UserId, UserView> {
        &self.views
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn set_channel(&mut self, channel: ChannelModel) {
        self.config.channel = channel;
    }

    /// Flips one payload bit of the `index`-th rekey message of the next event.
    pub fn corrupt_next_message(&mut self, index: usize) {
        self.corrupt_next = Some(index);
    }

    pub fn verify(&self) -> ConsistencyReport {
        verify_consistency(&self.tree, &self.views)
    }

    /// A random payload encrypted under the current root key.
    pub fn probe(&mut self) -> SimCipherText {
        let root = self.tree.key(self.tree.root()).expect("root exists").clone();
        let payload = GroupKey {
            bits: BitString::random(self.tree.key_len(), &mut self.rng),
            key_id: KeyId(u64::MAX),
            version: 0,
        };
        encrypt(&root, &payload, self.nonces.next_nonce(), &mut ResourceCounters::default())
    }

    /// Runs `f` on a copy and commits it only on success.
    fn transact<F>(&mut self, f: F) -> Result<EventTrace, ProtocolError>
    where
        F: FnOnce(&mut Group) -> Result<EventTrace, ProtocolError>,
    {
        let mut next = self.clone();
        next.step += 1;
        let trace = f(&mut next)?;
        *self = next;
        Ok(trace)
    }

    pub fn join(&mut self, user: UserId) -> Result<EventTrace, ProtocolError> {
        if self.tree.contains_user(user) {
            return Err(ProtocolError::AlreadyMember(user));
        }
        let out = self.transact(|g| g.join_inner(user));
        self.corrupt_next = None;
        out
    }

    pub fn leave(&mut self, user: UserId) -> Result<EventTrace, ProtocolError> {
        if !self.tree.contains_user(user) {
            return Err(ProtocolError::NotMember(user));
        }
        if self.tree.len() < 2 {
            return Err(ProtocolError::GroupTooSmall(user));
        }
        let out = self.transact(|g| g.leave_inner(user));
        self.corrupt_next = None;
        out
    }

    fn snapshot(&self) -> Option<TreeSnapshot> {
        self.config.snapshots.then(|| self.tree.snapshot(self.config.reveal_keys))
    }

    fn agree(&mut self, key: KeyId, participants: Vec<ParticipantId>) -> Result<(BitString, SessionTrace), ProtocolError> {
        let mut cfg = QkaConfig::new(participants, self.tree.key_len()).xi(self.config.xi);
        cfg.schedule = self.config.schedule;
        cfg.decoy_policy = self.config.decoy_policy;
        let t = run_session_with(&cfg, &self.config.channel, &mut self.decoys, &mut self.rng)?;
        if let Some(cause) = t.abort {
            return Err(ProtocolError::Aborted { key, cause });
        }
        let bits = t.extracted_key.expect("completed sessions carry a key");
        let trace = SessionTrace {
            key_id: key,
            participants: t.participants,
            positions: t.positions,
            hops: t.hops,
            counters: t.counters,
        };
        Ok((bits, trace))
    }

    fn join_inner(&mut self, user: UserId) -> Result<EventTrace, ProtocolError> {
        let tree_before = self.snapshot();
        let update = self.tree.insert_user(user, &mut self.rng)?;
        let old_keys: BTreeMap<KeyId, GroupKey> = update
            .path
            .iter()
            .filter(|k| update.created != Some(**k))
            .map(|k| (*k, self.tree.key(*k).expect("path key").clone()))
            .collect();

        let mut counters = ResourceCounters::default();
        let mut sessions = Vec::with_capacity(update.path.len());
        let mut agreed = Vec::with_capacity(update.path.len());
        for k in &update.path {
            let (bits, s) = self.agree(*k, vec![ParticipantId::Server, ParticipantId::User(user)])?;
            counters += s.counters;
            sessions.push(s);
            agreed.push(self.tree.refresh_key(*k, bits)?);
        }

        let mut messages = build_join_messages(&self.tree, &old_keys, &update, &mut self.nonces, &mut counters)?;
        self.maybe_corrupt(&mut messages);

        let mut failures = Vec::new();
        if self.config.track_views {
            let mut view = UserView::new(user);
            view.install(self.tree.key(update.individual_key)?.clone());
            for k in agreed {
                view.install(k);
            }
            self.views.insert(user, view);
            failures = self.deliver(&messages, user);
        }

        Ok(EventTrace {
            event: GroupEvent { kind: EventKind::Join, user, timestamp: self.step },
            tree_before,
            sessions,
            agents: BTreeMap::new(),
            rekey_messages: messages,
            delivery_failures: failures,
            counters,
            stats: self.tree.stats(),
            tree_after: self.snapshot(),
            former_keys: Vec::new(),
        })
    }

    fn leave_inner(&mut self, user: UserId) -> Result<EventTrace, ProtocolError> {
        let tree_before = self.snapshot();
        let former_keys: Vec<GroupKey> = self
            .tree
            .keyset(user)?
            .into_iter()
            .map(|k| self.tree.key(k).cloned())
            .collect::<Result<_, _>>()?;
        let update = self.tree.remove_user(user)?;

        let mut counters = ResourceCounters::default();
        let mut sessions = Vec::with_capacity(update.path.len());
        let mut agents = BTreeMap::new();
        let mut agreed = Vec::with_capacity(update.path.len());
        for k in &update.path {
            let mut participants = vec![ParticipantId::Server];
            for c in self.tree.children(*k)?.to_vec() {
                let agent = match self.tree.owner(c)? {
                    Some(owner) => owner,
                    None => {
                        let i = self.rng.random_range(0..self.tree.members(c)?);
                        self.tree.nth_user(c, i)?
                    }
                };
                agents.insert(c, agent);
                participants.push(ParticipantId::User(agent));
            }
            let (bits, s) = self.agree(*k, participants)?;
            counters += s.counters;
            sessions.push(s);
            agreed.push(self.tree.refresh_key(*k, bits)?);
        }

        let mut messages = build_leave_messages(&self.tree, &update, &agents, &mut self.nonces, &mut counters)?;
        self.maybe_corrupt(&mut messages);

        let mut failures = Vec::new();
        if self.config.track_views {
            self.views.remove(&user);
            if !update.removed.is_empty() {
                let gone: BTreeSet<KeyId> = update.removed.iter().copied().collect();
                for v in self.views.values_mut() {
                    v.keys.retain(|k, _| !gone.contains(k));
                }
            }
            // Agents learn the new key from the session they took part in.
            for (i, k) in update.path.iter().enumerate() {
                let key = &agreed[i];
                for c in self.tree.children(*k)? {
                    if let Some(view) = self.views.get_mut(&agents[c]) {
                        view.install(key.clone());
                    }
                }
            }
            failures = self.deliver(&messages, user);
        }

        Ok(EventTrace {
            event: GroupEvent { kind: EventKind::Leave, user, timestamp: self.step },
            tree_before,
            sessions,
            agents,
            rekey_messages: messages,
            delivery_failures: failures,
            counters,
            stats: self.tree.stats(),
            tree_after: self.snapshot(),
            former_keys,
        })
    }

    fn maybe_corrupt(&mut self, messages: &mut [RekeyMessage]) {
        if let Some(i) = self.corrupt_next.take() {
            if let Some(item) = messages.get_mut(i).and_then(|m| m.items.first_mut()) {
                item.payload.flip(0);
            }
        }
    }

    fn deliver(&mut self, messages: &[RekeyMessage], skip: UserId) -> Vec<DeliveryFailure> {
        let mut failures = Vec::new();
        for (i, m) in messages.iter().enumerate() {
            for u in &m.recipients {
                if *u == skip {
                    continue;
                }
                let Some(view) = self.views.get_mut(u) else { continue };
                if let Err(e) = apply_rekey(view, m) {
                    failures.push(DeliveryFailure { user: *u, message: i, error: e.to_string() });
                }
            }
        }
        failures
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::EveStrategy;
    use crate::rekey::any_decrypts;

    fn fig3(config: ProtocolConfig) -> Group {
        Group::balanced(8, 3, config, 7).unwrap()
    }

    #[test]
    fn join_into_eight_user_tree() {
        let mut g = fig3(ProtocolConfig::default());
        let t = g.join(UserId(9)).unwrap();
        assert_eq!(t.keys_updated(), 2);
        assert_eq!(t.counters.qubits_prepared, 4);
        assert_eq!(t.counters.encryptions, 2);
        assert_eq!(t.rekey_messages.len(), 2);
        assert!(t.delivery_failures.is_empty());
        assert!(g.verify().is_consistent());
    }

    #[test]
    fn leave_from_nine_user_tree() {
        let mut g = Group::balanced(9, 3, ProtocolConfig::default(), 3).unwrap();
        let t = g.leave(UserId(9)).unwrap();
        let arities: Vec<usize> = t.sessions.iter().map(|s| s.participants.len()).collect();
        assert_eq!(arities, vec![3, 4]);
        assert_eq!(t.counters.qubits_prepared, 7);
        assert_eq!(t.rekey_messages.len(), 3);
        assert!(g.verify().is_consistent());
    }

    #[test]
    fn tiny_groups() {
        let mut g = Group::balanced(1, 2, ProtocolConfig::default(), 1).unwrap();
        assert_eq!(g.join(UserId(2)).unwrap().keys_updated(), 1);
        let t = g.leave(UserId(2)).unwrap();
        assert_eq!(t.sessions.len(), 1);
        assert_eq!(t.sessions[0].participants.len(), 2);
        assert!(t.rekey_messages.is_empty());
        assert!(g.verify().is_consistent());
        assert!(matches!(g.leave(UserId(1)), Err(ProtocolError::GroupTooSmall(_))));
        assert!(matches!(g.join(UserId(1)), Err(ProtocolError::AlreadyMember(_))));
    }

    #[test]
    fn abort_rolls_back() {
        let mut g = fig3(ProtocolConfig { xi: 1.0, ..ProtocolConfig::default() });
        let tree = g.tree().clone();
        let views = g.views().clone();
        g.set_channel(ChannelModel::tapped(EveStrategy::intercept_resend()));
        let mut aborted = false;
        for _ in 0..20 {
            match g.join(UserId(9)) {
                Err(e) => {
                    assert!(e.is_abort());
                    aborted = true;
                    assert_eq!(g.tree(), &tree);
                    assert_eq!(g.views(), &views);
                }
                Ok(_) => break,
            }
        }
        assert!(aborted);
    }

    #[test]
    fn corrupted_message_is_reported() {
        let mut g = fig3(ProtocolConfig::default());
        g.corrupt_next_message(0);
        let t = g.join(UserId(9)).unwrap();
        assert!(!t.delivery_failures.is_empty());
        assert!(!g.verify().is_consistent());
    }

    #[test]
    fn leaver_cannot_read_new_root() {
        let mut g = Group::balanced(27, 3, ProtocolConfig { key_len: 16, ..ProtocolConfig::default() }, 5).unwrap();
        let t = g.leave(UserId(4)).unwrap();
        assert!(t.ciphertexts().all(|ct| !any_decrypts(&t.former_keys, ct)));
        let probe = g.probe();
        assert!(!any_decrypts(&t.former_keys, &probe));
    }
}
