//! The tree key graph held by the key server.
//!
//! Each user (u-node) points at its individual k-node; k-nodes point at their
//! parent, up to the root whose key is the group key. A user's keyset is the
//! k-node path from its individual key to the root, and a k-node's userset is
//! every user below it.
//!
//! Structural policy:
//! * join attaches the new individual key under the non-full k-node with the
//!   fewest users (smallest id on ties). When every k-node is full, the
//!   first individual key of the smallest full leaf-parent is split: a fresh
//!   k-node takes its place and adopts it and the newcomer;
//! * leave removes the individual key, prunes k-nodes left without children
//!   and splices out k-nodes left with a single non-individual child. A
//!   k-node left with a single individual key stays, so a subgroup of one
//!   keeps its own key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Serialize, Serializer};

use crate::bits::BitString;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyTreeError {
    #[error("tree degree must be at least 2, got {0}")]
    InvalidDegree(usize),
    #[error("a key tree needs at least one user")]
    NoUsers,
    #[error("key length must be at least 1")]
    EmptyKey,
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("user {0} is already a member")]
    DuplicateUser(UserId),
    #[error("cannot remove {0}, the last member of the group")]
    LastMember(UserId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub u64);

/// Either kind of node in the key graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    User(UserId),
    Key(KeyId),
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::User(u) => u.fmt(f),
            NodeId::Key(k) => k.fmt(f),
        }
    }
}

impl Serialize for UserId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl Serialize for KeyId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Key material of one k-node at one version.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupKey {
    pub bits: BitString,
    pub key_id: KeyId,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct KeyNode {
    parent: Option<KeyId>,
    children: Vec<KeyId>,
    /// Set for individual keys, which have no children.
    owner: Option<UserId>,
    /// Users in this subtree.
    members: usize,
    key: GroupKey,
}

/// Where a joining user is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinPoint {
    /// Hang the new individual key under this k-node.
    Attach(KeyId),
    /// Replace this individual key by a fresh k-node holding it and the newcomer.
    Split(KeyId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinUpdate {
    pub user: UserId,
    pub individual_key: KeyId,
    /// Keys to refresh, leaf-parent first, root last.
    pub path: Vec<KeyId>,
    /// The k-node created by a split, if any (always `path[0]`).
    pub created: Option<KeyId>,
    /// Owner of the individual key moved under `created`.
    pub displaced: Option<UserId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveUpdate {
    pub user: UserId,
    /// The leaver's full keyset before removal, individual key first.
    pub former_keyset: Vec<KeyId>,
    /// Surviving keys of the former path, deepest first.
    pub path: Vec<KeyId>,
    /// Keys that no longer exist (the individual key plus any pruned or spliced k-node).
    pub removed: Vec<KeyId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TreeStats {
    pub users: usize,
    pub height: usize,
    pub degree: usize,
    pub keys: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyTree {
    degree: usize,
    key_len: usize,
    nodes: BTreeMap<KeyId, KeyNode>,
    users: BTreeMap<UserId, KeyId>,
    root: KeyId,
    next_key: u64,
}

impl KeyTree {
    /// Builds the most balanced `degree`-ary tree over `users`, in order, with
    /// random key material everywhere.
    pub fn build_balanced<R: Rng + ?Sized>(
        degree: usize,
        users: &[UserId],
        key_len: usize,
        rng: &mut R,
    ) -> Result<Self, KeyTreeError> {
        if degree < 2 {
            return Err(KeyTreeError::InvalidDegree(degree));
        }
        if users.is_empty() {
            return Err(KeyTreeError::NoUsers);
        }
        if key_len == 0 {
            return Err(KeyTreeError::EmptyKey);
        }
        let mut seen = BTreeSet::new();
        for u in users {
            if !seen.insert(*u) {
                return Err(KeyTreeError::DuplicateUser(*u));
            }
        }
        let mut tree = KeyTree {
            degree,
            key_len,
            nodes: BTreeMap::new(),
            users: BTreeMap::new(),
            root: KeyId(0),
            next_key: 1,
        };
        tree.root = tree.build_subtree(users, None, rng);
        Ok(tree)
    }

    fn build_subtree<R: Rng + ?Sized>(&mut self, users: &[UserId], parent: Option<KeyId>, rng: &mut R) -> KeyId {
        if let [user] = users {
            return self.new_individual(*user, parent, rng);
        }
        let id = self.new_internal(parent, rng);
        // Smallest full subtree that fits everyone, then as few children as possible.
        let mut reach = 1usize;
        while reach < users.len() {
            reach = reach.saturating_mul(self.degree);
        }
        let per_child = reach / self.degree;
        let chunks = users.len().div_ceil(per_child).min(self.degree);
        let base = users.len() / chunks;
        let extra = users.len() % chunks;
        let mut start = 0;
        for c in 0..chunks {
            let len = base + usize::from(c < extra);
            let child = self.build_subtree(&users[start..start + len], Some(id), rng);
            self.node_mut(id).children.push(child);
            start += len;
        }
        self.node_mut(id).members = users.len();
        id
    }

    /// Adds `delta` to the member count of `from` and all its ancestors.
    fn bump(&mut self, from: KeyId, delta: isize) {
        let mut cur = Some(from);
        while let Some(k) = cur {
            let n = self.node_mut(k);
            n.members = n.members.checked_add_signed(delta).expect("member count stays non-negative");
            cur = n.parent;
        }
    }

    fn alloc_id(&mut self) -> KeyId {
        let id = KeyId(self.next_key);
        self.next_key += 1;
        id
    }

    fn new_internal<R: Rng + ?Sized>(&mut self, parent: Option<KeyId>, rng: &mut R) -> KeyId {
        let id = self.alloc_id();
        let key = GroupKey { bits: BitString::random(self.key_len, rng), key_id: id, version: 0 };
        self.nodes.insert(id, KeyNode { parent, children: Vec::new(), owner: None, members: 0, key });
        id
    }

    fn new_individual<R: Rng + ?Sized>(&mut self, user: UserId, parent: Option<KeyId>, rng: &mut R) -> KeyId {
        let id = self.new_internal(parent, rng);
        let n = self.node_mut(id);
        n.owner = Some(user);
        n.members = 1;
        self.users.insert(user, id);
        id
    }

    fn node(&self, id: KeyId) -> &KeyNode {
        &self.nodes[&id]
    }

    fn node_mut(&mut self, id: KeyId) -> &mut KeyNode {
        self.nodes.get_mut(&id).expect("node exists")
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn root(&self) -> KeyId {
        self.root
    }

    /// Group size.
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn contains_user(&self, u: UserId) -> bool {
        self.users.contains_key(&u)
    }

    pub fn contains_key(&self, k: KeyId) -> bool {
        self.nodes.contains_key(&k)
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.users.keys().copied()
    }

    pub fn key_ids(&self) -> impl Iterator<Item = KeyId> + '_ {
        self.nodes.keys().copied()
    }

    /// Smallest user id not yet used by a member.
    pub fn next_free_user(&self) -> UserId {
        UserId(self.users.keys().next_back().map_or(1, |u| u.0 + 1))
    }

    pub fn key(&self, k: KeyId) -> Result<&GroupKey, KeyTreeError> {
        self.nodes.get(&k).map(|n| &n.key).ok_or(KeyTreeError::UnknownKey(k))
    }

    pub fn children(&self, k: KeyId) -> Result<&[KeyId], KeyTreeError> {
        self.nodes.get(&k).map(|n| n.children.as_slice()).ok_or(KeyTreeError::UnknownKey(k))
    }

    pub fn parent(&self, k: KeyId) -> Result<Option<KeyId>, KeyTreeError> {
        self.nodes.get(&k).map(|n| n.parent).ok_or(KeyTreeError::UnknownKey(k))
    }

    /// The user owning `k` if it is an individual key.
    pub fn owner(&self, k: KeyId) -> Result<Option<UserId>, KeyTreeError> {
        self.nodes.get(&k).map(|n| n.owner).ok_or(KeyTreeError::UnknownKey(k))
    }

    pub fn individual_key(&self, u: UserId) -> Result<KeyId, KeyTreeError> {
        self.users.get(&u).copied().ok_or(KeyTreeError::UnknownUser(u))
    }

    /// Keys held by `u`, from its individual key up to the root.
    pub fn keyset(&self, u: UserId) -> Result<Vec<KeyId>, KeyTreeError> {
        let mut cur = Some(self.individual_key(u)?);
        let mut path = Vec::new();
        while let Some(k) = cur {
            path.push(k);
            cur = self.node(k).parent;
        }
        Ok(path)
    }

    /// Number of edges from `u` to the root, which equals `|keyset(u)|`.
    pub fn depth(&self, u: UserId) -> Result<usize, KeyTreeError> {
        self.keyset(u).map(|p| p.len())
    }

    /// Users holding `k`.
    pub fn userset(&self, k: KeyId) -> Result<BTreeSet<UserId>, KeyTreeError> {
        self.userset_excluding(k, None)
    }

    /// Users holding `k` but not `skip` (a descendant of `k`).
    pub fn userset_excluding(&self, k: KeyId, skip: Option<KeyId>) -> Result<BTreeSet<UserId>, KeyTreeError> {
        if !self.nodes.contains_key(&k) {
            return Err(KeyTreeError::UnknownKey(k));
        }
        let mut out = Vec::with_capacity(self.node(k).members);
        let mut stack = vec![k];
        while let Some(id) = stack.pop() {
            if Some(id) == skip {
                continue;
            }
            let n = self.node(id);
            if let Some(u) = n.owner {
                out.push(u);
            }
            stack.extend(n.children.iter().copied());
        }
        Ok(out.into_iter().collect())
    }

    /// The `index`-th user under `k`, counting subtrees in child order.
    pub fn nth_user(&self, k: KeyId, mut index: usize) -> Result<UserId, KeyTreeError> {
        let mut cur = self.nodes.get(&k).ok_or(KeyTreeError::UnknownKey(k))?;
        if index >= cur.members {
            return Err(KeyTreeError::UnknownKey(k));
        }
        loop {
            if let Some(u) = cur.owner {
                return Ok(u);
            }
            for c in &cur.children {
                let child = self.node(*c);
                if index < child.members {
                    cur = child;
                    break;
                }
                index -= child.members;
            }
        }
    }

    pub fn members(&self, k: KeyId) -> Result<usize, KeyTreeError> {
        self.nodes.get(&k).map(|n| n.members).ok_or(KeyTreeError::UnknownKey(k))
    }

    /// Longest u-node to root path, in edges.
    pub fn height(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(self.root, 1usize)];
        while let Some((id, depth)) = stack.pop() {
            let n = self.node(id);
            if n.owner.is_some() {
                best = best.max(depth);
            }
            stack.extend(n.children.iter().map(|c| (*c, depth + 1)));
        }
        best
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats { users: self.len(), height: self.height(), degree: self.degree, keys: self.nodes.len() }
    }

    /// Users in every k-node's subtree.
    pub fn user_counts(&self) -> BTreeMap<KeyId, usize> {
        self.nodes.iter().map(|(id, n)| (*id, n.members)).collect()
    }

    /// Where the next joining user goes.
    pub fn join_point(&self) -> JoinPoint {
        let open = self
            .nodes
            .iter()
            .filter(|(_, n)| n.owner.is_none() && n.children.len() < self.degree)
            .min_by_key(|(id, n)| (n.members, **id));
        if let Some((id, _)) = open {
            return JoinPoint::Attach(*id);
        }
        let leaf_parent = self
            .nodes
            .iter()
            .filter(|(_, n)| n.children.iter().any(|c| self.node(*c).owner.is_some()))
            .min_by_key(|(id, n)| (n.members, **id));
        match leaf_parent {
            Some((_, n)) => {
                let first = n
                    .children
                    .iter()
                    .filter(|c| self.node(**c).owner.is_some())
                    .min()
                    .expect("leaf-parent has an individual child");
                JoinPoint::Split(*first)
            }
            // A single-user tree whose root is the user's individual key.
            None => JoinPoint::Split(self.root),
        }
    }

    /// Adds `user` at the join point. Returns the keys that must be refreshed.
    pub fn insert_user<R: Rng + ?Sized>(&mut self, user: UserId, rng: &mut R) -> Result<JoinUpdate, KeyTreeError> {
        if self.users.contains_key(&user) {
            return Err(KeyTreeError::DuplicateUser(user));
        }
        let (created, displaced) = match self.join_point() {
            JoinPoint::Attach(parent) => {
                let leaf = self.new_individual(user, Some(parent), rng);
                self.node_mut(parent).children.push(leaf);
                self.bump(parent, 1);
                (None, None)
            }
            JoinPoint::Split(sibling) => {
                let above = self.node(sibling).parent;
                let fresh = self.new_internal(above, rng);
                match above {
                    Some(p) => {
                        let slot = self
                            .node(p)
                            .children
                            .iter()
                            .position(|c| *c == sibling)
                            .expect("child listed under its parent");
                        self.node_mut(p).children[slot] = fresh;
                    }
                    None => self.root = fresh,
                }
                self.node_mut(sibling).parent = Some(fresh);
                let leaf = self.new_individual(user, Some(fresh), rng);
                self.node_mut(fresh).children = vec![sibling, leaf];
                self.node_mut(fresh).members = 1;
                self.bump(fresh, 1);
                (Some(fresh), self.node(sibling).owner)
            }
        };
        let keyset = self.keyset(user)?;
        Ok(JoinUpdate {
            user,
            individual_key: keyset[0],
            path: keyset[1..].to_vec(),
            created,
            displaced,
        })
    }

    /// Removes `user`, pruning and splicing as described in the module docs.
    pub fn remove_user(&mut self, user: UserId) -> Result<LeaveUpdate, KeyTreeError> {
        let leaf = self.individual_key(user)?;
        if self.users.len() == 1 {
            return Err(KeyTreeError::LastMember(user));
        }
        let former_keyset = self.keyset(user)?;
        let parent = self.node(leaf).parent.expect("a multi-user tree has an internal root");
        self.detach(parent, leaf);
        self.nodes.remove(&leaf);
        self.users.remove(&user);
        self.bump(parent, -1);

        let mut cur = parent;
        loop {
            let n = self.node(cur);
            if n.children.is_empty() {
                let up = n.parent.expect("root keeps at least one child");
                self.detach(up, cur);
                self.nodes.remove(&cur);
                cur = up;
                continue;
            }
            if let [only] = n.children[..] {
                if self.node(only).owner.is_none() {
                    self.splice(cur, only);
                }
            }
            break;
        }

        let (path, mut removed): (Vec<KeyId>, Vec<KeyId>) =
            former_keyset[1..].iter().partition(|k| self.nodes.contains_key(k));
        removed.insert(0, leaf);
        Ok(LeaveUpdate { user, former_keyset, path, removed })
    }

    fn detach(&mut self, parent: KeyId, child: KeyId) {
        self.node_mut(parent).children.retain(|c| *c != child);
    }

    /// Replaces `node` by its only child.
    fn splice(&mut self, node: KeyId, child: KeyId) {
        let above = self.node(node).parent;
        self.node_mut(child).parent = above;
        match above {
            Some(p) => {
                let slot = self.node(p).children.iter().position(|c| *c == node).expect("listed");
                self.node_mut(p).children[slot] = child;
            }
            None => self.root = child,
        }
        self.nodes.remove(&node);
    }

    /// Installs fresh key material at `k`, bumping its version.
    pub fn refresh_key(&mut self, k: KeyId, bits: BitString) -> Result<GroupKey, KeyTreeError> {
        let key_len = self.key_len;
        let node = self.nodes.get_mut(&k).ok_or(KeyTreeError::UnknownKey(k))?;
        assert_eq!(bits.len(), key_len, "key material of the wrong length");
        node.key.bits = bits;
        node.key.version += 1;
        Ok(node.key.clone())
    }

    /// Checks every structural invariant; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let root = self.nodes.get(&self.root).ok_or("root missing")?;
        if root.parent.is_some() {
            return Err(format!("root {} has a parent", self.root));
        }
        let mut reached = BTreeSet::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if !reached.insert(id) {
                return Err(format!("{id} reached twice"));
            }
            let n = self.nodes.get(&id).ok_or_else(|| format!("dangling child {id}"))?;
            if n.key.key_id != id {
                return Err(format!("{id} stores key material of {}", n.key.key_id));
            }
            let expected = match n.owner {
                Some(_) => 1,
                None => n.children.iter().filter_map(|c| self.nodes.get(c)).map(|c| c.members).sum(),
            };
            if n.members != expected {
                return Err(format!("{id} counts {} members, children hold {expected}", n.members));
            }
            if n.key.bits.len() != self.key_len {
                return Err(format!("{id} has a {}-bit key", n.key.bits.len()));
            }
            match n.owner {
                Some(u) => {
                    if !n.children.is_empty() {
                        return Err(format!("individual key {id} has children"));
                    }
                    if self.users.get(&u) != Some(&id) {
                        return Err(format!("{u} does not point at its individual key {id}"));
                    }
                }
                None => {
                    if n.children.is_empty() || n.children.len() > self.degree {
                        return Err(format!("{id} has {} children (degree {})", n.children.len(), self.degree));
                    }
                    if let [only] = n.children[..] {
                        if self.node(only).owner.is_none() {
                            return Err(format!("{id} has a single non-individual child"));
                        }
                    }
                }
            }
            for c in &n.children {
                if self.nodes.get(c).and_then(|cn| cn.parent) != Some(id) {
                    return Err(format!("{c} does not point back at {id}"));
                }
                stack.push(*c);
            }
        }
        if reached.len() != self.nodes.len() {
            return Err(format!("{} of {} k-nodes unreachable", self.nodes.len() - reached.len(), self.nodes.len()));
        }
        for (u, leaf) in &self.users {
            if self.nodes.get(leaf).and_then(|n| n.owner) != Some(*u) {
                return Err(format!("{u} points at {leaf}, which it does not own"));
            }
        }
        // keyset/userset duality.
        let mut holders: BTreeMap<KeyId, BTreeSet<UserId>> = BTreeMap::new();
        for u in self.users.keys() {
            let ks = self.keyset(*u).map_err(|e| e.to_string())?;
            for k in ks {
                holders.entry(k).or_default().insert(*u);
            }
        }
        for k in self.nodes.keys() {
            let us = self.userset(*k).map_err(|e| e.to_string())?;
            if holders.get(k).cloned().unwrap_or_default() != us {
                return Err(format!("keyset/userset mismatch at {k}"));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, reveal_keys: bool) -> TreeSnapshot {
        TreeSnapshot {
            root: self.root,
            stats: self.stats(),
            nodes: self
                .nodes
                .iter()
                .map(|(id, n)| NodeSnapshot {
                    id: *id,
                    parent: n.parent,
                    children: n.children.clone(),
                    user: n.owner,
                    version: n.key.version,
                    bits: reveal_keys.then(|| n.key.bits.clone()),
                })
                .collect(),
        }
    }
}

/// Serializable view of the tree; key material is only present when revealed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeSnapshot {
    pub root: KeyId,
    pub stats: TreeStats,
    pub nodes: Vec<NodeSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSnapshot {
    pub id: KeyId,
    pub parent: Option<KeyId>,
    pub children: Vec<KeyId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user: Option<UserId>,
    pub version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<BitString>,
}

/// `UserId(1)..=UserId(n)`.
pub fn numbered_users(n: usize) -> Vec<UserId> {
    (1..=n as u64).map(UserId).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn tree(d: usize, n: usize) -> KeyTree {
        KeyTree::build_balanced(d, &numbered_users(n), 4, &mut rng()).unwrap()
    }

    fn leaf_parent(t: &KeyTree, u: u64) -> KeyId {
        t.keyset(UserId(u)).unwrap()[1]
    }

    #[test]
    fn build_errors() {
        let mut r = rng();
        assert_eq!(
            KeyTree::build_balanced(1, &numbered_users(3), 1, &mut r),
            Err(KeyTreeError::InvalidDegree(1))
        );
        assert_eq!(KeyTree::build_balanced(2, &[], 1, &mut r), Err(KeyTreeError::NoUsers));
        assert_eq!(
            KeyTree::build_balanced(2, &[UserId(1), UserId(1)], 1, &mut r),
            Err(KeyTreeError::DuplicateUser(UserId(1)))
        );
    }

    #[test]
    fn nine_user_tree_shape() {
        let t = tree(3, 9);
        t.validate().unwrap();
        assert_eq!(t.height(), 3);
        assert_eq!(t.stats().keys, 13);
        let ks = t.keyset(UserId(9)).unwrap();
        assert_eq!(ks.len(), 3);
        assert_eq!(*ks.last().unwrap(), t.root());
        let k789 = ks[1];
        assert_eq!(t.userset(k789).unwrap(), [7, 8, 9].map(UserId).into());
        assert_eq!(t.userset(t.root()).unwrap().len(), 9);
        assert_eq!(t.userset(ks[0]).unwrap(), [UserId(9)].into());
    }

    #[test]
    fn single_user_tree_is_root_only() {
        let t = tree(2, 1);
        assert_eq!(t.height(), 1);
        assert_eq!(t.keyset(UserId(1)).unwrap(), vec![t.root()]);
        assert_eq!(t.join_point(), JoinPoint::Split(t.root()));
    }

    #[test]
    fn full_tree_key_counts() {
        let t = tree(4, 64);
        assert_eq!(t.height(), 4);
        assert_eq!(t.stats().keys, 85);
        for (d, h) in [(2usize, 4u32), (3, 3), (5, 2)] {
            let n = d.pow(h - 1);
            let t = tree(d, n);
            assert_eq!(t.height() as u32, h);
            assert_eq!(t.stats().keys, (d.pow(h) - 1) / (d - 1));
        }
    }

    #[test]
    fn join_point_of_eight_user_tree() {
        let t = tree(3, 8);
        let k78 = leaf_parent(&t, 7);
        assert_eq!(t.userset(k78).unwrap(), [7, 8].map(UserId).into());
        assert_eq!(t.join_point(), JoinPoint::Attach(k78));
    }

    #[test]
    fn insert_into_open_slot() {
        let mut t = tree(3, 8);
        let k78 = leaf_parent(&t, 7);
        let up = t.insert_user(UserId(9), &mut rng()).unwrap();
        assert_eq!(up.path, vec![k78, t.root()]);
        assert_eq!(up.created, None);
        assert_eq!(t.keyset(UserId(9)).unwrap()[1..], up.path[..]);
        t.validate().unwrap();
        assert_eq!(t.insert_user(UserId(9), &mut rng()), Err(KeyTreeError::DuplicateUser(UserId(9))));
    }

    #[test]
    fn full_binary_tree_splits_smallest_id_leaf_parent() {
        let mut t = tree(2, 4);
        let lp1 = leaf_parent(&t, 1);
        let lp3 = leaf_parent(&t, 3);
        assert!(lp1 < lp3);
        let k1 = t.individual_key(UserId(1)).unwrap();
        assert_eq!(t.join_point(), JoinPoint::Split(k1));
        let up = t.insert_user(UserId(5), &mut rng()).unwrap();
        let fresh = up.created.unwrap();
        assert_eq!(up.displaced, Some(UserId(1)));
        assert_eq!(t.parent(fresh).unwrap(), Some(lp1));
        assert_eq!(up.path, vec![fresh, lp1, t.root()]);
        assert_eq!(t.userset(fresh).unwrap(), [1, 5].map(UserId).into());
        t.validate().unwrap();
    }

    #[test]
    fn join_into_single_user_tree() {
        let mut t = tree(3, 1);
        let old_root = t.root();
        let up = t.insert_user(UserId(2), &mut rng()).unwrap();
        assert_eq!(up.path, vec![t.root()]);
        assert_eq!(t.parent(old_root).unwrap(), Some(t.root()));
        assert_eq!(t.height(), 2);
        t.validate().unwrap();
    }

    #[test]
    fn remove_from_nine_user_tree() {
        let mut t = tree(3, 9);
        let before = t.keyset(UserId(9)).unwrap();
        let up = t.remove_user(UserId(9)).unwrap();
        assert_eq!(up.path, before[1..].to_vec());
        assert_eq!(up.removed, vec![before[0]]);
        assert_eq!(t.userset(before[1]).unwrap(), [7, 8].map(UserId).into());
        t.validate().unwrap();
        assert_eq!(t.remove_user(UserId(9)), Err(KeyTreeError::UnknownUser(UserId(9))));
    }

    #[test]
    fn removing_last_of_subgroup_merges_parent() {
        // d=2, 8 users: removing u1 and u2 empties their leaf-parent, whose
        // parent is then left with a single internal child and is spliced out.
        let mut t = tree(2, 8);
        let lp12 = leaf_parent(&t, 1);
        let mid = t.parent(lp12).unwrap().unwrap();
        t.remove_user(UserId(1)).unwrap();
        t.validate().unwrap();
        assert!(t.contains_key(lp12));
        let up = t.remove_user(UserId(2)).unwrap();
        t.validate().unwrap();
        assert!(!t.contains_key(lp12));
        assert!(!t.contains_key(mid));
        assert_eq!(up.path, vec![t.root()]);
        assert_eq!(t.depth(UserId(3)).unwrap(), 3);
    }

    #[test]
    fn two_user_leave_keeps_root() {
        let mut t = tree(2, 2);
        let root = t.root();
        let up = t.remove_user(UserId(2)).unwrap();
        assert_eq!(up.path, vec![root]);
        assert_eq!(t.children(root).unwrap().len(), 1);
        t.validate().unwrap();
        assert_eq!(t.remove_user(UserId(1)), Err(KeyTreeError::LastMember(UserId(1))));
    }

    #[test]
    fn refresh_bumps_version() {
        let mut t = tree(2, 4);
        let root = t.root();
        let v0 = t.key(root).unwrap().version;
        let k = t.refresh_key(root, BitString::zeros(4)).unwrap();
        assert_eq!(k.version, v0 + 1);
        assert_eq!(t.key(KeyId(999)), Err(KeyTreeError::UnknownKey(KeyId(999))));
    }

    #[test]
    fn snapshot_redacts_by_default() {
        let t = tree(2, 2);
        assert!(t.snapshot(false).nodes.iter().all(|n| n.bits.is_none()));
        assert!(t.snapshot(true).nodes.iter().all(|n| n.bits.is_some()));
    }
}
