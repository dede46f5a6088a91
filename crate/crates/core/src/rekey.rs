//! Distribution-phase rekey messages: new keys encrypted under keys the recipients already hold.
//!
//! The cipher here is a stand-in for a real authenticated cipher and makes
//! no security claim. For a key `K = (bits, key_id, version)` and a nonce:
//!
//! * keystream block `i` = `SHA-256("qgka-sim/ks" || K || nonce || i)`,
//!   consumed MSB-first, XORed into the plaintext bits;
//! * tag = first 16 bytes of
//!   `SHA-256("qgka-sim/tag" || K || nonce || wrapped id || wrapped version || ciphertext)`.
//!
//! `K` is encoded as `key_id || version || bit length || packed bits`, all
//! integers big-endian `u64`. Decryption recomputes the tag with the offered
//! key, so anything but the exact `(bits, key_id, version)` is rejected.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::bits::BitString;
use crate::counters::ResourceCounters;
use crate::keytree::{GroupKey, JoinUpdate, KeyId, KeyTree, KeyTreeError, LeaveUpdate, UserId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RekeyError {
    #[error("authentication failed for item wrapped under {key_id} v{version}")]
    Authentication { key_id: KeyId, version: u64 },
    #[error("{user} is addressed but does not hold {key_id} v{version}")]
    MissingKey { user: UserId, key_id: KeyId, version: u64 },
    #[error("no old key available to wrap {0}")]
    NoWrappingKey(KeyId),
    #[error(transparent)]
    Tree(#[from] KeyTreeError),
}

pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SimCipherText {
    /// Key used for encryption.
    pub key_id: KeyId,
    pub key_version: u64,
    pub nonce: u64,
    /// Identity of the wrapped key.
    pub wraps_id: KeyId,
    pub wraps_version: u64,
    pub payload: BitString,
    pub tag: [u8; TAG_LEN],
}

impl Serialize for SimCipherText {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("SimCipherText", 7)?;
        st.serialize_field("key_id", &self.key_id)?;
        st.serialize_field("key_version", &self.key_version)?;
        st.serialize_field("nonce", &self.nonce)?;
        st.serialize_field("wraps_id", &self.wraps_id)?;
        st.serialize_field("wraps_version", &self.wraps_version)?;
        st.serialize_field("payload", &self.payload)?;
        let tag: String = self.tag.iter().map(|b| format!("{b:02x}")).collect();
        st.serialize_field("tag", &tag)?;
        st.end()
    }
}

fn absorb_key(h: &mut Sha256, key: &GroupKey) {
    h.update(key.key_id.0.to_be_bytes());
    h.update(key.version.to_be_bytes());
    h.update((key.bits.len() as u64).to_be_bytes());
    h.update(key.bits.to_bytes());
}

fn keystream(key: &GroupKey, nonce: u64, len: usize) -> BitString {
    let mut out = BitString::default();
    let mut block = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(b"qgka-sim/ks");
        absorb_key(&mut h, key);
        h.update(nonce.to_be_bytes());
        h.update(block.to_be_bytes());
        for byte in h.finalize().iter() {
            for i in 0..8 {
                if out.len() == len {
                    break;
                }
                out.push(byte & (0x80 >> i) != 0);
            }
        }
        block += 1;
    }
    out
}

fn tag(key: &GroupKey, nonce: u64, wraps_id: KeyId, wraps_version: u64, payload: &BitString) -> [u8; TAG_LEN] {
    let mut h = Sha256::new();
    h.update(b"qgka-sim/tag");
    absorb_key(&mut h, key);
    h.update(nonce.to_be_bytes());
    h.update(wraps_id.0.to_be_bytes());
    h.update(wraps_version.to_be_bytes());
    h.update((payload.len() as u64).to_be_bytes());
    h.update(payload.to_bytes());
    let digest = h.finalize();
    let mut out = [0u8; TAG_LEN];
    out.copy_from_slice(&digest[..TAG_LEN]);
    out
}

/// Encrypts `new_key` under `key` and counts one encryption.
pub fn encrypt(key: &GroupKey, new_key: &GroupKey, nonce: u64, counters: &mut ResourceCounters) -> SimCipherText {
    counters.encryptions += 1;
    let payload = &new_key.bits ^ &keystream(key, nonce, new_key.bits.len());
    SimCipherText {
        key_id: key.key_id,
        key_version: key.version,
        nonce,
        wraps_id: new_key.key_id,
        wraps_version: new_key.version,
        tag: tag(key, nonce, new_key.key_id, new_key.version, &payload),
        payload,
    }
}

pub fn decrypt(ct: &SimCipherText, key: &GroupKey) -> Result<GroupKey, RekeyError> {
    let expected = tag(key, ct.nonce, ct.wraps_id, ct.wraps_version, &ct.payload);
    if expected != ct.tag {
        return Err(RekeyError::Authentication { key_id: ct.key_id, version: ct.key_version });
    }
    Ok(GroupKey {
        bits: &ct.payload ^ &keystream(key, ct.nonce, ct.payload.len()),
        key_id: ct.wraps_id,
        version: ct.wraps_version,
    })
}

/// Monotone nonce counter owned by the key server.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NonceSource(u64);

impl NonceSource {
    pub fn next_nonce(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RekeyMessage {
    pub recipients: BTreeSet<UserId>,
    pub items: Vec<SimCipherText>,
}

/// Join distribution.
///
/// With the refreshed path `k_0` (root) .. `k_m` (deepest), the users in
/// `userset(k_j) - userset(k_{j+1})` receive `{k_0'}_{k_0} .. {k_j'}_{k_j}`.
/// Each new key is encrypted once under its old version; a k-node created by
/// a split has no old version and is wrapped under the displaced user's
/// individual key instead.
///
/// `old_keys` holds the pre-refresh keys of the existing path nodes; `tree`
/// must already carry the new keys.
pub fn build_join_messages(
    tree: &KeyTree,
    old_keys: &BTreeMap<KeyId, GroupKey>,
    update: &JoinUpdate,
    nonces: &mut NonceSource,
    counters: &mut ResourceCounters,
) -> Result<Vec<RekeyMessage>, RekeyError> {
    let path: Vec<KeyId> = update.path.iter().rev().copied().collect();
    let mut items = Vec::with_capacity(path.len());
    for k in &path {
        let wrap = match old_keys.get(k) {
            Some(old) => old.clone(),
            None if update.created == Some(*k) => {
                let displaced = update.displaced.ok_or(RekeyError::NoWrappingKey(*k))?;
                tree.key(tree.individual_key(displaced)?)?.clone()
            }
            None => return Err(RekeyError::NoWrappingKey(*k)),
        };
        items.push(encrypt(&wrap, tree.key(*k)?, nonces.next_nonce(), counters));
    }
    let mut messages = Vec::new();
    for (j, k) in path.iter().enumerate() {
        let mut recipients = tree.userset_excluding(*k, path.get(j + 1).copied())?;
        recipients.remove(&update.user);
        if recipients.is_empty() {
            continue;
        }
        messages.push(RekeyMessage { recipients, items: items[..=j].to_vec() });
    }
    counters.rekey_messages += messages.len() as u64;
    Ok(messages)
}

/// Leave distribution.
///
/// For every refreshed key `k_j` (deepest first) and every child `c` of it,
/// the members of `userset(c)` other than the agent that represented `c` in
/// the key agreement get `{k_j'}_{c}`, where `c` is at its current version.
/// `agents` maps each child key to its agent.
pub fn build_leave_messages(
    tree: &KeyTree,
    update: &LeaveUpdate,
    agents: &BTreeMap<KeyId, UserId>,
    nonces: &mut NonceSource,
    counters: &mut ResourceCounters,
) -> Result<Vec<RekeyMessage>, RekeyError> {
    let mut messages = Vec::new();
    for k in &update.path {
        for c in tree.children(*k)? {
            let mut recipients = tree.userset(*c)?;
            recipients.remove(&update.user);
            if let Some(agent) = agents.get(c) {
                recipients.remove(agent);
            }
            if recipients.is_empty() {
                continue;
            }
            let ct = encrypt(tree.key(*c)?, tree.key(*k)?, nonces.next_nonce(), counters);
            messages.push(RekeyMessage { recipients, items: vec![ct] });
        }
    }
    counters.rekey_messages += messages.len() as u64;
    Ok(messages)
}

/// A member's own copy of its keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserView {
    pub user: UserId,
    pub keys: BTreeMap<KeyId, GroupKey>,
}

impl UserView {
    pub fn new(user: UserId) -> Self {
        Self { user, keys: BTreeMap::new() }
    }

    /// Projection of the server tree onto `user`'s keyset.
    pub fn from_tree(tree: &KeyTree, user: UserId) -> Result<Self, KeyTreeError> {
        let mut v = Self::new(user);
        for k in tree.keyset(user)? {
            v.install(tree.key(k)?.clone());
        }
        Ok(v)
    }

    pub fn install(&mut self, key: GroupKey) {
        self.keys.insert(key.key_id, key);
    }

    pub fn holds(&self, key_id: KeyId, version: u64) -> Option<&GroupKey> {
        self.keys.get(&key_id).filter(|k| k.version == version)
    }
}

/// Decrypts and installs every item of `message` addressed to `view`.
/// Returns the number of keys installed (0 for non-recipients).
pub fn apply_rekey(view: &mut UserView, message: &RekeyMessage) -> Result<usize, RekeyError> {
    if !message.recipients.contains(&view.user) {
        return Ok(0);
    }
    let mut fresh = Vec::with_capacity(message.items.len());
    for item in &message.items {
        let key = view.holds(item.key_id, item.key_version).ok_or(RekeyError::MissingKey {
            user: view.user,
            key_id: item.key_id,
            version: item.key_version,
        })?;
        fresh.push(decrypt(item, key)?);
    }
    let installed = fresh.len();
    for k in fresh {
        view.install(k);
    }
    Ok(installed)
}

/// Whether any of `keys` opens `ct`, regardless of the key ids they claim.
pub fn any_decrypts<'a>(keys: impl IntoIterator<Item = &'a GroupKey>, ct: &SimCipherText) -> bool {
    keys.into_iter().any(|k| decrypt(ct, k).is_ok())
}
