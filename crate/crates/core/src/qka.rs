//! Two-party and multi-party quantum key agreement sessions.
//!
//! The server prepares one GHZ state per key position and hands one particle
//! to every other participant. Each position has a leader chosen round-robin;
//! the leader encodes its operation-key bit with any of the four Paulis
//! (parity-dependent grouping), followers use I for 0 and X for 1. Followers
//! send their particles to the leader, who measures and publishes the
//! outcome. Every participant then recovers all operation-key bits and XORs
//! them into the shared key bit. All quantum hops carry decoy qubits that the
//! receiver checks before the protocol continues.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::adversary::EveStrategy;
use crate::bits::BitString;
use crate::counters::ResourceCounters;
use crate::keytree::UserId;
use crate::quantum::{decoy_measure, DecoyKind, DecoyQubit, EntangledState, MeasurementOutcome, PauliOp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QkaError {
    #[error("a session needs at least 2 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("participant {0} appears more than once")]
    DuplicateParticipant(ParticipantId),
    #[error("the server must be the first participant")]
    ServerNotFirst,
    #[error("key length must be at least 1")]
    EmptyKey,
    #[error("decoy proportion {0} is outside [0, 1]")]
    InvalidXi(f64),
    #[error("operation keys must be one {expected}-bit string per participant")]
    OperationKeyShape { expected: usize },
    #[error("leader index {0} is not a participant")]
    BadLeader(usize),
    #[error("outcome is inconsistent with participant {participant}'s own operation {op}")]
    Tamper { participant: usize, op: PauliOp },
    #[error("follower {participant} applied {op}, which encodes no follower bit")]
    InvalidFollowerOp { participant: usize, op: PauliOp },
}

/// A session participant: the key server or a group member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParticipantId {
    Server,
    User(UserId),
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParticipantId::Server => f.write_str("server"),
            ParticipantId::User(u) => write!(f, "{u}"),
        }
    }
}

impl Serialize for ParticipantId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Follower,
}

/// Parity of the participant count, server included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of(participants: usize) -> Self {
        if participants.is_multiple_of(2) {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// Chooses the Pauli op that encodes `key_bit`.
///
/// Followers use I/X. Leaders pick uniformly between the two ops of the
/// requested class: `{I,X}`/`{Y,Z}` for an even participant count and
/// `{I,Y}`/`{X,Z}` for an odd one.
pub fn encode_op<R: Rng + ?Sized>(key_bit: bool, role: Role, parity: Parity, rng: &mut R) -> PauliOp {
    match role {
        Role::Follower => {
            if key_bit {
                PauliOp::X
            } else {
                PauliOp::I
            }
        }
        Role::Leader => {
            let pick = rng.random::<bool>();
            match (parity, key_bit) {
                (Parity::Even, false) => [PauliOp::I, PauliOp::X][pick as usize],
                (Parity::Even, true) => [PauliOp::Y, PauliOp::Z][pick as usize],
                (Parity::Odd, false) => [PauliOp::I, PauliOp::Y][pick as usize],
                (Parity::Odd, true) => [PauliOp::X, PauliOp::Z][pick as usize],
            }
        }
    }
}

/// The operation-key bit a leader op stands for.
pub fn leader_bit(op: PauliOp, parity: Parity) -> bool {
    match parity {
        Parity::Even => op.flips_phase(),
        Parity::Odd => op.flips_bit() ^ op.flips_phase(),
    }
}

/// The operation-key bit a follower op stands for, if it is a follower op.
pub fn follower_bit(op: PauliOp) -> Option<bool> {
    match op {
        PauliOp::I => Some(false),
        PauliOp::X => Some(true),
        PauliOp::Y | PauliOp::Z => None,
    }
}

/// How positions are assigned to leaders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LeaderSchedule {
    /// Position `i` is led by participant `i mod P`.
    #[default]
    RoundRobin,
    /// One participant leads every position.
    Fixed(usize),
}

impl LeaderSchedule {
    pub fn leader(self, participants: usize, position: usize) -> usize {
        match self {
            LeaderSchedule::RoundRobin => leader_schedule(participants, position),
            LeaderSchedule::Fixed(i) => i,
        }
    }
}

/// Round-robin leader index for `position`; earlier participants take the
/// extra positions when the key length is not a multiple of the count.
pub fn leader_schedule(participants: usize, position: usize) -> usize {
    assert!(participants > 0, "leader schedule over an empty participant list");
    position % participants
}

/// What one participant recovers from a published outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    /// Operation-key bit of every participant, in session order.
    pub operation_bits: Vec<bool>,
    pub shared_bit: bool,
}

/// Recovers every participant's operation-key bit from a published outcome.
///
/// `outcome[0]` carries the relative sign (only the leader contributes a
/// phase flip), `outcome[j]` for `j >= 1` is the bit-flip pattern of qubit
/// `j` relative to qubit 0. Knowing its own op, any participant can undo the
/// relative encoding and read off everyone's bits.
pub fn extract_key(
    outcome: &MeasurementOutcome,
    self_op: PauliOp,
    self_index: usize,
    leader_index: usize,
    parity: Parity,
) -> Result<Extraction, QkaError> {
    let p = outcome.len();
    if leader_index >= p {
        return Err(QkaError::BadLeader(leader_index));
    }
    assert!(self_index < p, "participant index outside the outcome");
    let relative = |j: usize| if j == 0 { false } else { outcome.bits[j] };
    let sign = outcome.sign_bit();

    if self_index == leader_index {
        if self_op.flips_phase() != sign {
            return Err(QkaError::Tamper { participant: self_index, op: self_op });
        }
    } else if follower_bit(self_op).is_none() {
        return Err(QkaError::InvalidFollowerOp { participant: self_index, op: self_op });
    }

    let x0 = self_op.flips_bit() ^ relative(self_index);
    let operation_bits: Vec<bool> = (0..p)
        .map(|j| {
            let x = relative(j) ^ x0;
            if j == leader_index {
                match parity {
                    Parity::Even => sign,
                    Parity::Odd => x ^ sign,
                }
            } else {
                x
            }
        })
        .collect();
    let shared_bit = operation_bits.iter().fold(false, |a, b| a ^ b);
    Ok(Extraction { operation_bits, shared_bit })
}

/// How many decoys accompany a quantum sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DecoyPolicy {
    /// `ceil(xi * payload)` decoys per sequence.
    PerHopCeil,
    /// Fractional decoy credit carries over to the next sequence, so the
    /// running total is always `floor(xi * cumulative payload)`.
    #[default]
    Carry,
}

/// Stateful decoy counter. Share one across the sessions of a run to make
/// `DecoyPolicy::Carry` accumulate over the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoyAllocator {
    policy: DecoyPolicy,
    xi: f64,
    credit: f64,
}

const DECOY_EPS: f64 = 1e-9;

impl DecoyAllocator {
    pub fn new(policy: DecoyPolicy, xi: f64) -> Self {
        Self { policy, xi, credit: 0.0 }
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn decoys_for(&mut self, payload: usize) -> usize {
        let exact = self.xi * payload as f64;
        match self.policy {
            DecoyPolicy::PerHopCeil => (exact - DECOY_EPS).ceil().max(0.0) as usize,
            DecoyPolicy::Carry => {
                self.credit += exact;
                let whole = (self.credit + DECOY_EPS).floor().max(0.0);
                self.credit -= whole;
                whole as usize
            }
        }
    }
}

/// A dishonest participant that publishes forged outcomes at the positions it leads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DishonestLeader {
    pub participant: usize,
    /// Key bit the attacker wants at every position it leads.
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkaConfig {
    /// Server first.
    pub participants: Vec<ParticipantId>,
    pub key_len: usize,
    pub xi: f64,
    pub seed: u64,
    pub decoy_policy: DecoyPolicy,
    pub schedule: LeaderSchedule,
    /// Fixed operation keys, one per participant; random when absent.
    pub operation_keys: Option<Vec<BitString>>,
    pub dishonest: Option<DishonestLeader>,
}

impl QkaConfig {
    pub fn new(participants: Vec<ParticipantId>, key_len: usize) -> Self {
        Self {
            participants,
            key_len,
            xi: 0.0,
            seed: 0,
            decoy_policy: DecoyPolicy::default(),
            schedule: LeaderSchedule::RoundRobin,
            operation_keys: None,
            dishonest: None,
        }
    }

    /// Server plus users `1..=users`.
    pub fn with_users(users: usize, key_len: usize) -> Self {
        let mut participants = vec![ParticipantId::Server];
        participants.extend((1..=users as u64).map(|u| ParticipantId::User(UserId(u))));
        Self::new(participants, key_len)
    }

    pub fn xi(mut self, xi: f64) -> Self {
        self.xi = xi;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), QkaError> {
        let p = self.participants.len();
        if p < 2 {
            return Err(QkaError::TooFewParticipants(p));
        }
        if self.participants[0] != ParticipantId::Server {
            return Err(QkaError::ServerNotFirst);
        }
        let mut seen = BTreeSet::new();
        for id in &self.participants {
            if !seen.insert(*id) {
                return Err(QkaError::DuplicateParticipant(*id));
            }
        }
        if self.key_len == 0 {
            return Err(QkaError::EmptyKey);
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(QkaError::InvalidXi(self.xi));
        }
        if let Some(keys) = &self.operation_keys {
            if keys.len() != p || keys.iter().any(|k| k.len() != self.key_len) {
                return Err(QkaError::OperationKeyShape { expected: self.key_len });
            }
        }
        if let LeaderSchedule::Fixed(i) = self.schedule {
            if i >= p {
                return Err(QkaError::BadLeader(i));
            }
        }
        Ok(())
    }
}

/// The quantum channel between participants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub eve: EveStrategy,
    /// A hop aborts when its decoy error rate exceeds this value.
    pub error_threshold: f64,
}

impl ChannelModel {
    pub fn honest() -> Self {
        Self { eve: EveStrategy::none(), error_threshold: 0.0 }
    }

    pub fn tapped(eve: EveStrategy) -> Self {
        Self { eve, error_threshold: 0.0 }
    }

    pub fn transmit<R: Rng + ?Sized>(&self, decoy: DecoyQubit, rng: &mut R) -> DecoyQubit {
        self.eve.tap(decoy, rng).0
    }
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self::honest()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum AbortCause {
    Eavesdropper { from: usize, to: usize, errors: usize, decoys: usize },
    Tamper { participant: usize, position: usize },
    Disagreement { position: usize },
}

impl fmt::Display for AbortCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortCause::Eavesdropper { from, to, errors, decoys } => write!(
                f,
                "eavesdropper detected on hop {from}->{to}: {errors}/{decoys} decoy errors"
            ),
            AbortCause::Tamper { participant, position } => {
                write!(f, "participant {participant} detected a forged outcome at position {position}")
            }
            AbortCause::Disagreement { position } => {
                write!(f, "participants disagree on the key bit at position {position}")
            }
        }
    }
}

/// One quantum sequence sent between two participants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HopRecord {
    pub from: usize,
    pub to: usize,
    pub payload: usize,
    pub decoys: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositionRecord {
    pub leader: usize,
    pub ops: Vec<PauliOp>,
    /// What the leader actually measured.
    #[serde(skip)]
    pub measured: MeasurementOutcome,
    /// What the leader announced.
    pub outcome: MeasurementOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QkaTranscript {
    pub participants: Vec<ParticipantId>,
    pub positions: Vec<PositionRecord>,
    pub hops: Vec<HopRecord>,
    #[serde(skip)]
    pub operation_keys: Vec<BitString>,
    /// Agreed key, absent when the session aborted.
    #[serde(skip)]
    pub extracted_key: Option<BitString>,
    pub counters: ResourceCounters,
    pub abort: Option<AbortCause>,
}

impl QkaTranscript {
    pub fn aborted(&self) -> bool {
        self.abort.is_some()
    }

    /// XOR of all participants' operation keys.
    pub fn xor_of_operation_keys(&self) -> BitString {
        let mut acc = BitString::zeros(self.operation_keys.first().map_or(0, BitString::len));
        for k in &self.operation_keys {
            acc = &acc ^ k;
        }
        acc
    }
}

/// Runs a session with its own RNG (from `config.seed`) and decoy allocator.
pub fn run_session(config: &QkaConfig, channel: &ChannelModel) -> Result<QkaTranscript, QkaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut decoys = DecoyAllocator::new(config.decoy_policy, config.xi);
    run_session_with(config, channel, &mut decoys, &mut rng)
}

/// Runs a session drawing randomness from `rng` and decoy counts from `decoys`.
///
/// `config.seed` and `config.decoy_policy` are ignored here. Configuration
/// errors are returned as `Err`; protocol failures (eavesdropping, forged
/// outcomes) come back as a transcript with `abort` set.
pub fn run_session_with<R: Rng + ?Sized>(
    config: &QkaConfig,
    channel: &ChannelModel,
    decoys: &mut DecoyAllocator,
    rng: &mut R,
) -> Result<QkaTranscript, QkaError> {
    config.validate()?;
    let p = config.participants.len();
    let n = config.key_len;
    let parity = Parity::of(p);

    let operation_keys = match &config.operation_keys {
        Some(keys) => keys.clone(),
        None => (0..p).map(|_| BitString::random(n, rng)).collect(),
    };
    let leaders: Vec<usize> = (0..n).map(|pos| config.schedule.leader(p, pos)).collect();

    let mut t = QkaTranscript {
        participants: config.participants.clone(),
        positions: Vec::with_capacity(n),
        hops: Vec::new(),
        operation_keys,
        extracted_key: None,
        counters: ResourceCounters::default(),
        abort: None,
    };

    let mut states = vec![EntangledState::ghz(p).expect("p >= 2"); n];
    t.counters.qubits_prepared += (n * p) as u64;

    // Server hands one particle of every state to each user.
    for to in 1..p {
        if let Some(cause) = send(&mut t, channel, decoys, rng, 0, to, n) {
            t.abort = Some(cause);
            return Ok(t);
        }
    }

    let mut ops = vec![Vec::with_capacity(p); n];
    for (pos, state) in states.iter_mut().enumerate() {
        for i in 0..p {
            let role = if i == leaders[pos] { Role::Leader } else { Role::Follower };
            let op = encode_op(t.operation_keys[i][pos], role, parity, rng);
            state.apply_in_place(i, op).expect("qubit index within arity");
            ops[pos].push(op);
            t.counters.gates_applied += 1;
        }
    }

    // Followers return their particles to the leader of each position.
    for leader in 0..p {
        let led = leaders.iter().filter(|l| **l == leader).count();
        if led == 0 {
            continue;
        }
        for from in (0..p).filter(|f| *f != leader) {
            if let Some(cause) = send(&mut t, channel, decoys, rng, from, leader, led) {
                t.abort = Some(cause);
                return Ok(t);
            }
        }
    }

    for (pos, state) in states.iter().enumerate() {
        let measured = state.measure();
        t.counters.entangled_measurements += 1;
        let outcome = match &config.dishonest {
            Some(d) if d.participant == leaders[pos] => {
                forge(&measured, &ops[pos], leaders[pos], parity, d.target)
            }
            _ => measured.clone(),
        };
        t.positions.push(PositionRecord {
            leader: leaders[pos],
            ops: ops[pos].clone(),
            measured,
            outcome,
        });
    }
    let announcing: BTreeSet<usize> = leaders.iter().copied().collect();
    t.counters.classical_messages += announcing.len() as u64;

    let dishonest = config.dishonest.as_ref().map(|d| d.participant);
    let mut key = BitString::zeros(n);
    for (pos, rec) in t.positions.iter().enumerate() {
        let mut agreed: Option<bool> = None;
        for i in (0..p).filter(|i| Some(*i) != dishonest) {
            let bit = match extract_key(&rec.outcome, rec.ops[i], i, rec.leader, parity) {
                Ok(e) => e.shared_bit,
                Err(_) => {
                    t.abort = Some(AbortCause::Tamper { participant: i, position: pos });
                    return Ok(t);
                }
            };
            match agreed {
                None => agreed = Some(bit),
                Some(b) if b != bit => {
                    t.abort = Some(AbortCause::Disagreement { position: pos });
                    return Ok(t);
                }
                Some(_) => {}
            }
        }
        key.set(pos, agreed.expect("at least one honest participant"));
    }
    t.extracted_key = Some(key);
    Ok(t)
}

/// Sends a sequence of `payload` particles plus decoys and checks the decoys.
fn send<R: Rng + ?Sized>(
    t: &mut QkaTranscript,
    channel: &ChannelModel,
    decoys: &mut DecoyAllocator,
    rng: &mut R,
    from: usize,
    to: usize,
    payload: usize,
) -> Option<AbortCause> {
    let m = decoys.decoys_for(payload);
    t.counters.qubits_prepared += m as u64;
    t.counters.qubits_transmitted += (payload + m) as u64;
    t.counters.decoy_measurements += m as u64;
    let mut errors = 0;
    for _ in 0..m {
        let kind = DecoyKind::random(rng);
        let received = channel.transmit(DecoyQubit::new(kind), rng);
        // The sender announces each decoy's basis; the receiver measures in it.
        if decoy_measure(&received, kind.basis(), rng) != kind.bit() {
            errors += 1;
        }
    }
    t.hops.push(HopRecord { from, to, payload, decoys: m, errors });
    if m > 0 && errors as f64 / m as f64 > channel.error_threshold {
        Some(AbortCause::Eavesdropper { from, to, errors, decoys: m })
    } else {
        None
    }
}

/// A forged announcement: flipping the sign bit flips everyone's recovered
/// leader bit (and so the shared bit) without disturbing the follower bits.
fn forge(
    measured: &MeasurementOutcome,
    ops: &[PauliOp],
    leader: usize,
    parity: Parity,
    target: bool,
) -> MeasurementOutcome {
    let honest = extract_key(measured, ops[leader], leader, leader, parity)
        .expect("leader can always read its own honest measurement")
        .shared_bit;
    let mut out = measured.clone();
    if honest != target {
        out.bits.flip(0);
    }
    out
}
