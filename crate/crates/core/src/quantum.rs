//! Exact simulation of the GHZ-class states the key agreement sessions use.
//!
//! Every state reachable from a fresh GHZ state by single-qubit Pauli gates is
//! of the form `(|f> + s|~f>)/sqrt(2)` for a flip pattern `f` and a relative
//! sign `s`. Storing `(f, s)` with `f[0] = 0` gives a canonical form, so the
//! whole family has `2 * 2^(n-1)` members and measurement is a pure function.
//!
//! Decoy qubits are the four BB84 states and are measured in the Z or X basis.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitString;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuantumError {
    #[error("entangled states need at least 2 qubits, got {0}")]
    InvalidArity(usize),
    #[error("qubit index {index} out of range for a {n}-qubit state")]
    QubitOutOfRange { index: usize, n: usize },
}

/// Single-qubit Pauli operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PauliOp {
    I,
    X,
    Y,
    Z,
}

impl PauliOp {
    pub const ALL: [PauliOp; 4] = [PauliOp::I, PauliOp::X, PauliOp::Y, PauliOp::Z];

    /// Whether the op has a bit-flip component (X or Y).
    pub fn flips_bit(self) -> bool {
        matches!(self, PauliOp::X | PauliOp::Y)
    }

    /// Whether the op has a phase-flip component (Z or Y).
    pub fn flips_phase(self) -> bool {
        matches!(self, PauliOp::Z | PauliOp::Y)
    }

    /// Builds the op from its (bit-flip, phase-flip) components, up to global phase.
    pub fn from_components(bit: bool, phase: bool) -> Self {
        match (bit, phase) {
            (false, false) => PauliOp::I,
            (true, false) => PauliOp::X,
            (true, true) => PauliOp::Y,
            (false, true) => PauliOp::Z,
        }
    }
}

impl fmt::Display for PauliOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PauliOp::I => "I",
            PauliOp::X => "X",
            PauliOp::Y => "Y",
            PauliOp::Z => "Z",
        };
        f.write_str(s)
    }
}

/// Relative sign between the two branches of a GHZ-class state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn flipped(self) -> Self {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn is_minus(self) -> bool {
        self == Sign::Minus
    }
}

/// `(|flips> + sign * |~flips>) / sqrt(2)` in canonical form (`flips[0] == 0`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntangledState {
    flips: BitString,
    sign: Sign,
}

impl EntangledState {
    /// Fresh `(|0..0> + |1..1>)/sqrt(2)` on `n` qubits.
    pub fn ghz(n: usize) -> Result<Self, QuantumError> {
        if n < 2 {
            return Err(QuantumError::InvalidArity(n));
        }
        Ok(Self {
            flips: BitString::zeros(n),
            sign: Sign::Plus,
        })
    }

    /// Builds a state from an arbitrary flip pattern and re-canonicalizes it.
    pub fn from_parts(flips: BitString, sign: Sign) -> Result<Self, QuantumError> {
        if flips.len() < 2 {
            return Err(QuantumError::InvalidArity(flips.len()));
        }
        let mut s = Self { flips, sign };
        s.canonicalize();
        Ok(s)
    }

    pub fn qubits(&self) -> usize {
        self.flips.len()
    }

    pub fn flips(&self) -> &BitString {
        &self.flips
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn apply(&self, qubit: usize, op: PauliOp) -> Result<Self, QuantumError> {
        let mut next = self.clone();
        next.apply_in_place(qubit, op)?;
        Ok(next)
    }

    pub fn apply_in_place(&mut self, qubit: usize, op: PauliOp) -> Result<(), QuantumError> {
        let n = self.qubits();
        if qubit >= n {
            return Err(QuantumError::QubitOutOfRange { index: qubit, n });
        }
        // Z on either branch flips the relative sign; Y = iXZ with the phase dropped.
        if op.flips_phase() {
            self.sign = self.sign.flipped();
        }
        if op.flips_bit() {
            self.flips.flip(qubit);
        }
        self.canonicalize();
        Ok(())
    }

    /// The entanglement measurement: first bit is the sign, the rest is the flip pattern.
    pub fn measure(&self) -> MeasurementOutcome {
        let mut bits = self.flips.clone();
        bits.set(0, self.sign.is_minus());
        MeasurementOutcome { bits }
    }

    // |f> + s|~f> equals s(|~f> + s|f>), so complementing keeps the sign.
    fn canonicalize(&mut self) {
        if self.flips[0] {
            self.flips = self.flips.complement();
        }
    }
}

/// Classical result of an entanglement measurement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementOutcome {
    pub bits: BitString,
}

impl MeasurementOutcome {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn sign_bit(&self) -> bool {
        self.bits[0]
    }
}

impl fmt::Display for MeasurementOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|{}>", self.bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Basis::X
        } else {
            Basis::Z
        }
    }
}

/// One of the four decoy states `|0>, |1>, |+>, |->`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoyKind {
    Z0,
    Z1,
    XPlus,
    XMinus,
}

impl DecoyKind {
    pub const ALL: [DecoyKind; 4] = [DecoyKind::Z0, DecoyKind::Z1, DecoyKind::XPlus, DecoyKind::XMinus];

    pub fn new(basis: Basis, bit: bool) -> Self {
        match (basis, bit) {
            (Basis::Z, false) => DecoyKind::Z0,
            (Basis::Z, true) => DecoyKind::Z1,
            (Basis::X, false) => DecoyKind::XPlus,
            (Basis::X, true) => DecoyKind::XMinus,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..4)]
    }

    pub fn basis(self) -> Basis {
        match self {
            DecoyKind::Z0 | DecoyKind::Z1 => Basis::Z,
            DecoyKind::XPlus | DecoyKind::XMinus => Basis::X,
        }
    }

    pub fn bit(self) -> bool {
        matches!(self, DecoyKind::Z1 | DecoyKind::XMinus)
    }
}

/// A decoy in flight. `entangled` is set when an adversary has entangled the
/// decoy (qubit 0) with an ancilla (qubit 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoyQubit {
    pub kind: DecoyKind,
    pub entangled: Option<EntangledState>,
}

impl DecoyQubit {
    pub fn new(kind: DecoyKind) -> Self {
        Self { kind, entangled: None }
    }
}

/// Measures a decoy in `basis`.
///
/// A matching basis on an unentangled decoy is deterministic. A mismatched
/// basis, or a decoy that is half of a GHZ-class pair (whose single-qubit
/// marginal is maximally mixed), yields a uniform bit.
pub fn decoy_measure<R: Rng + ?Sized>(decoy: &DecoyQubit, basis: Basis, rng: &mut R) -> bool {
    if decoy.entangled.is_none() && decoy.kind.basis() == basis {
        decoy.kind.bit()
    } else {
        rng.random::<bool>()
    }
}
