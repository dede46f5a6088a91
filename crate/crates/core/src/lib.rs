//! Dynamic quantum group key agreement over tree key graphs.
//!
//! The quantum layer is simulated exactly for the only states the protocols
//! use (GHZ-class states under Pauli operations, and single-qubit decoys).
//! On top of it sit the two-party and multi-party key agreement sessions,
//! an LKH-style key tree, join/leave rekeying, closed-form cost models,
//! channel attacks and a churn workload driver.

pub mod adversary;
pub mod bits;
pub mod cost;
pub mod counters;
pub mod keytree;
pub mod protocol;
pub mod qka;
pub mod quantum;
pub mod rekey;
pub mod workload;

pub use adversary::{detection_experiment, AttackReport, EveKind, EveStrategy, LeaderAttackReport};
pub use bits::BitString;
pub use cost::{CostParams, CostProtocol};
pub use counters::ResourceCounters;
pub use keytree::{GroupKey, KeyId, KeyTree, TreeSnapshot, TreeStats, UserId};
pub use protocol::{EventTrace, Group, ProtocolConfig, ProtocolError};
pub use qka::{
    run_session, ChannelModel, DecoyPolicy, LeaderSchedule, ParticipantId, QkaConfig, QkaError, QkaTranscript,
};
pub use quantum::{EntangledState, MeasurementOutcome, PauliOp, Sign};
pub use rekey::{RekeyMessage, SimCipherText, UserView};
pub use workload::{Backend, Series, TimeSeriesRecord, WorkloadConfig};
