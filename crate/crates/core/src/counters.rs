use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Resource tallies for a session, an event, or a whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceCounters {
    /// Entangled plus decoy qubits.
    pub qubits_prepared: u64,
    pub qubits_transmitted: u64,
    pub gates_applied: u64,
    pub entangled_measurements: u64,
    pub decoy_measurements: u64,
    pub classical_messages: u64,
    pub encryptions: u64,
    pub rekey_messages: u64,
}

impl ResourceCounters {
    /// Column names, in CSV order.
    pub const FIELDS: [&'static str; 8] = [
        "qubits_prepared",
        "qubits_transmitted",
        "gates",
        "entangled_measurements",
        "decoy_measurements",
        "classical_messages",
        "encryptions",
        "rekey_messages",
    ];

    pub fn values(&self) -> [u64; 8] {
        [
            self.qubits_prepared,
            self.qubits_transmitted,
            self.gates_applied,
            self.entangled_measurements,
            self.decoy_measurements,
            self.classical_messages,
            self.encryptions,
            self.rekey_messages,
        ]
    }

    /// True if no field of `self` is smaller than the matching field of `earlier`.
    pub fn dominates(&self, earlier: &ResourceCounters) -> bool {
        self.values().iter().zip(earlier.values()).all(|(a, b)| *a >= b)
    }
}

impl AddAssign for ResourceCounters {
    fn add_assign(&mut self, o: ResourceCounters) {
        self.qubits_prepared += o.qubits_prepared;
        self.qubits_transmitted += o.qubits_transmitted;
        self.gates_applied += o.gates_applied;
        self.entangled_measurements += o.entangled_measurements;
        self.decoy_measurements += o.decoy_measurements;
        self.classical_messages += o.classical_messages;
        self.encryptions += o.encryptions;
        self.rekey_messages += o.rekey_messages;
    }
}

impl Add for ResourceCounters {
    type Output = ResourceCounters;

    fn add(mut self, o: ResourceCounters) -> ResourceCounters {
        self += o;
        self
    }
}

impl std::iter::Sum for ResourceCounters {
    fn sum<I: Iterator<Item = ResourceCounters>>(iter: I) -> Self {
        iter.fold(ResourceCounters::default(), Add::add)
    }
}
