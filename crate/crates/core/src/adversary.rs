//! Channel attacks on decoy qubits and the dishonest-leader experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::qka::{
    run_session, ChannelModel, DishonestLeader, LeaderSchedule, QkaConfig, QkaError,
};
use crate::quantum::{decoy_measure, Basis, DecoyKind, DecoyQubit, EntangledState, PauliOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EveKind {
    None,
    InterceptResend,
    Cnot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EveStrategy {
    pub kind: EveKind,
    /// Probability that any single transmitted qubit is attacked.
    pub attack_probability: f64,
}

impl EveStrategy {
    pub fn none() -> Self {
        Self { kind: EveKind::None, attack_probability: 0.0 }
    }

    pub fn intercept_resend() -> Self {
        Self { kind: EveKind::InterceptResend, attack_probability: 1.0 }
    }

    pub fn cnot() -> Self {
        Self { kind: EveKind::Cnot, attack_probability: 1.0 }
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.attack_probability = p;
        self
    }

    /// Passes a decoy through Eve. Returns the forwarded qubit and Eve's guess
    /// of its bit, if she attacked it.
    pub fn tap<R: Rng + ?Sized>(&self, decoy: DecoyQubit, rng: &mut R) -> (DecoyQubit, Option<bool>) {
        if self.kind == EveKind::None || !rng.random_bool(self.attack_probability.clamp(0.0, 1.0)) {
            return (decoy, None);
        }
        match self.kind {
            EveKind::None => unreachable!(),
            EveKind::InterceptResend => {
                let (q, bit) = tap_intercept_resend(&decoy, rng);
                (q, Some(bit))
            }
            EveKind::Cnot => {
                let (q, ancilla) = tap_cnot(&decoy, rng);
                (q, Some(ancilla.readout))
            }
        }
    }
}

/// Eve measures in a random basis and resends the state she observed.
pub fn tap_intercept_resend<R: Rng + ?Sized>(decoy: &DecoyQubit, rng: &mut R) -> (DecoyQubit, bool) {
    let basis = Basis::random(rng);
    let bit = decoy_measure(decoy, basis, rng);
    (DecoyQubit::new(DecoyKind::new(basis, bit)), bit)
}

/// Eve's half after a CNOT attack, measured in the Z basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ancilla {
    pub readout: bool,
    /// Whether the ancilla ended up entangled with the forwarded decoy.
    pub entangled: bool,
}

/// CNOT with the decoy as control and a fresh `|0>` ancilla as target.
///
/// Z-basis decoys stay product states and Eve's ancilla copies the bit.
/// `|+>`/`|->` become the Bell pairs `Phi+`/`Phi-` over (decoy, ancilla).
pub fn tap_cnot<R: Rng + ?Sized>(decoy: &DecoyQubit, rng: &mut R) -> (DecoyQubit, Ancilla) {
    match decoy.kind.basis() {
        Basis::Z => (
            decoy.clone(),
            Ancilla { readout: decoy.kind.bit(), entangled: false },
        ),
        Basis::X => {
            let mut pair = EntangledState::ghz(2).expect("two qubits");
            if decoy.kind.bit() {
                pair.apply_in_place(0, PauliOp::Z).expect("qubit 0");
            }
            let forwarded = DecoyQubit { kind: decoy.kind, entangled: Some(pair) };
            // Z readout of half a Bell pair is uniform.
            (forwarded, Ancilla { readout: rng.random::<bool>(), entangled: true })
        }
    }
}

/// Outcome of a decoy-detection experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub strategy: EveKind,
    pub decoys_per_run: usize,
    pub trials: usize,
    pub detections: usize,
    pub detection_rate: f64,
    /// Fraction of all decoys that the receiver measured wrongly.
    pub per_decoy_error_rate: f64,
    /// Fraction of attacked decoys whose bit Eve guessed correctly.
    pub eve_guess_agreement: f64,
    pub seed: u64,
}

impl AttackReport {
    pub const CSV_HEADER: &'static str =
        "strategy,decoys,trials,detections,detection_rate,per_decoy_error_rate,eve_guess_agreement";

    pub fn csv_row(&self) -> String {
        let name = match self.strategy {
            EveKind::None => "none",
            EveKind::InterceptResend => "intercept-resend",
            EveKind::Cnot => "cnot",
        };
        format!(
            "{},{},{},{},{},{},{}",
            name,
            self.decoys_per_run,
            self.trials,
            self.detections,
            self.detection_rate,
            self.per_decoy_error_rate,
            self.eve_guess_agreement
        )
    }
}

/// Each trial sends `decoys` random decoys through Eve; the trial counts as a
/// detection if the receiver sees at least one error.
pub fn detection_experiment(strategy: EveStrategy, decoys: usize, trials: usize, seed: u64) -> AttackReport {
    let channel = ChannelModel::tapped(strategy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut detections = 0;
    let mut errors = 0usize;
    let mut guesses = 0usize;
    let mut correct_guesses = 0usize;
    for _ in 0..trials {
        let mut detected = false;
        for _ in 0..decoys {
            let kind = DecoyKind::random(&mut rng);
            let (received, guess) = channel.eve.tap(DecoyQubit::new(kind), &mut rng);
            if let Some(g) = guess {
                guesses += 1;
                correct_guesses += usize::from(g == kind.bit());
            }
            if decoy_measure(&received, kind.basis(), &mut rng) != kind.bit() {
                errors += 1;
                detected = true;
            }
        }
        detections += usize::from(detected);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    AttackReport {
        strategy: strategy.kind,
        decoys_per_run: decoys,
        trials,
        detections,
        detection_rate: ratio(detections, trials),
        per_decoy_error_rate: ratio(errors, decoys * trials),
        eve_guess_agreement: ratio(correct_guesses, guesses),
        seed,
    }
}

/// `1 - (3/4)^m`, the detection probability against a full-strength attack.
pub fn expected_detection(decoys: usize) -> f64 {
    1.0 - 0.75f64.powi(decoys as i32)
}

/// Outcome of the dishonest-leader experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderAttackReport {
    pub trials: usize,
    pub positions: usize,
    /// Positions led by the attacker, summed over trials.
    pub positions_led: usize,
    /// Key bits that ended up equal to the attacker's target at positions it led.
    pub forced_bits: usize,
    /// `forced_bits / positions`.
    pub forced_fraction: f64,
    /// Frequency of 1 among key bits at positions the attacker did not lead.
    pub other_positions_one_frequency: f64,
}

/// Runs seeded sessions in which `attacker` (if any) forges the outcomes of
/// the positions it leads, trying to force every such key bit to 0.
pub fn malicious_leader_experiment(
    base: &QkaConfig,
    attacker: Option<usize>,
    schedule: LeaderSchedule,
    trials: usize,
) -> Result<LeaderAttackReport, QkaError> {
    let mut positions = 0;
    let mut led = 0;
    let mut forced = 0;
    let mut other = 0usize;
    let mut other_ones = 0usize;
    for trial in 0..trials {
        let mut cfg = base.clone();
        cfg.seed = base.seed.wrapping_add(trial as u64);
        cfg.schedule = schedule;
        cfg.dishonest = attacker.map(|participant| DishonestLeader { participant, target: false });
        let t = run_session(&cfg, &ChannelModel::honest())?;
        let key = t
            .extracted_key
            .as_ref()
            .expect("forged sign bits pass every follower check");
        for (pos, rec) in t.positions.iter().enumerate() {
            positions += 1;
            if Some(rec.leader) == attacker {
                led += 1;
                forced += usize::from(!key[pos]);
            } else {
                other += 1;
                other_ones += usize::from(key[pos]);
            }
        }
    }
    Ok(LeaderAttackReport {
        trials,
        positions,
        positions_led: led,
        forced_bits: forced,
        forced_fraction: if positions == 0 { 0.0 } else { forced as f64 / positions as f64 },
        other_positions_one_frequency: if other == 0 { 0.0 } else { other_ones as f64 / other as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_resend_matching_basis_keeps_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let kind = DecoyKind::random(&mut rng);
            let (fwd, bit) = tap_intercept_resend(&DecoyQubit::new(kind), &mut rng);
            if fwd.kind.basis() == kind.basis() {
                assert_eq!(bit, kind.bit());
                assert_eq!(fwd.kind, kind);
            }
        }
    }

    #[test]
    fn cnot_z_decoys_are_undisturbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [DecoyKind::Z0, DecoyKind::Z1] {
            let (fwd, anc) = tap_cnot(&DecoyQubit::new(kind), &mut rng);
            assert_eq!(fwd, DecoyQubit::new(kind));
            assert_eq!(anc.readout, kind.bit());
            assert!(!anc.entangled);
            for _ in 0..100 {
                assert_eq!(decoy_measure(&fwd, Basis::Z, &mut rng), kind.bit());
            }
        }
    }

    #[test]
    fn cnot_plus_decoy_reads_minus_half_the_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (fwd, anc) = tap_cnot(&DecoyQubit::new(DecoyKind::XPlus), &mut rng);
        assert!(anc.entangled);
        assert_eq!(fwd.entangled, Some(EntangledState::ghz(2).unwrap()));
        let trials = 20_000;
        let minus = (0..trials).filter(|_| decoy_measure(&fwd, Basis::X, &mut rng)).count();
        let f = minus as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn no_eve_no_detection() {
        let r = detection_experiment(EveStrategy::none(), 20, 1000, 1);
        assert_eq!(r.detections, 0);
        assert_eq!(r.per_decoy_error_rate, 0.0);
    }

    #[test]
    fn honest_leader_forces_nothing() {
        let cfg = QkaConfig::with_users(2, 12).seed(4);
        let r = malicious_leader_experiment(&cfg, None, LeaderSchedule::RoundRobin, 50).unwrap();
        assert_eq!(r.positions_led, 0);
        assert_eq!(r.forced_bits, 0);
        assert_eq!(r.forced_fraction, 0.0);
    }

    #[test]
    fn fixed_dishonest_leader_forces_everything() {
        let cfg = QkaConfig::with_users(3, 8).seed(8);
        let r = malicious_leader_experiment(&cfg, Some(1), LeaderSchedule::Fixed(1), 100).unwrap();
        assert_eq!(r.forced_fraction, 1.0);
    }
}
