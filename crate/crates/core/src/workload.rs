//! Poisson membership churn and cumulative resource time series.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::cost::{c_join, c_leave, CostProtocol};
use crate::counters::ResourceCounters;
use crate::keytree::UserId;
use crate::protocol::{Group, ProtocolConfig, ProtocolError};
use crate::qka::DecoyPolicy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("initial group size must be at least 2, got {0}")]
    InitialSize(usize),
    #[error("tree degree must be at least 2, got {0}")]
    Degree(usize),
    #[error("key length must be at least 1")]
    KeyLength,
    #[error("decoy proportion {0} is outside [0, 1]")]
    Xi(f64),
    #[error("rate must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("join probability {0} is outside [0, 1]")]
    PJoin(f64),
    #[error("at least one step is required")]
    Steps,
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrivals {
    /// One Poisson count per step, each event a join with probability `p_join`.
    #[default]
    Split,
    /// Independent Poisson counts for joins and leaves; joins go first.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Run the protocol on a live tree.
    #[default]
    Simulated,
    /// Accrue closed-form costs for the current group size.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub initial: usize,
    pub degree: usize,
    pub n: usize,
    pub xi: f64,
    pub lambda: f64,
    pub steps: usize,
    pub p_join: f64,
    pub seed: u64,
    pub arrivals: Arrivals,
    pub mode: Mode,
    pub decoy_policy: DecoyPolicy,
    /// Keep every member's key view up to date (slower; used by consistency tests).
    pub track_views: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            initial: 1024,
            degree: 4,
            n: 1,
            xi: 0.25,
            lambda: 1.0,
            steps: 500,
            p_join: 0.5,
            seed: 0,
            arrivals: Arrivals::Split,
            mode: Mode::Simulated,
            decoy_policy: DecoyPolicy::default(),
            track_views: false,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.initial < 2 {
            return Err(WorkloadError::InitialSize(self.initial));
        }
        if self.degree < 2 {
            return Err(WorkloadError::Degree(self.degree));
        }
        if self.n == 0 {
            return Err(WorkloadError::KeyLength);
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(WorkloadError::Xi(self.xi));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(WorkloadError::Lambda(self.lambda));
        }
        if !(0.0..=1.0).contains(&self.p_join) {
            return Err(WorkloadError::PJoin(self.p_join));
        }
        if self.steps == 0 {
            return Err(WorkloadError::Steps);
        }
        Ok(())
    }

    /// `key=value` pairs, space separated, as embedded in CSV headers.
    pub fn describe(&self) -> String {
        let arrivals = match self.arrivals {
            Arrivals::Split => "split",
            Arrivals::Independent => "independent",
        };
        let mode = match self.mode {
            Mode::Simulated => "simulated",
            Mode::Analytic => "analytic",
        };
        let policy = match self.decoy_policy {
            DecoyPolicy::PerHopCeil => "per-hop-ceil",
            DecoyPolicy::Carry => "carry",
        };
        format!(
            "initial={} degree={} n={} xi={} lambda={} steps={} p-join={} seed={} arrivals={} mode={} decoy-policy={}",
            self.initial,
            self.degree,
            self.n,
            self.xi,
            self.lambda,
            self.steps,
            self.p_join,
            self.seed,
            arrivals,
            mode,
            policy
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Star,
    Tree,
}

/// A QKA protocol run either over the whole group or per updated tree key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Backend {
    pub topology: Topology,
    /// One of the star protocols of [`CostProtocol::STAR`].
    pub protocol: CostProtocol,
}

impl Backend {
    pub const TREE_GHZ: Backend = Backend { topology: Topology::Tree, protocol: CostProtocol::Ghz };

    pub fn all() -> Vec<Backend> {
        [Topology::Tree, Topology::Star]
            .into_iter()
            .flat_map(|topology| CostProtocol::STAR.into_iter().map(move |protocol| Backend { topology, protocol }))
            .collect()
    }

    fn cost(self, group: f64, n: f64, xi: f64) -> f64 {
        self.protocol.star(group, n, xi).expect("backends use star protocols")
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.topology {
            Topology::Star => "star",
            Topology::Tree => "tree",
        };
        write!(f, "{t}-{}", self.protocol)
    }
}

impl FromStr for Backend {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Backend::all()
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| WorkloadError::UnknownBackend(s.to_string()))
    }
}

impl Serialize for Backend {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannedEvent {
    Join(UserId),
    Leave(UserId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepPlan {
    pub events: Vec<PlannedEvent>,
    /// Leaves dropped because the group was at its minimum size.
    pub skipped_leaves: u64,
}

pub const MIN_GROUP: usize = 2;

/// Draws the membership churn for every step. Members `u1..=u{initial}` start
/// in the group; joiners get fresh ids and leavers are picked uniformly.
pub fn plan_events(cfg: &WorkloadConfig) -> Result<Vec<StepPlan>, WorkloadError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let poisson = |rate: f64| (rate > 0.0).then(|| Poisson::new(rate).expect("positive finite rate"));
    let total = poisson(cfg.lambda);
    let joins = poisson(cfg.lambda * cfg.p_join);
    let leaves = poisson(cfg.lambda * (1.0 - cfg.p_join));
    let draw = |d: &Option<Poisson<f64>>, rng: &mut ChaCha8Rng| d.as_ref().map_or(0, |d| d.sample(rng) as u64);

    let mut members: Vec<UserId> = (1..=cfg.initial as u64).map(UserId).collect();
    let mut next_id = cfg.initial as u64 + 1;
    let mut plan = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let kinds: Vec<bool> = match cfg.arrivals {
            Arrivals::Split => {
                let k = draw(&total, &mut rng);
                (0..k).map(|_| rng.random_bool(cfg.p_join)).collect()
            }
            Arrivals::Independent => {
                let j = draw(&joins, &mut rng);
                let l = draw(&leaves, &mut rng);
                std::iter::repeat_n(true, j as usize).chain(std::iter::repeat_n(false, l as usize)).collect()
            }
        };
        let mut step = StepPlan::default();
        for join in kinds {
            if join {
                let u = UserId(next_id);
                next_id += 1;
                members.push(u);
                step.events.push(PlannedEvent::Join(u));
            } else if members.len() <= MIN_GROUP {
                step.skipped_leaves += 1;
            } else {
                let i = rng.random_range(0..members.len());
                step.events.push(PlannedEvent::Leave(members.swap_remove(i)));
            }
        }
        plan.push(step);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSeriesRecord {
    pub step: usize,
    pub joins: u64,
    pub leaves: u64,
    pub group_size: usize,
    /// Running totals in [`ResourceCounters::FIELDS`] order.
    pub cumulative: [f64; 8],
}

impl TimeSeriesRecord {
    pub fn qubits_prepared(&self) -> f64 {
        self.cumulative[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub backend: Backend,
    pub records: Vec<TimeSeriesRecord>,
    pub events: u64,
    pub skipped_leaves: u64,
    /// Mean group size seen by the executed events.
    pub mean_group_size: f64,
    /// Whether only `qubits_prepared` is modelled.
    pub analytic: bool,
}

impl Series {
    pub const CSV_HEADER: &'static str = "step,joins,leaves,group_size,qubits_prepared,qubits_transmitted,gates,entangled_measurements,decoy_measurements,classical_messages,encryptions,rekey_messages";

    /// Total qubits divided by executed events.
    pub fn mean_event_cost(&self) -> f64 {
        let last = self.records.last().map_or(0.0, TimeSeriesRecord::qubits_prepared);
        if self.events == 0 { 0.0 } else { last / self.events as f64 }
    }

    pub fn to_csv(&self, cfg: &WorkloadConfig) -> String {
        let mut out = format!("# backend={} {}\n", self.backend, cfg.describe());
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}", r.step, r.joins, r.leaves, r.group_size));
            for v in r.cumulative {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("# events={} skipped_leaves={}\n", self.events, self.skipped_leaves));
        out
    }
}

/// What one executed event cost, independent of backend.
#[derive(Debug, Clone, PartialEq)]
struct EventCost {
    join: bool,
    size_before: usize,
    size_after: usize,
    /// Session arities, deepest key first; empty in analytic mode.
    arities: Vec<usize>,
    counters: Option<ResourceCounters>,
}

fn execute(cfg: &WorkloadConfig, plan: &[StepPlan], live: bool) -> Result<Vec<Vec<EventCost>>, WorkloadError> {
    let mut group = if live {
        let pc = ProtocolConfig {
            key_len: cfg.n,
            xi: cfg.xi,
            decoy_policy: cfg.decoy_policy,
            track_views: cfg.track_views,
            snapshots: false,
            ..ProtocolConfig::default()
        };
        Some(Group::balanced(cfg.initial, cfg.degree, pc, cfg.seed.wrapping_add(1))?)
    } else {
        None
    };
    let mut size = cfg.initial;
    let mut out = Vec::with_capacity(plan.len());
    for step in plan {
        let mut costs = Vec::with_capacity(step.events.len());
        for ev in &step.events {
            let (join, after) = match ev {
                PlannedEvent::Join(_) => (true, size + 1),
                PlannedEvent::Leave(_) => (false, size - 1),
            };
            let mut cost = EventCost { join, size_before: size, size_after: after, arities: Vec::new(), counters: None };
            if let Some(g) = group.as_mut() {
                let trace = match ev {
                    PlannedEvent::Join(u) => g.join(*u)?,
                    PlannedEvent::Leave(u) => g.leave(*u)?,
                };
                cost.arities = trace.sessions.iter().map(|s| s.participants.len()).collect();
                cost.counters = Some(trace.counters);
            }
            size = after;
            costs.push(cost);
        }
        out.push(costs);
    }
    Ok(out)
}

fn event_cost(b: Backend, cfg: &WorkloadConfig, e: &EventCost, mode: Mode) -> [f64; 8] {
    let (n, xi, d) = (cfg.n as f64, cfg.xi, cfg.degree);
    let mut v = [0.0; 8];
    match (b.topology, mode) {
        (Topology::Star, _) => v[0] = b.cost(e.size_after as f64, n, xi),
        (Topology::Tree, Mode::Simulated) if b.protocol == CostProtocol::Ghz => {
            let c = e.counters.expect("live events carry counters");
            for (slot, x) in v.iter_mut().zip(c.values()) {
                *slot = x as f64;
            }
        }
        (Topology::Tree, Mode::Simulated) => {
            v[0] = e.arities.iter().map(|a| b.cost(*a as f64, n, xi)).sum();
        }
        (Topology::Tree, Mode::Analytic) => {
            let g = e.size_before as f64;
            let l = g.ln() / (d as f64).ln();
            v[0] = match (b.protocol, e.join) {
                (CostProtocol::Ghz, true) => c_join(g, n, xi, d),
                (CostProtocol::Ghz, false) => c_leave(g, n, xi, d),
                (_, true) => l * b.cost(2.0, n, xi),
                (_, false) => (l - 1.0) * b.cost(d as f64 + 1.0, n, xi) + b.cost(d as f64, n, xi),
            };
        }
    }
    v
}

/// One cumulative series per backend on a shared event sequence.
///
/// Star backends run one whole-group agreement per event among the members
/// after the event. Tree backends run one agreement per updated key; in
/// simulated mode the session sizes come from the live tree and `tree-ghz`
/// reports the measured counters, in analytic mode the costs follow the
/// closed forms for the pre-event group size.
pub fn compare_backends(cfg: &WorkloadConfig, backends: &[Backend]) -> Result<Vec<Series>, WorkloadError> {
    let plan = plan_events(cfg)?;
    let live = cfg.mode == Mode::Simulated && backends.iter().any(|b| b.topology == Topology::Tree);
    let costs = execute(cfg, &plan, live)?;
    let skipped: u64 = plan.iter().map(|s| s.skipped_leaves).sum();
    let events: Vec<&EventCost> = costs.iter().flatten().collect();
    let mean_group_size = if events.is_empty() {
        cfg.initial as f64
    } else {
        events.iter().map(|e| e.size_before as f64).sum::<f64>() / events.len() as f64
    };

    Ok(backends
        .iter()
        .map(|&b| {
            let mut acc = [0.0; 8];
            let mut size = cfg.initial;
            let records = costs
                .iter()
                .enumerate()
                .map(|(i, step)| {
                    let (mut joins, mut leaves) = (0, 0);
                    for e in step {
                        for (a, x) in acc.iter_mut().zip(event_cost(b, cfg, e, cfg.mode)) {
                            *a += x;
                        }
                        if e.join {
                            joins += 1;
                        } else {
                            leaves += 1;
                        }
                        size = e.size_after;
                    }
                    TimeSeriesRecord { step: i + 1, joins, leaves, group_size: size, cumulative: acc }
                })
                .collect();
            Series {
                backend: b,
                records,
                events: events.len() as u64,
                skipped_leaves: skipped,
                mean_group_size,
                analytic: !(cfg.mode == Mode::Simulated && b == Backend::TREE_GHZ),
            }
        })
        .collect())
}

/// The tree-GHZ series alone.
pub fn run_simulation(cfg: &WorkloadConfig) -> Result<Series, WorkloadError> {
    Ok(compare_backends(cfg, &[Backend::TREE_GHZ])?.remove(0))
}
