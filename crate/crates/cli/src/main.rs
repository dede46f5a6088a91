mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qgka_core::adversary::{detection_experiment, malicious_leader_experiment, AttackReport, EveStrategy};
use qgka_core::cost::{cost_row, star_vs_tree, sweep_degree, CostParams, CostProtocol, CostRow, StarTreeRow};
use qgka_core::protocol::{EventTrace, Group, ProtocolConfig, ProtocolError};
use qgka_core::workload::{compare_backends, Arrivals, Backend, Mode, WorkloadConfig, WorkloadError};
use qgka_core::{ChannelModel, DecoyPolicy, LeaderSchedule, QkaConfig, UserId};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("protocol aborted: {0}")]
    Abort(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Abort(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Aborted { .. } => CliError::Abort(e.to_string()),
            ProtocolError::AlreadyMember(_) | ProtocolError::NotMember(_) | ProtocolError::GroupTooSmall(_) => {
                CliError::Usage(e.to_string())
            }
            ProtocolError::Qka(_) | ProtocolError::Tree(_) | ProtocolError::Rekey(_) => {
                CliError::Invariant(e.to_string())
            }
        }
    }
}

impl From<WorkloadError> for CliError {
    fn from(e: WorkloadError) -> Self {
        match e {
            WorkloadError::Protocol(p) => p.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Quantum group key agreement over tree key graphs: traces, costs, churn and attacks.
#[derive(Parser)]
#[command(name = "qgka", version)]
struct Cli {
    /// Read defaults from FILE (one `key = value` per line, keys are flag names); explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a balanced key tree, run one join or leave and write its JSON trace.
    #[command(args_override_self = true)]
    Trace(TraceArgs),
    /// Evaluate one closed-form cost.
    #[command(args_override_self = true)]
    Cost(CostArgs),
    /// Average tree cost over a grid of degrees, with the argmin per ξ.
    #[command(args_override_self = true)]
    SweepDegree(SweepArgs),
    /// Star-graph protocol costs next to tree costs for several group sizes.
    #[command(args_override_self = true)]
    StarVsTree(StarArgs),
    /// Poisson churn simulation; writes one cumulative CSV per backend.
    #[command(args_override_self = true)]
    Simulate(SimArgs),
    /// Eavesdropping detection or dishonest-leader experiments.
    #[command(args_override_self = true)]
    Attack(AttackArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TraceEvent {
    Join,
    Leave,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EveArg {
    None,
    InterceptResend,
    Cnot,
}

impl EveArg {
    fn strategy(self) -> EveStrategy {
        match self {
            EveArg::None => EveStrategy::none(),
            EveArg::InterceptResend => EveStrategy::intercept_resend(),
            EveArg::Cnot => EveStrategy::cnot(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    /// Fractional decoy credit carries across sequences.
    Carry,
    /// Round every sequence's decoy count up.
    PerHopCeil,
}

impl From<PolicyArg> for DecoyPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Carry => DecoyPolicy::Carry,
            PolicyArg::PerHopCeil => DecoyPolicy::PerHopCeil,
        }
    }
}

fn value_name<T: ValueEnum>(v: &T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

#[derive(Args)]
struct TraceArgs {
    #[arg(value_enum)]
    event: TraceEvent,
    /// Users in the initial balanced tree.
    #[arg(long)]
    group_size: usize,
    #[arg(long)]
    degree: usize,
    /// User to add or remove (default: the next free id for a join, the highest id for a leave).
    #[arg(long)]
    user: Option<u64>,
    /// Decoy proportion.
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    /// Key length in bits.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channel eavesdropper during the event.
    #[arg(long, value_enum, default_value_t = EveArg::None)]
    eve: EveArg,
    #[arg(long, value_enum, default_value_t = PolicyArg::Carry)]
    decoy_policy: PolicyArg,
    /// Include key bits in the tree snapshots (testing only).
    #[arg(long)]
    reveal_keys: bool,
    /// Trace file; without it the JSON goes to stdout and the summary to stderr.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// bell, cluster, single, ghz, tree-join, tree-leave or tree-avg.
    #[arg(long)]
    protocol: CostProtocol,
    /// Group size.
    #[arg(long = "N")]
    group_size: f64,
    #[arg(long)]
    n: f64,
    #[arg(long)]
    xi: f64,
    /// Tree degree (tree protocols only).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long = "N")]
    group_size: f64,
    #[arg(long)]
    n: f64,
    /// Comma-separated decoy proportions.
    #[arg(long, value_delimiter = ',', required = true)]
    xi_list: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    d_min: usize,
    #[arg(long, default_value_t = 16)]
    d_max: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StarArgs {
    /// Comma-separated group sizes.
    #[arg(long = "N-list", value_delimiter = ',', required = true)]
    group_sizes: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    n: f64,
    #[arg(long)]
    xi: f64,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArrivalsArg {
    Split,
    Independent,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Simulated,
    Analytic,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 1024)]
    initial: usize,
    #[arg(long, default_value_t = 4)]
    degree: usize,
    /// Poisson event rate per step (0 gives no events).
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.25)]
    xi: f64,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability an event is a join.
    #[arg(long, default_value_t = 0.5)]
    p_join: f64,
    #[arg(long, value_enum, default_value_t = ArrivalsArg::Split)]
    arrivals: ArrivalsArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Simulated)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = PolicyArg::Carry)]
    decoy_policy: PolicyArg,
    /// Comma-separated backends: {tree,star}-{bell,cluster,single,ghz}.
    #[arg(long, value_delimiter = ',', default_value = "tree-ghz")]
    backends: Vec<Backend>,
    /// Output directory, one `<backend>.csv` per backend.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    None,
    InterceptResend,
    Cnot,
    /// A participant forges the outcomes of the positions it leads.
    DishonestLeader,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    RoundRobin,
    Fixed,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Decoys per run.
    #[arg(long, default_value_t = 20)]
    decoys: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-qubit attack probability.
    #[arg(long, default_value_t = 1.0)]
    probability: f64,
    /// Users besides the server (dishonest-leader only).
    #[arg(long, default_value_t = 2)]
    users: usize,
    /// Key length (dishonest-leader only).
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Session index of the attacker (dishonest-leader only).
    #[arg(long, default_value_t = 1)]
    attacker: usize,
    /// Leader schedule; `fixed` gives the attacker every position (dishonest-leader only).
    #[arg(long, value_enum, default_value_t = ScheduleArg::RoundRobin)]
    schedule: ScheduleArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The resolved configuration of a run, embedded in every output.
struct Resolved {
    command: &'static str,
    pairs: Vec<(&'static str, String)>,
}

impl Resolved {
    fn new(command: &'static str) -> Self {
        Self { command, pairs: Vec::new() }
    }

    fn with(mut self, key: &'static str, value: impl ToString) -> Self {
        self.pairs.push((key, value.to_string()));
        self
    }

    fn comment(&self) -> String {
        let mut s = format!("# qgka {}", self.command);
        for (k, v) in &self.pairs {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }

    fn json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("command".into(), self.command.into());
        for (k, v) in &self.pairs {
            m.insert((*k).into(), v.clone().into());
        }
        m.into()
    }
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, content)?;
        }
        None => std::io::stdout().write_all(content.as_bytes())?,
    }
    Ok(())
}

fn join_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Serialize)]
struct TraceFile<'a> {
    config: serde_json::Value,
    #[serde(flatten)]
    trace: &'a EventTrace,
}

fn cmd_trace(a: TraceArgs) -> Result<(), CliError> {
    let config = ProtocolConfig {
        key_len: a.n,
        xi: a.xi,
        decoy_policy: a.decoy_policy.into(),
        channel: ChannelModel::tapped(a.eve.strategy()),
        reveal_keys: a.reveal_keys,
        ..ProtocolConfig::default()
    };
    if !(0.0..=1.0).contains(&a.xi) {
        return Err(CliError::Usage(format!("--xi {} is outside [0, 1]", a.xi)));
    }
    let mut group =
        Group::balanced(a.group_size, a.degree, config, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let user = UserId(a.user.unwrap_or(match a.event {
        TraceEvent::Join => group.tree().next_free_user().0,
        TraceEvent::Leave => group.tree().users().last().expect("non-empty tree").0,
    }));
    let trace = match a.event {
        TraceEvent::Join => group.join(user)?,
        TraceEvent::Leave => group.leave(user)?,
    };
    group.tree().validate().map_err(CliError::Invariant)?;
    let report = group.verify();
    if !report.is_consistent() {
        return Err(CliError::Invariant(format!("member views diverge: {:?}", report.mismatches)));
    }

    let resolved = Resolved::new("trace")
        .with("event", value_name(&a.event))
        .with("group-size", a.group_size)
        .with("degree", a.degree)
        .with("user", user.0)
        .with("xi", a.xi)
        .with("n", a.n)
        .with("seed", a.seed)
        .with("eve", value_name(&a.eve))
        .with("decoy-policy", value_name(&a.decoy_policy))
        .with("reveal-keys", a.reveal_keys);
    let file = TraceFile { config: resolved.json(), trace: &trace };
    let mut json = serde_json::to_string_pretty(&file).expect("trace serializes");
    json.push('\n');

    let summary = format!(
        "{} {}: {} keys updated, {} qubits, {} encryptions, {} message groups, tree N={} h={} d={}",
        value_name(&a.event),
        user,
        trace.keys_updated(),
        trace.counters.qubits_prepared,
        trace.counters.encryptions,
        trace.rekey_messages.len(),
        trace.stats.users,
        trace.stats.height,
        trace.stats.degree
    );
    match &a.out {
        Some(p) => {
            emit(Some(p), &json)?;
            println!("{summary}");
        }
        None => {
            emit(None, &json)?;
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn cost_table(resolved: &Resolved, rows: &[CostRow]) -> String {
    let mut s = format!("{}\n{}\n", resolved.comment(), CostRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn cmd_cost(a: CostArgs) -> Result<(), CliError> {
    let mut p = CostParams::new(a.group_size, a.n, a.xi);
    p.d = a.d;
    let row = cost_row(a.protocol, &p).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut resolved = Resolved::new("cost")
        .with("protocol", a.protocol)
        .with("N", a.group_size)
        .with("n", a.n)
        .with("xi", a.xi);
    if let Some(d) = a.d {
        resolved = resolved.with("d", d);
    }
    emit(a.out.as_deref(), &cost_table(&resolved, &[row]))
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let sweep = sweep_degree(a.group_size, a.n, &a.xi_list, a.d_min, a.d_max)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let resolved = Resolved::new("sweep-degree")
        .with("N", a.group_size)
        .with("n", a.n)
        .with("xi-list", join_list(&a.xi_list))
        .with("d-min", a.d_min)
        .with("d-max", a.d_max);
    let mut s = cost_table(&resolved, &sweep.rows);
    for b in &sweep.best {
        s.push_str(&format!("# argmin xi={} d={} cost={} near-ties={}\n", b.xi, b.d, b.cost, join_list(&b.near_ties)));
    }
    emit(a.out.as_deref(), &s)
}

fn cmd_star(a: StarArgs) -> Result<(), CliError> {
    let rows = star_vs_tree(&a.group_sizes, a.n, a.xi, a.d).map_err(|e| CliError::Usage(e.to_string()))?;
    let resolved = Resolved::new("star-vs-tree")
        .with("N-list", join_list(&a.group_sizes))
        .with("n", a.n)
        .with("xi", a.xi)
        .with("d", a.d);
    let mut s = format!("{}\n{}\n", resolved.comment(), StarTreeRow::CSV_HEADER);
    for r in &rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    emit(a.out.as_deref(), &s)
}

fn cmd_simulate(a: SimArgs) -> Result<(), CliError> {
    let cfg = WorkloadConfig {
        initial: a.initial,
        degree: a.degree,
        n: a.n,
        xi: a.xi,
        lambda: a.lambda,
        steps: a.steps,
        p_join: a.p_join,
        seed: a.seed,
        arrivals: match a.arrivals {
            ArrivalsArg::Split => Arrivals::Split,
            ArrivalsArg::Independent => Arrivals::Independent,
        },
        mode: match a.mode {
            ModeArg::Simulated => Mode::Simulated,
            ModeArg::Analytic => Mode::Analytic,
        },
        decoy_policy: a.decoy_policy.into(),
        track_views: false,
    };
    let series = compare_backends(&cfg, &a.backends)?;
    fs::create_dir_all(&a.out)?;
    for s in &series {
        fs::write(a.out.join(format!("{}.csv", s.backend)), s.to_csv(&cfg))?;
        println!(
            "{}: {} events, {} skipped leaves, {} qubits, {:.4} per event, final N={}",
            s.backend,
            s.events,
            s.skipped_leaves,
            s.records.last().map_or(0.0, |r| r.qubits_prepared()),
            s.mean_event_cost(),
            s.records.last().map_or(cfg.initial, |r| r.group_size)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<T: Serialize> {
    config: serde_json::Value,
    report: T,
}

fn cmd_attack(a: AttackArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.probability) {
        return Err(CliError::Usage(format!("--probability {} is outside [0, 1]", a.probability)));
    }
    let mut resolved = Resolved::new("attack")
        .with("strategy", value_name(&a.strategy))
        .with("trials", a.trials)
        .with("seed", a.seed);
    let (csv_header, csv_row, json) = match a.strategy {
        StrategyArg::DishonestLeader => {
            if a.attacker > a.users {
                return Err(CliError::Usage(format!("--attacker {} is not a participant", a.attacker)));
            }
            resolved = resolved
                .with("users", a.users)
                .with("n", a.n)
                .with("attacker", a.attacker)
                .with("schedule", value_name(&a.schedule));
            let schedule = match a.schedule {
                ScheduleArg::RoundRobin => LeaderSchedule::RoundRobin,
                ScheduleArg::Fixed => LeaderSchedule::Fixed(a.attacker),
            };
            let base = QkaConfig::with_users(a.users, a.n).seed(a.seed);
            let r = malicious_leader_experiment(&base, Some(a.attacker), schedule, a.trials)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let row = format!(
                "{},{},{},{},{},{}",
                r.trials, r.positions, r.positions_led, r.forced_bits, r.forced_fraction, r.other_positions_one_frequency
            );
            let json = serde_json::to_value(&r).expect("report serializes");
            ("trials,positions,positions_led,forced_bits,forced_fraction,other_positions_one_frequency", row, json)
        }
        s => {
            resolved = resolved.with("decoys", a.decoys).with("probability", a.probability);
            let strategy = match s {
                StrategyArg::None => EveStrategy::none(),
                StrategyArg::InterceptResend => EveStrategy::intercept_resend(),
                _ => EveStrategy::cnot(),
            }
            .with_probability(a.probability);
            let r = detection_experiment(strategy, a.decoys, a.trials, a.seed);
            let json = serde_json::to_value(&r).expect("report serializes");
            (AttackReport::CSV_HEADER, r.csv_row(), json)
        }
    };
    let content = match a.format {
        FormatArg::Csv => format!("{}\n{}\n{}\n", resolved.comment(), csv_header, csv_row),
        FormatArg::Json => {
            let mut s = serde_json::to_string_pretty(&ReportFile { config: resolved.json(), report: json })
                .expect("report serializes");
            s.push('\n');
            s
        }
    };
    emit(a.out.as_deref(), &content)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Trace(a) => cmd_trace(a),
        Command::Cost(a) => cmd_cost(a),
        Command::SweepDegree(a) => cmd_sweep(a),
        Command::StarVsTree(a) => cmd_star(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Attack(a) => cmd_attack(a),
    }
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("qgka: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qgka: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
