//! Closed-form quantum resource costs for star-graph QKA protocols and for
//! tree-based rekeying, plus the degree sweep and star-vs-tree tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("group size must be at least 2, got {0}")]
    GroupSize(f64),
    #[error("key length must be at least 1, got {0}")]
    KeyLength(f64),
    #[error("decoy proportion {0} is outside [0, 1]")]
    Xi(f64),
    #[error("tree degree must be at least 2, got {0}")]
    Degree(usize),
    #[error("{0} needs a tree degree")]
    MissingDegree(CostProtocol),
    #[error("empty degree range {0}..={1}")]
    DegreeRange(usize, usize),
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Group size; real so that averaged group sizes can be plugged in.
    #[serde(rename = "N")]
    pub group_size: f64,
    pub n: f64,
    pub xi: f64,
    pub d: Option<usize>,
}

impl CostParams {
    pub fn new(group_size: f64, n: f64, xi: f64) -> Self {
        Self { group_size, n, xi, d: None }
    }

    pub fn degree(mut self, d: usize) -> Self {
        self.d = Some(d);
        self
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if self.group_size.is_nan() || self.group_size < 2.0 {
            return Err(CostError::GroupSize(self.group_size));
        }
        if self.n.is_nan() || self.n < 1.0 {
            return Err(CostError::KeyLength(self.n));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(CostError::Xi(self.xi));
        }
        match self.d {
            Some(d) if d < 2 => Err(CostError::Degree(d)),
            _ => Ok(()),
        }
    }
}

pub fn c_bell(group: f64, n: f64, xi: f64) -> f64 {
    (2.0 + xi * group) * n * group
}

pub fn c_cluster(group: f64, n: f64, xi: f64) -> f64 {
    (2.0 + xi * group / 2.0) * n * group
}

pub fn c_single(group: f64, n: f64, xi: f64) -> f64 {
    (1.0 + xi * group) * n * group
}

pub fn c_ghz(group: f64, n: f64, xi: f64) -> f64 {
    (1.0 + 2.0 * xi) * n * group - 2.0 * xi * n
}

pub fn log_d(group: f64, d: usize) -> f64 {
    group.ln() / (d as f64).ln()
}

pub fn c_join(group: f64, n: f64, xi: f64, d: usize) -> f64 {
    2.0 * (1.0 + xi) * n * log_d(group, d)
}

pub fn c_leave(group: f64, n: f64, xi: f64, d: usize) -> f64 {
    let a = 1.0 + 2.0 * xi;
    (a * d as f64 + 1.0) * n * log_d(group, d) - a * n
}

pub fn c_avg(group: f64, n: f64, xi: f64, d: usize) -> f64 {
    (c_join(group, n, xi, d) + c_leave(group, n, xi, d)) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostProtocol {
    Bell,
    Cluster,
    Single,
    Ghz,
    TreeJoin,
    TreeLeave,
    TreeAvg,
}

impl CostProtocol {
    pub const ALL: [CostProtocol; 7] = [
        CostProtocol::Bell,
        CostProtocol::Cluster,
        CostProtocol::Single,
        CostProtocol::Ghz,
        CostProtocol::TreeJoin,
        CostProtocol::TreeLeave,
        CostProtocol::TreeAvg,
    ];

    pub const STAR: [CostProtocol; 4] =
        [CostProtocol::Bell, CostProtocol::Cluster, CostProtocol::Single, CostProtocol::Ghz];

    pub fn name(self) -> &'static str {
        match self {
            CostProtocol::Bell => "bell",
            CostProtocol::Cluster => "cluster",
            CostProtocol::Single => "single",
            CostProtocol::Ghz => "ghz",
            CostProtocol::TreeJoin => "tree-join",
            CostProtocol::TreeLeave => "tree-leave",
            CostProtocol::TreeAvg => "tree-avg",
        }
    }

    pub fn needs_degree(self) -> bool {
        matches!(self, CostProtocol::TreeJoin | CostProtocol::TreeLeave | CostProtocol::TreeAvg)
    }

    /// Star-graph cost of one run among `group` participants.
    pub fn star(self, group: f64, n: f64, xi: f64) -> Option<f64> {
        match self {
            CostProtocol::Bell => Some(c_bell(group, n, xi)),
            CostProtocol::Cluster => Some(c_cluster(group, n, xi)),
            CostProtocol::Single => Some(c_single(group, n, xi)),
            CostProtocol::Ghz => Some(c_ghz(group, n, xi)),
            _ => None,
        }
    }

    pub fn evaluate(self, p: &CostParams) -> Result<f64, CostError> {
        p.validate()?;
        let (g, n, xi) = (p.group_size, p.n, p.xi);
        if let Some(c) = self.star(g, n, xi) {
            return Ok(c);
        }
        let d = p.d.ok_or(CostError::MissingDegree(self))?;
        Ok(match self {
            CostProtocol::TreeJoin => c_join(g, n, xi, d),
            CostProtocol::TreeLeave => c_leave(g, n, xi, d),
            _ => c_avg(g, n, xi, d),
        })
    }
}

impl fmt::Display for CostProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostProtocol {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CostProtocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CostError::UnknownProtocol(s.to_string()))
    }
}

/// One row of the cost CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub protocol: String,
    #[serde(rename = "N")]
    pub group_size: f64,
    pub n: f64,
    pub xi: f64,
    pub d: Option<usize>,
    pub cost: f64,
}

impl CostRow {
    pub const CSV_HEADER: &'static str = "protocol,N,n,xi,d,cost";

    pub fn csv_row(&self) -> String {
        let d = self.d.map(|d| d.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.protocol, self.group_size, self.n, self.xi, d, self.cost)
    }
}

pub fn cost_row(protocol: CostProtocol, p: &CostParams) -> Result<CostRow, CostError> {
    let cost = protocol.evaluate(p)?;
    Ok(CostRow {
        protocol: protocol.name().to_string(),
        group_size: p.group_size,
        n: p.n,
        xi: p.xi,
        d: if protocol.needs_degree() { p.d } else { None },
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepBest {
    pub xi: f64,
    pub d: usize,
    pub cost: f64,
    /// Degrees whose cost is within 1% of the minimum, argmin included.
    pub near_ties: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeSweep {
    pub group_size: f64,
    pub n: f64,
    pub rows: Vec<CostRow>,
    pub best: Vec<SweepBest>,
}

pub const NEAR_TIE: f64 = 0.01;

/// Average cost over the grid `xi_list x d_min..=d_max`, with the argmin per ξ.
pub fn sweep_degree(
    group: f64,
    n: f64,
    xi_list: &[f64],
    d_min: usize,
    d_max: usize,
) -> Result<DegreeSweep, CostError> {
    if d_min < 2 {
        return Err(CostError::Degree(d_min));
    }
    if d_max < d_min {
        return Err(CostError::DegreeRange(d_min, d_max));
    }
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for &xi in xi_list {
        let mut costs = Vec::new();
        for d in d_min..=d_max {
            let row = cost_row(CostProtocol::TreeAvg, &CostParams::new(group, n, xi).degree(d))?;
            costs.push((d, row.cost));
            rows.push(row);
        }
        let (d, cost) = costs
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty range");
        let near_ties = costs.iter().filter(|(_, c)| *c <= cost * (1.0 + NEAR_TIE)).map(|(d, _)| *d).collect();
        best.push(SweepBest { xi, d, cost, near_ties });
    }
    Ok(DegreeSweep { group_size: group, n, rows, best })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StarTreeRow {
    #[serde(rename = "N")]
    pub group_size: f64,
    pub bell: f64,
    pub cluster: f64,
    pub single: f64,
    pub ghz: f64,
    pub tree_join: f64,
    pub tree_leave: f64,
    pub tree_avg: f64,
    /// `ghz / tree_avg`.
    pub ghz_over_tree: f64,
}

impl StarTreeRow {
    pub const CSV_HEADER: &'static str = "N,bell,cluster,single,ghz,tree_join,tree_leave,tree_avg,ghz_over_tree";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.group_size,
            self.bell,
            self.cluster,
            self.single,
            self.ghz,
            self.tree_join,
            self.tree_leave,
            self.tree_avg,
            self.ghz_over_tree
        )
    }
}

pub fn star_vs_tree(groups: &[f64], n: f64, xi: f64, d: usize) -> Result<Vec<StarTreeRow>, CostError> {
    groups
        .iter()
        .map(|&g| {
            CostParams::new(g, n, xi).degree(d).validate()?;
            let tree_avg = c_avg(g, n, xi, d);
            Ok(StarTreeRow {
                group_size: g,
                bell: c_bell(g, n, xi),
                cluster: c_cluster(g, n, xi),
                single: c_single(g, n, xi),
                ghz: c_ghz(g, n, xi),
                tree_join: c_join(g, n, xi, d),
                tree_leave: c_leave(g, n, xi, d),
                tree_avg,
                ghz_over_tree: c_ghz(g, n, xi) / tree_avg,
            })
        })
        .collect()
}
