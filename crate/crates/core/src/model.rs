//! Declarative microgrid and network descriptions.
//!
//! A [`MicrogridSpec`] is what a config file contains. [`Microgrid`] is the
//! compiled, validated form used by every numerical routine: line
//! capacitances are folded into node capacitances, the grid-forming DGU is
//! placed first in the DGU ordering and controller gains are converted to the
//! closed-loop coefficients `alpha`, `beta`, `gamma`.
//!
//! State vectors are flat `[f64]` slices laid out as
//! `(v, i_f, e, i_pi, p_ref, lambda)`; see [`StateLayout`].

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pricing::QuadraticCost;

/// Voltage-dependent ZIP load `i = y v + p / v + i_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipLoad {
    /// Constant conductance (S).
    #[serde(default)]
    pub y: f64,
    /// Constant power (W).
    #[serde(default)]
    pub p: f64,
    /// Constant current (A).
    #[serde(default)]
    pub i_hat: f64,
}

impl ZipLoad {
    pub fn constant_power(p: f64) -> Self {
        Self {
            y: 0.0,
            p,
            i_hat: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    GridForming,
    GridFollowing,
    LoadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filter {
    /// Filter inductance (H).
    pub l_f: f64,
    /// Filter resistance (Ω).
    pub r_f: f64,
}

/// State-feedback gains of the converter voltage `v_t = k_alpha v + k_beta i_f + k_gamma e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    pub k_alpha: f64,
    pub k_beta: f64,
    pub k_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    /// Label used by lines, ports and events. Unique within a microgrid.
    pub id: u32,
    pub kind: NodeKind,
    /// Filter (or bus) capacitance (F).
    pub c_f: f64,
    #[serde(default)]
    pub load: ZipLoad,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Filter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Gains>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<QuadraticCost>,
    /// Primal-dual step gain of the power reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

/// π-model line. The line current is positive when flowing from `to` into `from`,
/// which is the orientation implied by `C dv/dt = ... - M i_pi` and
/// `L di_pi/dt = -R i_pi + M^T v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: u32,
    pub to: u32,
    pub r_pi: f64,
    pub l_pi: f64,
    /// Half of the shunt capacitance, added to both endpoint nodes.
    #[serde(default)]
    pub c_pi_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridSpec {
    #[serde(default)]
    pub name: String,
    pub v_ref: f64,
    /// Gain of the price-forming integrator.
    pub kappa: f64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub lines: Vec<LineSpec>,
}

/// A single failed structural rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn finite_positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Checks every structural rule. An empty vector means the spec is usable.
pub fn validate(spec: &MicrogridSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if !finite_positive(spec.v_ref) {
        out.push(Violation::new("v_ref", "v_ref > 0 required"));
    }
    if !finite_positive(spec.kappa) {
        out.push(Violation::new("kappa", "kappa > 0 required"));
    }
    if spec.nodes.is_empty() {
        out.push(Violation::new("nodes", "at least one node required"));
        return out;
    }

    let mut ids = HashSet::new();
    let mut forming = 0;
    for (k, node) in spec.nodes.iter().enumerate() {
        let field = |name: &str| format!("nodes[{k}].{name}");
        if !ids.insert(node.id) {
            out.push(Violation::new(
                field("id"),
                format!("duplicate node id {}", node.id),
            ));
        }
        if !finite_positive(node.c_f) {
            out.push(Violation::new(field("c_f"), "c_f > 0 required"));
        }
        let ld = node.load;
        if !(ld.y.is_finite() && ld.p.is_finite() && ld.i_hat.is_finite()) {
            out.push(Violation::new(field("load"), "load parameters must be finite"));
        }
        if ld.y < 0.0 {
            out.push(Violation::new(field("load.y"), "y >= 0 required"));
        }

        let is_dgu = node.kind != NodeKind::LoadOnly;
        let is_follower = node.kind == NodeKind::GridFollowing;
        if node.kind == NodeKind::GridForming {
            forming += 1;
        }
        if node.filter.is_some() != is_dgu {
            out.push(Violation::new(
                field("filter"),
                "filter present iff node carries a DGU",
            ));
        }
        if node.gains.is_some() != is_dgu {
            out.push(Violation::new(
                field("gains"),
                "gains present iff node carries a DGU",
            ));
        }
        if node.cost.is_some() != is_follower {
            out.push(Violation::new(
                field("cost"),
                "cost present iff node is grid-following",
            ));
        }
        if node.tau.is_some() != is_follower {
            out.push(Violation::new(
                field("tau"),
                "tau present iff node is grid-following",
            ));
        }
        if let Some(f) = node.filter {
            if !finite_positive(f.l_f) {
                out.push(Violation::new(field("filter.l_f"), "l_f > 0 required"));
            }
            if !finite_positive(f.r_f) {
                out.push(Violation::new(field("filter.r_f"), "r_f > 0 required"));
            }
            if let Some(g) = node.gains {
                let derived = [
                    (g.k_alpha - 1.0) / f.l_f,
                    (g.k_beta - f.r_f) / f.l_f,
                    g.k_gamma / f.l_f,
                ];
                if derived.iter().any(|x| !x.is_finite()) {
                    out.push(Violation::new(
                        field("gains"),
                        "derived alpha, beta, gamma must be finite",
                    ));
                }
            }
        }
        if let Some(c) = node.cost {
            if !(c.q.is_finite() && c.q > 0.0) {
                out.push(Violation::new(field("cost.q"), "q > 0 required"));
            }
            if !(c.r.is_finite() && c.s.is_finite()) {
                out.push(Violation::new(field("cost"), "r and s must be finite"));
            }
        }
        if let Some(t) = node.tau {
            if !finite_positive(t) {
                out.push(Violation::new(field("tau"), "tau > 0 required"));
            }
        }
    }
    if forming != 1 {
        out.push(Violation::new(
            "nodes",
            format!("exactly one grid-forming node required (found {forming})"),
        ));
    }

    let index: HashMap<u32, usize> = spec.nodes.iter().enumerate().map(|(k, n)| (n.id, k)).collect();
    let mut endpoints_ok = true;
    for (j, line) in spec.lines.iter().enumerate() {
        let field = |name: &str| format!("lines[{j}].{name}");
        if line.from == line.to {
            out.push(Violation::new(field("to"), "from != to required"));
        }
        for (name, id) in [("from", line.from), ("to", line.to)] {
            if !index.contains_key(&id) {
                endpoints_ok = false;
                out.push(Violation::new(field(name), format!("unknown node id {id}")));
            }
        }
        if !finite_positive(line.r_pi) {
            out.push(Violation::new(field("r_pi"), "r_pi > 0 required"));
        }
        if !finite_positive(line.l_pi) {
            out.push(Violation::new(field("l_pi"), "l_pi > 0 required"));
        }
        if !(line.c_pi_half.is_finite() && line.c_pi_half >= 0.0) {
            out.push(Violation::new(field("c_pi_half"), "c_pi_half >= 0 required"));
        }
    }

    if endpoints_ok {
        let edges: Vec<(usize, usize)> = spec
            .lines
            .iter()
            .map(|l| (index[&l.from], index[&l.to]))
            .collect();
        if !connected(spec.nodes.len(), &edges) {
            out.push(Violation::new("lines", "graph connected required"));
        }
    }
    out
}

pub(crate) fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return true;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Node-by-line incidence matrix: `-1` where a line leaves a node (`from`),
/// `+1` where it enters (`to`).
pub fn build_incidence(spec: &MicrogridSpec) -> Result<DMatrix<f64>> {
    let index: HashMap<u32, usize> = spec.nodes.iter().enumerate().map(|(k, n)| (n.id, k)).collect();
    let mut m = DMatrix::zeros(spec.nodes.len(), spec.lines.len());
    for (j, line) in spec.lines.iter().enumerate() {
        let lookup = |id: u32, name: &str| {
            index.get(&id).copied().ok_or_else(|| {
                Error::Validation(vec![Violation::new(
                    format!("lines[{j}].{name}"),
                    format!("unknown node id {id}"),
                )])
            })
        };
        let a = lookup(line.from, "from")?;
        let b = lookup(line.to, "to")?;
        m[(a, j)] = -1.0;
        m[(b, j)] = 1.0;
    }
    Ok(m)
}

/// Offsets of the state segments `(v, i_f, e, i_pi, p_ref, lambda)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n: usize,
    pub d: usize,
    pub l: usize,
}

/// Segment view of a flat state vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateSegments {
    pub v: Vec<f64>,
    pub i_f: Vec<f64>,
    pub e: Vec<f64>,
    pub i_pi: Vec<f64>,
    pub p_ref: Vec<f64>,
    pub lambda: f64,
}

impl StateLayout {
    pub fn new(n: usize, d: usize, l: usize) -> Self {
        assert!(d >= 1, "a microgrid has at least one DGU");
        Self { n, d, l }
    }

    pub fn dim(&self) -> usize {
        self.n + 3 * self.d + self.l
    }

    pub fn v(&self) -> Range<usize> {
        0..self.n
    }

    pub fn i_f(&self) -> Range<usize> {
        self.n..self.n + self.d
    }

    pub fn e(&self) -> Range<usize> {
        let s = self.n + self.d;
        s..s + self.d
    }

    pub fn i_pi(&self) -> Range<usize> {
        let s = self.n + 2 * self.d;
        s..s + self.l
    }

    pub fn p_ref(&self) -> Range<usize> {
        let s = self.n + 2 * self.d + self.l;
        s..s + self.d - 1
    }

    pub fn lambda(&self) -> usize {
        self.dim() - 1
    }

    pub fn pack(&self, seg: &StateSegments) -> Result<Vec<f64>> {
        let checks = [
            ("v segment", self.n, seg.v.len()),
            ("i_f segment", self.d, seg.i_f.len()),
            ("e segment", self.d, seg.e.len()),
            ("i_pi segment", self.l, seg.i_pi.len()),
            ("p_ref segment", self.d - 1, seg.p_ref.len()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(Error::Dimension {
                    context,
                    expected,
                    got,
                });
            }
        }
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&seg.v);
        x.extend_from_slice(&seg.i_f);
        x.extend_from_slice(&seg.e);
        x.extend_from_slice(&seg.i_pi);
        x.extend_from_slice(&seg.p_ref);
        x.push(seg.lambda);
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> Result<StateSegments> {
        self.check(x, "state vector")?;
        Ok(StateSegments {
            v: x[self.v()].to_vec(),
            i_f: x[self.i_f()].to_vec(),
            e: x[self.e()].to_vec(),
            i_pi: x[self.i_pi()].to_vec(),
            p_ref: x[self.p_ref()].to_vec(),
            lambda: x[self.lambda()],
        })
    }

    pub(crate) fn check(&self, x: &[f64], context: &'static str) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                context,
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Layout of a spec without compiling it.
pub fn layout(spec: &MicrogridSpec) -> Result<StateLayout> {
    let violations = validate(spec);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let d = spec.nodes.iter().filter(|n| n.kind != NodeKind::LoadOnly).count();
    Ok(StateLayout::new(spec.nodes.len(), d, spec.lines.len()))
}

/// Compiled microgrid. Immutable apart from load parameters, which scenario
/// events may change between integration segments.
#[derive(Debug, Clone)]
pub struct Microgrid {
    spec: MicrogridSpec,
    layout: StateLayout,
    capacitance: Vec<f64>,
    loads: Vec<ZipLoad>,
    dgu_nodes: Vec<usize>,
    node_dgu: Vec<Option<usize>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    costs: Vec<QuadraticCost>,
    tau: Vec<f64>,
    line_ends: Vec<(usize, usize)>,
    r_pi: Vec<f64>,
    l_pi: Vec<f64>,
    incidence: DMatrix<f64>,
}

impl Microgrid {
    pub fn new(spec: &MicrogridSpec) -> Result<Self> {
        let violations = validate(spec);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let n = spec.nodes.len();
        let incidence = build_incidence(spec)?;
        let index: HashMap<u32, usize> = spec.nodes.iter().enumerate().map(|(k, nd)| (nd.id, k)).collect();

        let mut capacitance: Vec<f64> = spec.nodes.iter().map(|nd| nd.c_f).collect();
        let mut line_ends = Vec::with_capacity(spec.lines.len());
        for line in &spec.lines {
            let (a, b) = (index[&line.from], index[&line.to]);
            capacitance[a] += line.c_pi_half;
            capacitance[b] += line.c_pi_half;
            line_ends.push((a, b));
        }

        let forming = spec
            .nodes
            .iter()
            .position(|nd| nd.kind == NodeKind::GridForming)
            .expect("validated");
        let first_dgu = spec
            .nodes
            .iter()
            .position(|nd| nd.kind != NodeKind::LoadOnly)
            .expect("validated");
        if first_dgu != forming {
            log::warn!(
                "microgrid '{}': grid-forming node {} is not the first DGU; re-indexing DGUs",
                spec.name,
                spec.nodes[forming].id
            );
        }
        let mut dgu_nodes = vec![forming];
        dgu_nodes.extend(
            spec.nodes
                .iter()
                .enumerate()
                .filter(|(_, nd)| nd.kind == NodeKind::GridFollowing)
                .map(|(k, _)| k),
        );
        let mut node_dgu = vec![None; n];
        for (k, &node) in dgu_nodes.iter().enumerate() {
            node_dgu[node] = Some(k);
        }

        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        let mut gamma = Vec::new();
        let mut costs = Vec::new();
        let mut tau = Vec::new();
        for &node in &dgu_nodes {
            let nd = &spec.nodes[node];
            let f = nd.filter.expect("validated");
            let g = nd.gains.expect("validated");
            alpha.push((g.k_alpha - 1.0) / f.l_f);
            beta.push((g.k_beta - f.r_f) / f.l_f);
            gamma.push(g.k_gamma / f.l_f);
            if nd.kind == NodeKind::GridFollowing {
                costs.push(nd.cost.expect("validated"));
                tau.push(nd.tau.expect("validated"));
            }
        }

        let layout = StateLayout::new(n, dgu_nodes.len(), spec.lines.len());
        Ok(Self {
            spec: spec.clone(),
            layout,
            capacitance,
            loads: spec.nodes.iter().map(|nd| nd.load).collect(),
            dgu_nodes,
            node_dgu,
            alpha,
            beta,
            gamma,
            costs,
            tau,
            line_ends,
            r_pi: spec.lines.iter().map(|l| l.r_pi).collect(),
            l_pi: spec.lines.iter().map(|l| l.l_pi).collect(),
            incidence,
        })
    }

    pub fn spec(&self) -> &MicrogridSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn v_ref(&self) -> f64 {
        self.spec.v_ref
    }

    pub fn kappa(&self) -> f64 {
        self.spec.kappa
    }

    /// Node capacitances including folded line capacitance.
    pub fn capacitance(&self) -> &[f64] {
        &self.capacitance
    }

    pub fn loads(&self) -> &[ZipLoad] {
        &self.loads
    }

    pub fn set_load(&mut self, node: usize, load: ZipLoad) {
        self.loads[node] = load;
    }

    /// Copy with the constant-power components replaced by `p`.
    pub fn with_cpl(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.layout.n {
            return Err(Error::Dimension {
                context: "constant-power vector",
                expected: self.layout.n,
                got: p.len(),
            });
        }
        let mut out = self.clone();
        for (load, &pi) in out.loads.iter_mut().zip(p) {
            load.p = pi;
        }
        Ok(out)
    }

    pub fn cpl(&self) -> Vec<f64> {
        self.loads.iter().map(|l| l.p).collect()
    }

    /// Node index of every DGU; entry 0 is the grid-forming unit.
    pub fn dgu_nodes(&self) -> &[usize] {
        &self.dgu_nodes
    }

    pub fn node_dgu(&self, node: usize) -> Option<usize> {
        self.node_dgu[node]
    }

    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.spec.nodes.iter().position(|n| n.id == id)
    }

    pub fn node_id(&self, node: usize) -> u32 {
        self.spec.nodes[node].id
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Costs of the grid-following DGUs, in DGU order (DGU `k` ↔ entry `k - 1`).
    pub fn costs(&self) -> &[QuadraticCost] {
        &self.costs
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn line_ends(&self) -> &[(usize, usize)] {
        &self.line_ends
    }

    pub fn r_pi(&self) -> &[f64] {
        &self.r_pi
    }

    pub fn l_pi(&self) -> &[f64] {
        &self.l_pi
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// `I_f`: n × d map from DGU filter currents to nodes.
    pub fn filter_map(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.layout.n, self.layout.d);
        for (k, &node) in self.dgu_nodes.iter().enumerate() {
            m[(node, k)] = 1.0;
        }
        m
    }

    /// `I_v = diag(1, 0, ..., 0)`.
    pub fn selector_v(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.layout.d, self.layout.d);
        m[(0, 0)] = 1.0;
        m
    }

    /// `I_p = diag(0, 1, ..., 1)`.
    pub fn selector_p(&self) -> DMatrix<f64> {
        let mut m = DMatrix::identity(self.layout.d, self.layout.d);
        m[(0, 0)] = 0.0;
        m
    }

    /// d × (d-1) embedding of the follower power references into the
    /// integrator-error block.
    pub fn pref_embedding(&self) -> DMatrix<f64> {
        let d = self.layout.d;
        let mut m = DMatrix::zeros(d, d - 1);
        for k in 1..d {
            m[(k, k - 1)] = 1.0;
        }
        m
    }
}

/// Line between electric ports of two microgrids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieLineSpec {
    pub mg_a: usize,
    pub node_a: u32,
    pub mg_b: usize,
    pub node_b: u32,
    pub r_pi: f64,
    pub l_pi: f64,
}

fn default_mu() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSpec {
    /// Dense Laplacian over microgrids; a path graph in config order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laplacian: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

impl Default for ConsensusSpec {
    fn default() -> Self {
        Self {
            laplacian: None,
            mu: default_mu(),
        }
    }
}

/// Load change applied at `time` to one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEvent {
    pub time: f64,
    pub microgrid: usize,
    pub node: u32,
    pub load: ZipLoad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub horizon: f64,
    #[serde(default)]
    pub events: Vec<LoadEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub microgrids: Vec<MicrogridSpec>,
    #[serde(default)]
    pub tie_lines: Vec<TieLineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn single(mg: MicrogridSpec) -> Self {
        Self {
            microgrids: vec![mg],
            tie_lines: Vec::new(),
            consensus: None,
            scenario: None,
        }
    }

    /// Consensus Laplacian, defaulting to a path graph over the microgrids.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let m = self.microgrids.len();
        match self.consensus.as_ref().and_then(|c| c.laplacian.as_ref()) {
            Some(rows) => DMatrix::from_fn(m, m, |i, j| {
                rows.get(i).and_then(|r| r.get(j)).copied().unwrap_or(f64::NAN)
            }),
            None => crate::consensus::path_laplacian(m),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.microgrids.is_empty() {
            out.push(Violation::new("microgrids", "at least one microgrid required"));
        }
        for (k, mg) in self.microgrids.iter().enumerate() {
            out.extend(validate(mg).into_iter().map(|v| Violation {
                field: format!("microgrids[{k}].{}", v.field),
                rule: v.rule,
            }));
        }
        let has_node = |mg: usize, id: u32| {
            self.microgrids
                .get(mg)
                .is_some_and(|spec| spec.nodes.iter().any(|n| n.id == id))
        };
        for (j, tie) in self.tie_lines.iter().enumerate() {
            let field = |name: &str| format!("tie_lines[{j}].{name}");
            if !has_node(tie.mg_a, tie.node_a) {
                out.push(Violation::new(field("node_a"), "endpoint does not exist"));
            }
            if !has_node(tie.mg_b, tie.node_b) {
                out.push(Violation::new(field("node_b"), "endpoint does not exist"));
            }
            if tie.mg_a == tie.mg_b && tie.node_a == tie.node_b {
                out.push(Violation::new(field("node_b"), "endpoints must differ"));
            }
            if !finite_positive(tie.r_pi) {
                out.push(Violation::new(field("r_pi"), "r_pi > 0 required"));
            }
            if !finite_positive(tie.l_pi) {
                out.push(Violation::new(field("l_pi"), "l_pi > 0 required"));
            }
        }
        if let Some(c) = &self.consensus {
            if !finite_positive(c.mu) {
                out.push(Violation::new("consensus.mu", "mu > 0 required"));
            }
            let m = self.microgrids.len();
            if let Some(rows) = &c.laplacian {
                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    out.push(Violation::new(
                        "consensus.laplacian",
                        format!("must be {m} x {m}"),
                    ));
                    return out;
                }
            }
            out.extend(
                check_laplacian(&self.laplacian())
                    .into_iter()
                    .map(|rule| Violation::new("consensus.laplacian", rule)),
            );
        }
        out
    }
}

/// Rules a consensus Laplacian must satisfy; empty when valid.
pub fn check_laplacian(l: &DMatrix<f64>) -> Vec<String> {
    let mut out = Vec::new();
    let m = l.nrows();
    if l.ncols() != m {
        out.push("must be square".into());
        return out;
    }
    if l.iter().any(|x| !x.is_finite()) {
        out.push("entries must be finite".into());
        return out;
    }
    let scale = l.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
    if (0..m).any(|i| (0..m).any(|j| (l[(i, j)] - l[(j, i)]).abs() > 1e-12 * scale)) {
        out.push("must be symmetric".into());
    }
    if (0..m).any(|i| l.row(i).sum().abs() > 1e-12 * scale) {
        out.push("rows must sum to zero".into());
    }
    let edges: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .filter(|&(i, j)| l[(i, j)] != 0.0)
        .collect();
    if !connected(m, &edges) {
        out.push("communication graph connected required".into());
    }
    out
}
