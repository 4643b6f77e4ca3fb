//! Lyapunov and passivity certificates for the shifted microgrid system.
//!
//! Every inequality is checked at the corners of the affine parameter box
//! produced by [`affine_factorization`](crate::dynamics::affine_factorization).
//! Port blocks that must vanish are enforced as equalities on `S`; the rest
//! of each vertex matrix is the strict block whose largest eigenvalue is the
//! vertex margin.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Envelope, Interval, PortMatrices, ShiftedSystem};
use crate::error::{Error, Result};
use crate::numerics::eig::{asymmetry, max_eig, min_eig};

pub const DEFAULT_VERTEX_CAP: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    /// `AᵀS + SA < 0` with the economic port self-closed.
    Stability,
    /// Passivity of the electric ports with the economic port self-closed.
    ElectricEip,
    /// Input-feedforward/output-feedback passivity of the electric and
    /// economic ports together, with the price as an external input.
    EconIfofp,
}

impl CertificateKind {
    /// Whether the shifted system must close the price loop internally.
    pub fn price_closed(self) -> bool {
        !matches!(self, Self::EconIfofp)
    }

    fn uses_ports(self) -> bool {
        !matches!(self, Self::Stability)
    }
}

/// Corners of the parameter box. Bit `k` of the vertex index selects the
/// upper end of parameter `k`.
#[derive(Debug, Clone)]
pub struct Vertices {
    intervals: Vec<Interval>,
    next: usize,
    count: usize,
}

impl Vertices {
    pub fn vertex(&self, index: usize) -> Vec<f64> {
        self.intervals
            .iter()
            .enumerate()
            .map(|(k, iv)| if index >> k & 1 == 1 { iv.hi } else { iv.lo })
            .collect()
    }
}

impl Iterator for Vertices {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.next >= self.count {
            return None;
        }
        let v = self.vertex(self.next);
        self.next += 1;
        Some(v)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.count - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Vertices {}

pub fn enumerate_vertices(shifted: &ShiftedSystem, cap: usize) -> Result<Vertices> {
    let m = shifted.params.len();
    if m > cap || m >= usize::BITS as usize {
        return Err(Error::VertexCap { count: m, cap });
    }
    Ok(Vertices {
        intervals: shifted.params.iter().map(|p| p.interval).collect(),
        next: 0,
        count: 1 << m,
    })
}

fn check_ports(kind: CertificateKind, n: usize, ports: &PortMatrices) -> Result<()> {
    if !kind.uses_ports() {
        return Ok(());
    }
    if ports.b_ext.nrows() != n || ports.b_econ.len() != n || ports.c_econ.len() != n {
        return Err(Error::Dimension {
            context: "port matrices",
            expected: n,
            got: ports.b_ext.nrows(),
        });
    }
    Ok(())
}

/// `SA + (SA)ᵀ`, exactly symmetric.
fn lyapunov_term(a: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let sa = s * a;
    &sa + sa.transpose()
}

/// The full vertex inequality matrix, which must be negative semidefinite.
///
/// Stability gives `AᵀS + SA`. ElectricEip appends `SB − Cᵀ` and a zero
/// block for the electric ports. EconIfofp uses
/// `X = AᵀS + SA + ρ cᵀc` and appends the economic column `Sb − cᵀ` with
/// `ν` in the corner.
pub fn assemble_lmi(
    kind: CertificateKind,
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    ports: &PortMatrices,
    nu: f64,
    rho: f64,
) -> DMatrix<f64> {
    let n = a.nrows();
    let mut x = lyapunov_term(a, s);
    if kind == CertificateKind::Stability {
        return x;
    }
    let z = ports.electric_ports();
    let extra = usize::from(kind == CertificateKind::EconIfofp);
    let l = ports.c_econ.iter().position(|&c| c != 0.0);
    if extra == 1 {
        if let Some(l) = l {
            x[(l, l)] += rho * ports.c_econ[l] * ports.c_econ[l];
        }
    }
    let mut m = DMatrix::zeros(n + z + extra, n + z + extra);
    m.view_mut((0, 0), (n, n)).copy_from(&x);
    let sb = s * &ports.b_ext;
    for k in 0..z {
        for i in 0..n {
            let v = sb[(i, k)] - ports.c_ext[(k, i)];
            m[(i, n + k)] = v;
            m[(n + k, i)] = v;
        }
    }
    if extra == 1 {
        let sb = s * DVector::from_column_slice(&ports.b_econ);
        for i in 0..n {
            let v = sb[i] - ports.c_econ[i];
            m[(i, n + z)] = v;
            m[(n + z, i)] = v;
        }
        m[(n + z, n + z)] = nu;
    }
    m
}

/// The part of [`assemble_lmi`] left after removing the electric-port rows,
/// which must vanish exactly for the inequality to hold.
pub fn strict_block(
    kind: CertificateKind,
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    ports: &PortMatrices,
    nu: f64,
    rho: f64,
) -> DMatrix<f64> {
    let n = a.nrows();
    let full = assemble_lmi(kind, a, s, ports, nu, rho);
    if kind != CertificateKind::EconIfofp {
        return full.view((0, 0), (n, n)).into_owned();
    }
    let z = ports.electric_ports();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&full.view((0, 0), (n, n)));
    for i in 0..n {
        m[(i, n)] = full[(i, n + z)];
        m[(n, i)] = full[(n + z, i)];
    }
    m[(n, n)] = nu;
    m
}

/// Largest entry of `|SB − Cᵀ|`; zero for stability certificates.
pub fn port_equality_residual(kind: CertificateKind, s: &DMatrix<f64>, ports: &PortMatrices) -> f64 {
    if !kind.uses_ports() || ports.electric_ports() == 0 {
        return 0.0;
    }
    let sb = s * &ports.b_ext;
    (&sb - ports.c_ext.transpose()).amax()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub dim: usize,
    /// `S`, row-major.
    pub s: Vec<f64>,
    pub nu: f64,
    pub rho: f64,
    /// Largest strict-block eigenvalue over all vertices.
    pub margin: f64,
    pub vertex_margins: Vec<f64>,
    pub min_eig_s: f64,
    pub epsilon: f64,
    pub envelope: Envelope,
    /// Node ids of the electric ports.
    pub port_nodes: Vec<u32>,
}

impl Certificate {
    pub fn s_matrix(&self) -> Result<DMatrix<f64>> {
        if self.s.len() != self.dim * self.dim {
            return Err(Error::Dimension {
                context: "certificate matrix",
                expected: self.dim * self.dim,
                got: self.s.len(),
            });
        }
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &self.s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub kind: CertificateKind,
    pub vertex_count: usize,
    pub vertex_margins: Vec<f64>,
    pub margin: f64,
    pub worst_vertex: usize,
    pub min_eig_s: f64,
    pub equality_residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleReport {
    pub kind: CertificateKind,
    /// Smallest worst-vertex margin reached.
    pub best_margin: f64,
    pub worst_vertex: usize,
    pub worst_parameters: Vec<f64>,
    pub vertex_margins: Vec<f64>,
    pub epsilon: f64,
    /// Largest index shortage tried, for economic certificates.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum SolveOutcome {
    Certified(Certificate),
    Infeasible(InfeasibleReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Required gap: every vertex margin must be at most `-epsilon`.
    pub epsilon: f64,
    pub vertex_cap: usize,
    /// Bound on `trace(S)` for port certificates, as a multiple of `N`.
    pub trace_cap: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Fixed `(ν, ρ)` for economic certificates; searched when absent.
    pub indices: Option<(f64, f64)>,
    /// Search range for `σ` with `ν = ρ = −σ`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_rel_tol: f64,
    /// Upper bound on the memory the solver may allocate for vertex data (bytes).
    pub memory_budget: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            vertex_cap: DEFAULT_VERTEX_CAP,
            trace_cap: 100.0,
            max_outer: 60,
            max_newton: 100,
            indices: None,
            sigma_min: 1e-6,
            sigma_max: 1e12,
            sigma_rel_tol: 1e-2,
            memory_budget: 4 << 30,
        }
    }
}

fn check_kind(kind: CertificateKind, shifted: &ShiftedSystem) -> Result<()> {
    if kind.price_closed() != shifted.price_closed {
        return Err(Error::Invalid(format!(
            "{kind:?} needs a shifted system with the price loop {}",
            if kind.price_closed() { "closed" } else { "open" }
        )));
    }
    Ok(())
}

fn vertex_matrices(shifted: &ShiftedSystem, cap: usize) -> Result<(Vertices, Vec<DMatrix<f64>>)> {
    let vertices = enumerate_vertices(shifted, cap)?;
    let mats = vertices
        .clone()
        .map(|theta| shifted.assemble(&theta))
        .collect::<Result<Vec<_>>>()?;
    Ok((vertices, mats))
}

pub fn verify_certificate(
    cert: &Certificate,
    shifted: &ShiftedSystem,
    ports: &PortMatrices,
) -> Result<VerificationReport> {
    check_kind(cert.kind, shifted)?;
    let n = shifted.dim();
    if cert.dim != n {
        return Err(Error::Dimension {
            context: "certificate matrix",
            expected: n,
            got: cert.dim,
        });
    }
    check_ports(cert.kind, n, ports)?;
    let s = cert.s_matrix()?;
    let vertices = enumerate_vertices(shifted, usize::BITS as usize - 1)?;
    let count = vertices.len();
    let margins = (0..count)
        .into_par_iter()
        .map(|k| {
            let a = shifted.assemble(&vertices.vertex(k))?;
            max_eig(&strict_block(cert.kind, &a, &s, ports, cert.nu, cert.rho))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (worst_vertex, margin) = worst(&margins);
    let min_eig_s = if asymmetry(&s) == 0.0 {
        min_eig(&s)?
    } else {
        f64::NEG_INFINITY
    };
    let equality_residual = port_equality_residual(cert.kind, &s, ports);
    let pass = min_eig_s > 0.0 && margin < 0.0 && equality_residual == 0.0;
    Ok(VerificationReport {
        kind: cert.kind,
        vertex_count: count,
        vertex_margins: margins,
        margin,
        worst_vertex,
        min_eig_s,
        equality_residual,
        pass,
    })
}

fn worst(margins: &[f64]) -> (usize, f64) {
    margins.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (k, m)| if m > acc.1 { (k, m) } else { acc },
    )
}

/// `S = I + Σ y_a S_a` over the subspace allowed by the certificate kind.
fn basis(n: usize, fixed: &[usize], trace_fixed: bool) -> Vec<DMatrix<f64>> {
    let free: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
    let mut out = Vec::new();
    for (a, &i) in free.iter().enumerate() {
        for &j in &free[a + 1..] {
            let mut m = DMatrix::zeros(n, n);
            m[(i, j)] = 1.0;
            m[(j, i)] = 1.0;
            out.push(m);
        }
    }
    match free.split_last() {
        Some((&last, rest)) if trace_fixed => {
            for &i in rest {
                let mut m = DMatrix::zeros(n, n);
                m[(i, i)] = 1.0;
                m[(last, last)] = -1.0;
                out.push(m);
            }
        }
        _ => {
            for &i in &free {
                let mut m = DMatrix::zeros(n, n);
                m[(i, i)] = 1.0;
                out.push(m);
            }
        }
    }
    out
}

/// Minimizes `t` subject to `F_v(y) < t I` at every vertex, `S(y) > 0` and
/// optionally `trace(S(y)) < cap`, by a log-barrier Newton method.
struct BarrierProblem {
    n: usize,
    basis: Vec<DMatrix<f64>>,
    f0: Vec<DMatrix<f64>>,
    fa: Vec<Vec<DMatrix<f64>>>,
    trace_cap: Option<f64>,
}

impl BarrierProblem {
    fn new(
        kind: CertificateKind,
        mats: &[DMatrix<f64>],
        ports: &PortMatrices,
        nu: f64,
        rho: f64,
        trace_cap: Option<f64>,
    ) -> Self {
        let n = mats[0].nrows();
        let fixed: &[usize] = if kind.uses_ports() { &ports.port_nodes } else { &[] };
        let basis = basis(n, fixed, kind == CertificateKind::Stability);
        let eye = DMatrix::identity(n, n);
        let f0 = mats
            .iter()
            .map(|a| strict_block(kind, a, &eye, ports, nu, rho))
            .collect();
        let fa = mats
            .iter()
            .map(|a| {
                let zero = strict_block(kind, a, &DMatrix::zeros(n, n), ports, nu, rho);
                basis
                    .iter()
                    .map(|sa| strict_block(kind, a, sa, ports, nu, rho) - &zero)
                    .collect()
            })
            .collect();
        Self {
            n,
            basis,
            f0,
            fa,
            trace_cap,
        }
    }

    fn s(&self, y: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::identity(self.n, self.n);
        for (b, &w) in self.basis.iter().zip(y) {
            s += b * w;
        }
        s
    }

    fn f(&self, v: usize, y: &[f64]) -> DMatrix<f64> {
        let mut f = self.f0[v].clone();
        for (fa, &w) in self.fa[v].iter().zip(y) {
            f += fa * w;
        }
        f
    }

    fn worst_margin(&self, y: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for v in 0..self.f0.len() {
            worst = worst.max(max_eig(&self.f(v, y))?);
        }
        Ok(worst)
    }

    fn degree(&self) -> f64 {
        let blocks: usize = self.f0.iter().map(|f| f.nrows()).sum();
        (blocks + self.n + usize::from(self.trace_cap.is_some())) as f64
    }

    /// Barrier value, or `None` outside the domain.
    fn value(&self, eta: f64, y: &[f64], t: f64) -> Option<f64> {
        let mut phi = eta * t;
        for v in 0..self.f0.len() {
            let g = DMatrix::identity(self.f0[v].nrows(), self.f0[v].nrows()) * t - self.f(v, y);
            phi -= log_det(g)?;
        }
        let s = self.s(y);
        if let Some(cap) = self.trace_cap {
            let slack = cap - s.trace();
            if slack <= 0.0 {
                return None;
            }
            phi -= slack.ln();
        }
        phi -= log_det(s)?;
        Some(phi)
    }

    /// Gradient and Hessian over `(y, t)`.
    fn derivatives(&self, eta: f64, y: &[f64], t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let m = self.basis.len();
        let mut g = DVector::zeros(m + 1);
        let mut h = DMatrix::zeros(m + 1, m + 1);
        g[m] = eta;
        for v in 0..self.f0.len() {
            let k = self.f0[v].nrows();
            let eye = DMatrix::identity(k, k);
            let gm = &eye * t - self.f(v, y);
            // dG/dy_a = -F_a, dG/dt = I.
            let mut dirs: Vec<(usize, &DMatrix<f64>, f64)> =
                self.fa[v].iter().enumerate().map(|(a, f)| (a, f, -1.0)).collect();
            dirs.push((m, &eye, 1.0));
            add_log_det_terms(&mut g, &mut h, gm, &dirs)?;
        }
        let s = self.s(y);
        if let Some(cap) = self.trace_cap {
            let slack = cap - s.trace();
            if slack <= 0.0 {
                return None;
            }
            let d: Vec<f64> = self.basis.iter().map(|b| -b.trace()).collect();
            for a in 0..m {
                g[a] -= d[a] / slack;
                for b in 0..m {
                    h[(a, b)] += d[a] * d[b] / (slack * slack);
                }
            }
        }
        let dirs: Vec<(usize, &DMatrix<f64>, f64)> =
            self.basis.iter().enumerate().map(|(a, b)| (a, b, 1.0)).collect();
        add_log_det_terms(&mut g, &mut h, s, &dirs)?;
        Some((g, h))
    }

    fn solve(&self, opts: &SolverOptions) -> Result<Vec<f64>> {
        let m = self.basis.len();
        let mut y = vec![0.0; m];
        let t0 = self.worst_margin(&y)?;
        let scale = t0.abs().max(1.0);
        let mut t = t0 + scale;
        let degree = self.degree();
        let mut eta = 1.0 / scale;
        let mut best = (t0, y.clone());
        for _ in 0..opts.max_outer {
            for _ in 0..opts.max_newton {
                let Some((g, h)) = self.derivatives(eta, &y, t) else {
                    break;
                };
                let Some(dz) = newton_direction(&h, &g) else { break };
                let decrement = -g.dot(&dz);
                if !(decrement > 1e-10) {
                    break;
                }
                let phi = self.value(eta, &y, t).expect("iterate in domain");
                let mut alpha = 1.0;
                let mut moved = false;
                while alpha > 1e-12 {
                    let yn: Vec<f64> = y.iter().zip(dz.iter()).map(|(a, d)| a + alpha * d).collect();
                    let tn = t + alpha * dz[m];
                    if let Some(pn) = self.value(eta, &yn, tn) {
                        if pn <= phi - 0.25 * alpha * decrement {
                            y = yn;
                            t = tn;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved || decrement < 1e-9 {
                    break;
                }
            }
            let margin = self.worst_margin(&y)?;
            if margin < best.0 {
                best = (margin, y.clone());
            }
            let gap = degree / eta;
            if gap <= 1e-4 * margin.abs().max(opts.epsilon) {
                break;
            }
            if margin - gap > 0.0 {
                break;
            }
            eta *= 8.0;
        }
        Ok(best.1)
    }
}

/// Adds the derivatives of `-log det G` along the directions `dG/dz_a`.
fn add_log_det_terms(
    g: &mut DVector<f64>,
    h: &mut DMatrix<f64>,
    gm: DMatrix<f64>,
    dirs: &[(usize, &DMatrix<f64>, f64)],
) -> Option<()> {
    let chol = gm.cholesky()?;
    let l = chol.l();
    let ws: Vec<DMatrix<f64>> = dirs
        .iter()
        .map(|&(_, d, sign)| {
            let half = l.solve_lower_triangular(d).expect("nonsingular factor");
            let w = l
                .solve_lower_triangular(&half.transpose())
                .expect("nonsingular factor");
            w * sign
        })
        .collect();
    for (i, &(a, _, _)) in dirs.iter().enumerate() {
        g[a] -= ws[i].trace();
        for (j, &(b, _, _)) in dirs.iter().enumerate().skip(i) {
            let v = ws[i].dot(&ws[j]);
            h[(a, b)] += v;
            if a != b {
                h[(b, a)] += v;
            }
        }
    }
    Some(())
}

fn log_det(m: DMatrix<f64>) -> Option<f64> {
    let chol = m.cholesky()?;
    let l = chol.l_dirty();
    let mut s = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) {
            return None;
        }
        s += d.ln();
    }
    Some(2.0 * s)
}

/// Solves `H dz = −g` after symmetric diagonal scaling.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = g.len();
    let d: Vec<f64> = (0..n)
        .map(|i| 1.0 / h[(i, i)].abs().max(f64::MIN_POSITIVE).sqrt())
        .collect();
    let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * d[i] * d[j]);
    let gs = DVector::from_fn(n, |i, _| -g[i] * d[i]);
    let x = match hs.clone().cholesky() {
        Some(c) => c.solve(&gs),
        None => hs.lu().solve(&gs)?,
    };
    let dz = DVector::from_fn(n, |i, _| x[i] * d[i]);
    dz.iter().all(|v| v.is_finite()).then_some(dz)
}

fn attempt(
    kind: CertificateKind,
    shifted: &ShiftedSystem,
    mats: &[DMatrix<f64>],
    ports: &PortMatrices,
    nu: f64,
    rho: f64,
    opts: &SolverOptions,
) -> Result<(Certificate, VerificationReport)> {
    let n = shifted.dim();
    let cap = kind.uses_ports().then_some(opts.trace_cap * n as f64);
    let problem = BarrierProblem::new(kind, mats, ports, nu, rho, cap);
    let y = problem.solve(opts)?;
    let mut s = problem.s(&y);
    if kind == CertificateKind::Stability {
        s *= n as f64 / s.trace();
    }
    let s = (&s + s.transpose()) * 0.5;
    let mut cert = Certificate {
        kind,
        dim: n,
        s: s.transpose().iter().copied().collect(),
        nu,
        rho,
        margin: f64::NAN,
        vertex_margins: Vec::new(),
        min_eig_s: f64::NAN,
        epsilon: opts.epsilon,
        envelope: shifted.envelope.clone(),
        port_nodes: if kind.uses_ports() {
            ports.port_ids.clone()
        } else {
            Vec::new()
        },
    };
    let report = verify_certificate(&cert, shifted, ports)?;
    cert.margin = report.margin;
    cert.vertex_margins = report.vertex_margins.clone();
    cert.min_eig_s = report.min_eig_s;
    Ok((cert, report))
}

fn accepted(report: &VerificationReport, epsilon: f64) -> bool {
    report.pass && report.margin <= -epsilon
}

fn infeasible(
    kind: CertificateKind,
    report: &VerificationReport,
    vertices: &Vertices,
    epsilon: f64,
    sigma: Option<f64>,
) -> InfeasibleReport {
    InfeasibleReport {
        kind,
        best_margin: report.margin,
        worst_vertex: report.worst_vertex,
        worst_parameters: vertices.vertex(report.worst_vertex),
        vertex_margins: report.vertex_margins.clone(),
        epsilon,
        sigma,
    }
}

/// Searches for a certificate whose verified margin is at most `-epsilon`.
///
/// For [`CertificateKind::EconIfofp`] without fixed indices the smallest
/// `σ` with `ν = ρ = −σ` is located by geometric bisection.
pub fn solve_certificate(
    shifted: &ShiftedSystem,
    ports: &PortMatrices,
    kind: CertificateKind,
    opts: &SolverOptions,
) -> Result<SolveOutcome> {
    check_kind(kind, shifted)?;
    check_ports(kind, shifted.dim(), ports)?;
    if !(opts.epsilon >= 0.0 && opts.trace_cap > 1.0) {
        return Err(Error::Invalid(
            "epsilon must be nonnegative and trace_cap above 1".into(),
        ));
    }
    let count = enumerate_vertices(shifted, opts.vertex_cap)?.len();
    let n = shifted.dim();
    // one strict block per vertex and basis element, at most (N+1)² entries each
    let bytes = (n * (n + 1) / 2 + 1)
        .saturating_mul((n + 1) * (n + 1))
        .saturating_mul(count)
        .saturating_mul(std::mem::size_of::<f64>());
    if bytes > opts.memory_budget {
        return Err(Error::ProblemSize {
            vertices: count,
            bytes,
            budget: opts.memory_budget,
        });
    }
    let (vertices, mats) = vertex_matrices(shifted, opts.vertex_cap)?;

    if kind != CertificateKind::EconIfofp || opts.indices.is_some() {
        let (nu, rho) = match kind {
            CertificateKind::EconIfofp => opts.indices.expect("checked"),
            _ => (0.0, 0.0),
        };
        let (cert, report) = attempt(kind, shifted, &mats, ports, nu, rho, opts)?;
        return Ok(if accepted(&report, opts.epsilon) {
            SolveOutcome::Certified(cert)
        } else {
            SolveOutcome::Infeasible(infeasible(kind, &report, &vertices, opts.epsilon, None))
        });
    }

    let run = |sigma: f64| attempt(kind, shifted, &mats, ports, -sigma, -sigma, opts);
    let mut hi = opts.sigma_min.max(1.0).min(opts.sigma_max);
    let mut found = run(hi)?;
    let mut lo;
    if accepted(&found.1, opts.epsilon) {
        lo = hi;
        loop {
            if lo <= opts.sigma_min {
                return Ok(SolveOutcome::Certified(found.0));
            }
            lo = (lo / 10.0).max(opts.sigma_min);
            let r = run(lo)?;
            if accepted(&r.1, opts.epsilon) {
                hi = lo;
                found = r;
            } else {
                break;
            }
        }
    } else {
        let mut last = found;
        loop {
            lo = hi;
            if hi >= opts.sigma_max {
                return Ok(SolveOutcome::Infeasible(infeasible(
                    kind,
                    &last.1,
                    &vertices,
                    opts.epsilon,
                    Some(hi),
                )));
            }
            hi = (hi * 10.0).min(opts.sigma_max);
            let r = run(hi)?;
            if accepted(&r.1, opts.epsilon) {
                found = r;
                break;
            }
            last = r;
        }
    }
    while hi / lo > 1.0 + opts.sigma_rel_tol {
        let mid = (hi * lo).sqrt();
        let r = run(mid)?;
        if accepted(&r.1, opts.epsilon) {
            hi = mid;
            found = r;
        } else {
            lo = mid;
        }
    }
    Ok(SolveOutcome::Certified(found.0))
}
