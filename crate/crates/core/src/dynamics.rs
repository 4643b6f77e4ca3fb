//! Closed-loop vector fields, their Jacobians, equilibria, the exact
//! shifted-coordinate matrix and its affine-parameter factorization.
//!
//! Per microgrid the closed loop is
//!
//! ```text
//! C v'      = I_f i_f - i_L(v) - M i_pi - i_ext
//! i_f'      = alpha I_f^T v + beta i_f + gamma e
//! e_1'      = v_ref - v_1                      (grid-forming)
//! e_k'      = p_ref,k - v_k i_f,k              (grid-following, k ≥ 2)
//! L i_pi'   = -R i_pi + M^T v
//! p_ref,k'  = -tau_k (2 q_k p_ref,k + r_k - price)
//! lambda'   = kappa i_f,1
//! ```
//!
//! where `price` is the state `lambda` when the economic port is self-closed
//! and an external signal otherwise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Microgrid, ZipLoad};
use crate::numerics::newton::{damped_newton, NewtonOptions};

/// Evaluations with a constant-power load at or below this voltage are rejected.
pub const CPL_GUARD_VOLTS: f64 = 1.0;

/// Price fed to the grid-following DGUs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriceMode {
    /// The local price state closes the loop.
    SelfClosed,
    /// An external price drives the followers; the local price is only an output.
    External(f64),
}

impl PriceMode {
    pub fn is_closed(&self) -> bool {
        matches!(self, PriceMode::SelfClosed)
    }
}

/// Port inputs of one microgrid. `i_ext` is indexed by node and holds the
/// current drawn from each node by external lines; an empty slice means none.
#[derive(Debug, Clone, Copy)]
pub struct PortInput<'a> {
    pub i_ext: &'a [f64],
    pub price: PriceMode,
}

impl PortInput<'static> {
    pub fn self_closed() -> Self {
        Self {
            i_ext: &[],
            price: PriceMode::SelfClosed,
        }
    }

    pub fn external_price(lambda: f64) -> Self {
        Self {
            i_ext: &[],
            price: PriceMode::External(lambda),
        }
    }
}

fn zip_current_at(node: usize, v: f64, load: &ZipLoad) -> Result<f64> {
    if load.p != 0.0 && v <= CPL_GUARD_VOLTS {
        return Err(Error::SingularLoad { node, voltage: v });
    }
    let cpl = if load.p == 0.0 { 0.0 } else { load.p / v };
    Ok(load.y * v + cpl + load.i_hat)
}

/// Load current `y v + p / v + i_hat`.
pub fn zip_current(v: f64, load: &ZipLoad) -> Result<f64> {
    zip_current_at(0, v, load)
}

/// Writes the closed-loop derivative of `x` into `dx`.
pub fn vector_field(mg: &Microgrid, x: &[f64], input: &PortInput, dx: &mut [f64]) -> Result<()> {
    let lay = mg.layout();
    lay.check(x, "state vector")?;
    lay.check(dx, "derivative buffer")?;
    let (n, d) = (lay.n, lay.d);
    if !input.i_ext.is_empty() && input.i_ext.len() != n {
        return Err(Error::Dimension {
            context: "external currents",
            expected: n,
            got: input.i_ext.len(),
        });
    }
    let v = &x[lay.v()];
    let i_f = &x[lay.i_f()];
    let e = &x[lay.e()];
    let i_pi = &x[lay.i_pi()];
    let p_ref = &x[lay.p_ref()];
    let lambda = x[lay.lambda()];

    for (i, load) in mg.loads().iter().enumerate() {
        let ext = input.i_ext.get(i).copied().unwrap_or(0.0);
        dx[i] = -zip_current_at(i, v[i], load)? - ext;
    }
    for (k, &node) in mg.dgu_nodes().iter().enumerate() {
        dx[node] += i_f[k];
    }
    let i_pi_off = lay.i_pi().start;
    for (j, &(a, b)) in mg.line_ends().iter().enumerate() {
        dx[a] += i_pi[j];
        dx[b] -= i_pi[j];
        dx[i_pi_off + j] = (-mg.r_pi()[j] * i_pi[j] + (v[b] - v[a])) / mg.l_pi()[j];
    }
    for (dv, c) in dx[..n].iter_mut().zip(mg.capacitance()) {
        *dv /= c;
    }

    let (if_off, e_off) = (lay.i_f().start, lay.e().start);
    for (k, &node) in mg.dgu_nodes().iter().enumerate() {
        dx[if_off + k] = mg.alpha()[k] * v[node] + mg.beta()[k] * i_f[k] + mg.gamma()[k] * e[k];
        dx[e_off + k] = if k == 0 {
            mg.v_ref() - v[node]
        } else {
            p_ref[k - 1] - v[node] * i_f[k]
        };
    }

    let price = match input.price {
        PriceMode::SelfClosed => lambda,
        PriceMode::External(l) => l,
    };
    let p_off = lay.p_ref().start;
    for (m, (cost, tau)) in mg.costs().iter().zip(mg.tau()).enumerate() {
        dx[p_off + m] = -tau * (cost.gradient(p_ref[m]) - price);
    }
    dx[lay.lambda()] = mg.kappa() * i_f[0];
    debug_assert_eq!(d, mg.dgu_nodes().len());
    Ok(())
}

/// Allocating convenience wrapper around [`vector_field`].
pub fn eval_vector_field(mg: &Microgrid, x: &[f64], input: &PortInput) -> Result<Vec<f64>> {
    let mut dx = vec![0.0; mg.dim()];
    vector_field(mg, x, input, &mut dx)?;
    Ok(dx)
}

/// Analytic Jacobian of [`vector_field`] with respect to the state.
pub fn jacobian(mg: &Microgrid, x: &[f64], price: PriceMode) -> Result<DMatrix<f64>> {
    let lay = mg.layout();
    lay.check(x, "state vector")?;
    let mut jac = DMatrix::zeros(lay.dim(), lay.dim());
    let (if_off, e_off, pi_off, p_off) = (
        lay.i_f().start,
        lay.e().start,
        lay.i_pi().start,
        lay.p_ref().start,
    );
    let c = mg.capacitance();
    for (i, load) in mg.loads().iter().enumerate() {
        let v = x[i];
        if load.p != 0.0 && v <= CPL_GUARD_VOLTS {
            return Err(Error::SingularLoad { node: i, voltage: v });
        }
        let di = load.y - if load.p == 0.0 { 0.0 } else { load.p / (v * v) };
        jac[(i, i)] = -di / c[i];
    }
    for (j, &(a, b)) in mg.line_ends().iter().enumerate() {
        jac[(a, pi_off + j)] = 1.0 / c[a];
        jac[(b, pi_off + j)] = -1.0 / c[b];
        let l = mg.l_pi()[j];
        jac[(pi_off + j, a)] = -1.0 / l;
        jac[(pi_off + j, b)] = 1.0 / l;
        jac[(pi_off + j, pi_off + j)] = -mg.r_pi()[j] / l;
    }
    for (k, &node) in mg.dgu_nodes().iter().enumerate() {
        jac[(node, if_off + k)] = 1.0 / c[node];
        jac[(if_off + k, node)] = mg.alpha()[k];
        jac[(if_off + k, if_off + k)] = mg.beta()[k];
        jac[(if_off + k, e_off + k)] = mg.gamma()[k];
        if k == 0 {
            jac[(e_off, node)] = -1.0;
        } else {
            jac[(e_off + k, node)] = -x[if_off + k];
            jac[(e_off + k, if_off + k)] = -x[node];
            jac[(e_off + k, p_off + k - 1)] = 1.0;
        }
    }
    for (m, (cost, tau)) in mg.costs().iter().zip(mg.tau()).enumerate() {
        jac[(p_off + m, p_off + m)] = -2.0 * tau * cost.q;
        if price.is_closed() {
            jac[(p_off + m, lay.lambda())] = *tau;
        }
    }
    jac[(lay.lambda(), if_off)] = mg.kappa();
    Ok(jac)
}

/// Per-row weights that turn `f(x)` into balance-equation units: `C v'` (A),
/// `L_f i_f'` (V), `e'` (V or W), `L i_pi'` (V), `p_ref' / tau` ($/W) and
/// `lambda' / kappa` (A).
pub fn balance_weights(mg: &Microgrid) -> Vec<f64> {
    let lay = mg.layout();
    let mut w = vec![1.0; lay.dim()];
    w[lay.v()].copy_from_slice(mg.capacitance());
    for (k, &node) in mg.dgu_nodes().iter().enumerate() {
        let l_f = mg.spec().nodes[node].filter.expect("DGU has a filter").l_f;
        w[lay.i_f().start + k] = l_f;
    }
    w[lay.i_pi()].copy_from_slice(mg.l_pi());
    for (m, tau) in mg.tau().iter().enumerate() {
        w[lay.p_ref().start + m] = 1.0 / tau;
    }
    w[lay.lambda()] = 1.0 / mg.kappa();
    w
}

/// `max_k |w_k f_k(x)|` with the weights of [`balance_weights`].
pub fn balance_residual(mg: &Microgrid, x: &[f64], input: &PortInput) -> Result<f64> {
    let f = eval_vector_field(mg, x, input)?;
    Ok(f.iter()
        .zip(balance_weights(mg))
        .fold(0.0_f64, |m, (f, w)| m.max((f * w).abs())))
}

/// Solves `f(x) = 0` by damped Newton from `v = v_ref`, everything else zero.
///
/// Convergence is measured by [`balance_residual`]. Raw derivatives are not
/// used because a line row `(v_b - v_a - R i) / L` cannot resolve below
/// `ulp(v) / L`, which exceeds the tolerance for microhenry lines.
///
/// When the local price does not feed back into the dynamics (no followers,
/// or an external price) it is left at its initial value and the price row,
/// `kappa i_f,1 = 0`, is checked after the solve instead.
pub fn equilibrium_solve(mg: &Microgrid, price: PriceMode) -> Result<Vec<f64>> {
    equilibrium_solve_with(mg, price, NewtonOptions::default())
}

pub fn equilibrium_solve_with(mg: &Microgrid, price: PriceMode, opts: NewtonOptions) -> Result<Vec<f64>> {
    let lay = mg.layout();
    let mut x0 = vec![0.0; lay.dim()];
    x0[lay.v()].fill(mg.v_ref());
    if let PriceMode::External(l) = price {
        x0[lay.lambda()] = l;
    }
    let price_free = price.is_closed() && lay.d > 1;
    let mut active = vec![true; lay.dim()];
    active[lay.lambda()] = price_free;

    let input = PortInput { i_ext: &[], price };
    let w = balance_weights(mg);
    let (mut x, iterations) = damped_newton(
        |x| {
            let mut f = eval_vector_field(mg, x, &input)?;
            f.iter_mut().zip(&w).for_each(|(f, w)| *f *= w);
            Ok(f)
        },
        |x| {
            let mut j = jacobian(mg, x, price)?;
            for (r, w) in w.iter().enumerate() {
                j.row_mut(r).scale_mut(*w);
            }
            Ok(j)
        },
        x0,
        &active,
        opts,
    )?;
    // v_1 enters only the row `v_ref - v_1`, so the exact root is v_ref.
    x[mg.dgu_nodes()[0]] = mg.v_ref();
    let residual = balance_residual(mg, &x, &input)?;
    if residual >= opts.tolerance {
        return Err(Error::NoEquilibrium { iterations, residual });
    }
    Ok(x)
}

/// Exact shifted-coordinate matrix: `f(x̄ + x̃) - f(x̄) = A(x̃, x̄, P) x̃` when
/// both sides use the constant-power vector `p` and the same external inputs.
pub fn shifted_matrix(
    mg: &Microgrid,
    xbar: &[f64],
    xtilde: &[f64],
    p: &[f64],
    price: PriceMode,
) -> Result<DMatrix<f64>> {
    let lay = mg.layout();
    lay.check(xbar, "equilibrium")?;
    lay.check(xtilde, "deviation")?;
    if p.len() != lay.n {
        return Err(Error::Dimension {
            context: "constant-power vector",
            expected: lay.n,
            got: p.len(),
        });
    }
    let mut a = linear_part(mg, price);
    let c = mg.capacitance();
    for i in 0..lay.n {
        if p[i] != 0.0 {
            let v = xbar[i] + xtilde[i];
            for volts in [xbar[i], v] {
                if volts <= CPL_GUARD_VOLTS {
                    return Err(Error::SingularLoad {
                        node: i,
                        voltage: volts,
                    });
                }
            }
            a[(i, i)] += p[i] / (xbar[i] * v) / c[i];
        }
    }
    let (if_off, e_off) = (lay.i_f().start, lay.e().start);
    for (k, &node) in mg.dgu_nodes().iter().enumerate().skip(1) {
        a[(e_off + k, node)] = -(xbar[if_off + k] + xtilde[if_off + k]);
        a[(e_off + k, if_off + k)] = -xbar[node];
    }
    Ok(a)
}

/// State-independent part of the shifted matrix (everything except the
/// constant-power diagonal and the follower power-error couplings).
fn linear_part(mg: &Microgrid, price: PriceMode) -> DMatrix<f64> {
    let lay = mg.layout();
    let mut a = DMatrix::zeros(lay.dim(), lay.dim());
    let (if_off, e_off, pi_off, p_off) = (
        lay.i_f().start,
        lay.e().start,
        lay.i_pi().start,
        lay.p_ref().start,
    );
    let c = mg.capacitance();
    for (i, load) in mg.loads().iter().enumerate() {
        a[(i, i)] = -load.y / c[i];
    }
    for (j, &(na, nb)) in mg.line_ends().iter().enumerate() {
        a[(na, pi_off + j)] = 1.0 / c[na];
        a[(nb, pi_off + j)] = -1.0 / c[nb];
        let l = mg.l_pi()[j];
        a[(pi_off + j, na)] = -1.0 / l;
        a[(pi_off + j, nb)] = 1.0 / l;
        a[(pi_off + j, pi_off + j)] = -mg.r_pi()[j] / l;
    }
    for (k, &node) in mg.dgu_nodes().iter().enumerate() {
        a[(node, if_off + k)] = 1.0 / c[node];
        a[(if_off + k, node)] = mg.alpha()[k];
        a[(if_off + k, if_off + k)] = mg.beta()[k];
        a[(if_off + k, e_off + k)] = mg.gamma()[k];
        if k == 0 {
            a[(e_off, node)] = -1.0;
        } else {
            a[(e_off + k, p_off + k - 1)] = 1.0;
        }
    }
    for (m, (cost, tau)) in mg.costs().iter().zip(mg.tau()).enumerate() {
        a[(p_off + m, p_off + m)] = -2.0 * tau * cost.q;
        if price.is_closed() {
            a[(p_off + m, lay.lambda())] = *tau;
        }
    }
    a[(lay.lambda(), if_off)] = mg.kappa();
    a
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn add(&self, o: &Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn mul(&self, o: &Interval) -> Interval {
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        Interval::new(
            c.iter().copied().fold(f64::INFINITY, f64::min),
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    /// Reciprocal of an interval that excludes zero.
    pub fn recip(&self) -> Option<Interval> {
        if self.lo > 0.0 || self.hi < 0.0 {
            Some(Interval::new(1.0 / self.hi, 1.0 / self.lo))
        } else {
            None
        }
    }
}

/// Operating envelope over which a certificate is sought: equilibrium
/// voltages and filter currents, deviations from them, and constant-power loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub v_box: Interval,
    pub i_box: Interval,
    pub v_tilde_box: Interval,
    pub i_tilde_box: Interval,
    pub p_box: Interval,
    /// Node ids whose constant-power load ranges over `p_box`; every other
    /// node has no constant-power load. All nodes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_nodes: Option<Vec<u32>>,
}

impl Envelope {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("v_box", self.v_box),
            ("i_box", self.i_box),
            ("v_tilde_box", self.v_tilde_box),
            ("i_tilde_box", self.i_tilde_box),
            ("p_box", self.p_box),
        ] {
            if !b.is_valid() {
                return Err(Error::Envelope(format!(
                    "{name} must be a nonempty finite interval"
                )));
            }
        }
        if self.v_box.lo <= 0.0 {
            return Err(Error::Envelope("equilibrium voltages must be positive".into()));
        }
        Ok(())
    }

    pub fn cpl_interval(&self, mg: &Microgrid, node: usize) -> Interval {
        match &self.p_nodes {
            Some(ids) if !ids.contains(&mg.node_id(node)) => Interval::point(0.0),
            _ => self.p_box,
        }
    }
}

/// Which state-dependent entry an affine parameter stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    /// `p_i / (v̄_i v_i)` on the voltage diagonal.
    CplGain { node: usize },
    /// `v̄` of a grid-following DGU node in the power-error row.
    FollowerVoltage { dgu: usize },
    /// `i_f` of a grid-following DGU in the power-error row.
    FollowerCurrent { dgu: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParam {
    pub kind: ParamKind,
    pub interval: Interval,
    /// Sparse coefficient matrix as `(row, col, value)` triplets.
    pub coefficient: Vec<(usize, usize, f64)>,
}

/// `A(θ) = A_0 + Σ θ_k A_k` with every `θ_k` ranging over an interval.
#[derive(Debug, Clone)]
pub struct ShiftedSystem {
    pub envelope: Envelope,
    pub price_closed: bool,
    /// Constant part, including parameters whose interval is a single point.
    pub a0: DMatrix<f64>,
    /// Parameters with nondegenerate intervals.
    pub params: Vec<AffineParam>,
}

impl ShiftedSystem {
    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn assemble(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        if theta.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.params.len(),
                got: theta.len(),
            });
        }
        let mut a = self.a0.clone();
        for (param, &t) in self.params.iter().zip(theta) {
            for &(r, c, val) in &param.coefficient {
                a[(r, c)] += t * val;
            }
        }
        Ok(a)
    }

    pub fn coefficient_matrix(&self, k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for &(r, c, val) in &self.params[k].coefficient {
            m[(r, c)] += val;
        }
        m
    }

    /// Parameter values realised by a concrete `(x̄, x̃, P)`.
    pub fn parameter_values(&self, mg: &Microgrid, xbar: &[f64], xtilde: &[f64], p: &[f64]) -> Vec<f64> {
        let lay = mg.layout();
        self.params
            .iter()
            .map(|param| match param.kind {
                ParamKind::CplGain { node } => p[node] / (xbar[node] * (xbar[node] + xtilde[node])),
                ParamKind::FollowerVoltage { dgu } => xbar[mg.dgu_nodes()[dgu]],
                ParamKind::FollowerCurrent { dgu } => {
                    let k = lay.i_f().start + dgu;
                    xbar[k] + xtilde[k]
                }
            })
            .collect()
    }
}

/// Builds the affine-parameter form of the shifted matrix over `env`.
///
/// Parameters: `a_i = p_i / (v̄_i v_i)` with bounds from monotone interval
/// arithmetic, `b_k = v̄` at follower nodes over the voltage box and
/// `c_k = i_f,k` over the sum of the current and current-deviation boxes.
pub fn affine_factorization(mg: &Microgrid, env: &Envelope, price: PriceMode) -> Result<ShiftedSystem> {
    env.validate()?;
    let lay = mg.layout();
    let mut a0 = linear_part(mg, price);
    let mut params = Vec::new();
    let mut push = |a0: &mut DMatrix<f64>, kind, interval: Interval, coef: Vec<(usize, usize, f64)>| {
        if interval.is_degenerate() {
            for &(r, c, val) in &coef {
                a0[(r, c)] += interval.lo * val;
            }
        } else {
            params.push(AffineParam {
                kind,
                interval,
                coefficient: coef,
            });
        }
    };

    let v_dev = env.v_box.add(&env.v_tilde_box);
    for node in 0..lay.n {
        let p = env.cpl_interval(mg, node);
        if p.lo == 0.0 && p.hi == 0.0 {
            continue;
        }
        if v_dev.lo <= 0.0 {
            return Err(Error::Envelope(format!(
                "v̄ + ṽ may reach {} V at node {} with a constant-power load",
                v_dev.lo,
                mg.node_id(node)
            )));
        }
        let inv = env.v_box.mul(&v_dev).recip().expect("positive product");
        let range = p.mul(&inv);
        push(
            &mut a0,
            ParamKind::CplGain { node },
            range,
            vec![(node, node, 1.0 / mg.capacitance()[node])],
        );
    }
    let i_total = env.i_box.add(&env.i_tilde_box);
    let (if_off, e_off) = (lay.i_f().start, lay.e().start);
    for (k, &node) in mg.dgu_nodes().iter().enumerate().skip(1) {
        push(
            &mut a0,
            ParamKind::FollowerVoltage { dgu: k },
            env.v_box,
            vec![(e_off + k, if_off + k, -1.0)],
        );
        push(
            &mut a0,
            ParamKind::FollowerCurrent { dgu: k },
            i_total,
            vec![(e_off + k, node, -1.0)],
        );
    }
    Ok(ShiftedSystem {
        envelope: env.clone(),
        price_closed: price.is_closed(),
        a0,
        params,
    })
}

/// Input/output maps of the electric and economic ports.
#[derive(Debug, Clone, PartialEq)]
pub struct PortMatrices {
    /// N × z; column `k` is `-t_i / C_i` for port node `i`.
    pub b_ext: DMatrix<f64>,
    /// z × N, equal to `b_extᵀ`.
    pub c_ext: DMatrix<f64>,
    /// `tau` on the power-reference segment.
    pub b_econ: Vec<f64>,
    /// Selector of the local price.
    pub c_econ: Vec<f64>,
    /// Node indices of the electric ports.
    pub port_nodes: Vec<usize>,
    /// Node ids of the electric ports.
    pub port_ids: Vec<u32>,
}

impl PortMatrices {
    pub fn electric_ports(&self) -> usize {
        self.b_ext.ncols()
    }
}

/// Port matrices for electric ports at the given node ids.
pub fn port_matrices(mg: &Microgrid, port_node_ids: &[u32]) -> Result<PortMatrices> {
    let lay = mg.layout();
    let mut nodes = Vec::with_capacity(port_node_ids.len());
    for &id in port_node_ids {
        let node = mg
            .node_index(id)
            .ok_or_else(|| Error::Port(format!("unknown node id {id}")))?;
        if nodes.contains(&node) {
            return Err(Error::Port(format!("duplicate port node {id}")));
        }
        nodes.push(node);
    }
    let mut b_ext = DMatrix::zeros(lay.dim(), nodes.len());
    for (k, &node) in nodes.iter().enumerate() {
        b_ext[(node, k)] = -1.0 / mg.capacitance()[node];
    }
    let mut b_econ = vec![0.0; lay.dim()];
    b_econ[lay.p_ref()].copy_from_slice(mg.tau());
    let mut c_econ = vec![0.0; lay.dim()];
    c_econ[lay.lambda()] = 1.0;
    Ok(PortMatrices {
        c_ext: b_ext.transpose(),
        b_ext,
        b_econ,
        c_econ,
        port_nodes: nodes,
        port_ids: port_node_ids.to_vec(),
    })
}
