//! Networks of microgrids: composition, scenario runs, steady-state
//! detection and power-balance metrics.
//!
//! The composed state is the concatenation of every microgrid state, one
//! current per tie line, and (economic regime only) one consensus state per
//! microgrid.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::consensus::consensus_rhs;
use crate::dynamics::{equilibrium_solve, jacobian, vector_field, PortInput, PriceMode};
use crate::error::{Error, Result};
use crate::model::{LoadEvent, Microgrid, NetworkSpec, ScenarioSpec, ZipLoad};
use crate::numerics::{damped_newton, integrate, Event, IntegratorConfig, Method, NewtonOptions, OdeSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Microgrids exchange power only; every economic port is self-closed.
    ElectricOnly,
    /// Local prices are additionally coupled through dynamic consensus.
    ElectricPlusEconomic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tie {
    pub mg_a: usize,
    pub node_a: usize,
    pub mg_b: usize,
    pub node_b: usize,
    pub r_pi: f64,
    pub l_pi: f64,
}

/// Composed closed loop. Tie current `i` is positive when flowing from
/// endpoint `b` into endpoint `a`, the same orientation as internal lines.
#[derive(Debug, Clone)]
pub struct Network {
    pub microgrids: Vec<Microgrid>,
    pub ties: Vec<Tie>,
    pub regime: Regime,
    laplacian: DMatrix<f64>,
    mu: f64,
    offsets: Vec<usize>,
    dim: usize,
}

pub fn compose_network(spec: &NetworkSpec, regime: Regime) -> Result<Network> {
    let violations = spec.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let microgrids = spec
        .microgrids
        .iter()
        .map(Microgrid::new)
        .collect::<Result<Vec<_>>>()?;
    let ties = spec
        .tie_lines
        .iter()
        .map(|t| Tie {
            mg_a: t.mg_a,
            node_a: microgrids[t.mg_a].node_index(t.node_a).expect("validated"),
            mg_b: t.mg_b,
            node_b: microgrids[t.mg_b].node_index(t.node_b).expect("validated"),
            r_pi: t.r_pi,
            l_pi: t.l_pi,
        })
        .collect();
    let (laplacian, mu) = match (regime, &spec.consensus) {
        (Regime::ElectricPlusEconomic, None) => {
            return Err(Error::Invalid(
                "the economic regime requires a consensus section".into(),
            ))
        }
        (_, Some(c)) => (spec.laplacian(), c.mu),
        (Regime::ElectricOnly, None) => (spec.laplacian(), 0.0),
    };
    let mut offsets = Vec::with_capacity(microgrids.len() + 1);
    let mut acc = 0;
    for mg in &microgrids {
        offsets.push(acc);
        acc += mg.dim();
    }
    offsets.push(acc);
    let mut net = Network {
        microgrids,
        ties,
        regime,
        laplacian,
        mu,
        offsets,
        dim: 0,
    };
    net.dim = net.consensus_range().end;
    Ok(net)
}

impl Network {
    pub fn len(&self) -> usize {
        self.microgrids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.microgrids.is_empty()
    }

    pub fn mg_range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn tie_range(&self) -> Range<usize> {
        let s = *self.offsets.last().expect("offsets");
        s..s + self.ties.len()
    }

    /// Consensus states; empty in the electric-only regime.
    pub fn consensus_range(&self) -> Range<usize> {
        let s = self.tie_range().end;
        match self.regime {
            Regime::ElectricOnly => s..s,
            Regime::ElectricPlusEconomic => s..s + self.microgrids.len(),
        }
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lambda_loc(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|k| x[self.offsets[k] + self.microgrids[k].layout().lambda()])
            .collect()
    }

    /// Price seen by the followers of each microgrid.
    pub fn lambda_glob(&self, x: &[f64]) -> Vec<f64> {
        let loc = self.lambda_loc(x);
        match self.regime {
            Regime::ElectricOnly => loc,
            Regime::ElectricPlusEconomic => {
                let w = &x[self.consensus_range()];
                loc.iter().zip(w).map(|(l, w)| l + w).collect()
            }
        }
    }

    fn price_modes(&self, x: &[f64]) -> Vec<PriceMode> {
        match self.regime {
            Regime::ElectricOnly => vec![PriceMode::SelfClosed; self.len()],
            Regime::ElectricPlusEconomic => {
                self.lambda_glob(x).into_iter().map(PriceMode::External).collect()
            }
        }
    }

    /// Current drawn from every node of every microgrid by the tie lines.
    pub fn tie_injections(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .microgrids
            .iter()
            .map(|mg| vec![0.0; mg.layout().n])
            .collect();
        let off = self.tie_range().start;
        for (j, t) in self.ties.iter().enumerate() {
            let i = x[off + j];
            out[t.mg_a][t.node_a] -= i;
            out[t.mg_b][t.node_b] += i;
        }
        out
    }

    pub fn eval(&self, x: &[f64], dx: &mut [f64]) -> Result<()> {
        if x.len() != self.dim || dx.len() != self.dim {
            return Err(Error::Dimension {
                context: "network state",
                expected: self.dim,
                got: x.len().min(dx.len()),
            });
        }
        let i_ext = self.tie_injections(x);
        let prices = self.price_modes(x);
        for (k, mg) in self.microgrids.iter().enumerate() {
            let r = self.mg_range(k);
            let input = PortInput {
                i_ext: &i_ext[k],
                price: prices[k],
            };
            vector_field(mg, &x[r.clone()], &input, &mut dx[r])?;
        }
        let off = self.tie_range().start;
        for (j, t) in self.ties.iter().enumerate() {
            let va = x[self.offsets[t.mg_a] + t.node_a];
            let vb = x[self.offsets[t.mg_b] + t.node_b];
            dx[off + j] = (-t.r_pi * x[off + j] + vb - va) / t.l_pi;
        }
        let cr = self.consensus_range();
        if !cr.is_empty() {
            let loc = self.lambda_loc(x);
            consensus_rhs(&self.laplacian, self.mu, &x[cr.clone()], &loc, &mut dx[cr]);
        }
        Ok(())
    }

    pub fn eval_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut dx = vec![0.0; self.dim];
        self.eval(x, &mut dx)?;
        Ok(dx)
    }

    /// Analytic Jacobian of the composed vector field.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        let prices = self.price_modes(x);
        for (k, mg) in self.microgrids.iter().enumerate() {
            let r = self.mg_range(k);
            let jk = jacobian(mg, &x[r.clone()], prices[k])?;
            jac.view_mut((r.start, r.start), (r.len(), r.len()))
                .copy_from(&jk);
        }
        let off = self.tie_range().start;
        for (j, t) in self.ties.iter().enumerate() {
            let a = self.offsets[t.mg_a] + t.node_a;
            let b = self.offsets[t.mg_b] + t.node_b;
            let ca = self.microgrids[t.mg_a].capacitance()[t.node_a];
            let cb = self.microgrids[t.mg_b].capacitance()[t.node_b];
            jac[(a, off + j)] += 1.0 / ca;
            jac[(b, off + j)] -= 1.0 / cb;
            jac[(off + j, a)] = -1.0 / t.l_pi;
            jac[(off + j, b)] = 1.0 / t.l_pi;
            jac[(off + j, off + j)] = -t.r_pi / t.l_pi;
        }
        let cr = self.consensus_range();
        if !cr.is_empty() {
            let m = self.len();
            for k in 0..m {
                let mg = &self.microgrids[k];
                let lam_k = self.offsets[k] + mg.layout().lambda();
                let w_k = cr.start + k;
                // followers see lambda_loc + w
                for (p, tau) in mg.layout().p_ref().zip(mg.tau()) {
                    jac[(self.offsets[k] + p, lam_k)] += tau;
                    jac[(self.offsets[k] + p, w_k)] += tau;
                }
                for h in 0..m {
                    let lam_h = self.offsets[h] + self.microgrids[h].layout().lambda();
                    let lkh = self.laplacian[(k, h)];
                    jac[(w_k, cr.start + h)] -= lkh;
                    jac[(w_k, lam_h)] -= lkh;
                }
                jac[(w_k, w_k)] -= self.mu;
            }
        }
        Ok(jac)
    }

    /// Row weights in balance-equation units, see [`crate::dynamics::balance_weights`].
    pub fn balance_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.dim];
        for (k, mg) in self.microgrids.iter().enumerate() {
            w[self.mg_range(k)].copy_from_slice(&crate::dynamics::balance_weights(mg));
        }
        let off = self.tie_range().start;
        for (j, t) in self.ties.iter().enumerate() {
            w[off + j] = t.l_pi;
        }
        w
    }

    /// Each microgrid at its standalone equilibrium, tie currents and
    /// consensus states at zero.
    pub fn initial_state(&self) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.dim];
        for (k, mg) in self.microgrids.iter().enumerate() {
            let xk = equilibrium_solve(mg, PriceMode::SelfClosed)?;
            x[self.mg_range(k)].copy_from_slice(&xk);
        }
        Ok(x)
    }

    /// Equilibrium of the composed network by damped Newton from `x0`.
    pub fn equilibrium(&self, x0: Vec<f64>) -> Result<Vec<f64>> {
        let mut active = vec![true; self.dim];
        if self.regime == Regime::ElectricOnly {
            for (k, mg) in self.microgrids.iter().enumerate() {
                if mg.layout().d == 1 {
                    active[self.offsets[k] + mg.layout().lambda()] = false;
                }
            }
        }
        let w = self.balance_weights();
        let (x, _) = damped_newton(
            |x| {
                let mut f = self.eval_vec(x)?;
                f.iter_mut().zip(&w).for_each(|(f, w)| *f *= w);
                Ok(f)
            },
            |x| {
                let mut j = self.jacobian(x)?;
                for (r, w) in w.iter().enumerate() {
                    j.row_mut(r).scale_mut(*w);
                }
                Ok(j)
            },
            x0,
            &active,
            NewtonOptions::default(),
        )?;
        Ok(x)
    }

    pub fn apply_load_event(&mut self, ev: &LoadEvent) -> Result<()> {
        let mg = self
            .microgrids
            .get_mut(ev.microgrid)
            .ok_or_else(|| Error::Invalid(format!("event targets unknown microgrid {}", ev.microgrid)))?;
        let node = mg.node_index(ev.node).ok_or_else(|| {
            Error::Invalid(format!(
                "event targets unknown node {} in microgrid {}",
                ev.node, ev.microgrid
            ))
        })?;
        mg.set_load(node, ev.load);
        Ok(())
    }

    /// Normalization of each state for steady-state tests: voltages and the
    /// voltage-error integral in hundreds, powers, prices and power-error
    /// integrals in thousands, currents unscaled.
    pub fn rate_scales(&self) -> Vec<f64> {
        let mut s = vec![1.0; self.dim];
        for (k, mg) in self.microgrids.iter().enumerate() {
            let lay = mg.layout();
            let o = self.offsets[k];
            for i in lay.v() {
                s[o + i] = 100.0;
            }
            for i in lay.e().skip(1) {
                s[o + i] = 1000.0;
            }
            for i in lay.e().take(1) {
                s[o + i] = 100.0;
            }
            for i in lay.p_ref() {
                s[o + i] = 1000.0;
            }
            s[o + lay.lambda()] = 1000.0;
        }
        for i in self.consensus_range() {
            s[i] = 1000.0;
        }
        s
    }
}

impl OdeSystem for Network {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        self.eval(x, dx)
    }
}

/// Power-flow quantities of one microgrid at a given state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridMetrics {
    /// `v_i i_f,i` per DGU, grid-forming first.
    pub injected: Vec<f64>,
    pub p_ref: Vec<f64>,
    pub grid_forming_current: f64,
    pub lambda_loc: f64,
    pub lambda_glob: f64,
    /// `2 q p_ref + r - lambda_glob` per follower.
    pub marginal_residual: Vec<f64>,
    pub load_power: f64,
    pub line_losses: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMetrics {
    pub microgrids: Vec<MicrogridMetrics>,
    pub tie_currents: Vec<f64>,
    pub tie_losses: f64,
    pub total_injected: f64,
    pub total_p_ref: f64,
    pub total_load: f64,
    pub total_losses: f64,
    /// `total_injected - (total_load + total_losses)`.
    pub balance_residual: f64,
}

fn load_power(v: f64, load: &ZipLoad) -> f64 {
    load.y * v * v + load.p + load.i_hat * v
}

pub fn metrics(net: &Network, x: &[f64]) -> NetworkMetrics {
    let glob = net.lambda_glob(x);
    let mut mgs = Vec::with_capacity(net.len());
    for (k, mg) in net.microgrids.iter().enumerate() {
        let xk = &x[net.mg_range(k)];
        let lay = mg.layout();
        let v = &xk[lay.v()];
        let i_f = &xk[lay.i_f()];
        let injected = mg
            .dgu_nodes()
            .iter()
            .zip(i_f)
            .map(|(&node, i)| v[node] * i)
            .collect();
        let p_ref = xk[lay.p_ref()].to_vec();
        let marginal_residual = mg
            .costs()
            .iter()
            .zip(&p_ref)
            .map(|(c, &p)| c.gradient(p) - glob[k])
            .collect();
        let load_power = v.iter().zip(mg.loads()).map(|(&v, l)| load_power(v, l)).sum();
        let line_losses = xk[lay.i_pi()].iter().zip(mg.r_pi()).map(|(i, r)| r * i * i).sum();
        mgs.push(MicrogridMetrics {
            injected,
            p_ref,
            grid_forming_current: i_f[0],
            lambda_loc: xk[lay.lambda()],
            lambda_glob: glob[k],
            marginal_residual,
            load_power,
            line_losses,
        });
    }
    let tie_currents = x[net.tie_range()].to_vec();
    let tie_losses = tie_currents
        .iter()
        .zip(&net.ties)
        .map(|(i, t)| t.r_pi * i * i)
        .sum::<f64>();
    let total_injected = mgs.iter().flat_map(|m| m.injected.iter()).sum::<f64>();
    let total_p_ref = mgs.iter().flat_map(|m| m.p_ref.iter()).sum::<f64>();
    let total_load = mgs.iter().map(|m| m.load_power).sum::<f64>();
    let total_losses = mgs.iter().map(|m| m.line_losses).sum::<f64>() + tie_losses;
    NetworkMetrics {
        microgrids: mgs,
        tie_currents,
        tie_losses,
        total_injected,
        total_p_ref,
        total_load,
        total_losses,
        balance_residual: total_injected - (total_load + total_losses),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateOptions {
    /// Length of the window that ends at each interval boundary (s).
    pub window: f64,
    /// Bound on the scaled difference quotients over the window.
    pub tol: f64,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        Self {
            window: 2.0,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub steady: bool,
    /// Largest normalized rate seen in the window.
    pub max_rate: f64,
    /// Sample index of the representative (last) state in the window.
    pub index: Option<usize>,
}

/// Steady-state test over samples with `t0 <= t <= t1`: every scaled
/// difference quotient between consecutive samples must stay below `tol`.
pub fn detect_steady_state(
    net: &Network,
    t: &[f64],
    x: &[Vec<f64>],
    t0: f64,
    t1: f64,
    tol: f64,
) -> Result<SteadyState> {
    let scales = net.rate_scales();
    let mut max_rate = 0.0_f64;
    let mut last = None;
    let mut prev: Option<usize> = None;
    for (k, &tk) in t.iter().enumerate() {
        if tk < t0 || tk > t1 {
            continue;
        }
        if x[k].len() != scales.len() {
            return Err(Error::Dimension {
                context: "trajectory sample",
                expected: scales.len(),
                got: x[k].len(),
            });
        }
        if let Some(j) = prev {
            let dt = tk - t[j];
            if dt > 0.0 {
                for ((a, b), s) in x[k].iter().zip(&x[j]).zip(&scales) {
                    max_rate = max_rate.max(((a - b) / (dt * s)).abs());
                }
            }
        }
        prev = Some(k);
        last = Some(k);
    }
    let pairs = last.is_some_and(|k| t[k] > t0);
    Ok(SteadyState {
        steady: pairs && max_rate < tol,
        max_rate,
        index: last,
    })
}

/// Per-sample series of one microgrid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MicrogridSeries {
    pub name: String,
    pub node_ids: Vec<u32>,
    pub dgu_node_ids: Vec<u32>,
    pub v: Vec<Vec<f64>>,
    pub i_f: Vec<Vec<f64>>,
    pub injected: Vec<Vec<f64>>,
    pub lambda_loc: Vec<f64>,
    pub lambda_glob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub start: f64,
    pub end: f64,
    pub steady_state: SteadyState,
    /// Reported only when a steady state was detected.
    pub metrics: Option<NetworkMetrics>,
    #[serde(skip)]
    pub state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub regime: Regime,
    pub time: Vec<f64>,
    pub microgrids: Vec<MicrogridSeries>,
    pub tie_currents: Vec<Vec<f64>>,
    /// `total_injected - (total_load + total_losses)` per sample.
    pub balance_residual: Vec<f64>,
    pub intervals: Vec<IntervalSummary>,
    pub steps: usize,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScenarioOptions {
    pub integrator: Option<IntegratorConfig>,
    pub steady: SteadyStateOptions,
}

/// Integrator used by [`run_scenario`] when none is given. The tolerances
/// keep sample-to-sample noise well below the steady-state threshold.
pub fn scenario_integrator() -> IntegratorConfig {
    IntegratorConfig {
        method: Method::Rk45Adaptive {
            rtol: 1e-10,
            atol: 1e-10,
            dt_min: 1e-12,
            dt_max: 1e-3,
        },
        horizon: 1.0,
        sample_dt: 0.01,
    }
}

/// Runs `schedule` on the network from its standalone initial state.
pub fn run_scenario(
    spec: &NetworkSpec,
    regime: Regime,
    schedule: &ScenarioSpec,
    opts: &ScenarioOptions,
) -> Result<ScenarioResult> {
    let mut net = compose_network(spec, regime)?;
    let x0 = net.initial_state()?;
    let mut cfg = opts.integrator.unwrap_or_else(scenario_integrator);
    cfg.horizon = schedule.horizon;
    if !(schedule.horizon.is_finite() && schedule.horizon > 0.0) {
        return Err(Error::Invalid("scenario horizon must be positive".into()));
    }
    let mut events = schedule.events.clone();
    for ev in &events {
        if !(ev.time >= 0.0 && ev.time <= schedule.horizon) {
            return Err(Error::Invalid(format!(
                "event time {} outside [0, {}]",
                ev.time, schedule.horizon
            )));
        }
        // Validate the target now so failures are not deferred to mid-run.
        net.clone().apply_load_event(ev)?;
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));

    let mut boundaries: Vec<f64> = vec![0.0];
    for ev in &events {
        if ev.time > *boundaries.last().expect("nonempty") {
            boundaries.push(ev.time);
        }
    }
    boundaries.push(schedule.horizon);

    // Load configuration per interval, used for derivatives in the detector.
    let mut interval_nets = Vec::with_capacity(boundaries.len() - 1);
    {
        let mut probe = net.clone();
        let mut it = events.iter().peekable();
        for w in boundaries.windows(2) {
            while let Some(ev) = it.peek() {
                if ev.time <= w[0] {
                    probe.apply_load_event(ev)?;
                    it.next();
                } else {
                    break;
                }
            }
            interval_nets.push(probe.clone());
        }
    }

    let ode_events = events
        .iter()
        .map(|ev| {
            let ev = *ev;
            Event::new(ev.time, move |n: &mut Network, _x: &mut [f64]| {
                n.apply_load_event(&ev)
            })
        })
        .collect();
    let traj = integrate(&mut net, &x0, 0.0, &cfg, ode_events)?;

    let mut intervals = Vec::new();
    for (k, w) in boundaries.windows(2).enumerate() {
        let (start, end) = (w[0], w[1]);
        let inet = &interval_nets[k];
        // The sample at `end` still belongs to this interval: events apply after sampling.
        let ss = detect_steady_state(
            inet,
            &traj.t,
            &traj.x,
            (end - opts.steady.window).max(start),
            end,
            opts.steady.tol,
        )?;
        let (metrics, state) = match (ss.steady, ss.index) {
            (true, Some(i)) => (Some(metrics(inet, &traj.x[i])), Some(traj.x[i].clone())),
            _ => (None, None),
        };
        intervals.push(IntervalSummary {
            start,
            end,
            steady_state: ss,
            metrics,
            state,
        });
    }

    let mut series: Vec<MicrogridSeries> = net
        .microgrids
        .iter()
        .map(|mg| MicrogridSeries {
            name: mg.name().to_string(),
            node_ids: (0..mg.layout().n).map(|i| mg.node_id(i)).collect(),
            dgu_node_ids: mg.dgu_nodes().iter().map(|&i| mg.node_id(i)).collect(),
            ..Default::default()
        })
        .collect();
    let mut tie_currents = Vec::with_capacity(traj.t.len());
    let mut balance = Vec::with_capacity(traj.t.len());
    for (&t, x) in traj.t.iter().zip(&traj.x) {
        let k = boundaries
            .windows(2)
            .position(|w| t <= w[1])
            .unwrap_or(interval_nets.len() - 1);
        let m = metrics(&interval_nets[k], x);
        for (idx, (s, mm)) in series.iter_mut().zip(&m.microgrids).enumerate() {
            let r = net.mg_range(idx);
            let lay = net.microgrids[idx].layout();
            s.v.push(x[r.start..r.start + lay.n].to_vec());
            s.i_f
                .push(x[r.start + lay.i_f().start..r.start + lay.i_f().end].to_vec());
            s.injected.push(mm.injected.clone());
            s.lambda_loc.push(mm.lambda_loc);
            s.lambda_glob.push(mm.lambda_glob);
        }
        tie_currents.push(m.tie_currents);
        balance.push(m.balance_residual);
    }

    Ok(ScenarioResult {
        regime,
        time: traj.t,
        microgrids: series,
        tie_currents,
        balance_residual: balance,
        intervals,
        steps: traj.steps,
        rejected_steps: traj.rejected,
    })
}
