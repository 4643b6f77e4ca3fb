//! Acceptance report. Prints one line per criterion and exits nonzero when a
//! criterion outside `KNOWN_RED` fails.

use std::process::ExitCode;
use std::time::Instant;

use dcmg_core::certify::{
    solve_certificate, verify_certificate, Certificate, CertificateKind, SolveOutcome, SolverOptions,
};
use dcmg_core::consensus::{consensus_rhs, path_laplacian};
use dcmg_core::dynamics::{
    affine_factorization, equilibrium_solve, eval_vector_field, port_matrices, shifted_matrix, Envelope,
    PortInput, PriceMode,
};
use dcmg_core::model::{Microgrid, NetworkSpec};
use dcmg_core::numerics::{eig_sym, integrate, IntegratorConfig, Method, OdeSystem};
use dcmg_core::pricing::{dispatch_oracle, QuadraticCost};
use dcmg_core::sim::{run_scenario, Regime, ScenarioOptions, ScenarioResult};
use dcmg_core::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHIPPED: &str = include_str!("../../../configs/two_microgrids.json");
const REDUCED: &str = include_str!("../../../configs/reduced_two_node.json");
const REDUCED_ENVELOPE: &str = include_str!("../../../configs/reduced_envelope.json");

/// Criteria that cannot hold together with the others. See the README.
const KNOWN_RED: &[u32] = &[5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn shipped() -> NetworkSpec {
    NetworkSpec::from_json(SHIPPED).expect("shipped config parses")
}

fn reduced() -> (Microgrid, Envelope) {
    let spec = NetworkSpec::from_json(REDUCED).expect("reduced config parses");
    let mg = Microgrid::new(&spec.microgrids[0]).expect("reduced microgrid");
    let env: Envelope = serde_json::from_str(REDUCED_ENVELOPE).expect("envelope parses");
    (mg, env)
}

fn shifted_exactness() -> Result<Outcome> {
    let start = Instant::now();
    let spec = shipped();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    let mut count = 0;
    while count < 1000 {
        let base = Microgrid::new(&spec.microgrids[count % 2])?;
        let lay = base.layout();
        let p: Vec<f64> = (0..lay.n).map(|_| rng.random_range(0.0..12000.0)).collect();
        let mg = base.with_cpl(&p)?;
        let xbar = equilibrium_solve(&mg, PriceMode::SelfClosed)?;
        let mut raw = vec![0.0; lay.dim()];
        for i in lay.v() {
            raw[i] = rng.random_range(-50.0..50.0);
        }
        for i in lay.i_f() {
            raw[i] = rng.random_range(-5.0..5.0);
        }
        for i in lay.e().chain(lay.i_pi()) {
            raw[i] = rng.random_range(-20.0..20.0);
        }
        for i in lay.p_ref().chain([lay.lambda()]) {
            raw[i] = rng.random_range(-1000.0..1000.0);
        }
        let x: Vec<f64> = xbar.iter().zip(&raw).map(|(a, b)| a + b).collect();
        // the deviation actually represented after rounding x̄ + x̃
        let xt: Vec<f64> = x.iter().zip(&xbar).map(|(a, b)| a - b).collect();
        let input = PortInput::self_closed();
        let f1 = eval_vector_field(&mg, &x, &input)?;
        let f0 = eval_vector_field(&mg, &xbar, &input)?;
        let a = shifted_matrix(&mg, &xbar, &xt, &p, PriceMode::SelfClosed)?;
        let ax = &a * DVector::from_column_slice(&xt);
        let err = (0..lay.dim())
            .map(|i| (f1[i] - f0[i] - ax[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = xt.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
        count += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 10.0,
        format!("{count} triples, worst relative error {worst:.2e}, {secs:.2} s"),
    )
}

fn balance_identity(runs: &[&ScenarioResult]) -> Result<Outcome> {
    let mut checked = 0;
    let mut worst_current = 0.0_f64;
    let mut worst_balance = 0.0_f64;
    for run in runs {
        for iv in &run.intervals {
            let Some(m) = &iv.metrics else { continue };
            checked += 1;
            for mg in &m.microgrids {
                worst_current = worst_current.max(mg.grid_forming_current.abs());
            }
            let demand = m.total_load + m.total_losses;
            worst_balance = worst_balance.max((m.total_p_ref - demand).abs() / demand);
        }
    }
    outcome(
        checked > 0 && worst_current < 1e-6 && worst_balance < 1e-4,
        format!(
            "{checked} steady states, max |i_f| of grid-forming units {worst_current:.2e} A, \
             max relative balance gap {worst_balance:.2e}"
        ),
    )
}

/// Projection onto `{p >= 0, Σp = total}`.
fn project_simplex(y: &[f64], total: f64) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        acc += uk;
        let t = (acc - total) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

fn projected_gradient(q: &[f64], total: f64) -> Vec<f64> {
    let step = 1.0 / (2.0 * q.iter().copied().fold(0.0, f64::max));
    let mut p = vec![total / q.len() as f64; q.len()];
    for _ in 0..1_000_000 {
        let y: Vec<f64> = p
            .iter()
            .zip(q)
            .map(|(pi, qi)| pi - step * 2.0 * qi * pi)
            .collect();
        let next = project_simplex(&y, total);
        let moved = next
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        p = next;
        if moved < 1e-13 * total {
            break;
        }
    }
    p
}

fn dispatch_kkt() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_kkt = 0.0_f64;
    for _ in 0..100 {
        let k = rng.random_range(1..8);
        let costs: Vec<QuadraticCost> = (0..k)
            .map(|_| QuadraticCost::new(rng.random_range(0.1..5.0), rng.random_range(-50.0..50.0), 0.0))
            .collect();
        let total = rng.random_range(100.0..50000.0);
        let d = dispatch_oracle(&costs, total)?;
        let sum: f64 = d.p.iter().sum();
        worst_kkt = worst_kkt.max((sum - total).abs() / total);
        for (c, &p) in costs.iter().zip(&d.p) {
            worst_kkt = worst_kkt.max((c.gradient(p) - d.lambda).abs() / d.lambda.abs());
        }
    }
    let mut worst_brute = 0.0_f64;
    for _ in 0..10 {
        let k = rng.random_range(2..6);
        let q: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
        let total = rng.random_range(1000.0..20000.0);
        let costs: Vec<QuadraticCost> = q.iter().map(|&q| QuadraticCost::new(q, 0.0, 0.0)).collect();
        let d = dispatch_oracle(&costs, total)?;
        let brute = projected_gradient(&q, total);
        for (a, b) in d.p.iter().zip(&brute) {
            worst_brute = worst_brute.max((a - b).abs() / total);
        }
    }
    outcome(
        worst_kkt < 1e-10 && worst_brute < 1e-6,
        format!("KKT relative residual {worst_kkt:.2e}, projected-gradient gap {worst_brute:.2e}"),
    )
}

fn electric_only(run: &ScenarioResult) -> Result<Outcome> {
    let mut pass = run.intervals.len() == 3;
    let mut parts = Vec::new();
    for iv in &run.intervals {
        match &iv.metrics {
            Some(m) => {
                let (a, b) = (m.microgrids[0].lambda_loc, m.microgrids[1].lambda_loc);
                let gap = rel_gap(a, b);
                pass &= gap > 0.01;
                parts.push(format!(
                    "[{:.0}, {:.0}] s gap {:.2}%",
                    iv.start,
                    iv.end,
                    100.0 * gap
                ));
            }
            None => {
                pass = false;
                parts.push(format!(
                    "[{:.0}, {:.0}] s not steady (rate {:.2e})",
                    iv.start, iv.end, iv.steady_state.max_rate
                ));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn economic(run: &ScenarioResult, spec: &NetworkSpec) -> Result<Outcome> {
    // (microgrid, DGU index) of every follower with q = 1.4
    let mut twins = Vec::new();
    for (k, s) in spec.microgrids.iter().enumerate() {
        let mg = Microgrid::new(s)?;
        for n in &s.nodes {
            if n.cost.is_some_and(|c| c.q == 1.4) {
                let idx = mg.node_index(n.id).expect("node exists");
                twins.push((k, mg.node_dgu(idx).expect("node has a DGU")));
            }
        }
    }
    let mut pass = run.intervals.len() == 3 && twins.len() == 2;
    let mut parts = Vec::new();
    for iv in &run.intervals {
        let end = run
            .time
            .iter()
            .rposition(|&t| t <= iv.end)
            .expect("interval has samples");
        let lg: Vec<f64> = run.microgrids.iter().map(|s| s.lambda_glob[end]).collect();
        let price_gap = rel_gap(lg[0], lg[1]);
        let inj: Vec<f64> = twins
            .iter()
            .map(|&(k, j)| run.microgrids[k].injected[end][j])
            .collect();
        let twin_gap = rel_gap(inj[0], inj[1]);
        let label = format!("[{:.0}, {:.0}] s", iv.start, iv.end);
        match &iv.metrics {
            Some(m) => {
                let residual = m
                    .microgrids
                    .iter()
                    .flat_map(|g| g.marginal_residual.iter())
                    .fold(0.0_f64, |a, r| a.max(r.abs()));
                pass &= price_gap < 1e-3 && residual < 1e-3 && twin_gap < 0.01;
                parts.push(format!(
                    "{label} price gap {:.3}%, marginal residual {residual:.2e}, twin gap {:.2}%",
                    100.0 * price_gap,
                    100.0 * twin_gap
                ));
            }
            None => {
                pass = false;
                parts.push(format!(
                    "{label} not steady (rate {:.2e}), end-of-interval price gap {:.2}%, twin gap {:.2}%",
                    iv.steady_state.max_rate,
                    100.0 * price_gap,
                    100.0 * twin_gap
                ));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn certificate_pipeline() -> Result<Outcome> {
    let start = Instant::now();
    let (mg, env) = reduced();
    let shifted = affine_factorization(&mg, &env, PriceMode::SelfClosed)?;
    let ports = port_matrices(&mg, &[])?;
    let cert = match solve_certificate(
        &shifted,
        &ports,
        CertificateKind::Stability,
        &SolverOptions::default(),
    )? {
        SolveOutcome::Certified(c) => c,
        SolveOutcome::Infeasible(r) => {
            return outcome(false, format!("infeasible, best margin {:.3e}", r.best_margin));
        }
    };
    let s = cert.s_matrix()?;
    let trace_ok = (s.trace() - cert.dim as f64).abs() < 1e-9 * cert.dim as f64;
    let first = verify_certificate(&cert, &shifted, &ports)?;
    let second = verify_certificate(&cert, &shifted, &ports)?;
    let text = serde_json::to_string(&cert)?;
    let back: Certificate = serde_json::from_str(&text)?;
    let third = verify_certificate(&back, &shifted, &ports)?;
    let same = serde_json::to_string(&first)? == serde_json::to_string(&second)?
        && serde_json::to_string(&first)? == serde_json::to_string(&third)?
        && serde_json::to_string(&back)? == text;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        first.pass && first.margin <= -1e-6 && trace_ok && same && secs <= 300.0,
        format!(
            "{} vertices, margin {:.3e}, trace {:.6}, deterministic re-verification {}, {secs:.2} s",
            first.vertex_count,
            first.margin,
            s.trace(),
            if same { "identical" } else { "differs" }
        ),
    )
}

/// Reduced microgrid driven through its electric port at node 2 and by an
/// external price.
struct Driven {
    mg: Microgrid,
    port: usize,
    lambda_bar: f64,
    i_amp: f64,
    i_freq: f64,
    l_amp: f64,
    l_freq: f64,
}

impl Driven {
    fn inputs(&self, t: f64) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        (
            self.i_amp * (tau * self.i_freq * t).sin(),
            self.l_amp * (tau * self.l_freq * t).sin(),
        )
    }

    fn field(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let (i, l) = self.inputs(t);
        let mut i_ext = vec![0.0; self.mg.layout().n];
        i_ext[self.port] = i;
        let input = PortInput {
            i_ext: &i_ext,
            price: PriceMode::External(self.lambda_bar + l),
        };
        dcmg_core::dynamics::vector_field(&self.mg, x, &input, dx)
    }
}

impl OdeSystem for Driven {
    fn dim(&self) -> usize {
        self.mg.dim()
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        self.field(t, x, dx)
    }
}

fn supply_rate() -> Result<Outcome> {
    let (mg, env) = reduced();
    let shifted = affine_factorization(&mg, &env, PriceMode::External(0.0))?;
    let ports = port_matrices(&mg, &[2])?;
    let cert = match solve_certificate(
        &shifted,
        &ports,
        CertificateKind::EconIfofp,
        &SolverOptions::default(),
    )? {
        SolveOutcome::Certified(c) => c,
        SolveOutcome::Infeasible(r) => {
            return outcome(
                false,
                format!("no IF-OFP certificate, best margin {:.3e}", r.best_margin),
            );
        }
    };
    let report = verify_certificate(&cert, &shifted, &ports)?;
    let s = cert.s_matrix()?;
    let lay = mg.layout();
    let xbar = equilibrium_solve(&mg, PriceMode::SelfClosed)?;
    let lambda_bar = xbar[lay.lambda()];
    let port = mg.node_index(2).expect("port node");
    let cfg = IntegratorConfig {
        method: Method::Rk45Adaptive {
            rtol: 1e-10,
            atol: 1e-10,
            dt_min: 1e-12,
            dt_max: 1e-3,
        },
        horizon: 1.0,
        sample_dt: 1e-3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::NEG_INFINITY;
    let mut samples = 0;
    let mut inside = true;
    for _ in 0..10 {
        let mut sys = Driven {
            mg: mg.clone(),
            port,
            lambda_bar,
            i_amp: rng.random_range(0.5..3.0),
            i_freq: rng.random_range(0.5..20.0),
            l_amp: rng.random_range(50.0..500.0),
            l_freq: rng.random_range(0.2..5.0),
        };
        let mut x0 = xbar.clone();
        for i in lay.v() {
            x0[i] += rng.random_range(-5.0..5.0);
        }
        for i in lay.i_f() {
            x0[i] += rng.random_range(-0.5..0.5);
        }
        let traj = integrate(&mut sys, &x0, 0.0, &cfg, Vec::new())?;
        let mut dx = vec![0.0; lay.dim()];
        for (&t, x) in traj.t.iter().zip(&traj.x) {
            let xt = DVector::from_iterator(lay.dim(), x.iter().zip(&xbar).map(|(a, b)| a - b));
            for i in lay.v() {
                inside &= env.v_tilde_box.contains(xt[i]) && env.v_box.contains(xbar[i]);
            }
            for i in lay.i_f() {
                inside &= env.i_tilde_box.contains(xt[i])
                    && env.i_box.contains(x[i])
                    && env.i_box.contains(xbar[i]);
            }
            sys.field(t, x, &mut dx)?;
            let v_dot = 2.0 * xt.dot(&(&s * DVector::from_column_slice(&dx)));
            let (u, u_e) = sys.inputs(t);
            let y = (&ports.c_ext * &xt)[0];
            let y_e: f64 = ports.c_econ.iter().zip(xt.iter()).map(|(c, x)| c * x).sum();
            let supply = 2.0 * u * y + 2.0 * u_e * y_e - cert.nu * u_e * u_e - cert.rho * y_e * y_e;
            worst = worst.max(v_dot - supply);
            samples += 1;
        }
    }
    outcome(
        report.pass && inside && worst <= 1e-6,
        format!(
            "sigma {:.3}, {samples} samples on 10 trajectories, max V' - supply {worst:.3e}, envelope {}",
            -cert.nu,
            if inside { "respected" } else { "left" }
        ),
    )
}

struct Consensus {
    lap: DMatrix<f64>,
    mu: f64,
    lambda_loc: Vec<f64>,
}

impl OdeSystem for Consensus {
    fn dim(&self) -> usize {
        self.lambda_loc.len()
    }

    fn rhs(&self, _t: f64, w: &[f64], dw: &mut [f64]) -> Result<()> {
        consensus_rhs(&self.lap, self.mu, w, &self.lambda_loc, dw);
        Ok(())
    }
}

fn consensus_limit(run: &ScenarioResult) -> Result<Outcome> {
    let Some(m) = &run.intervals[0].metrics else {
        return outcome(false, "no electric-only steady state to take local prices from");
    };
    let lambda_loc: Vec<f64> = m.microgrids.iter().map(|g| g.lambda_loc).collect();
    let mean = lambda_loc.iter().sum::<f64>() / lambda_loc.len() as f64;
    let cfg = IntegratorConfig {
        method: Method::Rk45Adaptive {
            rtol: 1e-12,
            atol: 1e-9,
            dt_min: 1e-12,
            dt_max: 0.1,
        },
        horizon: 40.0,
        sample_dt: 1.0,
    };
    let mut errors = Vec::new();
    for mu in [1e-1, 1e-2, 1e-3] {
        let mut sys = Consensus {
            lap: path_laplacian(lambda_loc.len()),
            mu,
            lambda_loc: lambda_loc.clone(),
        };
        let traj = integrate(&mut sys, &vec![0.0; lambda_loc.len()], 0.0, &cfg, Vec::new())?;
        let w = traj.x.last().expect("samples");
        let err = w
            .iter()
            .zip(&lambda_loc)
            .map(|(w, l)| (w + l - mean).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
    outcome(
        ratios.iter().all(|r| (8.0..=12.0).contains(r)),
        format!(
            "errors {:.3e}, {:.3e}, {:.3e}; ratios {:.2}, {:.2}",
            errors[0], errors[1], errors[2], ratios[0], ratios[1]
        ),
    )
}

struct Decay;

impl OdeSystem for Decay {
    fn dim(&self) -> usize {
        1
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        dx[0] = -x[0];
        Ok(())
    }
}

fn numerics_checks() -> Result<Outcome> {
    let mut errs = Vec::new();
    for dt in [0.1, 0.05] {
        let cfg = IntegratorConfig {
            method: Method::Rk4Fixed { dt },
            horizon: 1.0,
            sample_dt: 1.0,
        };
        let traj = integrate(&mut Decay, &[1.0], 0.0, &cfg, Vec::new())?;
        errs.push((traj.x.last().expect("samples")[0] - (-1.0f64).exp()).abs());
    }
    let ratio = errs[0] / errs[1];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0_f64;
    for k in 0..40 {
        let n = 1 + k % 30;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-100.0..100.0));
        let m = (&a + a.transpose()) * 0.5;
        let (vals, vecs) = eig_sym(&m, true)?;
        let v = vecs.expect("vectors requested");
        let norm = vals
            .iter()
            .fold(0.0_f64, |a, l| a.max(l.abs()))
            .max(f64::MIN_POSITIVE);
        for (j, &l) in vals.iter().enumerate() {
            let col = v.column(j);
            worst = worst.max((&m * col - col * l).norm() / norm);
        }
    }
    outcome(
        (14.0..=18.0).contains(&ratio) && worst < 1e-9,
        format!(
            "RK4 error ratio {ratio:.2}, worst eigenpair residual {worst:.2e} relative to the spectral norm"
        ),
    )
}

fn main() -> ExitCode {
    let spec = shipped();
    let schedule = spec.scenario.clone().expect("shipped config has a scenario");
    let opts = ScenarioOptions::default();
    let started = Instant::now();
    let (electric, econ) = std::thread::scope(|s| {
        let e = s.spawn(|| run_scenario(&spec, Regime::ElectricOnly, &schedule, &opts));
        let c = s.spawn(|| run_scenario(&spec, Regime::ElectricPlusEconomic, &schedule, &opts));
        (e.join().expect("electric run"), c.join().expect("economic run"))
    });
    let scenario_secs = started.elapsed().as_secs_f64();
    println!("scenario runs finished in {scenario_secs:.1} s");

    let within = |r: Result<Outcome>| -> Result<Outcome> {
        r.map(|mut o| {
            o.pass &= scenario_secs <= 120.0;
            o
        })
    };
    let results: Vec<(u32, &str, Result<Outcome>)> = vec![
        (1, "shifted-system exactness", shifted_exactness()),
        (
            2,
            "steady-state power balance",
            match (&electric, &econ) {
                (Ok(a), Ok(b)) => balance_identity(&[a, b]),
                (Err(e), _) | (_, Err(e)) => outcome(false, format!("scenario failed: {e}")),
            },
        ),
        (3, "dispatch optimality", dispatch_kkt()),
        (
            4,
            "electric-only prices differ",
            match &electric {
                Ok(r) => within(electric_only(r)),
                Err(e) => outcome(false, format!("scenario failed: {e}")),
            },
        ),
        (
            5,
            "economic regime reaches optimal dispatch",
            match &econ {
                Ok(r) => within(economic(r, &spec)),
                Err(e) => outcome(false, format!("scenario failed: {e}")),
            },
        ),
        (6, "stability certificate pipeline", certificate_pipeline()),
        (7, "supply rate along trajectories", supply_rate()),
        (
            8,
            "consensus error linear in mu",
            match &electric {
                Ok(r) => consensus_limit(r),
                Err(e) => outcome(false, format!("scenario failed: {e}")),
            },
        ),
        (9, "integrator order and eigenpair residuals", numerics_checks()),
    ];

    let mut unexpected = Vec::new();
    for (id, name, res) in results {
        let (pass, detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = if !pass && KNOWN_RED.contains(&id) {
            " (known red)"
        } else {
            ""
        };
        println!("criterion {id} {tag}{note}: {name}: {detail}");
        if !pass && !KNOWN_RED.contains(&id) {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
