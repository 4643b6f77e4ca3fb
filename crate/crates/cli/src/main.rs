//! `dcmg`: simulation, certification and dispatch for networked DC microgrids.
//!
//! Exit codes: 0 success, 1 I/O or unexpected failure, 2 configuration
//! error, 3 integration failure, 4 no certificate (infeasible or failed
//! verification), 5 vertex cap or solver memory budget exceeded.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dcmg_core::certify::{
    solve_certificate, verify_certificate, Certificate, CertificateKind, SolveOutcome, SolverOptions,
    DEFAULT_VERTEX_CAP,
};
use dcmg_core::dynamics::{affine_factorization, port_matrices, Envelope, PriceMode, ShiftedSystem};
use dcmg_core::model::{Microgrid, NetworkSpec, ScenarioSpec};
use dcmg_core::pricing::dispatch_oracle;
use dcmg_core::sim::{
    compose_network, run_scenario, scenario_integrator, Regime, ScenarioOptions, ScenarioResult,
};
use dcmg_core::Error;
use serde::Serialize;

use crate::output::{precision, Table, Writer};

#[derive(Debug, Parser)]
#[command(
    name = "dcmg",
    version,
    about = "Networked DC microgrids with price-based control"
)]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the network's load schedule and write trajectories and summaries.
    Simulate {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = RegimeArg::Electric)]
        regime: RegimeArg,
        #[arg(long)]
        out: PathBuf,
        /// Sampling rate of the written trajectory (Hz).
        #[arg(long, default_value_t = 100.0)]
        sample_hz: f64,
        /// Horizon (s) used when the config has no scenario.
        #[arg(long)]
        horizon: Option<f64>,
        /// Also write an SVG line chart next to every figure CSV.
        #[arg(long)]
        svg: bool,
    },
    /// Search for a quadratic storage function over the envelope's vertices.
    Certify {
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        envelope: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        target: Target,
        /// Verification report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_VERTEX_CAP)]
        vertex_cap: usize,
    },
    /// Print the cost-optimal split of a total power among the followers.
    Dispatch {
        config: PathBuf,
        /// Total power to dispatch (W).
        #[arg(long)]
        total: f64,
        /// Microgrid name or index.
        #[arg(long, default_value = "0")]
        microgrid: String,
    },
    /// Re-verify a certificate file without solving.
    VerifyCert {
        config: PathBuf,
        #[arg(long)]
        cert: PathBuf,
        /// Microgrid name or index.
        #[arg(long, default_value = "0")]
        microgrid: String,
        /// Also write the report to this path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct Target {
    /// Microgrid name or index.
    #[arg(long, default_value = "0")]
    microgrid: String,
    /// Electric port node ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    ports: Vec<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegimeArg {
    Electric,
    Economic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Stability,
    Electric,
    Econ,
}

impl From<KindArg> for CertificateKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Stability => CertificateKind::Stability,
            KindArg::Electric => CertificateKind::ElectricEip,
            KindArg::Econ => CertificateKind::EconIfofp,
        }
    }
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult<T> = Result<T, Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |err| Failure { code, err }
}

fn config_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(2)(e.into())
}

fn io_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(1)(e.into())
}

fn core_err(e: Error) -> Failure {
    let code = match e {
        Error::VertexCap { .. } | Error::ProblemSize { .. } => 5,
        Error::Validation(_)
        | Error::Invalid(_)
        | Error::Json(_)
        | Error::Port(_)
        | Error::Envelope(_)
        | Error::Dimension { .. } => 2,
        Error::StepUnderflow { .. }
        | Error::NonFinite { .. }
        | Error::SingularLoad { .. }
        | Error::NoEquilibrium { .. } => 3,
        Error::Asymmetric(_) | Error::Singular(_) => 1,
    };
    fail(code)(e.into())
}

fn read_config(path: &Path) -> CmdResult<(NetworkSpec, Vec<u8>)> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    let text = std::str::from_utf8(&bytes)
        .with_context(|| format!("{} is not UTF-8", path.display()))
        .map_err(config_err)?;
    let spec = NetworkSpec::from_json(text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)?;
    for mg in &spec.microgrids {
        Microgrid::new(mg)
            .with_context(|| format!("microgrid {:?}", mg.name))
            .map_err(config_err)?;
    }
    Ok((spec, bytes))
}

fn select_microgrid(spec: &NetworkSpec, key: &str) -> CmdResult<Microgrid> {
    let idx = spec
        .microgrids
        .iter()
        .position(|m| m.name == key)
        .or_else(|| key.parse::<usize>().ok().filter(|&i| i < spec.microgrids.len()))
        .ok_or_else(|| config_err(anyhow!("no microgrid named or indexed {key:?}")))?;
    Microgrid::new(&spec.microgrids[idx]).map_err(core_err)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CmdResult<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {what} {}", path.display()))
        .map_err(config_err)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io_err)?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(io_err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Simulate {
            config,
            regime,
            out,
            sample_hz,
            horizon,
            svg,
        } => simulate(&config, regime, &out, sample_hz, horizon, svg, argv),
        Command::Certify {
            config,
            kind,
            envelope,
            out,
            target,
            report,
            epsilon,
            vertex_cap,
        } => {
            let opts = SolverOptions {
                epsilon,
                vertex_cap,
                ..SolverOptions::default()
            };
            certify(
                &config,
                kind.into(),
                &envelope,
                &out,
                &target,
                report,
                &opts,
                argv,
            )
        }
        Command::Dispatch {
            config,
            total,
            microgrid,
        } => dispatch(&config, total, &microgrid),
        Command::VerifyCert {
            config,
            cert,
            microgrid,
            report,
        } => verify(&config, &cert, &microgrid, report.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

#[derive(Serialize)]
struct IntervalReport<'a> {
    start: f64,
    end: f64,
    steady: bool,
    max_rate: f64,
    lambda_loc: Vec<f64>,
    lambda_glob: Vec<f64>,
    /// `(max - min) / max |λ_glob|` at the last sample of the interval.
    price_spread: f64,
    metrics: &'a Option<dcmg_core::sim::NetworkMetrics>,
}

#[derive(Serialize)]
struct Summary<'a> {
    regime: Regime,
    horizon: f64,
    samples: usize,
    steps: usize,
    rejected_steps: usize,
    intervals: Vec<IntervalReport<'a>>,
}

fn simulate(
    config: &Path,
    regime: RegimeArg,
    out: &Path,
    sample_hz: f64,
    horizon: Option<f64>,
    svg: bool,
    argv: Vec<String>,
) -> CmdResult<u8> {
    let (spec, bytes) = read_config(config)?;
    let regime = match regime {
        RegimeArg::Electric => Regime::ElectricOnly,
        RegimeArg::Economic => Regime::ElectricPlusEconomic,
    };
    compose_network(&spec, regime).map_err(config_err)?;
    let schedule = match (&spec.scenario, horizon) {
        (_, Some(h)) => ScenarioSpec {
            horizon: h,
            events: spec
                .scenario
                .as_ref()
                .map(|s| s.events.clone())
                .unwrap_or_default(),
        },
        (Some(s), None) => s.clone(),
        (None, None) => return Err(config_err(anyhow!("config has no scenario; pass --horizon"))),
    };
    if !(sample_hz.is_finite() && sample_hz > 0.0) {
        return Err(config_err(anyhow!("--sample-hz must be positive")));
    }
    let digits = precision().map_err(config_err)?;
    let mut integrator = scenario_integrator();
    integrator.sample_dt = 1.0 / sample_hz;
    let opts = ScenarioOptions {
        integrator: Some(integrator),
        ..ScenarioOptions::default()
    };
    log::info!("simulating {} s in the {regime:?} regime", schedule.horizon);
    let run = run_scenario(&spec, regime, &schedule, &opts).map_err(core_err)?;
    log::info!("{} steps, {} rejected", run.steps, run.rejected_steps);

    let mut w = Writer::new(out).map_err(io_err)?;
    for (name, table) in tables(&run) {
        w.write(&format!("{name}.csv"), table.to_csv(digits).as_bytes())
            .map_err(io_err)?;
        if svg && name != "trajectory" {
            w.write(&format!("{name}.svg"), table.to_svg(name).as_bytes())
                .map_err(io_err)?;
        }
    }
    w.write_json("summary.json", &summary(&run, schedule.horizon))
        .map_err(io_err)?;
    w.finish("manifest.json", config, &bytes, argv).map_err(io_err)?;
    Ok(0)
}

fn label(run: &ScenarioResult, k: usize) -> String {
    let name = &run.microgrids[k].name;
    if name.is_empty() {
        format!("mg{k}")
    } else {
        name.clone()
    }
}

/// Trajectory plus one table per figure: voltages, injections, prices, tie currents.
fn tables(run: &ScenarioResult) -> Vec<(&'static str, Table)> {
    let time = || vec!["time".to_string()];
    let mut voltages = time();
    let mut currents = time();
    let mut injections = time();
    let mut prices = time();
    for (k, s) in run.microgrids.iter().enumerate() {
        let mg = label(run, k);
        voltages.extend(s.node_ids.iter().map(|id| format!("{mg}.v.{id}")));
        currents.extend(s.dgu_node_ids.iter().map(|id| format!("{mg}.i_f.{id}")));
        injections.extend(s.dgu_node_ids.iter().map(|id| format!("{mg}.p_inj.{id}")));
        prices.push(format!("{mg}.lambda_loc"));
        prices.push(format!("{mg}.lambda_glob"));
    }
    let ties: Vec<String> = std::iter::once("time".to_string())
        .chain((0..run.tie_currents.first().map_or(0, Vec::len)).map(|j| format!("tie{j}.i")))
        .collect();
    let mut traj_header = voltages.clone();
    traj_header.extend(currents[1..].iter().cloned());
    traj_header.extend(injections[1..].iter().cloned());
    traj_header.extend(prices[1..].iter().cloned());
    traj_header.extend(ties[1..].iter().cloned());
    traj_header.push("balance_residual".into());

    let mut tv = Table::new(voltages);
    let mut ti = Table::new(injections);
    let mut tp = Table::new(prices);
    let mut tt = Table::new(ties);
    let mut traj = Table::new(traj_header);
    for (n, &t) in run.time.iter().enumerate() {
        let mut v = vec![t];
        let mut c = Vec::new();
        let mut p = vec![t];
        let mut l = vec![t];
        for s in &run.microgrids {
            v.extend(&s.v[n]);
            c.extend(&s.i_f[n]);
            p.extend(&s.injected[n]);
            l.push(s.lambda_loc[n]);
            l.push(s.lambda_glob[n]);
        }
        let mut tie = vec![t];
        tie.extend(&run.tie_currents[n]);
        let mut row = v.clone();
        row.extend(&c);
        row.extend(&p[1..]);
        row.extend(&l[1..]);
        row.extend(&tie[1..]);
        row.push(run.balance_residual[n]);
        traj.push(row);
        tv.push(v);
        ti.push(p);
        tp.push(l);
        tt.push(tie);
    }
    vec![
        ("trajectory", traj),
        ("voltages", tv),
        ("injections", ti),
        ("prices", tp),
        ("tie_currents", tt),
    ]
}

fn summary(run: &ScenarioResult, horizon: f64) -> Summary<'_> {
    let intervals = run
        .intervals
        .iter()
        .map(|iv| {
            let end = run.time.iter().rposition(|&t| t <= iv.end).unwrap_or(0);
            let lambda_loc: Vec<f64> = run.microgrids.iter().map(|s| s.lambda_loc[end]).collect();
            let lambda_glob: Vec<f64> = run.microgrids.iter().map(|s| s.lambda_glob[end]).collect();
            let hi = lambda_glob.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = lambda_glob.iter().copied().fold(f64::INFINITY, f64::min);
            let scale = lambda_glob.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
            IntervalReport {
                start: iv.start,
                end: iv.end,
                steady: iv.steady_state.steady,
                max_rate: iv.steady_state.max_rate,
                lambda_loc,
                lambda_glob,
                price_spread: if scale > 0.0 { (hi - lo) / scale } else { 0.0 },
                metrics: &iv.metrics,
            }
        })
        .collect();
    Summary {
        regime: run.regime,
        horizon,
        samples: run.time.len(),
        steps: run.steps,
        rejected_steps: run.rejected_steps,
        intervals,
    }
}

fn build_system(mg: &Microgrid, env: &Envelope, kind: CertificateKind) -> CmdResult<ShiftedSystem> {
    let price = if kind.price_closed() {
        PriceMode::SelfClosed
    } else {
        PriceMode::External(0.0)
    };
    affine_factorization(mg, env, price).map_err(core_err)
}

fn default_report(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".report.json");
    out.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn certify(
    config: &Path,
    kind: CertificateKind,
    envelope: &Path,
    out: &Path,
    target: &Target,
    report: Option<PathBuf>,
    opts: &SolverOptions,
    argv: Vec<String>,
) -> CmdResult<u8> {
    let (spec, bytes) = read_config(config)?;
    let mg = select_microgrid(&spec, &target.microgrid)?;
    let env: Envelope = read_json(envelope, "envelope")?;
    let shifted = build_system(&mg, &env, kind)?;
    let ports = port_matrices(&mg, &target.ports).map_err(core_err)?;
    let report_path = report.unwrap_or_else(|| default_report(out));
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut w = Writer::new(dir).map_err(io_err)?;
    let file = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    log::info!("solving {kind:?} over {} parameters", shifted.params.len());
    let code = match solve_certificate(&shifted, &ports, kind, opts).map_err(core_err)? {
        SolveOutcome::Certified(cert) => {
            let rep = verify_certificate(&cert, &shifted, &ports).map_err(core_err)?;
            w.write_json(&file(out), &cert).map_err(io_err)?;
            write_report(&mut w, dir, &report_path, &rep)?;
            if rep.pass {
                0
            } else {
                eprintln!("certificate failed verification: margin {:e}", rep.margin);
                4
            }
        }
        SolveOutcome::Infeasible(rep) => {
            write_report(&mut w, dir, &report_path, &rep)?;
            eprintln!(
                "no certificate: best margin {:e} at vertex {} (parameters {:?})",
                rep.best_margin, rep.worst_vertex, rep.worst_parameters
            );
            4
        }
    };
    let mut manifest = file(out);
    manifest.push_str(".manifest.json");
    w.finish(&manifest, config, &bytes, argv).map_err(io_err)?;
    Ok(code)
}

fn write_report<T: Serialize>(w: &mut Writer, dir: &Path, path: &Path, value: &T) -> CmdResult<()> {
    let same_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        == dir;
    match path.file_name() {
        Some(name) if same_dir => w
            .write_json(&name.to_string_lossy(), value)
            .map(|_| ())
            .map_err(io_err),
        _ => write_pretty(path, value),
    }
}

fn verify(config: &Path, cert_path: &Path, microgrid: &str, report: Option<&Path>) -> CmdResult<u8> {
    let (spec, _) = read_config(config)?;
    let mg = select_microgrid(&spec, microgrid)?;
    let cert: Certificate = read_json(cert_path, "certificate")?;
    let shifted = build_system(&mg, &cert.envelope, cert.kind)?;
    let ports = port_matrices(&mg, &cert.port_nodes).map_err(core_err)?;
    let rep = verify_certificate(&cert, &shifted, &ports).map_err(core_err)?;
    let text = serde_json::to_string_pretty(&rep).map_err(io_err)?;
    println!("{text}");
    if let Some(path) = report {
        write_pretty(path, &rep)?;
    }
    Ok(if rep.pass { 0 } else { 4 })
}

#[derive(Serialize)]
struct DispatchLine {
    node: u32,
    q: f64,
    r: f64,
    p: f64,
}

#[derive(Serialize)]
struct DispatchReport {
    microgrid: String,
    total: f64,
    lambda: f64,
    dispatch: Vec<DispatchLine>,
}

fn dispatch(config: &Path, total: f64, microgrid: &str) -> CmdResult<u8> {
    let (spec, _) = read_config(config)?;
    let mg = select_microgrid(&spec, microgrid)?;
    if !total.is_finite() {
        return Err(config_err(anyhow!("--total must be finite")));
    }
    let costs = mg.costs();
    if costs.is_empty() {
        return Err(config_err(anyhow!(
            "microgrid {:?} has no grid-following units",
            mg.name()
        )));
    }
    let d = dispatch_oracle(costs, total).map_err(core_err)?;
    let nodes = &mg.dgu_nodes()[1..];
    let report = DispatchReport {
        microgrid: mg.name().to_string(),
        total,
        lambda: d.lambda,
        dispatch: nodes
            .iter()
            .zip(costs)
            .zip(&d.p)
            .map(|((&n, c), &p)| DispatchLine {
                node: mg.node_id(n),
                q: c.q,
                r: c.r,
                p,
            })
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(io_err)?);
    Ok(0)
}
