//! Explicit Runge-Kutta integration with sampling and timed events.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side of `x' = f(t, x)`. Implementors may carry mutable
/// parameters that events change between integration segments.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed {
        dt: f64,
    },
    Rk45Adaptive {
        rtol: f64,
        atol: f64,
        dt_min: f64,
        dt_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub horizon: f64,
    /// Spacing of recorded samples (s).
    pub sample_dt: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45Adaptive {
                rtol: 1e-7,
                atol: 1e-9,
                dt_min: 1e-12,
                dt_max: 1e-3,
            },
            horizon: 1.0,
            sample_dt: 1e-2,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let ok = match self.method {
            Method::Rk4Fixed { dt } => pos(dt),
            Method::Rk45Adaptive {
                rtol,
                atol,
                dt_min,
                dt_max,
            } => pos(rtol) && pos(atol) && pos(dt_min) && pos(dt_max) && dt_min <= dt_max,
        };
        if !ok {
            return Err(Error::Invalid(
                "integrator step bounds and tolerances must be positive".into(),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) || !pos(self.sample_dt) {
            return Err(Error::Invalid(
                "horizon must be non-negative and sample_dt positive".into(),
            ));
        }
        Ok(())
    }
}

/// State mutation applied exactly at `time`.
pub struct Event<'a, S> {
    pub time: f64,
    pub apply: Box<dyn FnMut(&mut S, &mut [f64]) -> Result<()> + 'a>,
}

impl<'a, S> Event<'a, S> {
    pub fn new(time: f64, apply: impl FnMut(&mut S, &mut [f64]) -> Result<()> + 'a) -> Self {
        Self {
            time,
            apply: Box::new(apply),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub steps: usize,
    pub rejected: usize,
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order weights minus 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Workspace {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            next: vec![0.0; n],
        }
    }
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { t })
    }
}

fn rk4_step<S: OdeSystem>(sys: &S, t: f64, x: &mut [f64], h: f64, ws: &mut Workspace) -> Result<()> {
    let n = x.len();
    let [k1, k2, k3, k4, ..] = &mut ws.k;
    sys.rhs(t, x, k1)?;
    for i in 0..n {
        ws.tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    sys.rhs(t + 0.5 * h, &ws.tmp, k2)?;
    for i in 0..n {
        ws.tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    sys.rhs(t + 0.5 * h, &ws.tmp, k3)?;
    for i in 0..n {
        ws.tmp[i] = x[i] + h * k3[i];
    }
    sys.rhs(t + h, &ws.tmp, k4)?;
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    check_finite(x, t + h)
}

/// One Dormand-Prince attempt from `(t, x)` with `k[0] = f(t, x)` already
/// filled. Writes the candidate into `ws.next` (and its derivative into
/// `k[6]`) and returns the scaled error norm.
fn dopri_attempt<S: OdeSystem>(
    sys: &S,
    t: f64,
    x: &[f64],
    h: f64,
    rtol: f64,
    atol: f64,
    ws: &mut Workspace,
) -> Result<f64> {
    let n = x.len();
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, a) in A[s].iter().enumerate().take(s) {
                acc += a * ws.k[j][i];
            }
            ws.tmp[i] = x[i] + h * acc;
        }
        sys.rhs(t + C[s] * h, &ws.tmp, &mut ws.k[s])?;
        if s == 6 {
            ws.next.copy_from_slice(&ws.tmp);
        }
    }
    let mut err = 0.0;
    for i in 0..n {
        let mut e = 0.0;
        for (s, w) in E.iter().enumerate() {
            e += w * ws.k[s][i];
        }
        let scale = atol + rtol * x[i].abs().max(ws.next[i].abs());
        let r = h * e / scale;
        err += r * r;
    }
    Ok((err / n.max(1) as f64).sqrt())
}

/// Integrates from `t0` to `t0 + config.horizon`.
///
/// Samples are recorded at `t0 + k · sample_dt` (and at the horizon). Events
/// must be sorted by time; an event whose time coincides with a sample is
/// applied after that sample is recorded. Integration restarts at every event.
pub fn integrate<S: OdeSystem>(
    sys: &mut S,
    x0: &[f64],
    t0: f64,
    config: &IntegratorConfig,
    events: Vec<Event<'_, S>>,
) -> Result<Trajectory> {
    config.validate()?;
    if x0.len() != sys.dim() {
        return Err(Error::Dimension {
            context: "initial state",
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    if events.windows(2).any(|w| w[0].time > w[1].time) {
        return Err(Error::Invalid("events must be sorted by time".into()));
    }
    let t_end = t0 + config.horizon;
    let n = x0.len();
    let mut ws = Workspace::new(n);
    let mut x = x0.to_vec();
    check_finite(&x, t0)?;
    let mut t = t0;
    let mut traj = Trajectory::default();
    let mut sample_k: u64 = 0;
    let sample_time = |k: u64| t0 + k as f64 * config.sample_dt;
    let mut events = events.into_iter().peekable();
    let mut h = match config.method {
        Method::Rk4Fixed { dt } => dt,
        Method::Rk45Adaptive { dt_max, .. } => dt_max.min(1e-6_f64.max(config.horizon * 1e-6)),
    };
    let mut fsal = false;

    loop {
        // Record due samples.
        while sample_time(sample_k) <= t + 1e-12 * t.abs().max(1.0) && sample_time(sample_k) <= t_end {
            traj.t.push(sample_time(sample_k));
            traj.x.push(x.clone());
            sample_k += 1;
        }
        // Apply due events.
        while let Some(ev) = events.peek() {
            if ev.time <= t + 1e-12 * t.abs().max(1.0) {
                let mut ev = events.next().expect("peeked");
                if ev.time <= t_end {
                    (ev.apply)(sys, &mut x)?;
                    check_finite(&x, t)?;
                    fsal = false;
                }
            } else {
                break;
            }
        }
        if t >= t_end {
            if traj
                .t
                .last()
                .is_none_or(|&last| t_end - last > 1e-9 * config.sample_dt)
            {
                traj.t.push(t_end);
                traj.x.push(x.clone());
            }
            break;
        }
        let mut stop = t_end.min(sample_time(sample_k));
        if let Some(ev) = events.peek() {
            stop = stop.min(ev.time);
        }

        match config.method {
            Method::Rk4Fixed { dt } => {
                let step = dt.min(stop - t);
                rk4_step(sys, t, &mut x, step, &mut ws)?;
                t = if stop - t <= dt { stop } else { t + step };
                traj.steps += 1;
            }
            Method::Rk45Adaptive {
                rtol,
                atol,
                dt_min,
                dt_max,
            } => {
                if !fsal {
                    sys.rhs(t, &x, &mut ws.k[0])?;
                    fsal = true;
                }
                loop {
                    h = h.min(dt_max);
                    let remaining = stop - t;
                    let hits_stop = h >= remaining;
                    let step = if hits_stop { remaining } else { h };
                    if step < dt_min && !hits_stop {
                        return Err(Error::StepUnderflow { t, dt: step });
                    }
                    let err = dopri_attempt(sys, t, &x, step, rtol, atol, &mut ws)?;
                    if err.is_finite() && err <= 1.0 {
                        t = if hits_stop { stop } else { t + step };
                        std::mem::swap(&mut x, &mut ws.next);
                        check_finite(&x, t)?;
                        let (first, rest) = ws.k.split_at_mut(1);
                        first[0].copy_from_slice(&rest[5]);
                        traj.steps += 1;
                        let factor = if err == 0.0 {
                            5.0
                        } else {
                            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                        };
                        // Keep the controller's step when only clipped by a stop time.
                        h = if hits_stop {
                            h.max(step * factor)
                        } else {
                            step * factor
                        };
                        break;
                    }
                    traj.rejected += 1;
                    let factor = if err.is_finite() {
                        (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                    } else {
                        0.1
                    };
                    h = step * factor;
                    if h < dt_min {
                        return Err(Error::StepUnderflow { t, dt: h });
                    }
                }
            }
        }
    }
    Ok(traj)
}
