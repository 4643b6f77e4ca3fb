//! Eigenvalues, ODE integration and Newton iteration.

pub mod eig;
pub mod newton;
pub mod ode;

use nalgebra::DMatrix;

pub use eig::{eig_sym, max_eig, min_eig};
pub use newton::{damped_newton, NewtonOptions};
pub use ode::{integrate, Event, IntegratorConfig, Method, OdeSystem, Trajectory};

/// Eigenvalues of a general square matrix as `(re, im)` pairs, sorted by
/// decreasing real part. `None` when the Schur iteration does not converge.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<(f64, f64)>> {
    let schur = balance(m).try_schur(f64::EPSILON, 100_000)?;
    let mut ev: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    ev.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    Some(ev)
}

/// Diagonal similarity `D⁻¹ M D` with power-of-two scalings that equalize
/// row and column norms (Parlett-Reinsch). Eigenvalues are unchanged.
pub fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let (mut cc, mut rr) = (c, r);
            while cc < rr / 2.0 {
                cc *= 2.0;
                rr /= 2.0;
                f *= 2.0;
            }
            while cc >= rr * 2.0 {
                cc /= 2.0;
                rr *= 2.0;
                f /= 2.0;
            }
            if (cc + rr) < 0.95 * s {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
    }
    a
}

/// Largest real part among the eigenvalues of a general square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Option<f64> {
    eigenvalues(m).map(|ev| ev.first().map_or(f64::NEG_INFINITY, |z| z.0))
}
