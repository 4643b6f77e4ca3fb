//! Proportional dynamic consensus over the economic ports of `M` microgrids:
//!
//! ```text
//! w'     = -(mu I + L) w - L lambda_loc
//! lambda_glob = w + lambda_loc
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::check_laplacian;

/// Laplacian of the path graph `0 - 1 - ... - (m-1)`.
pub fn path_laplacian(m: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    for i in 1..m {
        l[(i - 1, i - 1)] += 1.0;
        l[(i, i)] += 1.0;
        l[(i - 1, i)] -= 1.0;
        l[(i, i - 1)] -= 1.0;
    }
    l
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub w: Vec<f64>,
    pub laplacian: DMatrix<f64>,
    pub mu: f64,
}

impl ConsensusState {
    pub fn new(laplacian: DMatrix<f64>, mu: f64) -> Result<Self> {
        let problems = check_laplacian(&laplacian);
        if !problems.is_empty() {
            return Err(Error::Invalid(format!("laplacian: {}", problems.join("; "))));
        }
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::Invalid("consensus mu must be positive".into()));
        }
        Ok(Self {
            w: vec![0.0; laplacian.nrows()],
            laplacian,
            mu,
        })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

fn check_len(state: &ConsensusState, lambda_loc: &[f64]) -> Result<()> {
    if lambda_loc.len() != state.len() {
        return Err(Error::Dimension {
            context: "local prices",
            expected: state.len(),
            got: lambda_loc.len(),
        });
    }
    Ok(())
}

/// Writes `w'` into `dw` for the auxiliary states `w`.
pub fn consensus_rhs(laplacian: &DMatrix<f64>, mu: f64, w: &[f64], lambda_loc: &[f64], dw: &mut [f64]) {
    let m = w.len();
    for i in 0..m {
        let mut acc = -mu * w[i];
        for j in 0..m {
            acc -= laplacian[(i, j)] * (w[j] + lambda_loc[j]);
        }
        dw[i] = acc;
    }
}

pub fn consensus_derivative(state: &ConsensusState, lambda_loc: &[f64]) -> Result<Vec<f64>> {
    check_len(state, lambda_loc)?;
    let mut dw = vec![0.0; state.len()];
    consensus_rhs(&state.laplacian, state.mu, &state.w, lambda_loc, &mut dw);
    Ok(dw)
}

pub fn consensus_output(state: &ConsensusState, lambda_loc: &[f64]) -> Result<Vec<f64>> {
    check_len(state, lambda_loc)?;
    Ok(state.w.iter().zip(lambda_loc).map(|(w, l)| w + l).collect())
}

/// `lambda_glob` at rest for constant `lambda_loc`: `mu (mu I + L)^{-1} lambda_loc`.
pub fn steady_state_output(laplacian: &DMatrix<f64>, mu: f64, lambda_loc: &[f64]) -> Result<Vec<f64>> {
    let m = laplacian.nrows();
    if lambda_loc.len() != m {
        return Err(Error::Dimension {
            context: "local prices",
            expected: m,
            got: lambda_loc.len(),
        });
    }
    let sys = DMatrix::identity(m, m) * mu + laplacian;
    let rhs = DVector::from_column_slice(lambda_loc) * mu;
    let out = sys
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("consensus steady state"))?;
    Ok(out.iter().copied().collect())
}
