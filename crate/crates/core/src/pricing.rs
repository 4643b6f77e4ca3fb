//! Quadratic generation costs, the closed-form dispatch optimum and the
//! marginal-cost residual of the price controller.
//!
//! Prices follow the marginal-cost convention `∇f_i(p*) = λ*`: a positive
//! price is matched by positive marginal cost.

use serde::{Deserialize, Serialize};

use crate::dynamics::PriceMode;
use crate::error::{Error, Result};
use crate::model::Microgrid;

/// `f(p) = q p² + r p + s` with `q > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticCost {
    pub q: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub s: f64,
}

impl QuadraticCost {
    pub fn new(q: f64, r: f64, s: f64) -> Self {
        Self { q, r, s }
    }

    pub fn value(&self, p: f64) -> f64 {
        (self.q * p + self.r) * p + self.s
    }

    /// Marginal cost `2 q p + r`.
    pub fn gradient(&self, p: f64) -> f64 {
        2.0 * self.q * p + self.r
    }

    /// Power at which marginal cost equals `price`.
    pub fn supply_at(&self, price: f64) -> f64 {
        (price - self.r) / (2.0 * self.q)
    }
}

pub fn gradient(cost: &QuadraticCost, p: f64) -> f64 {
    cost.gradient(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub p: Vec<f64>,
    pub lambda: f64,
}

/// Minimizes `Σ f_i(p_i)` subject to `Σ p_i = total`.
pub fn dispatch_oracle(costs: &[QuadraticCost], total: f64) -> Result<Dispatch> {
    if costs.is_empty() {
        return Err(Error::Invalid("dispatch needs at least one cost".into()));
    }
    if let Some(c) = costs.iter().find(|c| !(c.q > 0.0 && c.q.is_finite())) {
        return Err(Error::Invalid(format!("q must be positive, got {}", c.q)));
    }
    let inv: f64 = costs.iter().map(|c| 1.0 / (2.0 * c.q)).sum();
    let offset: f64 = costs.iter().map(|c| c.r / (2.0 * c.q)).sum();
    let lambda = (total + offset) / inv;
    let p = costs.iter().map(|c| c.supply_at(lambda)).collect();
    Ok(Dispatch { p, lambda })
}

/// `2 q_i p_ref,i + r_i - λ` for every grid-following DGU. The price is the
/// state `λ` when self-closed, or the supplied external price.
pub fn marginal_cost_residual(mg: &Microgrid, x: &[f64], price: PriceMode) -> Result<Vec<f64>> {
    let lay = mg.layout();
    lay.check(x, "state vector")?;
    let lambda = match price {
        PriceMode::SelfClosed => x[lay.lambda()],
        PriceMode::External(l) => l,
    };
    Ok(mg
        .costs()
        .iter()
        .zip(&x[lay.p_ref()])
        .map(|(c, &p)| c.gradient(p) - lambda)
        .collect())
}
