//! Propagation dynamics of one normalized-adjacency step on a two-class
//! graph, in closed form.
//!
//! Class 1 features have mean `μ`, class 2 features mean `-μ`, both with
//! diagonal covariance `Σ`. After one step `f¹ = Ã f⁰` the expected feature
//! of node `i` is `γ_i · E[f⁰_i]` with
//!
//! ```text
//! γ_i = ((2 h_i − 1) d_i r̄_i + 1) / (d_i + 1)
//! ```
//!
//! where `h_i` is the node's homophily and `r̄_i` the mean of
//! `sqrt((d_i+1)/(d_j+1))` over its neighbors. The same form with
//! `(1 − 2 e_i)` in place of `(2 h_i − 1)` covers signed messages with
//! error rate `e_i`. The [`montecarlo`] submodule samples the same process
//! from first principles so every closed form here has an independent
//! check.

pub mod montecarlo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub use montecarlo::{
    mc_propagate, mc_propagate_with, mc_signed, mc_signed_sample, propagated_variance_factor,
    simulate_depth, verify_propagation, verify_signed, ClassFeatureModel, DepthSimulation,
    McEstimate, NeighborClasses, NodeCheck, PropagationSample,
};

/// Which of the three regimes a drift factor falls into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaCase {
    /// Low homophily (or high error rate): moves toward the opposing class.
    Case1LowHomophily,
    /// High homophily, small relative degree: contracts toward the origin.
    Case2Contract,
    /// High homophily, large relative degree: expands away from the origin.
    Case3Expand,
}

impl GammaCase {
    /// Interval as stated for the trichotomy: `(-∞, 1/2]`, `(1/2, 1]`,
    /// `(1, ∞)`. Bounds are `(lower, lower_inclusive, upper, upper_inclusive)`.
    pub fn stated_interval(self) -> (f64, bool, f64, bool) {
        match self {
            GammaCase::Case1LowHomophily => (f64::NEG_INFINITY, false, 0.5, true),
            GammaCase::Case2Contract => (0.5, false, 1.0, true),
            GammaCase::Case3Expand => (1.0, false, f64::INFINITY, false),
        }
    }

    /// Tight interval for a node of degree `d`. Case 2 is bounded below by
    /// `1/(d+1)`, which equals the stated `1/2` only when `d = 1`.
    pub fn interval_for_degree(self, d: f64) -> (f64, bool, f64, bool) {
        match self {
            GammaCase::Case1LowHomophily => (f64::NEG_INFINITY, false, 1.0 / (d + 1.0), true),
            GammaCase::Case2Contract => (1.0 / (d + 1.0), false, 1.0, true),
            GammaCase::Case3Expand => (1.0, false, f64::INFINITY, false),
        }
    }
}

/// True when `x` lies in an interval produced by [`GammaCase`].
pub fn in_interval(x: f64, (lo, lo_inc, hi, hi_inc): (f64, bool, f64, bool)) -> bool {
    let above = if lo_inc { x >= lo } else { x > lo };
    let below = if hi_inc { x <= hi } else { x < hi };
    above && below
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub layer: usize,
    pub gamma: Vec<f64>,
    pub case: Vec<GammaCase>,
}

fn check_common(d: f64, rbar: f64) -> Result<()> {
    if !(d >= 1.0) {
        return Err(Error::InvalidDegree(d));
    }
    if !(rbar > 0.0) || !rbar.is_finite() {
        return Err(Error::InvalidParameter(format!("mean relative degree {rbar} must be > 0")));
    }
    Ok(())
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidParameter(format!("{name}={x} not in [0, 1]")));
    }
    Ok(())
}

fn drift(coef: f64, d: f64, rbar: f64) -> f64 {
    (coef * d * rbar + 1.0) / (d + 1.0)
}

/// Drift factor after the first propagation step and its regime.
pub fn gamma_initial(h: f64, d: f64, rbar: f64) -> Result<(f64, GammaCase)> {
    check_unit("homophily", h)?;
    check_common(d, rbar)?;
    let gamma = drift(2.0 * h - 1.0, d, rbar);
    let case = if h <= 0.5 {
        GammaCase::Case1LowHomophily
    } else if rbar <= 1.0 / (2.0 * h - 1.0) {
        GammaCase::Case2Contract
    } else {
        GammaCase::Case3Expand
    };
    Ok((gamma, case))
}

/// Accumulated drift after one more step when the fraction of neighbors
/// sharing the node's current sign is `h_eff`.
pub fn gamma_developing(h_eff: f64, d: f64, rbar: f64, gamma_prev: f64) -> Result<f64> {
    check_unit("effective homophily", h_eff)?;
    check_common(d, rbar)?;
    if !(gamma_prev > 0.0) {
        return Err(Error::InvalidDiscount(gamma_prev));
    }
    Ok(drift(2.0 * h_eff - 1.0, d, rbar) * gamma_prev)
}

/// Drift factor when every neighbor message is negated or passed as-is,
/// wrongly with probability `e`. Homophily drops out entirely.
pub fn gamma_signed(e: f64, d: f64, rbar: f64) -> Result<(f64, GammaCase)> {
    check_unit("error rate", e)?;
    check_common(d, rbar)?;
    let gamma = drift(1.0 - 2.0 * e, d, rbar);
    let case = if e >= 0.5 {
        GammaCase::Case1LowHomophily
    } else if rbar <= 1.0 / (1.0 - 2.0 * e) {
        GammaCase::Case2Contract
    } else {
        GammaCase::Case3Expand
    };
    Ok((gamma, case))
}

/// Under row normalization every node behaves as in a regular graph:
/// `r̄ = 1`, so `γ = ((2h − 1) d + 1)/(d + 1) ≤ 1`.
pub fn gamma_row_normalized(h: f64, d: f64) -> Result<(f64, GammaCase)> {
    gamma_initial(h, d, 1.0)
}

/// Factor multiplying `Σ` in the variance of `f¹_i` for independent
/// features: `(1/(d_i+1)) (1/(d_i+1) + Σ_j 1/(d_j+1))`. Never above 1/2.
pub fn variance_factor(g: &Graph, i: usize) -> Result<f64> {
    if i >= g.num_nodes() {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: g.num_nodes(),
        });
    }
    let d = g.degree(i);
    if d == 0 {
        return Err(Error::IsolatedNode(i));
    }
    let inv = 1.0 / (d as f64 + 1.0);
    let neigh: f64 = g
        .neighbors(i)
        .iter()
        .map(|&j| 1.0 / (g.degree(j) as f64 + 1.0))
        .sum();
    Ok(inv * (inv + neigh))
}

/// Per-node drift factors and regimes for the first layer, from the
/// empirical homophily and relative degrees of a labeled graph.
pub fn classify_cases(g: &Graph, labels: &[usize]) -> Result<GammaReport> {
    let hom = g.node_homophily(labels)?;
    let rel = g.relative_degrees()?;
    let mut gamma = Vec::with_capacity(g.num_nodes());
    let mut case = Vec::with_capacity(g.num_nodes());
    for i in 0..g.num_nodes() {
        let (gm, c) = gamma_initial(hom.per_node_h[i], g.degree(i) as f64, rel.rbar[i])?;
        gamma.push(gm);
        case.push(c);
    }
    Ok(GammaReport {
        layer: 1,
        gamma,
        case,
    })
}
