//! Sampling oracles for the closed forms in the parent module.
//!
//! Every trial draws its own features from a ChaCha8 stream keyed by
//! `(seed, trial index)`. Trials are grouped into fixed-size chunks that
//! run in parallel; chunk moments are merged pairwise in a fixed order, so
//! results do not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gamma_initial, gamma_row_normalized, gamma_signed};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scheme, Sign, SparseMatrix};

const CHUNK: u64 = 512;

/// Two-class Gaussian features: class 0 has mean `mu`, class 1 has `-mu`,
/// both with independent coordinates of variance `sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatureModel {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ClassFeatureModel {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("ClassFeatureModel", (mu.len(), 1), (sigma.len(), 1)));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("ClassFeatureModel::mu"));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter("sigma entries must be finite and >= 0".into()));
        }
        Ok(ClassFeatureModel { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn sample_into<R: Rng>(&self, sign: f64, rng: &mut R, out: &mut [f64]) {
        for ((o, m), s) in out.iter_mut().zip(&self.mu).zip(&self.sigma) {
            let z: f64 = rng.sample(StandardNormal);
            *o = sign * m + s.sqrt() * z;
        }
    }

    fn projection(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.mu).map(|(a, b)| a * b).sum()
    }
}

/// Sample mean and variance of one node's propagated feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub trials: u64,
    pub standard_error: Vec<f64>,
}

/// Closed form against sampled estimate for one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCheck {
    pub node: usize,
    pub degree: usize,
    pub class_sign: f64,
    pub gamma_closed_form: f64,
    pub gamma_sampled: f64,
    /// Largest per-coordinate `|sampled − closed form| / SE`. Infinite when
    /// the standard error is zero and the two disagree beyond roundoff.
    pub max_z: f64,
    pub variance_closed_form: Vec<f64>,
    pub variance_sampled: Vec<f64>,
    pub variance_max_rel_err: f64,
}

/// Per-layer outcome of repeated propagation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSimulation {
    pub layers: usize,
    pub trials: u64,
    /// `flip_rate[l][i]`: fraction of trials where node `i` sits on the
    /// wrong side of the class axis after `l + 1` steps.
    pub flip_rate: Vec<Vec<f64>>,
    /// `effective_homophily[l][i]`: trial mean of the fraction of neighbors
    /// with the same representation sign.
    pub effective_homophily: Vec<Vec<f64>>,
    pub mean_flip_rate: Vec<f64>,
    pub mean_effective_homophily: Vec<f64>,
    /// First layer (1-based) whose mean effective homophily is at most 1/2.
    pub onset_layer: Option<usize>,
    pub estimator: String,
}

#[derive(Clone)]
struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    fn merge(mut self, other: Moments) -> Moments {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        self
    }
}

fn merge_pairwise(mut parts: Vec<Moments>) -> Moments {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn chunks(trials: u64) -> Vec<(u64, u64)> {
    (0..trials.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(trials)))
        .collect()
}

fn class_signs(g: &Graph, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != g.num_nodes() {
        return Err(Error::shape("labels", (g.num_nodes(), 1), (labels.len(), 1)));
    }
    labels
        .iter()
        .map(|&y| match y {
            0 => Ok(1.0),
            1 => Ok(-1.0),
            _ => Err(Error::InvalidParameter(format!("labels must be binary, found {y}"))),
        })
        .collect()
}

fn sample_features(model: &ClassFeatureModel, signs: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let dim = model.dim();
    for (i, &s) in signs.iter().enumerate() {
        model.sample_into(s, rng, &mut out[i * dim..(i + 1) * dim]);
    }
}

fn estimates(m: Moments, n: usize, dim: usize) -> Vec<McEstimate> {
    let trials = m.count;
    let denom = if trials > 1 { (trials - 1) as f64 } else { 1.0 };
    (0..n)
        .map(|i| {
            let range = i * dim..(i + 1) * dim;
            let mean = m.mean[range.clone()].to_vec();
            let variance: Vec<f64> = m.m2[range].iter().map(|s| s / denom).collect();
            let standard_error = variance.iter().map(|v| (v / trials as f64).sqrt()).collect();
            McEstimate {
                mean,
                variance,
                trials,
                standard_error,
            }
        })
        .collect()
}

fn run_trials<F>(len: usize, trials: u64, seed: u64, trial: F) -> Result<Moments>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let parts: Vec<Moments> = chunks(trials)
        .into_par_iter()
        .map(|(start, end)| {
            let mut acc = Moments::new(len);
            let mut buf = vec![0.0; len];
            for t in start..end {
                let mut rng = trial_rng(seed, t);
                trial(&mut rng, &mut buf);
                acc.push(&buf);
            }
            acc
        })
        .collect();
    Ok(merge_pairwise(parts))
}

fn spmv_rows(a: &SparseMatrix, x: &[f64], dim: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (i, j, e) in a.pattern.iter() {
        let w = a.values[e];
        for c in 0..dim {
            out[i * dim + c] += w * x[j * dim + c];
        }
    }
}

/// How neighbor class membership is treated when sampling one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborClasses {
    /// Labels exactly as given, one shared feature draw per node and trial.
    /// The sampled mean is `Σ_j Ã_ij s_j μ`, which equals the closed-form
    /// drift only when same-class and cross-class neighbors have the same
    /// average relative degree.
    Fixed,
    /// For every node and trial, which neighbors share the node's class is
    /// redrawn uniformly at random while the same-class count is kept.
    /// Neighbor classes are then independent of neighbor degrees, which is
    /// the model under which the closed form is an exact expectation.
    Exchangeable,
}

/// Sampled outcome of one propagation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationSample {
    pub neighbor_classes: NeighborClasses,
    /// Moments of the propagated feature.
    pub estimates: Vec<McEstimate>,
    /// Variance of the propagated feature noise, i.e. the feature minus its
    /// mean given the sampled neighbor classes.
    pub within_class_variance: Vec<Vec<f64>>,
}

/// Samples `F⁰` from `model` and applies the normalized adjacency once,
/// with labels held fixed.
pub fn mc_propagate(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    scheme: Scheme,
    trials: u64,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    Ok(mc_propagate_with(g, labels, model, scheme, NeighborClasses::Fixed, trials, seed)?.estimates)
}

/// [`mc_propagate`] with a choice of neighbor class model.
pub fn mc_propagate_with(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    scheme: Scheme,
    neighbor_classes: NeighborClasses,
    trials: u64,
    seed: u64,
) -> Result<PropagationSample> {
    let signs = class_signs(g, labels)?;
    let a = g.normalized_sparse(scheme);
    let (n, dim) = (g.num_nodes(), model.dim());
    let block = n * dim;
    let noise_scale: Vec<f64> = model.sigma.iter().map(|s| s.sqrt()).collect();
    let max_deg = (0..n).map(|i| g.degree(i)).max().unwrap_or(0);
    // Layout per trial: [propagated feature | propagated noise].
    let m = run_trials(2 * block, trials, seed, |rng, out| {
        let (feat, noise_out) = out.split_at_mut(block);
        match neighbor_classes {
            NeighborClasses::Fixed => {
                let mut noise = vec![0.0; block];
                for (k, v) in noise.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = noise_scale[k % dim] * z;
                }
                spmv_rows(&a, &noise, dim, noise_out);
                feat.fill(0.0);
                for (i, j, e) in a.pattern.iter() {
                    let w = a.values[e] * signs[j];
                    for c in 0..dim {
                        feat[i * dim + c] += w * model.mu[c];
                    }
                }
            }
            NeighborClasses::Exchangeable => {
                let mut slots: Vec<usize> = Vec::with_capacity(max_deg);
                let mut same_class = vec![false; a.pattern.nnz()];
                feat.fill(0.0);
                noise_out.fill(0.0);
                for i in 0..n {
                    let range = a.pattern.row_range(i);
                    slots.clear();
                    let mut same = 0;
                    for e in range.clone() {
                        let j = a.pattern.col(e);
                        if j == i {
                            same_class[e] = true;
                        } else {
                            same_class[e] = false;
                            slots.push(e);
                            same += usize::from(signs[j] == signs[i]);
                        }
                    }
                    for t in 0..same {
                        let r = rng.random_range(t..slots.len());
                        slots.swap(t, r);
                        same_class[slots[t]] = true;
                    }
                    for e in range {
                        let w = a.values[e];
                        let s = if same_class[e] { signs[i] } else { -signs[i] };
                        for c in 0..dim {
                            let z: f64 = rng.sample(StandardNormal);
                            let eps = noise_scale[c] * z;
                            feat[i * dim + c] += w * s * model.mu[c];
                            noise_out[i * dim + c] += w * eps;
                        }
                    }
                }
            }
        }
        for (f, z) in feat.iter_mut().zip(noise_out.iter()) {
            *f += z;
        }
    })?;
    let (total, noise) = split_moments(m, block);
    Ok(PropagationSample {
        neighbor_classes,
        estimates: estimates(total, n, dim),
        within_class_variance: estimates(noise, n, dim).into_iter().map(|e| e.variance).collect(),
    })
}

fn split_moments(m: Moments, at: usize) -> (Moments, Moments) {
    let (mean_a, mean_b) = m.mean.split_at(at);
    let (m2_a, m2_b) = m.m2.split_at(at);
    (
        Moments {
            count: m.count,
            mean: mean_a.to_vec(),
            m2: m2_a.to_vec(),
        },
        Moments {
            count: m.count,
            mean: mean_b.to_vec(),
            m2: m2_b.to_vec(),
        },
    )
}

fn check_error_rates(g: &Graph, error_rate: &[f64]) -> Result<()> {
    if error_rate.len() != g.num_nodes() {
        return Err(Error::shape("error_rate", (g.num_nodes(), 1), (error_rate.len(), 1)));
    }
    if let Some(e) = error_rate.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::InvalidParameter(format!("error rate {e} not in [0, 1]")));
    }
    Ok(())
}

/// One signed propagation step with the renormalized adjacency: each
/// neighbor message is sent as-is from a same-class neighbor and negated
/// from a different-class one, except that node `i` gets the opposite
/// treatment with probability `error_rate[i]`, independently per message.
pub fn mc_signed(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    error_rate: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    Ok(mc_signed_sample(g, labels, model, error_rate, trials, seed)?.estimates)
}

/// [`mc_signed`] together with the variance of the propagated noise.
pub fn mc_signed_sample(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    error_rate: &[f64],
    trials: u64,
    seed: u64,
) -> Result<PropagationSample> {
    let signs = class_signs(g, labels)?;
    check_error_rates(g, error_rate)?;
    let a = g.normalized_sparse(Scheme::Renormalized);
    let (n, dim) = (g.num_nodes(), model.dim());
    let block = n * dim;
    let mean_rows: Vec<f64> = (0..block).map(|k| signs[k / dim] * model.mu[k % dim]).collect();
    let m = run_trials(2 * block, trials, seed, |rng, out| {
        let mut f0 = vec![0.0; block];
        sample_features(model, &signs, rng, &mut f0);
        out.fill(0.0);
        let (feat, noise) = out.split_at_mut(block);
        for (i, j, e) in a.pattern.iter() {
            let mut w = a.values[e];
            if i != j {
                let correct = if signs[i] == signs[j] { 1.0 } else { -1.0 };
                let wrong = rng.random::<f64>() < error_rate[i];
                w *= if wrong { -correct } else { correct };
            }
            for c in 0..dim {
                let x = f0[j * dim + c];
                feat[i * dim + c] += w * x;
                noise[i * dim + c] += w * (x - mean_rows[j * dim + c]);
            }
        }
    })?;
    let (total, noise) = split_moments(m, block);
    Ok(PropagationSample {
        neighbor_classes: NeighborClasses::Fixed,
        estimates: estimates(total, n, dim),
        within_class_variance: estimates(noise, n, dim).into_iter().map(|e| e.variance).collect(),
    })
}

/// Exact per-node factor multiplying `Σ` after one step: `Σ_j Ã_ij²`.
/// Equals [`variance_factor`](super::variance_factor) under the
/// renormalized scheme.
pub fn propagated_variance_factor(g: &Graph, scheme: Scheme) -> Vec<f64> {
    let a = g.normalized_sparse(scheme);
    (0..g.num_nodes())
        .map(|i| a.values[a.pattern.row_range(i)].iter().map(|w| w * w).sum())
        .collect()
}

fn node_checks(
    g: &Graph,
    signs: &[f64],
    model: &ClassFeatureModel,
    sample: &PropagationSample,
    gamma: &[f64],
    var_factor: &[f64],
) -> Vec<NodeCheck> {
    let est = &sample.estimates;
    let mu_sq: f64 = model.mu.iter().map(|m| m * m).sum();
    (0..g.num_nodes())
        .map(|i| {
            let e = &est[i];
            let s = signs[i];
            let mut max_z: f64 = 0.0;
            for c in 0..model.dim() {
                let want = gamma[i] * s * model.mu[c];
                let diff = (e.mean[c] - want).abs();
                let z = if e.standard_error[c] > 0.0 {
                    diff / e.standard_error[c]
                } else if diff <= 1e-9 * (1.0 + want.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                };
                max_z = max_z.max(z);
            }
            let variance_closed_form: Vec<f64> =
                model.sigma.iter().map(|s2| var_factor[i] * s2).collect();
            let variance_sampled = &sample.within_class_variance[i];
            let variance_max_rel_err = variance_closed_form
                .iter()
                .zip(variance_sampled)
                .filter(|(want, _)| **want > 0.0)
                .map(|(want, got)| (got - want).abs() / want)
                .fold(0.0, f64::max);
            NodeCheck {
                node: i,
                degree: g.degree(i),
                class_sign: s,
                gamma_closed_form: gamma[i],
                gamma_sampled: model.projection(&e.mean) / mu_sq * s,
                max_z,
                variance_closed_form,
                variance_sampled: variance_sampled.clone(),
                variance_max_rel_err,
            }
        })
        .collect()
}

fn require_nonzero_mu(model: &ClassFeatureModel) -> Result<()> {
    if model.mu.iter().all(|&m| m == 0.0) {
        return Err(Error::InvalidParameter("mu must be nonzero to measure drift".into()));
    }
    Ok(())
}

/// Samples one step and compares every node against the closed-form drift
/// factor computed from its homophily and relative degree, and against the
/// closed-form within-class variance.
pub fn verify_propagation(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    scheme: Scheme,
    neighbor_classes: NeighborClasses,
    trials: u64,
    seed: u64,
) -> Result<Vec<NodeCheck>> {
    require_nonzero_mu(model)?;
    let signs = class_signs(g, labels)?;
    let hom = g.node_homophily(labels)?;
    let rel = g.relative_degrees()?;
    let gamma = (0..g.num_nodes())
        .map(|i| {
            let (h, d) = (hom.per_node_h[i], g.degree(i) as f64);
            Ok(match scheme {
                Scheme::Renormalized => gamma_initial(h, d, rel.rbar[i])?.0,
                Scheme::RowNormalized => gamma_row_normalized(h, d)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = mc_propagate_with(g, labels, model, scheme, neighbor_classes, trials, seed)?;
    let vf = propagated_variance_factor(g, scheme);
    Ok(node_checks(g, &signs, model, &sample, &gamma, &vf))
}

/// Runs [`mc_signed`] and compares against the signed drift factor.
pub fn verify_signed(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    error_rate: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<NodeCheck>> {
    require_nonzero_mu(model)?;
    let signs = class_signs(g, labels)?;
    check_error_rates(g, error_rate)?;
    let rel = g.relative_degrees()?;
    let gamma = (0..g.num_nodes())
        .map(|i| Ok(gamma_signed(error_rate[i], g.degree(i) as f64, rel.rbar[i])?.0))
        .collect::<Result<Vec<_>>>()?;
    let sample = mc_signed_sample(g, labels, model, error_rate, trials, seed)?;
    let vf = propagated_variance_factor(g, Scheme::Renormalized);
    Ok(node_checks(g, &signs, model, &sample, &gamma, &vf))
}

/// Applies the renormalized adjacency `layers` times to sampled features
/// and tracks sign flips along the class axis and the sign-based
/// effective homophily after every step.
pub fn simulate_depth(
    g: &Graph,
    labels: &[usize],
    model: &ClassFeatureModel,
    layers: usize,
    trials: u64,
    seed: u64,
) -> Result<DepthSimulation> {
    if layers == 0 {
        return Err(Error::InvalidParameter("layers must be >= 1".into()));
    }
    let signs = class_signs(g, labels)?;
    if !g.isolated_nodes().is_empty() {
        return Err(Error::IsolatedNode(g.isolated_nodes()[0]));
    }
    let a = g.normalized_sparse(Scheme::Renormalized);
    let (n, dim) = (g.num_nodes(), model.dim());
    let class_side: Vec<Sign> = signs.iter().map(|&s| Sign::of(s)).collect();
    // Layout per trial: [flip indicators (layers*n) | effective homophily (layers*n)].
    let m = run_trials(2 * layers * n, trials, seed, |rng, out| {
        let mut f = vec![0.0; n * dim];
        let mut next = vec![0.0; n * dim];
        sample_features(model, &signs, rng, &mut f);
        let (flips, homs) = out.split_at_mut(layers * n);
        for l in 0..layers {
            spmv_rows(&a, &f, dim, &mut next);
            std::mem::swap(&mut f, &mut next);
            let side: Vec<Sign> = (0..n)
                .map(|i| Sign::of(model.projection(&f[i * dim..(i + 1) * dim])))
                .collect();
            for i in 0..n {
                flips[l * n + i] = if side[i] != class_side[i] { 1.0 } else { 0.0 };
                let nb = g.neighbors(i);
                let same = nb.iter().filter(|&&j| side[j] == side[i]).count();
                homs[l * n + i] = same as f64 / nb.len() as f64;
            }
        }
    })?;
    let flip_rate: Vec<Vec<f64>> = (0..layers)
        .map(|l| m.mean[l * n..(l + 1) * n].to_vec())
        .collect();
    let effective_homophily: Vec<Vec<f64>> = (0..layers)
        .map(|l| m.mean[(layers + l) * n..(layers + l + 1) * n].to_vec())
        .collect();
    let avg = |v: &Vec<f64>| v.iter().sum::<f64>() / n as f64;
    let mean_flip_rate: Vec<f64> = flip_rate.iter().map(avg).collect();
    let mean_effective_homophily: Vec<f64> = effective_homophily.iter().map(avg).collect();
    let onset_layer = mean_effective_homophily
        .iter()
        .position(|&h| h <= 0.5)
        .map(|l| l + 1);
    Ok(DepthSimulation {
        layers,
        trials,
        flip_rate,
        effective_homophily,
        mean_flip_rate,
        mean_effective_homophily,
        onset_layer,
        estimator: "representation_sign".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    fn cycle4() -> Graph {
        build_graph([(0, 1), (1, 2), (2, 3), (3, 0)], 4).unwrap()
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 * 0.37 - 3.0).collect();
        let mut whole = Moments::new(1);
        for x in &xs {
            whole.push(&[*x]);
        }
        let parts: Vec<Moments> = xs
            .chunks(5)
            .map(|c| {
                let mut m = Moments::new(1);
                for x in c {
                    m.push(&[*x]);
                }
                m
            })
            .collect();
        let merged = merge_pairwise(parts);
        assert_eq!(merged.count, whole.count);
        assert!((merged.mean[0] - whole.mean[0]).abs() < 1e-12);
        assert!((merged.m2[0] - whole.m2[0]).abs() < 1e-9);
    }

    #[test]
    fn fixed_labels_give_conditional_mean() {
        let g = build_graph([(0, 1), (0, 2), (0, 3), (3, 4)], 5).unwrap();
        let labels = [0, 0, 1, 0, 1];
        let model = ClassFeatureModel::new(vec![1.5, -0.5], vec![0.0, 0.0]).unwrap();
        let est = mc_propagate(&g, &labels, &model, Scheme::Renormalized, 10, 3).unwrap();
        let dense = g.normalize(Scheme::Renormalized).matrix;
        for i in 0..5 {
            for c in 0..2 {
                let want: f64 = (0..5)
                    .map(|j| dense.get(i, j) * if labels[j] == 0 { 1.0 } else { -1.0 } * model.mu[c])
                    .sum();
                assert!((est[i].mean[c] - want).abs() < 1e-12);
                assert_eq!(est[i].variance[c], 0.0);
            }
        }
    }

    #[test]
    fn deterministic_features_hit_closed_form_on_homogeneous_neighbors() {
        let star = build_graph([(0, 1), (0, 2), (0, 3)], 4).unwrap();
        let model = ClassFeatureModel::new(vec![1.5, -0.5], vec![0.0, 0.0]).unwrap();
        for labels in [[0, 0, 0, 0], [0, 1, 1, 1], [1, 0, 0, 0]] {
            let checks = verify_propagation(
                &star,
                &labels,
                &model,
                Scheme::Renormalized,
                NeighborClasses::Fixed,
                10,
                3,
            )
            .unwrap();
            for c in &checks {
                assert_eq!(c.max_z, 0.0, "node {}", c.node);
                assert!((c.gamma_sampled - c.gamma_closed_form).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exchangeable_classes_match_closed_form_on_irregular_graph() {
        let g = build_graph([(0, 1), (0, 2), (0, 3), (3, 4), (1, 4), (4, 5), (5, 6)], 7).unwrap();
        let labels = [0, 0, 1, 0, 1, 1, 0];
        let model = ClassFeatureModel::new(vec![1.0], vec![0.5]).unwrap();
        let checks = verify_propagation(
            &g,
            &labels,
            &model,
            Scheme::Renormalized,
            NeighborClasses::Exchangeable,
            100_000,
            5,
        )
        .unwrap();
        for c in &checks {
            assert!(c.max_z <= 4.0, "node {} z = {}", c.node, c.max_z);
            assert!(c.variance_max_rel_err <= 0.05, "node {}", c.node);
        }
    }

    #[test]
    fn alternating_cycle_mean_and_variance() {
        let model = ClassFeatureModel::new(vec![1.0], vec![1.0]).unwrap();
        let checks =
            verify_propagation(
                &cycle4(),
                &[0, 1, 0, 1],
                &model,
                Scheme::Renormalized,
                NeighborClasses::Fixed,
                100_000,
                7,
            )
            .unwrap();
        for c in &checks {
            assert!((c.gamma_closed_form + 1.0 / 3.0).abs() < 1e-15);
            assert!(c.max_z <= 4.0, "z = {}", c.max_z);
            assert!((c.variance_closed_form[0] - 1.0 / 3.0).abs() < 1e-15);
            assert!(c.variance_max_rel_err <= 0.05);
        }
    }

    #[test]
    fn signed_zero_error_ignores_labels() {
        let g = build_graph([(0, 1), (0, 2), (0, 3)], 4).unwrap();
        let model = ClassFeatureModel::new(vec![2.0], vec![0.0]).unwrap();
        let rel = g.relative_degrees().unwrap();
        for labels in [[0, 0, 0, 0], [0, 1, 1, 0], [1, 0, 1, 0]] {
            let est = mc_signed(&g, &labels, &model, &[0.0; 4], 3, 1).unwrap();
            for i in 0..4 {
                let d = g.degree(i) as f64;
                let s = if labels[i] == 0 { 1.0 } else { -1.0 };
                let want = (d * rel.rbar[i] + 1.0) / (d + 1.0) * s * 2.0;
                assert!((est[i].mean[0] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn signed_full_error_on_cycle() {
        let model = ClassFeatureModel::new(vec![1.0], vec![0.0]).unwrap();
        let est = mc_signed(&cycle4(), &[0, 0, 1, 1], &model, &[1.0; 4], 3, 1).unwrap();
        for (i, e) in est.iter().enumerate() {
            let s = if i < 2 { 1.0 } else { -1.0 };
            assert!((e.mean[0] + s / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signed_star_quarter_error() {
        let g = build_graph([(0, 1), (0, 2), (0, 3)], 4).unwrap();
        let model = ClassFeatureModel::new(vec![1.0], vec![1.0]).unwrap();
        let checks = verify_signed(&g, &[0, 1, 0, 1], &model, &[0.25; 4], 100_000, 11).unwrap();
        for c in &checks {
            assert!(c.max_z <= 4.0, "node {} z = {}", c.node, c.max_z);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let g = cycle4();
        let model = ClassFeatureModel::new(vec![1.0, 0.3], vec![1.0, 2.0]).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_propagate(&g, &[0, 1, 1, 0], &model, Scheme::Renormalized, 5000, 9))
                .unwrap()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn depth_simulation_extremes() {
        let model = ClassFeatureModel::new(vec![1.0], vec![0.0]).unwrap();
        let same = simulate_depth(&cycle4(), &[0, 0, 0, 0], &model, 4, 5, 0).unwrap();
        assert!(same.flip_rate.iter().flatten().all(|&r| r == 0.0));
        assert_eq!(same.onset_layer, None);

        let alt = simulate_depth(&cycle4(), &[0, 1, 0, 1], &model, 3, 5, 0).unwrap();
        assert!(alt.flip_rate[0].iter().all(|&r| r == 1.0));
    }
}
