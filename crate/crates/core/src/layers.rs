//! Forward passes for the four model families: a two-layer MLP, vanilla
//! GCN, a residual base model, and the gated layer with signed messages,
//! degree correction and decaying aggregation.
//!
//! All propagation is edge-sparse. A [`PropagationContext`] holds the
//! normalized adjacency split into its diagonal and off-diagonal parts plus
//! the per-edge `1/r_ij − 1` constants, so similarity and degree correction
//! are only ever evaluated on edges.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scheme, SparsePattern};
use crate::tensor::Tensor;

/// Floor on the similarity denominator.
pub const DEFAULT_DELTA: f64 = 1e-9;
/// BatchNorm / LayerNorm epsilon.
pub const NORM_EPS: f64 = 1e-5;
/// BatchNorm running-statistics momentum.
pub const NORM_MOMENTUM: f64 = 0.1;

/// Graph-derived constants shared by every layer of a model.
#[derive(Clone, Debug)]
pub struct PropagationContext {
    pub scheme: Scheme,
    pub n: usize,
    /// `I + A` pattern and normalized values.
    pub full: Arc<SparsePattern>,
    pub full_values: Tensor,
    /// Off-diagonal pattern and normalized values.
    pub edges: Arc<SparsePattern>,
    pub edge_values: Tensor,
    /// Diagonal pattern and normalized values.
    pub diag: Arc<SparsePattern>,
    pub diag_values: Tensor,
    /// `1/r_ij − 1` per off-diagonal entry.
    pub inv_r_minus_one: Tensor,
}

impl PropagationContext {
    pub fn new(g: &Graph, scheme: Scheme) -> Self {
        let n = g.num_nodes();
        let a = g.normalized_sparse(scheme);
        let edges = g.edge_pattern();
        let dt: Vec<f64> = (0..n).map(|i| g.degree(i) as f64 + 1.0).collect();
        let mut edge_values = Vec::with_capacity(edges.nnz());
        let mut inv_r = Vec::with_capacity(edges.nnz());
        for (i, j, _) in edges.iter() {
            let e = a.pattern.position(i, j).expect("edge present in I + A");
            edge_values.push(a.values[e]);
            inv_r.push((dt[j] / dt[i]).sqrt() - 1.0);
        }
        let diag_values: Vec<f64> = (0..n)
            .map(|i| a.values[a.pattern.position(i, i).expect("diagonal present")])
            .collect();
        let diag = Arc::new(SparsePattern::new(n, (0..=n).collect(), (0..n).collect()));
        PropagationContext {
            scheme,
            n,
            full_values: Tensor::from_raw(1, a.values.len(), a.values),
            full: a.pattern,
            edge_values: Tensor::from_raw(1, edge_values.len(), edge_values),
            edges,
            diag_values: Tensor::from_raw(1, n, diag_values),
            diag,
            inv_r_minus_one: Tensor::from_raw(1, inv_r.len(), inv_r),
        }
    }
}

/// Similarity normalization used for signed messages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `f_i·f_j / max(‖f_i‖‖f_j‖, δ)`, in `[−1, 1]`.
    #[default]
    Cosine,
    /// `f_i·f_j / max(‖f_i‖²‖f_j‖², δ)`, the formula without the square root.
    Literal,
}

/// Positive and negative parts of a dense similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SignSplit {
    pub s_pos: Tensor,
    pub s_neg: Tensor,
}

/// Dense pairwise similarity with zero diagonal, split by sign. Meant for
/// inspection and small graphs; layers use the edge-masked form.
pub fn sign_matrix(f: &Tensor, delta: f64, similarity: Similarity) -> SignSplit {
    let n = f.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut s = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dot: f64 = f.row(i).iter().zip(f.row(j)).map(|(a, b)| a * b).sum();
            let prod = norms[i] * norms[j];
            let denom = match similarity {
                Similarity::Cosine => prod,
                Similarity::Literal => prod * prod,
            };
            s.set(i, j, dot / denom.max(delta));
        }
    }
    SignSplit {
        s_pos: s.map(|v| v.max(0.0)),
        s_neg: s.map(|v| v.min(0.0)),
    }
}

/// Per-edge similarity on the tape, as `1 x nnz` over `ctx.edges`.
pub fn edge_similarity(
    tape: &mut Tape,
    ctx: &PropagationContext,
    f: Var,
    delta: f64,
    similarity: Similarity,
) -> Result<Var> {
    let dots = tape.edge_dot(f, &ctx.edges)?;
    let norms = tape.row_l2_norm(f);
    let prod = tape.edge_outer(norms, &ctx.edges)?;
    let denom = match similarity {
        Similarity::Cosine => prod,
        Similarity::Literal => tape.mul(prod, prod)?,
    };
    let denom = tape.clamp_min(denom, delta);
    tape.div(dots, denom)
}

/// `τ_ij = softplus(λ0 (1/r_ij − 1) + λ1)` for every directed edge, in the
/// storage order of [`Graph::edge_pattern`].
pub fn degree_correction(g: &Graph, lambda0: f64, lambda1: f64) -> Result<Vec<f64>> {
    let rel = g.relative_degrees()?;
    Ok(rel
        .r
        .iter()
        .map(|r| softplus(lambda0 * (1.0 / r - 1.0) + lambda1))
        .collect())
}

/// Shrinking residual coefficient `ln(η / l^k + 1)` from layer `l0` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub eta: f64,
    pub k: f64,
    pub l0: usize,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        DecaySchedule {
            eta: 1.0,
            k: 3.0,
            l0: 1,
        }
    }
}

impl DecaySchedule {
    /// Coefficient for 1-based layer `l`.
    pub fn coefficient(&self, l: usize) -> f64 {
        if l >= self.l0 {
            (self.eta / (l as f64).powf(self.k) + 1.0).ln()
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub use_sign: bool,
    pub use_degree_correction: bool,
    pub use_decay: bool,
    pub residual: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    None,
    BatchNorm,
    LayerNorm,
}

/// Running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Folds one batch's statistics in. `var` is the biased batch variance
    /// over `n` rows; the running variance tracks the unbiased one.
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] =
                (1.0 - NORM_MOMENTUM) * self.running_mean[c] + NORM_MOMENTUM * mean[c];
            self.running_var[c] =
                (1.0 - NORM_MOMENTUM) * self.running_var[c] + NORM_MOMENTUM * var[c] * unbias;
        }
    }
}

/// Learnable scale and shift of a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub scale: Var,
    pub shift: Var,
}

/// Batch statistics observed by a training-mode BatchNorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Normalizes `h` across nodes (BatchNorm) or features (LayerNorm), then
/// applies the learnable scale and shift. BatchNorm in eval mode uses
/// `state`'s running statistics.
pub fn norm_modifier(
    tape: &mut Tape,
    h: Var,
    kind: NormKind,
    vars: Option<NormVars>,
    state: Option<&BatchNormState>,
    training: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let (normed, stats) = match kind {
        NormKind::None => return Ok((h, None)),
        NormKind::LayerNorm => (tape.row_normalize(h, NORM_EPS), None),
        NormKind::BatchNorm if training || state.is_none() => {
            let rows = tape.shape(h).0;
            let (x, mean, var) = tape.column_normalize(h, NORM_EPS);
            (x, Some(BatchStats { mean, var, rows }))
        }
        NormKind::BatchNorm => {
            let st = state.expect("checked above");
            let neg_mean = Tensor::new(1, st.running_mean.len(), st.running_mean.iter().map(|m| -m).collect())?;
            let inv_std = Tensor::new(
                1,
                st.running_var.len(),
                st.running_var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
            )?;
            let neg_mean = tape.constant(neg_mean);
            let inv_std = tape.constant(inv_std);
            let centered = tape.add_row(h, neg_mean)?;
            (tape.mul_row(centered, inv_std)?, None)
        }
    };
    let out = match vars {
        Some(v) => {
            let scaled = tape.mul_row(normed, v.scale)?;
            tape.add_row(scaled, v.shift)?
        }
        None => normed,
    };
    Ok((out, stats))
}

/// `F W + b`.
pub fn linear_transform(tape: &mut Tape, f: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let fw = tape.matmul(f, w)?;
    match b {
        Some(b) => tape.add_row(fw, b),
        None => Ok(fw),
    }
}

/// `Ã X` on the tape.
pub fn propagate(tape: &mut Tape, ctx: &PropagationContext, x: Var) -> Result<Var> {
    let a = tape.constant(ctx.full_values.clone());
    tape.spmm(a, &ctx.full, x)
}

/// Per-edge `τ_ij` on the tape, `1 x nnz` over `ctx.edges`.
pub fn edge_degree_correction(
    tape: &mut Tape,
    ctx: &PropagationContext,
    lambda0: Var,
    lambda1: Var,
) -> Result<Var> {
    let c = tape.constant(ctx.inv_r_minus_one.clone());
    let scaled = tape.scale_by(c, lambda0)?;
    let shifted = tape.add_scalar(scaled, lambda1)?;
    Ok(tape.softplus(shifted))
}

/// `(Ã ⊙ 𝒯) X` with the diagonal left uncorrected.
fn corrected_propagate(tape: &mut Tape, ctx: &PropagationContext, x: Var, tau: Var) -> Result<Var> {
    let a_edge = tape.constant(ctx.edge_values.clone());
    let w = tape.mul(a_edge, tau)?;
    let off = tape.spmm(w, &ctx.edges, x)?;
    let a_diag = tape.constant(ctx.diag_values.clone());
    let self_term = tape.spmm(a_diag, &ctx.diag, x)?;
    tape.add(self_term, off)
}

/// Tape handles for one gated layer.
#[derive(Clone, Copy, Debug)]
pub struct GgcnVars {
    pub w: Var,
    pub b: Var,
    pub alpha: Var,
    /// `1 x 3`.
    pub beta: Var,
    pub lambda0: Option<Var>,
    pub lambda1: Option<Var>,
    pub norm: Option<NormVars>,
}

/// Options for [`ggcn_layer`] beyond its parameters.
#[derive(Clone, Copy, Debug)]
pub struct GgcnOptions<'a> {
    pub flags: LayerFlags,
    /// Schedule and 1-based layer index; used when `flags.use_decay`.
    pub decay: Option<(DecaySchedule, usize)>,
    pub delta: f64,
    pub similarity: Similarity,
    pub norm: NormKind,
    pub norm_state: Option<&'a BatchNormState>,
    pub training: bool,
}

impl Default for GgcnOptions<'_> {
    fn default() -> Self {
        GgcnOptions {
            flags: LayerFlags::default(),
            decay: None,
            delta: DEFAULT_DELTA,
            similarity: Similarity::Cosine,
            norm: NormKind::None,
            norm_state: None,
            training: false,
        }
    }
}

/// One gated layer:
/// `core = α̂ (β̂0 F̂ + β̂1 (S⁺ ⊙ Ã ⊙ 𝒯) F̂ + β̂2 (S⁻ ⊙ Ã ⊙ 𝒯) F̂)` with
/// `F̂ = F W + b`, followed by Elu and the residual / decay update.
///
/// Without signs, the two message channels become `(Ã ⊙ 𝒯) F̂` and zero.
/// Without degree correction, `𝒯` is all ones.
pub fn ggcn_layer(
    tape: &mut Tape,
    ctx: &PropagationContext,
    f: Var,
    vars: &GgcnVars,
    opts: &GgcnOptions<'_>,
) -> Result<(Var, Option<BatchStats>)> {
    let flags = opts.flags;
    let (fin, fout) = (tape.shape(f).1, tape.shape(vars.w).1);
    if (flags.residual || flags.use_decay) && fin != fout {
        return Err(Error::DimChangeWithResidual { from: fin, to: fout });
    }
    let fh = linear_transform(tape, f, vars.w, Some(vars.b))?;

    let tau = if flags.use_degree_correction {
        let (l0, l1) = match (vars.lambda0, vars.lambda1) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidParameter(
                    "degree correction requires lambda0 and lambda1".into(),
                ))
            }
        };
        Some(edge_degree_correction(tape, ctx, l0, l1)?)
    } else {
        None
    };

    let alpha_hat = tape.softplus(vars.alpha);
    let beta_hat = tape.row_softmax(vars.beta);
    let b0 = tape.element(beta_hat, 0, 0)?;
    let b1 = tape.element(beta_hat, 0, 1)?;
    let b2 = tape.element(beta_hat, 0, 2)?;

    let self_term = tape.scale_by(fh, b0)?;
    let mixed = if flags.use_sign {
        let s = edge_similarity(tape, ctx, fh, opts.delta, opts.similarity)?;
        let s_pos = tape.relu(s);
        let s_neg = tape.sub(s, s_pos)?;
        let a_edge = tape.constant(ctx.edge_values.clone());
        let mut w_pos = tape.mul(s_pos, a_edge)?;
        let mut w_neg = tape.mul(s_neg, a_edge)?;
        if let Some(t) = tau {
            w_pos = tape.mul(w_pos, t)?;
            w_neg = tape.mul(w_neg, t)?;
        }
        let pos = tape.spmm(w_pos, &ctx.edges, fh)?;
        let neg = tape.spmm(w_neg, &ctx.edges, fh)?;
        let pos = tape.scale_by(pos, b1)?;
        let neg = tape.scale_by(neg, b2)?;
        let sum = tape.add(self_term, pos)?;
        tape.add(sum, neg)?
    } else {
        let prop = match tau {
            Some(t) => corrected_propagate(tape, ctx, fh, t)?,
            None => propagate(tape, ctx, fh)?,
        };
        let prop = tape.scale_by(prop, b1)?;
        tape.add(self_term, prop)?
    };
    let core = tape.scale_by(mixed, alpha_hat)?;
    let (core, stats) =
        norm_modifier(tape, core, opts.norm, vars.norm, opts.norm_state, opts.training)?;
    let act = tape.elu(core);

    let out = if flags.use_decay {
        let (schedule, l) = opts.decay.ok_or_else(|| {
            Error::InvalidParameter("use_decay requires a schedule and layer index".into())
        })?;
        let scaled = tape.scale(act, schedule.coefficient(l));
        tape.add(f, scaled)?
    } else if flags.residual {
        tape.add(f, act)?
    } else {
        act
    };
    Ok((out, stats))
}

/// `σ(Ã F W + b)` with ReLU, or the pre-activation when `activate` is
/// false (used for the logits layer).
#[allow(clippy::too_many_arguments)]
pub fn gcn_layer(
    tape: &mut Tape,
    ctx: &PropagationContext,
    f: Var,
    w: Var,
    b: Option<Var>,
    activate: bool,
    norm: NormKind,
    norm_vars: Option<NormVars>,
    norm_state: Option<&BatchNormState>,
    training: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let fw = tape.matmul(f, w)?;
    let mut h = propagate(tape, ctx, fw)?;
    if let Some(b) = b {
        h = tape.add_row(h, b)?;
    }
    if !activate {
        return Ok((h, None));
    }
    let (h, stats) = norm_modifier(tape, h, norm, norm_vars, norm_state, training)?;
    Ok((tape.relu(h), stats))
}

/// `F + elu(Ã F W + b)`, with optional degree correction on `Ã`.
#[allow(clippy::too_many_arguments)]
pub fn base_layer(
    tape: &mut Tape,
    ctx: &PropagationContext,
    f: Var,
    w: Var,
    b: Var,
    lambdas: Option<(Var, Var)>,
    norm: NormKind,
    norm_vars: Option<NormVars>,
    norm_state: Option<&BatchNormState>,
    training: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let (fin, fout) = (tape.shape(f).1, tape.shape(w).1);
    if fin != fout {
        return Err(Error::DimChangeWithResidual { from: fin, to: fout });
    }
    let fw = tape.matmul(f, w)?;
    let prop = match lambdas {
        Some((l0, l1)) => {
            let tau = edge_degree_correction(tape, ctx, l0, l1)?;
            corrected_propagate(tape, ctx, fw, tau)?
        }
        None => propagate(tape, ctx, fw)?,
    };
    let h = tape.add_row(prop, b)?;
    let (h, stats) = norm_modifier(tape, h, norm, norm_vars, norm_state, training)?;
    let act = tape.elu(h);
    Ok((tape.add(f, act)?, stats))
}

/// Tape handles for [`mlp2`].
#[derive(Clone, Copy, Debug)]
pub struct Mlp2Vars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// dropout → linear → elu → dropout → linear.
pub fn mlp2<R: Rng + ?Sized>(
    tape: &mut Tape,
    f: Var,
    vars: &Mlp2Vars,
    dropout_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let x = tape.dropout(f, dropout_p, training, rng)?;
    let h = linear_transform(tape, x, vars.w1, Some(vars.b1))?;
    let h = tape.elu(h);
    let h = tape.dropout(h, dropout_p, training, rng)?;
    linear_transform(tape, h, vars.w2, Some(vars.b2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Gcn,
    /// Residual base model; any subset of sign / degree-correction / decay
    /// flags may be switched on for ablations.
    BaseResidual,
    Ggcn,
}

/// Initial values for the gated-layer scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub alpha: f64,
    pub beta: [f64; 3],
    pub lambda0: f64,
    pub lambda1: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            alpha: 2.0,
            beta: [0.0; 3],
            lambda0: 0.5,
            lambda1: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub flags: LayerFlags,
    pub norm: NormKind,
    /// Number of propagation layers (hidden layers for the MLP: always 2
    /// linear maps).
    pub depth: usize,
    pub hidden_dim: usize,
    pub dropout_p: f64,
    pub decay: DecaySchedule,
    pub init: InitConfig,
    pub similarity: Similarity,
    pub delta: f64,
}

impl ModelConfig {
    fn with(arch: Arch, flags: LayerFlags, depth: usize, hidden_dim: usize, dropout_p: f64) -> Self {
        ModelConfig {
            arch,
            flags,
            norm: NormKind::None,
            depth,
            hidden_dim,
            dropout_p,
            decay: DecaySchedule::default(),
            init: InitConfig::default(),
            similarity: Similarity::Cosine,
            delta: DEFAULT_DELTA,
        }
    }

    pub fn mlp(hidden_dim: usize, dropout_p: f64) -> Self {
        ModelConfig::with(Arch::Mlp, LayerFlags::default(), 2, hidden_dim, dropout_p)
    }

    pub fn gcn(depth: usize, hidden_dim: usize, dropout_p: f64) -> Self {
        ModelConfig::with(Arch::Gcn, LayerFlags::default(), depth, hidden_dim, dropout_p)
    }

    /// Residual base model; set `flags` afterwards for ablations.
    pub fn base(depth: usize, hidden_dim: usize, dropout_p: f64) -> Self {
        let flags = LayerFlags {
            residual: true,
            ..LayerFlags::default()
        };
        ModelConfig::with(Arch::BaseResidual, flags, depth, hidden_dim, dropout_p)
    }

    pub fn ggcn(depth: usize, hidden_dim: usize, dropout_p: f64) -> Self {
        let flags = LayerFlags {
            use_sign: true,
            use_degree_correction: true,
            use_decay: true,
            residual: true,
        };
        ModelConfig::with(Arch::Ggcn, flags, depth, hidden_dim, dropout_p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be > 0");
        }
        if self.arch == Arch::Ggcn && !(self.flags.use_sign && self.flags.use_degree_correction) {
            return bad("the gated model requires signed messages and degree correction");
        }
        if matches!(self.arch, Arch::Mlp | Arch::Gcn)
            && (self.flags.use_sign || self.flags.use_degree_correction || self.flags.use_decay)
        {
            return bad("sign / degree-correction / decay flags apply only to residual models");
        }
        Ok(())
    }

    /// True when blocks go through [`ggcn_layer`] rather than [`base_layer`].
    fn gated_blocks(&self) -> bool {
        self.arch == Arch::Ggcn || self.flags.use_sign || self.flags.use_decay
    }
}

/// Named parameters of one layer.
pub type LayerParams = BTreeMap<String, Tensor>;

/// Parameters plus normalization state for a configured model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub in_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerParams>,
    pub batch_norm: Vec<Option<BatchNormState>>,
}

/// Glorot-uniform `rows x cols` matrix.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

/// Result of a forward pass.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    /// Tape handles matching [`Model::layers`].
    pub params: Vec<BTreeMap<String, Var>>,
    /// Output of every propagation layer, in order.
    pub layer_outputs: Vec<Var>,
    /// Input to the last propagation.
    pub last_propagation_input: Var,
    /// Class scores computed from the last propagation's input by the
    /// layer that maps to classes, without propagating.
    pub pre_propagation_logits: Var,
    /// Batch statistics per layer index (BatchNorm, training mode).
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl Model {
    pub fn new(config: ModelConfig, in_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidParameter("input and class dims must be >= 1".into()));
        }
        let h = config.hidden_dim;
        let linear = |i: usize, o: usize, rng: &mut ChaCha8Rng| {
            let mut p = LayerParams::new();
            p.insert("weight".into(), glorot(i, o, rng));
            p.insert("bias".into(), Tensor::zeros(1, o));
            p
        };
        let norm_params = |p: &mut LayerParams, dim: usize| {
            if config.norm != NormKind::None {
                p.insert("norm_scale".into(), Tensor::ones(1, dim));
                p.insert("norm_shift".into(), Tensor::zeros(1, dim));
            }
        };
        let mut layers = Vec::new();
        let mut bn = Vec::new();
        let bn_state = |dim: usize| (config.norm == NormKind::BatchNorm).then(|| BatchNormState::new(dim));
        match config.arch {
            Arch::Mlp => {
                layers.push(linear(in_dim, h, rng));
                layers.push(linear(h, num_classes, rng));
                bn.extend([None, None]);
            }
            Arch::Gcn => {
                for l in 0..config.depth {
                    let fin = if l == 0 { in_dim } else { h };
                    let last = l + 1 == config.depth;
                    let fout = if last { num_classes } else { h };
                    let mut p = linear(fin, fout, rng);
                    if !last {
                        norm_params(&mut p, fout);
                    }
                    layers.push(p);
                    bn.push(if last { None } else { bn_state(fout) });
                }
            }
            Arch::BaseResidual | Arch::Ggcn => {
                layers.push(linear(in_dim, h, rng));
                bn.push(None);
                for _ in 0..config.depth {
                    let mut p = linear(h, h, rng);
                    if config.gated_blocks() {
                        p.insert("alpha".into(), Tensor::scalar(config.init.alpha));
                        p.insert("beta".into(), Tensor::row_vector(&config.init.beta)?);
                    }
                    if config.flags.use_degree_correction {
                        p.insert("lambda0".into(), Tensor::scalar(config.init.lambda0));
                        p.insert("lambda1".into(), Tensor::scalar(config.init.lambda1));
                    }
                    norm_params(&mut p, h);
                    layers.push(p);
                    bn.push(bn_state(h));
                }
                layers.push(linear(h, num_classes, rng));
                bn.push(None);
            }
        }
        Ok(Model {
            config,
            in_dim,
            num_classes,
            layers,
            batch_norm: bn,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().flat_map(|l| l.values()).map(Tensor::len).sum()
    }

    /// Runs the model on a fresh tape. `rng` drives dropout only.
    pub fn forward(
        &self,
        ctx: &PropagationContext,
        features: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward> {
        if features.cols() != self.in_dim || features.rows() != ctx.n {
            return Err(Error::shape("Model::forward", (ctx.n, self.in_dim), features.shape()));
        }
        let cfg = &self.config;
        let mut tape = Tape::new();
        let params: Vec<BTreeMap<String, Var>> = self
            .layers
            .iter()
            .map(|l| l.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect())
            .collect();
        let get = |l: usize, k: &str| params[l].get(k).copied();
        let norm_vars = |l: usize| match (get(l, "norm_scale"), get(l, "norm_shift")) {
            (Some(scale), Some(shift)) => Some(NormVars { scale, shift }),
            _ => None,
        };
        let mut stats = vec![None; self.layers.len()];
        let mut outputs = Vec::new();
        let x = tape.constant(features.clone());
        let p = cfg.dropout_p;

        let (logits, last_input, pre_logits) = match cfg.arch {
            Arch::Mlp => {
                let vars = Mlp2Vars {
                    w1: get(0, "weight").unwrap(),
                    b1: get(0, "bias").unwrap(),
                    w2: get(1, "weight").unwrap(),
                    b2: get(1, "bias").unwrap(),
                };
                let x_in = tape.dropout(x, p, training, rng)?;
                let h = linear_transform(&mut tape, x_in, vars.w1, Some(vars.b1))?;
                let h = tape.elu(h);
                outputs.push(h);
                let h = tape.dropout(h, p, training, rng)?;
                let out = linear_transform(&mut tape, h, vars.w2, Some(vars.b2))?;
                (out, h, out)
            }
            Arch::Gcn => {
                let mut h = x;
                let mut last = (x, x);
                for l in 0..cfg.depth {
                    let is_last = l + 1 == cfg.depth;
                    let hd = tape.dropout(h, p, training, rng)?;
                    let (w, b) = (get(l, "weight").unwrap(), get(l, "bias"));
                    if is_last {
                        let pre = linear_transform(&mut tape, hd, w, b)?;
                        last = (hd, pre);
                    }
                    let (next, st) = gcn_layer(
                        &mut tape,
                        ctx,
                        hd,
                        w,
                        b,
                        !is_last,
                        cfg.norm,
                        norm_vars(l),
                        self.batch_norm[l].as_ref(),
                        training,
                    )?;
                    stats[l] = st;
                    outputs.push(next);
                    h = next;
                }
                (h, last.0, last.1)
            }
            Arch::BaseResidual | Arch::Ggcn => {
                let xd = tape.dropout(x, p, training, rng)?;
                let mut h = linear_transform(&mut tape, xd, get(0, "weight").unwrap(), get(0, "bias"))?;
                let out_l = cfg.depth + 1;
                let (w_out, b_out) = (get(out_l, "weight").unwrap(), get(out_l, "bias"));
                let mut last_input = h;
                for l in 1..=cfg.depth {
                    let hd = tape.dropout(h, p, training, rng)?;
                    last_input = hd;
                    let (next, st) = if cfg.gated_blocks() {
                        let vars = GgcnVars {
                            w: get(l, "weight").unwrap(),
                            b: get(l, "bias").unwrap(),
                            alpha: get(l, "alpha").unwrap(),
                            beta: get(l, "beta").unwrap(),
                            lambda0: get(l, "lambda0"),
                            lambda1: get(l, "lambda1"),
                            norm: norm_vars(l),
                        };
                        let opts = GgcnOptions {
                            flags: cfg.flags,
                            decay: Some((cfg.decay, l)),
                            delta: cfg.delta,
                            similarity: cfg.similarity,
                            norm: cfg.norm,
                            norm_state: self.batch_norm[l].as_ref(),
                            training,
                        };
                        ggcn_layer(&mut tape, ctx, hd, &vars, &opts)?
                    } else {
                        let lambdas = get(l, "lambda0").zip(get(l, "lambda1"));
                        base_layer(
                            &mut tape,
                            ctx,
                            hd,
                            get(l, "weight").unwrap(),
                            get(l, "bias").unwrap(),
                            lambdas,
                            cfg.norm,
                            norm_vars(l),
                            self.batch_norm[l].as_ref(),
                            training,
                        )?
                    };
                    stats[l] = st;
                    outputs.push(next);
                    h = next;
                }
                let pre = linear_transform(&mut tape, last_input, w_out, b_out)?;
                let hd = tape.dropout(h, p, training, rng)?;
                let logits = linear_transform(&mut tape, hd, w_out, b_out)?;
                (logits, last_input, pre)
            }
        };
        Ok(Forward {
            tape,
            logits,
            params,
            layer_outputs: outputs,
            last_propagation_input: last_input,
            pre_propagation_logits: pre_logits,
            batch_stats: stats,
        })
    }

    /// Folds training-mode batch statistics into the running state.
    pub fn update_batch_norm(&mut self, stats: &[Option<BatchStats>]) {
        for (state, st) in self.batch_norm.iter_mut().zip(stats) {
            if let (Some(state), Some(st)) = (state.as_mut(), st) {
                state.update(&st.mean, &st.var, st.rows);
            }
        }
    }

    /// `{layer index → {name → {rows, cols, data}}}` as JSON.
    pub fn checkpoint(&self) -> serde_json::Value {
        let map: BTreeMap<String, &LayerParams> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (i.to_string(), l))
            .collect();
        serde_json::to_value(map).expect("tensors serialize")
    }

    /// Replaces parameters from a [`Model::checkpoint`] value. Shapes must
    /// match the current model.
    pub fn load_checkpoint(&mut self, value: &serde_json::Value) -> Result<()> {
        let map: BTreeMap<String, LayerParams> = serde_json::from_value(value.clone())?;
        if map.len() != self.layers.len() {
            return Err(Error::InconsistentCounts(format!(
                "checkpoint has {} layers, model has {}",
                map.len(),
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let src = map
                .get(&i.to_string())
                .ok_or_else(|| Error::InconsistentCounts(format!("missing layer {i}")))?;
            for (name, t) in layer.iter_mut() {
                let s = src
                    .get(name)
                    .ok_or_else(|| Error::InconsistentCounts(format!("missing {i}.{name}")))?;
                if s.shape() != t.shape() {
                    return Err(Error::shape("load_checkpoint", t.shape(), s.shape()));
                }
                if !s.is_finite() {
                    return Err(Error::NonFinite("load_checkpoint"));
                }
                *t = s.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use rand::SeedableRng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[&[1.0, 2.0], &[3.0, -4.0], &[0.5, 0.0]]));
        let w = tape.param(Tensor::identity(2));
        let b = tape.param(Tensor::zeros(1, 2));
        let out = linear_transform(&mut tape, f, w, Some(b)).unwrap();
        assert_eq!(tape.value(out), tape.value(f));

        let w = tape.param(t(&[&[1.0, -1.0, 0.0], &[2.0, 0.5, 1.0]]));
        let b = tape.param(t(&[&[0.1, 0.2, 0.3]]));
        let out = linear_transform(&mut tape, f, w, Some(b)).unwrap();
        let want = t(&[&[5.1, 0.2, 2.3], &[-4.9, -4.8, -3.7], &[0.6, -0.3, 0.3]]);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);

        let z = tape.constant(Tensor::zeros(3, 2));
        let out = linear_transform(&mut tape, z, w, Some(b)).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(out).row(r), tape.value(b).row(0));
        }
    }

    #[test]
    fn sign_matrix_examples() {
        let s = sign_matrix(&t(&[&[1.0, 2.0], &[1.0, 2.0]]), DEFAULT_DELTA, Similarity::Cosine);
        assert!((s.s_pos.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(s.s_pos.get(0, 0), 0.0);

        let s = sign_matrix(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), DEFAULT_DELTA, Similarity::Cosine);
        assert_eq!(s.s_pos.data(), &[0.0; 4]);
        assert_eq!(s.s_neg.data(), &[0.0; 4]);

        let s = sign_matrix(&t(&[&[1.0, 0.0], &[-1.0, 0.0]]), DEFAULT_DELTA, Similarity::Cosine);
        assert_eq!(s.s_pos.get(0, 1), 0.0);
        assert_eq!(s.s_neg.get(0, 1), -1.0);
        assert_eq!(s.s_neg.get(1, 0), -1.0);
    }

    #[test]
    fn degree_correction_examples() {
        let edge = build_graph([(0, 1)], 2).unwrap();
        let tau = degree_correction(&edge, 0.5, 0.0).unwrap();
        assert!(tau.iter().all(|&x| (x - 2f64.ln()).abs() < 1e-15));
        // r = 0.5 needs (d_i+1)/(d_j+1) = 1/4: a leaf next to a degree-7 hub.
        let star = build_graph((1..8).map(|j| (0, j)), 8).unwrap();
        let rel = star.relative_degrees().unwrap();
        let tau = degree_correction(&star, 0.5, 0.0).unwrap();
        let e = rel.pattern().position(1, 0).unwrap();
        assert!((rel.r[e] - 0.5).abs() < 1e-15);
        assert!((tau[e] - (1.0 + 0.5f64.exp()).ln()).abs() < 1e-12);
        assert!((tau[e] - 0.974077).abs() < 1e-6);
    }

    #[test]
    fn decay_schedule() {
        let d = DecaySchedule { eta: 1.0, k: 3.0, l0: 2 };
        assert_eq!(d.coefficient(1), 1.0);
        assert!((d.coefficient(2) - (1.0f64 / 8.0 + 1.0).ln()).abs() < 1e-15);
        assert!(d.coefficient(3) < d.coefficient(2));
    }

    #[test]
    fn gcn_layer_examples() {
        let g = build_graph([(0, 1)], 2).unwrap();
        let ctx = PropagationContext::new(&g, Scheme::Renormalized);
        let mut tape = Tape::new();
        let f = tape.constant(t(&[&[2.0, 0.0], &[0.0, 2.0]]));
        let w = tape.param(Tensor::identity(2));
        let (out, _) =
            gcn_layer(&mut tape, &ctx, f, w, None, true, NormKind::None, None, None, false).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 1.0, 1.0]);

        let f = tape.constant(t(&[&[-2.0, 1.0], &[0.0, -2.0]]));
        let (out, _) =
            gcn_layer(&mut tape, &ctx, f, w, None, true, NormKind::None, None, None, false).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn base_layer_single_node() {
        let g = build_graph([], 1).unwrap();
        let ctx = PropagationContext::new(&g, Scheme::Renormalized);
        let mut tape = Tape::new();
        let f = tape.constant(t(&[&[-3.0]]));
        let w = tape.param(Tensor::identity(1));
        let b = tape.param(Tensor::zeros(1, 1));
        let (out, _) =
            base_layer(&mut tape, &ctx, f, w, b, None, NormKind::None, None, None, false).unwrap();
        assert!((tape.value(out).get(0, 0) + 3.950213).abs() < 1e-6);

        let w2 = tape.param(Tensor::zeros(1, 2));
        let b2 = tape.param(Tensor::zeros(1, 2));
        assert!(matches!(
            base_layer(&mut tape, &ctx, f, w2, b2, None, NormKind::None, None, None, false),
            Err(Error::DimChangeWithResidual { from: 1, to: 2 })
        ));
    }

    #[test]
    fn ggcn_collapses_to_self_term() {
        let g = build_graph([(0, 1)], 2).unwrap();
        let ctx = PropagationContext::new(&g, Scheme::Renormalized);
        let mut tape = Tape::new();
        let f = tape.constant(t(&[&[0.5, -1.0], &[0.5, -1.0]]));
        let vars = GgcnVars {
            w: tape.param(Tensor::identity(2)),
            b: tape.param(Tensor::zeros(1, 2)),
            alpha: tape.param(Tensor::scalar(2.0)),
            beta: tape.param(t(&[&[20.0, -20.0, -20.0]])),
            lambda0: Some(tape.param(Tensor::scalar(0.5))),
            lambda1: Some(tape.param(Tensor::scalar(0.0))),
            norm: None,
        };
        let sched = DecaySchedule { eta: 1.0, k: 3.0, l0: 1 };
        let opts = GgcnOptions {
            flags: LayerFlags {
                use_sign: true,
                use_degree_correction: true,
                use_decay: true,
                residual: true,
            },
            decay: Some((sched, 1)),
            ..GgcnOptions::default()
        };
        let (out, _) = ggcn_layer(&mut tape, &ctx, f, &vars, &opts).unwrap();
        let eta = sched.coefficient(1);
        let a = softplus(2.0);
        let fv = tape.value(f).clone();
        let want = fv.zip_map(&fv, |x, _| x + eta * crate::autodiff::elu(a * x));
        assert!(tape.value(out).max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig::ggcn(2, 4, 0.0);
        let m = Model::new(cfg.clone(), 3, 2, &mut rng).unwrap();
        let mut other = Model::new(cfg, 3, 2, &mut rng).unwrap();
        assert_ne!(m.layers, other.layers);
        other.load_checkpoint(&m.checkpoint()).unwrap();
        assert_eq!(m.layers, other.layers);
    }
}
