//! Full-batch training with Adam and early stopping, plus depth sweeps,
//! ablation grids and a small hyperparameter grid search.
//!
//! Every run is single-threaded and seeded, so results do not depend on
//! the worker count. Sweeps fan runs out with rayon and collect them in
//! input order.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scheme};
use crate::layers::{Arch, BatchNormState, LayerFlags, LayerParams, Model, ModelConfig, PropagationContext};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// L2 penalty; adds `weight_decay · w` to every gradient.
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a strictly better validation
    /// accuracy.
    pub patience: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid training config {self:?}")))
        }
    }
}

/// Adam with bias correction. Moment buffers follow the order in which
/// parameters are passed to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            betas: cfg.betas,
            eps: cfg.eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut k = 0;
        for p in params {
            let g = grads.get(k).ok_or_else(|| {
                Error::InconsistentCounts(format!("missing gradient for parameter {k}"))
            })?;
            if g.shape() != p.shape() {
                return Err(Error::shape("Adam::step", p.shape(), g.shape()));
            }
            if self.m.len() == k {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + self.weight_decay * *w;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            k += 1;
        }
        if k != grads.len() {
            return Err(Error::InconsistentCounts(format!("{} gradients for {k} parameters", grads.len())));
        }
        Ok(())
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub train_accuracy: f64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Node-averaged effective homophily of every propagation layer's
    /// output, measured with the nearest-centroid probe.
    pub per_layer_effective_homophily: Vec<f64>,
    /// Validation accuracy after every epoch. Kept out of reports.
    #[serde(skip)]
    pub val_history: Vec<f64>,
    /// Seconds spent training. Not serialized, so reports stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Equality ignores `wall_time`.
impl PartialEq for RunResult {
    fn eq(&self, o: &Self) -> bool {
        self.test_accuracy == o.test_accuracy
            && self.best_val_accuracy == o.best_val_accuracy
            && self.train_accuracy == o.train_accuracy
            && self.best_epoch == o.best_epoch
            && self.epochs_run == o.epochs_run
            && self.per_layer_effective_homophily == o.per_layer_effective_homophily
            && self.val_history == o.val_history
    }
}

/// A trained model together with its run summary.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub result: RunResult,
}

pub fn accuracy(pred: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return f64::NAN;
    }
    nodes.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / nodes.len() as f64
}

/// Classifies every row of `h` by its nearest class centroid, with the
/// centroids taken over `train` rows. Classes absent from `train` are
/// never predicted.
pub fn nearest_centroid(h: &Tensor, labels: &[usize], num_classes: usize, train: &[usize]) -> Vec<usize> {
    let d = h.cols();
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for &i in train {
        counts[labels[i]] += 1;
        for (s, x) in sums[labels[i]].iter_mut().zip(h.row(i)) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    (0..h.rows())
        .map(|i| {
            let row = h.row(i);
            (0..num_classes)
                .filter(|&c| counts[c] > 0)
                .map(|c| {
                    let dist: f64 = row.iter().zip(&sums[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                    (c, dist)
                })
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0
        })
        .collect()
}

/// Mean over non-isolated nodes of the fraction of neighbors that share
/// the node's label and are classified correctly.
pub fn mean_effective_homophily(g: &Graph, labels: &[usize], correct: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..g.num_nodes() {
        let nb = g.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let hits = nb.iter().filter(|&&j| labels[j] == labels[i] && correct[j]).count();
        total += hits as f64 / nb.len() as f64;
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

fn check_split(data: &LabeledDataset, split: &SplitSet) -> Result<()> {
    split.validate(&data.labels, data.num_classes)?;
    if split.val.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Trains on one split. Parameters from the epoch with the highest
/// validation accuracy (earliest on ties) are restored before testing.
pub fn train_model(
    model_cfg: &ModelConfig,
    data: &LabeledDataset,
    split: &SplitSet,
    cfg: &TrainConfig,
    ctx: &PropagationContext,
) -> Result<Trained> {
    cfg.validate()?;
    check_split(data, split)?;
    let start = Instant::now();
    let n = data.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(model_cfg.clone(), data.features.cols(), data.num_classes, &mut rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_mask = SplitSet::mask(&split.train, n);
    let mut adam = Adam::new(cfg);

    let mut best: Option<(f64, usize, Vec<LayerParams>, Vec<Option<BatchNormState>>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut val_history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::DivergedLoss { epoch },
            e => e,
        };
        let fwd = model.forward(ctx, &data.features, true, &mut rng).map_err(diverged)?;
        let mut tape = fwd.tape;
        let loss = tape.cross_entropy_masked(fwd.logits, &data.labels, &train_mask).map_err(diverged)?;
        if !tape.value(loss).item()?.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        let grads = tape.backward(loss).map_err(diverged)?;
        let g: Vec<Tensor> = fwd.params.iter().flat_map(|l| l.values()).map(|&v| grads.wrt(v)).collect();
        adam.step(model.layers.iter_mut().flat_map(|l| l.values_mut()), &g)?;
        if model.layers.iter().flat_map(|l| l.values()).any(|t| !t.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        model.update_batch_norm(&fwd.batch_stats);

        let eval = model.forward(ctx, &data.features, false, &mut eval_rng).map_err(diverged)?;
        let pred = eval.tape.value(eval.logits).argmax_rows();
        let val = accuracy(&pred, &data.labels, &split.val);
        val_history.push(val);
        if best.as_ref().is_none_or(|b| val > b.0) {
            best = Some((val, epoch, model.layers.clone(), model.batch_norm.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val, best_epoch, layers, bn) = best.expect("at least one epoch");
    model.layers = layers;
    model.batch_norm = bn;

    let eval = model.forward(ctx, &data.features, false, &mut eval_rng)?;
    let pred = eval.tape.value(eval.logits).argmax_rows();
    let per_layer = eval
        .layer_outputs
        .iter()
        .map(|&v| {
            let probe = nearest_centroid(eval.tape.value(v), &data.labels, data.num_classes, &split.train);
            let correct: Vec<bool> = probe.iter().zip(&data.labels).map(|(p, y)| p == y).collect();
            mean_effective_homophily(&data.graph, &data.labels, &correct)
        })
        .collect();
    let result = RunResult {
        test_accuracy: accuracy(&pred, &data.labels, &split.test),
        best_val_accuracy: best_val,
        train_accuracy: accuracy(&pred, &data.labels, &split.train),
        best_epoch,
        epochs_run,
        per_layer_effective_homophily: per_layer,
        val_history,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok(Trained { model, result })
}

/// [`train_model`] with a freshly built renormalized propagation context.
pub fn train(model_cfg: &ModelConfig, data: &LabeledDataset, split: &SplitSet, cfg: &TrainConfig) -> Result<RunResult> {
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    Ok(train_model(model_cfg, data, split, cfg, &ctx)?.result)
}

/// Seed of the run on split `k`: the same across depths and variants, so
/// sweeps compare models on common random numbers.
pub fn split_seed(cfg: &TrainConfig, k: usize) -> u64 {
    cfg.seed.wrapping_add(k as u64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One depth of a sweep, aggregated over splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    /// `None` when every split diverged.
    pub mean_test: Option<f64>,
    pub stdev_test: Option<f64>,
    pub mean_val: Option<f64>,
    /// One entry per split; `None` marks a diverged run.
    pub runs: Vec<Option<RunResult>>,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSweep {
    pub arch: Arch,
    pub flags: LayerFlags,
    pub rows: Vec<DepthRow>,
    /// Depth with the highest mean validation accuracy (shallowest on ties).
    pub best_depth: Option<usize>,
    /// Mean test accuracy at `best_depth`.
    pub best_mean_test: Option<f64>,
}

fn run_grid(
    cells: &[(ModelConfig, usize)],
    data: &LabeledDataset,
    splits: &[SplitSet],
    cfg: &TrainConfig,
    ctx: &PropagationContext,
) -> Result<Vec<Option<RunResult>>> {
    cells
        .par_iter()
        .map(|(mc, k)| {
            let mut c = *cfg;
            c.seed = split_seed(cfg, *k);
            match train_model(mc, data, &splits[*k], &c, ctx) {
                Ok(t) => Ok(Some(t.result)),
                Err(Error::DivergedLoss { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn aggregate(depth: usize, runs: Vec<Option<RunResult>>) -> DepthRow {
    let test: Vec<f64> = runs.iter().flatten().map(|r| r.test_accuracy).collect();
    let val: Vec<f64> = runs.iter().flatten().map(|r| r.best_val_accuracy).collect();
    let (mt, st) = mean_stdev(&test);
    let (mv, _) = mean_stdev(&val);
    let some = |x: f64| (!x.is_nan()).then_some(x);
    DepthRow {
        depth,
        mean_test: some(mt),
        stdev_test: some(st),
        mean_val: some(mv),
        diverged: runs.iter().filter(|r| r.is_none()).count(),
        runs,
    }
}

fn pick_best(rows: &[DepthRow]) -> (Option<usize>, Option<f64>) {
    let mut best: Option<&DepthRow> = None;
    for r in rows {
        if let Some(v) = r.mean_val {
            if best.is_none_or(|b| v > b.mean_val.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(r);
            }
        }
    }
    (best.map(|r| r.depth), best.and_then(|r| r.mean_test))
}

/// Trains `template` at every depth on every split. Diverged runs are
/// recorded as failed cells rather than aborting the sweep.
pub fn depth_sweep(
    template: &ModelConfig,
    depths: &[usize],
    data: &LabeledDataset,
    splits: &[SplitSet],
    cfg: &TrainConfig,
) -> Result<DepthSweep> {
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    depth_sweep_with(template, depths, data, splits, cfg, &ctx)
}

pub fn depth_sweep_with(
    template: &ModelConfig,
    depths: &[usize],
    data: &LabeledDataset,
    splits: &[SplitSet],
    cfg: &TrainConfig,
    ctx: &PropagationContext,
) -> Result<DepthSweep> {
    if depths.is_empty() || splits.is_empty() {
        return Err(Error::InvalidParameter("depth sweep needs depths and splits".into()));
    }
    let cells: Vec<(ModelConfig, usize)> = depths
        .iter()
        .flat_map(|&d| {
            (0..splits.len()).map(move |k| {
                let mut mc = template.clone();
                mc.depth = d;
                (mc, k)
            })
        })
        .collect();
    let mut runs = run_grid(&cells, data, splits, cfg, ctx)?.into_iter();
    let rows: Vec<DepthRow> = depths
        .iter()
        .map(|&d| aggregate(d, runs.by_ref().take(splits.len()).collect()))
        .collect();
    let (best_depth, best_mean_test) = pick_best(&rows);
    Ok(DepthSweep {
        arch: template.arch,
        flags: template.flags,
        rows,
        best_depth,
        best_mean_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub sweep: DepthSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<AblationVariant>,
}

/// The four residual variants: plain, degree correction only, signed
/// messages only, and both. Decay stays off.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    [("base", false, false), ("+deg", true, false), ("+sign", false, true), ("+deg,sign", true, true)]
        .into_iter()
        .map(|(name, deg, sign)| {
            let mut mc = base.clone();
            mc.arch = Arch::BaseResidual;
            mc.flags = LayerFlags {
                use_sign: sign,
                use_degree_correction: deg,
                use_decay: false,
                residual: true,
            };
            (name.to_string(), mc)
        })
        .collect()
}

pub fn ablation_grid(
    base: &ModelConfig,
    depths: &[usize],
    data: &LabeledDataset,
    splits: &[SplitSet],
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    let variants = ablation_variants(base)
        .into_iter()
        .map(|(name, mc)| {
            Ok(AblationVariant {
                name,
                sweep: depth_sweep_with(&mc, depths, data, splits, cfg, &ctx)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { variants })
}

/// Candidate values searched by [`grid_search`]. Empty lists keep the
/// template's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub hidden_dim: Vec<usize>,
    pub decay_eta: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            dropout: vec![0.0, 0.5, 0.7],
            weight_decay: vec![1e-7, 1e-5, 1e-3, 1e-2],
            hidden_dim: vec![8, 16, 32, 64, 80],
            decay_eta: vec![0.5, 1.0, 1.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mean_val: Option<f64>,
    pub mean_test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub entries: Vec<GridEntry>,
    /// Index of the entry with the highest mean validation accuracy.
    pub best: Option<usize>,
}

/// Exhaustive search over `grid`, scored by mean validation accuracy.
pub fn grid_search(
    template: &ModelConfig,
    grid: &HyperGrid,
    data: &LabeledDataset,
    splits: &[SplitSet],
    cfg: &TrainConfig,
) -> Result<GridSearch> {
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let hidden = if grid.hidden_dim.is_empty() { vec![template.hidden_dim] } else { grid.hidden_dim.clone() };
    let eta = if template.flags.use_decay { or(&grid.decay_eta, template.decay.eta) } else { vec![template.decay.eta] };
    let mut combos = Vec::new();
    for &p in &or(&grid.dropout, template.dropout_p) {
        for &wd in &or(&grid.weight_decay, cfg.weight_decay) {
            for &h in &hidden {
                for &e in &eta {
                    let mut mc = template.clone();
                    mc.dropout_p = p;
                    mc.hidden_dim = h;
                    mc.decay.eta = e;
                    let mut tc = *cfg;
                    tc.weight_decay = wd;
                    combos.push((mc, tc));
                }
            }
        }
    }
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    let cells: Vec<(usize, usize)> = (0..combos.len()).flat_map(|c| (0..splits.len()).map(move |k| (c, k))).collect();
    let runs: Vec<Option<RunResult>> = cells
        .par_iter()
        .map(|&(c, k)| {
            let (mc, tc) = &combos[c];
            let mut tc = *tc;
            tc.seed = split_seed(cfg, k);
            match train_model(mc, data, &splits[k], &tc, &ctx) {
                Ok(t) => Ok(Some(t.result)),
                Err(Error::DivergedLoss { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut runs = runs.into_iter();
    let entries: Vec<GridEntry> = combos
        .into_iter()
        .map(|(model, train)| {
            let row = aggregate(model.depth, runs.by_ref().take(splits.len()).collect());
            GridEntry {
                model,
                train,
                mean_val: row.mean_val,
                mean_test: row.mean_test,
            }
        })
        .collect();
    let best = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.mean_val.map(|v| (i, v)))
        .fold(None, |b: Option<(usize, f64)>, (i, v)| if b.is_none_or(|b| v > b.1) { Some((i, v)) } else { b })
        .map(|(i, _)| i);
    Ok(GridSearch { entries, best })
}
