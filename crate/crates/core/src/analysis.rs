//! Logarithmic degree bins and the per-bin accuracy / effective-homophily
//! case study.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scheme};
use crate::layers::{Arch, ModelConfig, PropagationContext};
use crate::train::{split_seed, train_model, TrainConfig};

/// One bin: real boundaries `[lo_real, hi_real)` and the inclusive integer
/// range they cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeBin {
    pub lo: usize,
    pub hi: usize,
    pub lo_real: f64,
    pub hi_real: f64,
}

impl DegreeBin {
    pub fn label(&self) -> String {
        format!("[{},{}]", self.lo, self.hi)
    }

    /// True when no integer degree falls inside.
    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeBins {
    pub dmin: usize,
    pub dmax: usize,
    pub bins: Vec<DegreeBin>,
}

/// Snaps values within 1e-9 of an integer onto it, so boundaries such as
/// `2^1` are not misread as `2.0000000000000004`.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Splits `[dmin, dmax]` into `n` bins of equal width in `log2` degree.
/// Each integer degree lands in exactly one bin; the last bin is closed at
/// `dmax`.
pub fn degree_bins(dmin: usize, dmax: usize, n: usize) -> Result<DegreeBins> {
    if dmin == 0 || dmin > dmax || n == 0 {
        return Err(Error::InvalidRange(format!(
            "need 1 <= dmin <= dmax and n >= 1, got ({dmin}, {dmax}, {n})"
        )));
    }
    let width = ((dmax as f64).log2() - (dmin as f64).log2()) / n as f64;
    let edge = |k: usize| -> f64 {
        if k == n {
            dmax as f64
        } else {
            snap(dmin as f64 * (k as f64 * width).exp2())
        }
    };
    let bins = (0..n)
        .map(|k| {
            let (lo_real, hi_real) = (edge(k), edge(k + 1));
            let lo = lo_real.ceil() as usize;
            let hi = if k + 1 == n {
                dmax
            } else {
                // Largest integer strictly below the upper boundary.
                (hi_real.ceil() as usize).saturating_sub(1)
            };
            DegreeBin { lo, hi, lo_real, hi_real }
        })
        .collect();
    Ok(DegreeBins { dmin, dmax, bins })
}

impl DegreeBins {
    /// Bin index of degree `d`; degrees outside `[dmin, dmax]` go to the
    /// nearest end bin and are flagged with `true`.
    pub fn assign(&self, d: usize) -> (usize, bool) {
        if d < self.dmin {
            return (0, true);
        }
        if d > self.dmax {
            return (self.bins.len() - 1, true);
        }
        let k = self
            .bins
            .iter()
            .position(|b| b.lo <= d && d <= b.hi)
            .expect("bins cover [dmin, dmax]");
        (k, false)
    }

    pub fn labels(&self) -> Vec<String> {
        self.bins.iter().map(DegreeBin::label).collect()
    }

    /// Bins spanning the observed non-zero degree range of `g`.
    pub fn for_graph(g: &Graph, n: usize) -> Result<Self> {
        let degs: Vec<usize> = g.degrees().into_iter().filter(|&d| d > 0).collect();
        let (Some(&lo), Some(&hi)) = (degs.iter().min(), degs.iter().max()) else {
            return Err(Error::InvalidRange("graph has no edges".into()));
        };
        degree_bins(lo, hi, n)
    }
}

/// Accuracy and mean effective homophily of one bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: String,
    pub nodes: usize,
    /// `None` for bins without nodes.
    pub accuracy: Option<f64>,
    pub mean_effective_homophily: Option<f64>,
}

/// Per-bin statistics pooled over several evaluations.
#[derive(Clone, Debug, Default)]
pub struct BinAccumulator {
    correct: Vec<usize>,
    count: Vec<usize>,
    h_sum: Vec<f64>,
    pub out_of_range: usize,
}

impl BinAccumulator {
    pub fn new(bins: &DegreeBins) -> Self {
        let k = bins.bins.len();
        BinAccumulator {
            correct: vec![0; k],
            count: vec![0; k],
            h_sum: vec![0.0; k],
            out_of_range: 0,
        }
    }

    /// Adds the non-isolated `nodes`. `pred` drives accuracy; `neighbor_pred`
    /// decides which neighbors count as correctly classified.
    pub fn add(
        &mut self,
        bins: &DegreeBins,
        g: &Graph,
        labels: &[usize],
        nodes: &[usize],
        pred: &[usize],
        neighbor_pred: &[usize],
    ) {
        for &i in nodes {
            let nb = g.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let (k, outside) = bins.assign(nb.len());
            self.out_of_range += usize::from(outside);
            self.count[k] += 1;
            self.correct[k] += usize::from(pred[i] == labels[i]);
            let hits = nb
                .iter()
                .filter(|&&j| labels[j] == labels[i] && neighbor_pred[j] == labels[j])
                .count();
            self.h_sum[k] += hits as f64 / nb.len() as f64;
        }
    }

    pub fn finish(&self, bins: &DegreeBins) -> Vec<BinStats> {
        bins.bins
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let c = self.count[k];
                let avg = |x: f64| (c > 0).then(|| x / c as f64);
                BinStats {
                    bin: b.label(),
                    nodes: c,
                    accuracy: avg(self.correct[k] as f64),
                    mean_effective_homophily: avg(self.h_sum[k]),
                }
            })
            .collect()
    }

    /// Accuracy over every counted node.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let n: usize = self.count.iter().sum();
        (n > 0).then(|| self.correct.iter().sum::<usize>() as f64 / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyDepth {
    pub depth: usize,
    pub bins: Vec<BinStats>,
    /// Pooled test accuracy over binned nodes of all splits.
    pub overall_accuracy: Option<f64>,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyTable {
    pub degree_bins: DegreeBins,
    pub rows: Vec<CaseStudyDepth>,
    /// Last depth at which every populated bin has mean effective
    /// homophily above 1/2.
    pub initial_stage_last_depth: Option<usize>,
    /// Test nodes whose degree fell outside the bin range, summed over
    /// depths and splits.
    pub out_of_range: usize,
    /// Which nodes the homophily estimate averages over.
    pub homophily_nodes: String,
}

impl CaseStudyDepth {
    pub fn all_bins_above_half(&self) -> bool {
        self.bins
            .iter()
            .filter_map(|b| b.mean_effective_homophily)
            .all(|h| h > 0.5)
    }

    pub fn all_bins_at_most_half(&self) -> bool {
        self.bins
            .iter()
            .filter_map(|b| b.mean_effective_homophily)
            .all(|h| h <= 0.5)
    }
}

/// Trains `template` (normally GCN) at each depth on each split and pools
/// per-bin test statistics over splits. Accuracy uses the final
/// predictions; effective homophily classifies neighbors from the features
/// entering the last propagation, mapped through the last layer's weights.
pub fn case_study(
    data: &LabeledDataset,
    splits: &[SplitSet],
    depths: &[usize],
    template: &ModelConfig,
    cfg: &TrainConfig,
    bins: &DegreeBins,
) -> Result<CaseStudyTable> {
    if template.arch == Arch::Mlp {
        return Err(Error::InvalidParameter("case study needs a propagating model".into()));
    }
    if depths.is_empty() || splits.is_empty() {
        return Err(Error::InvalidParameter("case study needs depths and splits".into()));
    }
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    let cells: Vec<(usize, usize)> = depths
        .iter()
        .flat_map(|&d| (0..splits.len()).map(move |k| (d, k)))
        .collect();
    let preds: Vec<Option<(Vec<usize>, Vec<usize>)>> = cells
        .par_iter()
        .map(|&(d, k)| {
            let mut mc = template.clone();
            mc.depth = d;
            let mut c = *cfg;
            c.seed = split_seed(cfg, k);
            let trained = match train_model(&mc, data, &splits[k], &c, &ctx) {
                Ok(t) => t,
                Err(Error::DivergedLoss { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut rng = rand::SeedableRng::seed_from_u64(c.seed);
            let fwd = trained.model.forward(&ctx, &data.features, false, &mut rng)?;
            Ok(Some((
                fwd.tape.value(fwd.logits).argmax_rows(),
                fwd.tape.value(fwd.pre_propagation_logits).argmax_rows(),
            )))
        })
        .collect::<Result<_>>()?;

    let mut out_of_range = 0;
    let mut rows = Vec::new();
    let mut preds = preds.into_iter();
    for &d in depths {
        let mut acc = BinAccumulator::new(bins);
        let mut diverged = 0;
        for split in splits {
            match preds.next().flatten() {
                Some((final_pred, pre_pred)) => {
                    acc.add(bins, &data.graph, &data.labels, &split.test, &final_pred, &pre_pred)
                }
                None => diverged += 1,
            }
        }
        out_of_range += acc.out_of_range;
        rows.push(CaseStudyDepth {
            depth: d,
            bins: acc.finish(bins),
            overall_accuracy: acc.overall_accuracy(),
            diverged,
        });
    }
    let initial_stage_last_depth = rows
        .iter()
        .take_while(|r| r.all_bins_above_half())
        .last()
        .map(|r| r.depth);
    Ok(CaseStudyTable {
        degree_bins: bins.clone(),
        rows,
        initial_stage_last_depth,
        out_of_range,
        homophily_nodes: "test".into(),
    })
}
