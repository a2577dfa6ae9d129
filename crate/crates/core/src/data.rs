//! Dataset files, train/val/test splits, reports, and a synthetic
//! two-class generator with controllable homophily and degree model.
//!
//! On-disk layout of a dataset directory:
//!
//! | file           | content                                          |
//! |----------------|--------------------------------------------------|
//! | `edges.tsv`    | one `u<TAB>v` per line, 0-indexed, `u < v`       |
//! | `features.csv` | row `i` holds node `i`'s comma-separated floats  |
//! | `labels.txt`   | one integer class per line                       |
//! | `names.txt`    | optional, one node name per line                 |
//!
//! Splits are stored as `{"train": [...], "val": [...], "test": [...]}`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, Graph};
use crate::tensor::Tensor;
use crate::theory::ClassFeatureModel;

/// Version tag written into every JSON report.
pub const SCHEMA_VERSION: &str = "1";

/// Node features, labels and graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub graph: Graph,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub names: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(graph: Graph, features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n || labels.len() != n {
            return Err(Error::InconsistentCounts(format!(
                "graph has {n} nodes, features {} rows, labels {}",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(LabeledDataset {
            graph,
            features,
            labels,
            num_classes,
            names: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Loads a dataset directory. Duplicate edges collapse to one; isolated
/// nodes are allowed (see [`Graph::isolated_nodes`]).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let labels_path = dir.join("labels.txt");
    let labels: Vec<usize> = lines(&read(&labels_path)?)
        .map(|(ln, l)| {
            l.parse::<usize>()
                .map_err(|e| parse_err(&labels_path, ln, format!("bad label {l:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let n = labels.len();

    let feat_path = dir.join("features.csv");
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (ln, l) in lines(&read(&feat_path)?) {
        let row: Vec<f64> = l
            .split(',')
            .map(|v| {
                let v = v.trim();
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(&feat_path, ln, format!("bad float {v:?}")))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_err(
                    &feat_path,
                    ln,
                    format!("expected {c} values, found {}", row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(Error::InconsistentCounts(format!(
            "{} has {rows} rows but {} has {n} labels",
            feat_path.display(),
            labels_path.display()
        )));
    }
    let features = Tensor::new(rows, cols.unwrap_or(0), data)?;

    let edge_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (ln, l) in lines(&read(&edge_path)?) {
        let mut parts = l.split_whitespace();
        let mut next = || -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(&edge_path, ln, "expected two node indices"))?;
            tok.parse::<usize>()
                .map_err(|e| parse_err(&edge_path, ln, format!("bad index {tok:?}: {e}")))
        };
        let (u, v) = (next()?, next()?);
        if parts.next().is_some() {
            return Err(parse_err(&edge_path, ln, "expected exactly two columns"));
        }
        if u >= n || v >= n {
            return Err(parse_err(&edge_path, ln, format!("node index out of range for {n} nodes")));
        }
        if u == v {
            return Err(Error::SelfLoop(u));
        }
        edges.push((u, v));
    }
    let graph = build_graph(edges, n)?;
    let mut ds = LabeledDataset::new(graph, features, labels)?;

    let names_path = dir.join("names.txt");
    if names_path.exists() {
        let names: Vec<String> = read(&names_path)?.lines().map(str::to_string).collect();
        if names.len() != n {
            return Err(Error::InconsistentCounts(format!(
                "{} has {} names for {n} nodes",
                names_path.display(),
                names.len()
            )));
        }
        ds.names = Some(names);
    }
    Ok(ds)
}

/// Writes a dataset directory. Floats use 17 significant digits, so
/// [`load_dataset`] reproduces them exactly.
pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for &(u, v) in ds.graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    fs::write(dir.join("edges.tsv"), edges)?;
    let mut feats = String::new();
    for r in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(r).iter().map(|x| format!("{x:.16e}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    fs::write(dir.join("features.csv"), feats)?;
    let labels: String = ds.labels.iter().map(|y| format!("{y}\n")).collect();
    fs::write(dir.join("labels.txt"), labels)?;
    if let Some(names) = &ds.names {
        let text: String = names.iter().map(|s| format!("{s}\n")).collect();
        fs::write(dir.join("names.txt"), text)?;
    }
    Ok(())
}

/// Disjoint train / validation / test node lists, each sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSet {
    /// Checks disjointness, range and that every class has a training node.
    pub fn validate(&self, labels: &[usize], num_classes: usize) -> Result<()> {
        let n = labels.len();
        let mut seen = BTreeSet::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in part {
                if i >= n {
                    return Err(Error::InconsistentCounts(format!(
                        "{name} index {i} out of range for {n} nodes"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::InconsistentCounts(format!("node {i} appears twice in splits")));
                }
            }
        }
        let mut has = vec![false; num_classes];
        for &i in &self.train {
            has[labels[i]] = true;
        }
        if let Some(c) = has.iter().position(|h| !h) {
            return Err(Error::InconsistentCounts(format!("class {c} has no training node")));
        }
        Ok(())
    }

    pub fn mask(part: &[usize], n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in part {
            m[i] = true;
        }
        m
    }

    /// Builds a split from three boolean masks of equal length.
    pub fn from_masks(train: &[bool], val: &[bool], test: &[bool]) -> Result<Self> {
        if train.len() != val.len() || train.len() != test.len() {
            return Err(Error::InconsistentCounts(format!(
                "mask lengths differ: {} / {} / {}",
                train.len(),
                val.len(),
                test.len()
            )));
        }
        let idx = |m: &[bool]| (0..m.len()).filter(|&i| m[i]).collect::<Vec<_>>();
        Ok(SplitSet {
            train: idx(train),
            val: idx(val),
            test: idx(test),
        })
    }
}

/// Reads one split object, or an array of them.
pub fn load_splits(path: impl AsRef<Path>) -> Result<Vec<SplitSet>> {
    let text = read(path.as_ref())?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let mut splits: Vec<SplitSet> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    for s in &mut splits {
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
    }
    Ok(splits)
}

pub fn save_splits(splits: &[SplitSet], path: impl AsRef<Path>) -> Result<()> {
    let text = if splits.len() == 1 {
        serde_json::to_string(&splits[0])?
    } else {
        serde_json::to_string(splits)?
    };
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Mask file accepted by [`convert_mask_file`]: three equally long arrays
/// of booleans or 0/1 integers.
#[derive(Deserialize)]
struct MaskFile {
    #[serde(alias = "train")]
    train_mask: Vec<serde_json::Value>,
    #[serde(alias = "val")]
    val_mask: Vec<serde_json::Value>,
    #[serde(alias = "test")]
    test_mask: Vec<serde_json::Value>,
}

fn to_bools(path: &Path, name: &str, v: &[serde_json::Value]) -> Result<Vec<bool>> {
    v.iter()
        .enumerate()
        .map(|(i, x)| match x {
            serde_json::Value::Bool(b) => Ok(*b),
            serde_json::Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
            serde_json::Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
            _ => Err(parse_err(path, 1, format!("{name}[{i}] is not a boolean or 0/1"))),
        })
        .collect()
}

/// Converts a boolean-mask split (JSON with `train_mask`,
/// `val_mask`, `test_mask`) to index lists.
pub fn convert_mask_file(path: impl AsRef<Path>) -> Result<SplitSet> {
    let path = path.as_ref();
    let masks: MaskFile = serde_json::from_str(&read(path)?)?;
    SplitSet::from_masks(
        &to_bools(path, "train_mask", &masks.train_mask)?,
        &to_bools(path, "val_mask", &masks.val_mask)?,
        &to_bools(path, "test_mask", &masks.test_mask)?,
    )
}

fn floor_count(ratio: f64, count: usize) -> usize {
    (ratio * count as f64 + 1e-9).floor() as usize
}

/// Part sizes for a class of `c` members. When the ratios sum to one the
/// leftover after flooring goes to the parts with the largest remainders
/// (earlier parts first on ties), so every part is within one node of its
/// quota. Train always gets at least one node.
fn part_sizes(ratios: [f64; 3], c: usize, whole: bool) -> [usize; 3] {
    let mut sizes = ratios.map(|r| floor_count(r, c));
    if whole {
        let mut order = [0, 1, 2];
        let rem = |k: usize| ratios[k] * c as f64 - sizes[k] as f64;
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)));
        let left = c.saturating_sub(sizes.iter().sum());
        for &k in order.iter().take(left) {
            sizes[k] += 1;
        }
    }
    if sizes[0] == 0 {
        let donor = if sizes[2] >= sizes[1] { 2 } else { 1 };
        if sizes[donor] > 0 && whole {
            sizes[donor] -= 1;
        }
        sizes[0] = 1;
    }
    sizes[1] = sizes[1].min(c - sizes[0]);
    sizes[2] = sizes[2].min(c - sizes[0] - sizes[1]);
    sizes
}

/// Stratified splits, one per seed. Within each class the members are
/// shuffled and cut into train, validation and test parts. When the
/// ratios sum to one, every part is within one node of its quota.
pub fn generate_splits(
    labels: &[usize],
    num_classes: usize,
    ratios: (f64, f64, f64),
    seeds: &[u64],
) -> Result<Vec<SplitSet>> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || tr + va + te > 1.0 + 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to at most 1"
        )));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InconsistentCounts(format!("label {y} >= {num_classes} classes")));
        }
        members[y].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if m.len() < 3 {
            return Err(Error::ClassTooSmall {
                class: c,
                count: m.len(),
            });
        }
    }
    let whole = (tr + va + te - 1.0).abs() < 1e-9;
    Ok(seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut split = SplitSet::default();
            for m in &members {
                let mut m = m.clone();
                m.shuffle(&mut rng);
                let [n_train, n_val, n_test] = part_sizes([tr, va, te], m.len(), whole);
                split.train.extend_from_slice(&m[..n_train]);
                split.val.extend_from_slice(&m[n_train..n_train + n_val]);
                split.test.extend_from_slice(&m[n_train + n_val..n_train + n_val + n_test]);
            }
            split.train.sort_unstable();
            split.val.sort_unstable();
            split.test.sort_unstable();
            split
        })
        .collect())
}

/// Degree distribution of a synthetic graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeModel {
    Regular { d: usize },
    /// `P(d) ∝ d^(−exponent)` on `[dmin, dmax]`.
    PowerLaw { exponent: f64, dmin: usize, dmax: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub target_h: f64,
    pub degree_model: DegreeModel,
    pub feature_model: ClassFeatureModel,
    pub seed: u64,
}

/// Attempts allowed before giving up on a homophily target.
pub const SYNTH_ATTEMPTS: usize = 20;
/// Allowed gap between target and achieved graph homophily.
pub const SYNTH_TOLERANCE: f64 = 0.05;

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.classes != 2 {
            return bad(format!("only 2 classes are supported, got {}", self.classes));
        }
        if self.n < 4 {
            return bad(format!("need at least 4 nodes, got {}", self.n));
        }
        if !(0.0..=1.0).contains(&self.target_h) {
            return bad(format!("target homophily {} not in [0, 1]", self.target_h));
        }
        match self.degree_model {
            DegreeModel::Regular { d } => {
                if d == 0 || d >= self.n / 2 {
                    return bad(format!("regular degree {d} must be in [1, n/2)"));
                }
                if (self.n * d) % 2 == 1 {
                    return bad(format!("n·d = {} is odd", self.n * d));
                }
            }
            DegreeModel::PowerLaw { exponent, dmin, dmax } => {
                if !(exponent > 0.0) || dmin == 0 || dmin > dmax || dmax >= self.n / 2 {
                    return bad(format!(
                        "power law needs exponent > 0 and 1 <= dmin <= dmax < n/2, got ({exponent}, {dmin}, {dmax})"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Rounds `x` up with probability equal to its fractional part.
fn random_round(x: f64, rng: &mut ChaCha8Rng) -> usize {
    let f = x.floor();
    f as usize + usize::from(rng.random::<f64>() < x - f)
}

fn sample_degrees(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match spec.degree_model {
        DegreeModel::Regular { d } => vec![d; spec.n],
        DegreeModel::PowerLaw { exponent, dmin, dmax } => {
            let weights: Vec<f64> = (dmin..=dmax).map(|d| (d as f64).powf(-exponent)).collect();
            let total: f64 = weights.iter().sum();
            let mut degs: Vec<usize> = (0..spec.n)
                .map(|_| {
                    let mut u = rng.random::<f64>() * total;
                    for (k, w) in weights.iter().enumerate() {
                        if u < *w {
                            return dmin + k;
                        }
                        u -= w;
                    }
                    dmax
                })
                .collect();
            if degs.iter().sum::<usize>() % 2 == 1 {
                let i = (0..spec.n).find(|&i| degs[i] < dmax).unwrap_or(0);
                if degs[i] < dmax {
                    degs[i] += 1;
                } else {
                    degs[i] -= 1;
                }
            }
            degs
        }
    }
}

/// Moves `amount` stubs from `from` to `to` on randomly chosen members.
fn shift_stubs(members: &[usize], from: &mut [usize], to: &mut [usize], amount: usize, rng: &mut ChaCha8Rng) -> bool {
    for _ in 0..amount {
        let donors: Vec<usize> = members.iter().copied().filter(|&i| from[i] > 0).collect();
        let Some(&i) = donors.get(rng.random_range(0..donors.len().max(1))) else {
            return false;
        };
        from[i] -= 1;
        to[i] += 1;
    }
    true
}

/// Pairs stubs and repairs self-loops / duplicates with degree-preserving
/// swaps inside the same group. Edges that cannot be repaired are dropped.
fn match_group(
    mut pairs: Vec<(usize, usize)>,
    cross: bool,
    taken: &mut BTreeSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut bad: Vec<usize> = Vec::new();
    for (k, &(a, b)) in pairs.iter().enumerate() {
        if a == b || !taken.insert(key(a, b)) {
            bad.push(k);
        }
    }
    let mut attempts = 0;
    while let Some(&k) = bad.last() {
        attempts += 1;
        if attempts > 200 * (pairs.len() + 1) || pairs.len() < 2 {
            break;
        }
        let m = rng.random_range(0..pairs.len());
        if m == k || bad.contains(&m) {
            continue;
        }
        let (a, b) = pairs[k];
        let (c, d) = pairs[m];
        // Cross pairs are stored (class 0 end, class 1 end); swapping the
        // second ends keeps both edges cross-class.
        let (e1, e2) = if cross || rng.random::<bool>() {
            ((a, d), (c, b))
        } else {
            ((a, c), (b, d))
        };
        if e1.0 == e1.1 || e2.0 == e2.1 || key(e1.0, e1.1) == key(e2.0, e2.1) {
            continue;
        }
        let (k1, k2) = (key(e1.0, e1.1), key(e2.0, e2.1));
        if taken.contains(&k1) || taken.contains(&k2) {
            continue;
        }
        taken.remove(&key(c, d));
        taken.insert(k1);
        taken.insert(k2);
        pairs[k] = e1;
        pairs[m] = e2;
        bad.pop();
    }
    let bad: BTreeSet<usize> = bad.into_iter().collect();
    pairs
        .into_iter()
        .enumerate()
        .filter(|(k, _)| !bad.contains(k))
        .map(|(_, p)| p)
        .collect()
}

fn try_generate(spec: &SynthSpec, labels: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize)>> {
    let n = spec.n;
    let degs = sample_degrees(spec, rng);
    let mut same: Vec<usize> = Vec::with_capacity(n);
    let mut cross: Vec<usize> = Vec::with_capacity(n);
    for &d in &degs {
        let s = random_round(spec.target_h * d as f64, rng).min(d);
        same.push(s);
        cross.push(d - s);
    }
    let class: [Vec<usize>; 2] = [
        (0..n).filter(|&i| labels[i] == 0).collect(),
        (0..n).filter(|&i| labels[i] == 1).collect(),
    ];
    let total = |v: &[usize], c: usize| class[c].iter().map(|&i| v[i]).sum::<usize>();
    let deg_total = [total(&degs, 0), total(&degs, 1)];
    let (c0, c1) = (total(&cross, 0), total(&cross, 1));
    // x cross edges; the same-class stub total D_c − x must be even, and
    // D_0 + D_1 is even, so one parity fix serves both classes.
    let cap = deg_total[0].min(deg_total[1]);
    let mut x = ((c0 + c1) / 2).min(cap);
    if (deg_total[0] - x) % 2 == 1 {
        let up = x == 0 || (x < cap && rng.random::<bool>());
        x = if up { x + 1 } else { x - 1 };
    }
    for c in 0..2 {
        let have = total(&cross, c);
        let ok = if have > x {
            shift_stubs(&class[c], &mut cross, &mut same, have - x, rng)
        } else {
            shift_stubs(&class[c], &mut same, &mut cross, x - have, rng)
        };
        if !ok {
            return None;
        }
    }
    let stubs = |v: &[usize], c: usize| -> Vec<usize> {
        class[c].iter().flat_map(|&i| std::iter::repeat_n(i, v[i])).collect()
    };
    let mut taken = BTreeSet::new();
    let mut edges = Vec::new();
    for c in 0..2 {
        let mut s = stubs(&same, c);
        s.shuffle(rng);
        let pairs: Vec<(usize, usize)> = s.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        edges.extend(match_group(pairs, false, &mut taken, rng));
    }
    let mut s0 = stubs(&cross, 0);
    let mut s1 = stubs(&cross, 1);
    s0.shuffle(rng);
    s1.shuffle(rng);
    let pairs: Vec<(usize, usize)> = s0.into_iter().zip(s1).collect();
    edges.extend(match_group(pairs, true, &mut taken, rng));
    Some(edges)
}

/// Generates a two-class dataset whose graph homophily is within
/// [`SYNTH_TOLERANCE`] of `spec.target_h`.
///
/// Labels are balanced. Each node's degree is drawn from the degree model
/// and its stubs are split into same-class and cross-class stubs in the
/// target proportion (randomized rounding). Cross stub totals are then
/// balanced between the classes, stubs are matched at random, and
/// self-loops or duplicate edges are repaired by degree-preserving swaps.
/// A regular spec must come out exactly regular; otherwise the attempt is
/// retried on a fresh random stream.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.n;
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    labels.shuffle(&mut label_rng);

    let mut best = f64::NAN;
    for attempt in 0..SYNTH_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + attempt as u64);
        let Some(edges) = try_generate(spec, &labels, &mut rng) else {
            continue;
        };
        let graph = build_graph(edges, n)?;
        if !graph.isolated_nodes().is_empty() {
            continue;
        }
        if let DegreeModel::Regular { d } = spec.degree_model {
            if (0..n).any(|i| graph.degree(i) != d) {
                continue;
            }
        }
        let h = graph.node_homophily(&labels)?.graph_h;
        if best.is_nan() || (h - spec.target_h).abs() < (best - spec.target_h).abs() {
            best = h;
        }
        if (h - spec.target_h).abs() > SYNTH_TOLERANCE {
            continue;
        }
        let mut frng = ChaCha8Rng::seed_from_u64(spec.seed);
        frng.set_stream(u64::MAX);
        let features = sample_class_features(&spec.feature_model, &labels, &mut frng)?;
        return LabeledDataset::new(graph, features, labels);
    }
    Err(Error::TargetHomophilyUnreachable {
        target: spec.target_h,
        achieved: best,
        attempts: SYNTH_ATTEMPTS,
    })
}

/// Rows drawn from `N(±μ, diag(Σ))`, `+μ` for label 0.
pub fn sample_class_features(
    model: &ClassFeatureModel,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let dim = model.dim();
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &y in labels {
        let s = if y == 0 { 1.0 } else { -1.0 };
        for c in 0..dim {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            data.push(s * model.mu[c] + model.sigma[c].sqrt() * z);
        }
    }
    Tensor::new(labels.len(), dim, data)
}

fn round_floats(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(num) => {
            if num.is_f64() {
                let x = num.as_f64().unwrap_or(f64::NAN);
                let r: f64 = format!("{x:.12e}").parse().unwrap_or(x);
                if let Some(n) = serde_json::Number::from_f64(r) {
                    *num = n;
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_floats),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Serializes a report with sorted keys, floats rounded to 13 significant
/// digits and a `schema_version` field. Non-object values are wrapped
/// under `data`.
pub fn report_json<T: Serialize>(obj: &T) -> Result<String> {
    let mut v = serde_json::to_value(obj)?;
    round_floats(&mut v);
    let v = match v {
        serde_json::Value::Object(mut o) => {
            o.insert("schema_version".into(), SCHEMA_VERSION.into());
            serde_json::Value::Object(o)
        }
        other => serde_json::json!({ "schema_version": SCHEMA_VERSION, "data": other }),
    };
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn save_report<T: Serialize>(obj: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, report_json(obj)?)?;
    Ok(())
}

/// Header plus rows, written as CSV. Cells must not contain commas.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::InconsistentCounts(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref())?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Path helper used by callers that take either a dataset directory or a
/// file inside it.
pub fn dataset_dir(path: impl AsRef<Path>) -> PathBuf {
    let p = path.as_ref();
    if p.is_file() {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        p.to_path_buf()
    }
}


#[cfg(test)]
mod synth_tests {
    use super::*;

    fn spec(h: f64, degree_model: DegreeModel, seed: u64) -> SynthSpec {
        SynthSpec {
            n: 200,
            classes: 2,
            target_h: h,
            degree_model,
            feature_model: ClassFeatureModel::new(vec![1.0; 4], vec![1.0; 4]).unwrap(),
            seed,
        }
    }

    #[test]
    fn regular_targets_hit() {
        for (k, h) in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0].into_iter().enumerate() {
            let ds = generate_synthetic(&spec(h, DegreeModel::Regular { d: 4 }, k as u64)).unwrap();
            assert!(ds.graph.is_regular());
            assert!((0..200).all(|i| ds.graph.degree(i) == 4));
            let got = ds.graph.node_homophily(&ds.labels).unwrap().graph_h;
            assert!((got - h).abs() <= SYNTH_TOLERANCE, "target {h} got {got}");
        }
    }

    #[test]
    fn power_law_targets_hit() {
        let dm = DegreeModel::PowerLaw { exponent: 2.5, dmin: 1, dmax: 40 };
        for (k, h) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            let ds = generate_synthetic(&spec(h, dm, 10 + k as u64)).unwrap();
            let got = ds.graph.node_homophily(&ds.labels).unwrap().graph_h;
            assert!((got - h).abs() <= SYNTH_TOLERANCE, "target {h} got {got}");
            assert!(ds.graph.degrees().iter().all(|&d| (1..=40).contains(&d)));
        }
    }

    #[test]
    fn alternating_cycle_structure() {
        let ds = generate_synthetic(&spec(0.0, DegreeModel::Regular { d: 2 }, 3)).unwrap();
        assert!(ds.graph.node_homophily(&ds.labels).unwrap().graph_h <= 0.05);
        for &(u, v) in ds.graph.edges() {
            assert_ne!(ds.labels[u], ds.labels[v]);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let s = spec(0.4, DegreeModel::Regular { d: 3 }, 5);
        assert_eq!(generate_synthetic(&s).unwrap(), generate_synthetic(&s).unwrap());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = spec(0.5, DegreeModel::Regular { d: 3 }, 0);
        s.n = 201;
        assert!(matches!(generate_synthetic(&s), Err(Error::InfeasibleSpec(_))));
        s.n = 200;
        s.classes = 3;
        assert!(matches!(generate_synthetic(&s), Err(Error::InfeasibleSpec(_))));
    }
}
