//! `ggcnlab` command-line driver.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, malformed
//! files, infeasible parameters), 2 for internal failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ggcnlab::analysis::{case_study, degree_bins, DegreeBins};
use ggcnlab::data::{
    convert_mask_file, generate_splits, generate_synthetic, load_dataset, load_splits, report_json, save_dataset,
    save_splits, CsvTable, DegreeModel, LabeledDataset, SplitSet, SynthSpec,
};
use ggcnlab::layers::{ModelConfig, NormKind, PropagationContext};
use ggcnlab::theory::{verify_propagation, verify_signed, ClassFeatureModel, NeighborClasses, NodeCheck};
use ggcnlab::train::{ablation_grid, depth_sweep, mean_stdev, split_seed, train_model, RunResult, TrainConfig};
use ggcnlab::{Error, Scheme};

/// Environment variable capping the worker-thread count.
const THREADS_ENV: &str = "GGCNLAB_THREADS";

#[derive(Parser)]
#[command(name = "ggcnlab", version, about = "Graph propagation experiments: theory checks, training, sweeps and case studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare sampled one-step propagation against the closed-form drift factor.
    VerifyTheory(VerifyArgs),
    /// Generate a two-class synthetic dataset directory.
    GenSynth(SynthArgs),
    /// Train one model on every split.
    Train(TrainArgs),
    /// Train one model family at several depths.
    SweepDepth(SweepArgs),
    /// Base / +deg / +sign / +deg,sign residual variants over depths.
    Ablation(SweepArgs),
    /// Print logarithmic degree bins.
    Bins(BinsArgs),
    /// Per-degree-bin accuracy and effective homophily over depths.
    CaseStudy(CaseArgs),
    /// Convert boolean-mask split files into index lists.
    ConvertSplits(ConvertArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NeighborMode {
    Exchangeable,
    Fixed,
}

#[derive(Args)]
struct VerifyArgs {
    /// Dataset directory; binary labels are used as classes.
    #[arg(long, alias = "data")]
    graph: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class mean along every feature dimension.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Per-dimension feature variance.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = NeighborMode::Exchangeable)]
    neighbors: NeighborMode,
    /// Check signed messages with this per-node sign error rate instead.
    #[arg(long)]
    error_rate: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    /// Target graph homophily.
    #[arg(long)]
    h: f64,
    /// `regular:D` or `powerlaw:EXPONENT,DMIN,DMAX`.
    #[arg(long, default_value = "regular:4")]
    degree: String,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write this many stratified splits to `splits.json`.
    #[arg(long)]
    splits: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Mlp,
    Gcn,
    Base,
    Ggcn,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Ggcn)]
    model: ModelKind,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    decay_k: Option<f64>,
    #[arg(long)]
    decay_l0: Option<usize>,
    /// Comma-separated: sign, deg, decay, norm=batch, norm=layer.
    #[arg(long, value_delimiter = ',')]
    flags: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long, alias = "graph")]
    data: PathBuf,
    /// Number of generated stratified splits (48/32/20).
    #[arg(long, default_value_t = 10, conflicts_with = "splits_file")]
    splits: usize,
    /// Use splits from this JSON file instead.
    #[arg(long)]
    splits_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    depths: Vec<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct BinsArgs {
    #[arg(long)]
    dmin: usize,
    #[arg(long)]
    dmax: usize,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CaseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    depths: Vec<usize>,
    /// Number of logarithmic degree bins.
    #[arg(long, default_value_t = 5)]
    bins: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ConvertArgs {
    /// Mask files, one split each.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Input problems are the caller's to fix (exit 1); anything else is ours.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<clap::Error>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::ShapeMismatch { .. }
            | Error::NonFinite(_)
            | Error::NonScalarLoss { .. }
            | Error::Nondeterministic
            | Error::DivergedLoss { .. },
        ) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<UsageError>().is_some() => 1,
        None => 2,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VerifyTheory(a) => verify_theory(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::SweepDepth(a) => sweep_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
        Command::Bins(a) => bins_cmd(a),
        Command::CaseStudy(a) => case_cmd(a),
        Command::ConvertSplits(a) => convert_cmd(a),
    }
}

fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let text = report_json(report)?;
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_csv(table: &CsvTable, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        table.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn feature_model(mu: f64, sigma: f64, dim: usize) -> Result<ClassFeatureModel> {
    if dim == 0 {
        return Err(usage("--dim must be >= 1"));
    }
    Ok(ClassFeatureModel::new(vec![mu; dim], vec![sigma; dim])?)
}

#[derive(Serialize)]
struct NodeRow {
    node: usize,
    degree: usize,
    gamma_analytic: f64,
    gamma_mc: f64,
    z_score: f64,
    variance_analytic: Vec<f64>,
    variance_mc: Vec<f64>,
    variance_rel_err: f64,
}

#[derive(Serialize)]
struct VerifyReport {
    mode: String,
    trials: u64,
    seed: u64,
    error_rate: Option<f64>,
    max_abs_z: f64,
    fraction_within_4: f64,
    max_variance_rel_err: f64,
    nodes: Vec<NodeRow>,
}

fn verify_theory(a: VerifyArgs) -> Result<()> {
    let data = load_dataset(&a.graph)?;
    let model = feature_model(a.mu, a.sigma, a.dim)?;
    let checks: Vec<NodeCheck> = match a.error_rate {
        Some(e) => {
            let rates = vec![e; data.num_nodes()];
            verify_signed(&data.graph, &data.labels, &model, &rates, a.trials, a.seed)?
        }
        None => {
            let mode = match a.neighbors {
                NeighborMode::Exchangeable => NeighborClasses::Exchangeable,
                NeighborMode::Fixed => NeighborClasses::Fixed,
            };
            verify_propagation(&data.graph, &data.labels, &model, Scheme::Renormalized, mode, a.trials, a.seed)?
        }
    };
    let nodes: Vec<NodeRow> = checks
        .into_iter()
        .map(|c| NodeRow {
            node: c.node,
            degree: c.degree,
            gamma_analytic: c.gamma_closed_form,
            gamma_mc: c.gamma_sampled,
            z_score: c.max_z,
            variance_analytic: c.variance_closed_form,
            variance_mc: c.variance_sampled,
            variance_rel_err: c.variance_max_rel_err,
        })
        .collect();
    let within = nodes.iter().filter(|r| r.z_score.abs() <= 4.0).count();
    let report = VerifyReport {
        mode: match (a.error_rate, a.neighbors) {
            (Some(_), _) => "signed".into(),
            (None, NeighborMode::Exchangeable) => "exchangeable".into(),
            (None, NeighborMode::Fixed) => "fixed".into(),
        },
        trials: a.trials,
        seed: a.seed,
        error_rate: a.error_rate,
        max_abs_z: nodes.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max),
        fraction_within_4: within as f64 / nodes.len().max(1) as f64,
        max_variance_rel_err: nodes.iter().map(|r| r.variance_rel_err).fold(0.0, f64::max),
        nodes,
    };
    let mut table = CsvTable::new(&["node", "degree", "gamma_analytic", "gamma_mc", "z_score", "variance_rel_err"]);
    for r in &report.nodes {
        table.push(vec![
            r.node.to_string(),
            r.degree.to_string(),
            format!("{:.6}", r.gamma_analytic),
            format!("{:.6}", r.gamma_mc),
            format!("{:.3}", r.z_score),
            format!("{:.4}", r.variance_rel_err),
        ])?;
    }
    emit(&report, a.out.out.as_deref())?;
    emit_csv(&table, a.out.csv.as_deref())
}

fn parse_degree(s: &str) -> Result<DegreeModel> {
    let bad = || usage(format!("--degree must be regular:D or powerlaw:EXP,DMIN,DMAX, got {s:?}"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "regular" => Ok(DegreeModel::Regular { d: rest.parse().map_err(|_| bad())? }),
        "powerlaw" => {
            let parts: Vec<&str> = rest.split(',').collect();
            let [e, lo, hi] = parts[..] else { return Err(bad()) };
            Ok(DegreeModel::PowerLaw {
                exponent: e.parse().map_err(|_| bad())?,
                dmin: lo.parse().map_err(|_| bad())?,
                dmax: hi.parse().map_err(|_| bad())?,
            })
        }
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct SynthReport {
    spec: SynthSpec,
    nodes: usize,
    edges: usize,
    graph_homophily: f64,
    splits: Option<usize>,
}

fn gen_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n: a.n,
        classes: 2,
        target_h: a.h,
        degree_model: parse_degree(&a.degree)?,
        feature_model: feature_model(a.mu, a.sigma, a.dim)?,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    save_dataset(&data, &a.out)?;
    if let Some(k) = a.splits {
        let seeds: Vec<u64> = (0..k as u64).map(|i| a.seed.wrapping_add(i)).collect();
        let splits = generate_splits(&data.labels, data.num_classes, (0.48, 0.32, 0.20), &seeds)?;
        save_splits(&splits, a.out.join("splits.json"))?;
    }
    let report = SynthReport {
        nodes: data.num_nodes(),
        edges: data.graph.num_edges(),
        graph_homophily: data.graph.node_homophily(&data.labels)?.graph_h,
        splits: a.splits,
        spec,
    };
    emit(&report, Some(&a.out.join("synth.json")))
}

fn load_data(a: &DataArgs) -> Result<(LabeledDataset, Vec<SplitSet>)> {
    let data = load_dataset(&a.data)?;
    let isolated = data.graph.isolated_nodes();
    if !isolated.is_empty() {
        eprintln!("warning: {} isolated node(s), first {:?}", isolated.len(), &isolated[..isolated.len().min(5)]);
    }
    let splits = match &a.splits_file {
        Some(p) => load_splits(p)?,
        None => {
            if a.splits == 0 {
                return Err(usage("--splits must be >= 1"));
            }
            let seeds: Vec<u64> = (0..a.splits as u64).map(|i| a.seed.wrapping_add(i)).collect();
            generate_splits(&data.labels, data.num_classes, (0.48, 0.32, 0.20), &seeds)?
        }
    };
    for s in &splits {
        s.validate(&data.labels, data.num_classes)?;
    }
    Ok((data, splits))
}

fn model_config(m: &ModelArgs, depth: usize) -> Result<ModelConfig> {
    let mut mc = match m.model {
        ModelKind::Mlp => ModelConfig::mlp(m.hidden, m.dropout),
        ModelKind::Gcn => ModelConfig::gcn(depth, m.hidden, m.dropout),
        ModelKind::Base => ModelConfig::base(depth, m.hidden, m.dropout),
        ModelKind::Ggcn => ModelConfig::ggcn(depth, m.hidden, m.dropout),
    };
    for f in m.flags.iter().map(|f| f.trim()).filter(|f| !f.is_empty()) {
        match f {
            "sign" => mc.flags.use_sign = true,
            "deg" => mc.flags.use_degree_correction = true,
            "decay" => mc.flags.use_decay = true,
            "norm=batch" => mc.norm = NormKind::BatchNorm,
            "norm=layer" => mc.norm = NormKind::LayerNorm,
            other => return Err(usage(format!("unknown flag {other:?}; expected sign, deg, decay, norm=batch, norm=layer"))),
        }
    }
    if let Some(e) = m.eta {
        mc.decay.eta = e;
    }
    if let Some(k) = m.decay_k {
        mc.decay.k = k;
    }
    if let Some(l0) = m.decay_l0 {
        mc.decay.l0 = l0;
    }
    mc.validate()?;
    Ok(mc)
}

fn train_config(m: &ModelArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: m.lr,
        weight_decay: m.weight_decay,
        max_epochs: m.epochs,
        patience: m.patience,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Serialize)]
struct TrainReport {
    model: ModelConfig,
    train: TrainConfig,
    runs: Vec<Option<RunResult>>,
    mean_test: Option<f64>,
    stdev_test: Option<f64>,
    diverged: usize,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    use rayon::prelude::*;
    let (data, splits) = load_data(&a.data)?;
    let mc = model_config(&a.model, a.depth)?;
    let cfg = train_config(&a.model, a.data.seed);
    cfg.validate()?;
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    let runs: Vec<Option<RunResult>> = (0..splits.len())
        .into_par_iter()
        .map(|k| {
            let mut c = cfg;
            c.seed = split_seed(&cfg, k);
            match train_model(&mc, &data, &splits[k], &c, &ctx) {
                Ok(t) => Ok(Some(t.result)),
                Err(Error::DivergedLoss { epoch }) => {
                    eprintln!("warning: split {k} diverged at epoch {epoch}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    let accs: Vec<f64> = runs.iter().flatten().map(|r| r.test_accuracy).collect();
    let (m, s) = mean_stdev(&accs);
    let mut table = CsvTable::new(&["split", "test_accuracy", "best_val_accuracy", "best_epoch"]);
    for (k, r) in runs.iter().enumerate() {
        table.push(vec![
            k.to_string(),
            fmt(r.as_ref().map(|r| r.test_accuracy)),
            fmt(r.as_ref().map(|r| r.best_val_accuracy)),
            r.as_ref().map_or_else(String::new, |r| r.best_epoch.to_string()),
        ])?;
    }
    let report = TrainReport {
        model: mc,
        train: cfg,
        diverged: runs.iter().filter(|r| r.is_none()).count(),
        mean_test: (!m.is_nan()).then_some(m),
        stdev_test: (!s.is_nan()).then_some(s),
        runs,
    };
    emit(&report, a.out.out.as_deref())?;
    emit_csv(&table, a.out.csv.as_deref())
}

fn check_depths(depths: &[usize]) -> Result<()> {
    if depths.is_empty() || depths.contains(&0) {
        bail!(usage("--depths must list positive integers"));
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    check_depths(&a.depths)?;
    let (data, splits) = load_data(&a.data)?;
    let mc = model_config(&a.model, a.depths[0])?;
    let cfg = train_config(&a.model, a.data.seed);
    let sweep = depth_sweep(&mc, &a.depths, &data, &splits, &cfg)?;
    let mut table = CsvTable::new(&["depth", "mean_test", "stdev_test", "mean_val", "diverged"]);
    for r in &sweep.rows {
        table.push(vec![
            r.depth.to_string(),
            fmt(r.mean_test),
            fmt(r.stdev_test),
            fmt(r.mean_val),
            r.diverged.to_string(),
        ])?;
    }
    emit(&sweep, a.out.out.as_deref())?;
    emit_csv(&table, a.out.csv.as_deref())
}

fn ablation_cmd(a: SweepArgs) -> Result<()> {
    check_depths(&a.depths)?;
    let (data, splits) = load_data(&a.data)?;
    let mut base = ModelConfig::base(a.depths[0], a.model.hidden, a.model.dropout);
    if let Some(norm) = a.model.flags.iter().find(|f| f.starts_with("norm=")) {
        base.norm = match norm.as_str() {
            "norm=batch" => NormKind::BatchNorm,
            "norm=layer" => NormKind::LayerNorm,
            other => return Err(usage(format!("unknown flag {other:?}"))),
        };
    }
    let cfg = train_config(&a.model, a.data.seed);
    let table_out = ablation_grid(&base, &a.depths, &data, &splits, &cfg)?;
    let mut table = CsvTable::new(&["variant", "depth", "mean_test", "stdev_test", "mean_val", "diverged"]);
    for v in &table_out.variants {
        for r in &v.sweep.rows {
            table.push(vec![
                v.name.replace(',', "+"),
                r.depth.to_string(),
                fmt(r.mean_test),
                fmt(r.stdev_test),
                fmt(r.mean_val),
                r.diverged.to_string(),
            ])?;
        }
    }
    emit(&table_out, a.out.out.as_deref())?;
    emit_csv(&table, a.out.csv.as_deref())
}

fn bins_cmd(a: BinsArgs) -> Result<()> {
    let bins = degree_bins(a.dmin, a.dmax, a.n)?;
    println!("{}", bins.labels().join(" "));
    if let Some(p) = a.out {
        emit(&bins, Some(&p))?;
    }
    Ok(())
}

fn case_cmd(a: CaseArgs) -> Result<()> {
    check_depths(&a.depths)?;
    let (data, splits) = load_data(&a.data)?;
    let mc = model_config(&a.model, a.depths[0])?;
    let cfg = train_config(&a.model, a.data.seed);
    let bins = DegreeBins::for_graph(&data.graph, a.bins)?;
    let table_out = case_study(&data, &splits, &a.depths, &mc, &cfg, &bins)?;
    let mut table = CsvTable::new(&["depth", "bin", "nodes", "accuracy", "mean_effective_homophily"]);
    for r in &table_out.rows {
        for b in &r.bins {
            table.push(vec![
                r.depth.to_string(),
                b.bin.replace(',', "-"),
                b.nodes.to_string(),
                fmt(b.accuracy),
                fmt(b.mean_effective_homophily),
            ])?;
        }
    }
    emit(&table_out, a.out.out.as_deref())?;
    emit_csv(&table, a.out.csv.as_deref())
}

fn convert_cmd(a: ConvertArgs) -> Result<()> {
    let splits = a
        .inputs
        .iter()
        .map(|p| convert_mask_file(p).with_context(|| format!("converting {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    save_splits(&splits, &a.out)?;
    Ok(())
}
