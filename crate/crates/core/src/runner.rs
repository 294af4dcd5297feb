//! End-to-end orchestration: configuration, the discovery training loop,
//! the full two-stage pipeline with its artifact files, evaluation, and the
//! gradient-check suite.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::{stage1_step, BilevelConfig, BilevelError, HypergradMode};
use crate::checkpoint;
use crate::data::{
    cifar10_train_paths, load_cifar10_binary, make_split, synth_gaussians, AugmentConfig,
    BatchSampler, BatchSpec, DataError, Dataset, OpenWorldSplit, SplitManifest, SplitSpec,
    SynthSpec,
};
use crate::evalmetrics::{report_metrics, EvalError, MetricsConfig, MetricsReport};
use crate::models::{Model, ModelSpec};
use crate::objectives::{ce_loss, nov_loss, one_hot_rows, LossBreakdown, ObjectiveConfig};
use crate::optim::{OptimError, OptimizerState};
use crate::params::{ParamNodes, ParamVector};
use crate::pseudolabels::append_manifest;
use crate::stage2::{eval_probs, train_stage2, Stage2Config, Stage2Error};
use crate::tape::{DiffError, NodeId, Tape};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Bilevel(#[from] BilevelError),
    #[error(transparent)]
    Stage2(#[from] Stage2Error),
    #[error(transparent)]
    Pl(#[from] crate::pseudolabels::PlError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(#[from] serde_json::Error),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataConfig {
    Synthetic(SynthSpec),
    Cifar10 { dir: PathBuf },
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset, DataError> {
    match cfg {
        DataConfig::Synthetic(spec) => Ok(synth_gaussians(spec)?.0),
        DataConfig::Cifar10 { dir } => load_cifar10_binary(&cifar10_train_paths(dir)),
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch: BatchSpec,
    pub objective: ObjectiveConfig,
    pub bilevel: BilevelConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 50,
            batch: BatchSpec { labeled: 100, unlabeled: 100 },
            objective: ObjectiveConfig::default(),
            bilevel: BilevelConfig::default(),
        }
    }
}

/// The single configuration file driving every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub model: ModelSpec,
    #[serde(default = "AugmentConfig::default")]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reseed every stochastic piece from one value (the --seed flag).
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.split.seed = seed;
        self.stage2.seed = seed;
        if let DataConfig::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
    }

    /// Change the assumed number of novel classes (the --novel-classes
    /// flag): the classifier head widens or narrows while the split keeps
    /// producing the true classes.
    pub fn override_novel_classes(&mut self, n: usize) {
        self.model.head.novel_classes = n;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage1EpochRecord {
    pub epoch: usize,
    pub l_nov: f64,
    pub l_pair: f64,
    pub l_ce: f64,
    pub l_reg: f64,
    pub pseudo_per_batch: f64,
    /// Fraction of steps whose outer gradient vanished.
    pub zero_hyper_fraction: f64,
}

pub struct Stage1Result {
    pub params: ParamVector,
    pub history: Vec<Stage1EpochRecord>,
    pub aborted: bool,
}

/// The discovery stage: per batch, the classifier descends the combined
/// discovery loss while the similarity network follows the hypergradient of
/// the labeled cross-entropy through the inner update.
pub fn train_stage1(
    model: &Model,
    start: &ParamVector,
    dataset: &Dataset,
    split: &OpenWorldSplit,
    cfg: &Stage1Config,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<Stage1Result, RunnerError> {
    let mut params = start.clone();
    let mut opt = OptimizerState::adam(cfg.bilevel.alpha_theta_phi, params.len());
    let c_u = model.spec.head.total();
    let mut history = Vec::new();
    let mut last_good = params.clone();

    for epoch in 0..cfg.epochs {
        let mut sampler = BatchSampler::from_split(
            dataset,
            split,
            cfg.batch,
            *aug,
            seed.wrapping_add(epoch as u64).wrapping_mul(0x0b57_c0de),
        );
        let batches = sampler.batches_per_epoch();
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut pseudo = 0usize;
        let mut zero_hyper = 0usize;
        let mut counted = 0usize;
        for _ in 0..batches {
            let batch = sampler.next_batch();
            if batch.labeled_weak.nrows() + batch.unlabeled_weak.nrows() < 2 {
                continue; // a short boundary batch can't form pairs
            }
            let breakdown: RefCell<Option<LossBreakdown>> = RefCell::new(None);
            let objective = cfg.objective;
            let f_nov = |t: &mut Tape, n: &ParamNodes| -> NodeId {
                let out = nov_loss(t, model, n, &batch, &objective)
                    .expect("batch has at least two samples");
                *breakdown.borrow_mut() = Some(out.breakdown);
                out.total
            };
            // the hypergradient keeps the full pair-loss graph even when
            // the classifier objective detaches the score target, since
            // that branch is its only path into the similarity network
            let full_objective = ObjectiveConfig { stop_grad_target: false, ..objective };
            let f_nov_hyper = |t: &mut Tape, n: &ParamNodes| -> NodeId {
                nov_loss(t, model, n, &batch, &full_objective)
                    .expect("batch has at least two samples")
                    .total
            };
            let labels = batch.labels.clone();
            let weak = batch.labeled_weak.clone();
            let f_outer = |t: &mut Tape, n: &ParamNodes| -> NodeId {
                let x = t.constant(weak.clone());
                let (_, _, probs) = model
                    .forward(t, n, x)
                    .expect("batch width matches backbone input");
                let (l, _) = ce_loss(t, probs, &one_hot_rows(&labels, c_u));
                l
            };
            let report =
                stage1_step(&f_nov, &f_nov_hyper, &f_outer, &mut params, &mut opt, &cfg.bilevel)?;
            if !report.l_nov.is_finite() || !params.all_finite() {
                return Ok(Stage1Result { params: last_good, history, aborted: true });
            }
            let b = breakdown.borrow().expect("loss was built");
            sums.0 += b.l_nov;
            sums.1 += b.l_pair;
            sums.2 += b.l_ce;
            sums.3 += b.l_reg;
            pseudo += b.n_pseudo;
            if report.hyper_zero_v {
                zero_hyper += 1;
            }
            counted += 1;
        }
        let n = counted.max(1) as f64;
        last_good = params.clone();
        history.push(Stage1EpochRecord {
            epoch,
            l_nov: sums.0 / n,
            l_pair: sums.1 / n,
            l_ce: sums.2 / n,
            l_reg: sums.3 / n,
            pseudo_per_batch: pseudo as f64 / n,
            zero_hyper_fraction: zero_hyper as f64 / n,
        });
    }
    Ok(Stage1Result { params, history, aborted: false })
}

/// Accuracy report over the unlabeled pool, scored against the sealed
/// hidden labels.
pub fn evaluate(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    split: &OpenWorldSplit,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, RunnerError> {
    let probs = eval_probs(model, params, dataset, &split.unlabeled);
    let labels: Vec<usize> = split
        .unlabeled
        .iter()
        .map(|&i| split.sealed().hidden_label(i))
        .collect();
    Ok(report_metrics(
        &probs,
        &labels,
        model.spec.head.known_classes,
        cfg,
    )?)
}

fn embeddings_matrix(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    indices: &[usize],
) -> Array2<f64> {
    let d = model.spec.backbone.embed_dim;
    let mut out = Array2::zeros((indices.len(), d));
    for (chunk_no, chunk) in indices.chunks(256).enumerate() {
        let mut tape = Tape::new();
        let nodes = ParamNodes::from_params(&mut tape, params);
        let x = tape.constant(dataset.features_matrix(chunk));
        let z = model
            .embed(&mut tape, &nodes, x)
            .expect("dataset width matches backbone input");
        for (r, row) in tape.value(z).rows().into_iter().enumerate() {
            out.row_mut(chunk_no * 256 + r).assign(&row);
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct FinalReport {
    pub config: RunConfig,
    pub metrics: MetricsReport,
    pub stage1_aborted: bool,
    pub stage2_aborted: bool,
    pub stage1_epochs_completed: usize,
    pub stage2_epochs_completed: usize,
    pub final_pseudo_labels: usize,
}

struct Timeline {
    start: Instant,
    deterministic: bool,
    rows: Vec<(String, u128)>,
}

impl Timeline {
    fn new(deterministic: bool) -> Self {
        Timeline { start: Instant::now(), deterministic, rows: Vec::new() }
    }

    fn mark(&mut self, phase: &str) {
        let ms = if self.deterministic {
            0
        } else {
            self.start.elapsed().as_millis()
        };
        self.rows.push((phase.to_string(), ms));
        self.start = Instant::now();
    }

    fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "phase,elapsed_ms")?;
        for (phase, ms) in &self.rows {
            writeln!(w, "{phase},{ms}")?;
        }
        w.flush()
    }
}

/// The full pipeline: split, discovery stage, closed-world stage, final
/// evaluation. Writes split.json, metrics.jsonl, pseudolabels.jsonl,
/// embeddings.csv, timeline.csv, per-stage checkpoints, and report.json
/// into the output directory. With `deterministic`, every artifact except
/// nothing at all is byte-reproducible (wall-clock entries are zeroed).
pub fn run_pipeline(
    cfg: &RunConfig,
    out: &Path,
    deterministic: bool,
) -> Result<FinalReport, RunnerError> {
    std::fs::create_dir_all(out)?;
    let mut timeline = Timeline::new(deterministic);

    let dataset = load_dataset(&cfg.data)?;
    let split = make_split(&dataset, &cfg.split)?;
    let manifest = SplitManifest::from_split(&split);
    serde_json::to_writer_pretty(
        &mut BufWriter::new(File::create(out.join("split.json"))?),
        &manifest,
    )?;
    timeline.mark("split");

    let model = Model::new(cfg.model.clone());
    let init = model.init_params(cfg.seed);
    let arch = serde_json::to_value(&cfg.model)?;

    let mut metrics_file = BufWriter::new(File::create(out.join("metrics.jsonl"))?);

    let stage1 = train_stage1(
        &model,
        &init,
        &dataset,
        &split,
        &cfg.stage1,
        &cfg.augment,
        cfg.seed,
    )?;
    for rec in &stage1.history {
        let mut line = serde_json::to_value(rec)?;
        line["record"] = serde_json::json!("stage1");
        serde_json::to_writer(&mut metrics_file, &line)?;
        writeln!(metrics_file)?;
    }
    checkpoint::save(
        &out.join("checkpoint-stage1.bin"),
        &stage1.params,
        None,
        arch.clone(),
    )?;
    timeline.mark("stage1");

    let stage2 = train_stage2(
        &model,
        &stage1.params,
        &dataset,
        &split,
        &cfg.stage2,
        &cfg.augment,
    )?;
    for rec in &stage2.history {
        let mut line = serde_json::to_value(rec)?;
        line["record"] = serde_json::json!("stage2");
        serde_json::to_writer(&mut metrics_file, &line)?;
        writeln!(metrics_file)?;
    }
    checkpoint::save(
        &out.join("checkpoint-stage2.bin"),
        &stage2.params,
        None,
        arch,
    )?;
    {
        let mut pl_file = BufWriter::new(File::create(out.join("pseudolabels.jsonl"))?);
        for (event, selection) in stage2.regen_events.iter().zip(&stage2.selections) {
            append_manifest(&mut pl_file, event.epoch, selection)?;
        }
        pl_file.flush()?;
    }
    timeline.mark("stage2");

    // embeddings of every sample in the split, labeled first
    let mut ids: Vec<usize> = split.labeled.iter().map(|&(i, _)| i).collect();
    ids.extend(&split.unlabeled);
    let emb = embeddings_matrix(&model, &stage2.params, &dataset, &ids);
    {
        let mut w = BufWriter::new(File::create(out.join("embeddings.csv"))?);
        let d = emb.ncols();
        let header: Vec<String> = (0..d).map(|k| format!("z{k}")).collect();
        writeln!(w, "sample_id,{}", header.join(","))?;
        for (r, &id) in ids.iter().enumerate() {
            let row: Vec<String> = emb.row(r).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{id},{}", row.join(","))?;
        }
        w.flush()?;
    }

    let metrics = evaluate(&model, &stage2.params, &dataset, &split, &cfg.metrics)?;
    let mut line = serde_json::to_value(&metrics)?;
    line["record"] = serde_json::json!("final");
    serde_json::to_writer(&mut metrics_file, &line)?;
    writeln!(metrics_file)?;
    metrics_file.flush()?;
    timeline.mark("eval");
    timeline.write(&out.join("timeline.csv"))?;

    let report = FinalReport {
        config: cfg.clone(),
        metrics,
        stage1_aborted: stage1.aborted,
        stage2_aborted: stage2.aborted,
        stage1_epochs_completed: stage1.history.len(),
        stage2_epochs_completed: stage2.history.len(),
        final_pseudo_labels: stage2
            .selections
            .last()
            .map_or(0, |s| s.entries.len()),
    };
    serde_json::to_writer_pretty(
        &mut BufWriter::new(File::create(out.join("report.json"))?),
        &report,
    )?;
    Ok(report)
}

/// Score the latest checkpoint in the output directory against the sealed
/// labels, regenerating the dataset and split from the config.
pub fn run_eval(cfg: &RunConfig, out: &Path) -> Result<MetricsReport, RunnerError> {
    let path2 = out.join("checkpoint-stage2.bin");
    let path1 = out.join("checkpoint-stage1.bin");
    let path = if path2.exists() {
        path2
    } else if path1.exists() {
        path1
    } else {
        return Err(RunnerError::MissingArtifact(
            "no checkpoint in output directory".into(),
        ));
    };
    let (params, _, _) = checkpoint::load(&path)?;
    let dataset = load_dataset(&cfg.data)?;
    let split = make_split(&dataset, &cfg.split)?;
    let model = Model::new(cfg.model.clone());
    evaluate(&model, &params, &dataset, &split, &cfg.metrics)
}

// ---------------------------------------------------------------------------
// Gradient-check suite

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Differentiation oracles runnable from the command line: reverse-mode
/// against central differences, the analytic toy hypergradient, the two
/// hypergradient modes against each other, and assignment against brute
/// force.
pub fn gradcheck_suite() -> Vec<CheckOutcome> {
    use crate::bilevel::{hypergrad, BilevelConfig};
    use crate::models::{BackboneSpec, HeadSpec, SimNetSpec};
    use crate::params::{finite_diff_grad, grad};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut out = Vec::new();
    let rel = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / (1e-4 + x.abs().max(y.abs())))
            .fold(0.0, f64::max)
    };

    // 1. full discovery loss against central differences
    {
        let model = Model::new(ModelSpec {
            backbone: BackboneSpec::mlp(3, vec![5], 4),
            head: HeadSpec { known_classes: 2, novel_classes: 2 },
            simnet: SimNetSpec { hidden: 4, normalize_embeddings: false },
        });
        let params = model.init_params(17);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = crate::data::TrainingBatch {
            labeled_weak: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            labels: vec![0, 1],
            unlabeled_weak: Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
            unlabeled_strong: Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
            unlabeled_ids: vec![0, 1, 2],
            unlabeled_empty: false,
        };
        let cfg = ObjectiveConfig::default();
        let f = |t: &mut Tape, n: &ParamNodes| nov_loss(t, &model, n, &batch, &cfg).unwrap().total;
        let (_, g) = grad(&f, &params).expect("gradient");
        let fd = finite_diff_grad(&f, &params, 1e-6);
        let err = rel(&g, &fd);
        out.push(CheckOutcome {
            name: "discovery-loss-vs-central-difference",
            passed: err < 1e-4,
            detail: format!("max relative error {err:.3e} (tolerance 1e-4)"),
        });
    }

    // 2. analytic toy hypergradient
    {
        let params = ParamVector::builder()
            .push("theta.x", 1, 1, vec![1.0])
            .push("omega.w", 1, 1, vec![2.0])
            .build();
        let f_nov = |t: &mut Tape, n: &ParamNodes| {
            let th = n.get("theta.x");
            let w = n.get("omega.w");
            let m = t.mul(th, w);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        };
        let f_outer = |t: &mut Tape, n: &ParamNodes| {
            let th = n.get("theta.x");
            let sq = t.mul(th, th);
            t.sum_all(sq)
        };
        let cfg = BilevelConfig {
            alpha_theta_phi: 0.1,
            hypergrad_mode: HypergradMode::ExactUnrolled,
            ..Default::default()
        };
        let h = hypergrad(&f_nov, &f_outer, &params, &cfg).expect("hypergradient");
        let wi = params.indices_with_prefix(&["omega."])[0];
        let err = (h.flat[wi] + 0.32).abs();
        out.push(CheckOutcome {
            name: "toy-hypergradient-analytic",
            passed: err < 1e-10,
            detail: format!("|{} - (-0.32)| = {err:.3e} (tolerance 1e-10)", h.flat[wi]),
        });
    }

    // 3. central-difference hypergradient against exact unrolling
    {
        let model = Model::new(ModelSpec {
            backbone: BackboneSpec::mlp(3, vec![4], 3),
            head: HeadSpec { known_classes: 2, novel_classes: 1 },
            simnet: SimNetSpec { hidden: 4, normalize_embeddings: false },
        });
        let params = model.init_params(23);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let batch = crate::data::TrainingBatch {
            labeled_weak: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            labels: vec![0, 1],
            unlabeled_weak: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            unlabeled_strong: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            unlabeled_ids: vec![0, 1],
            unlabeled_empty: false,
        };
        let ocfg = ObjectiveConfig::default();
        let f_nov =
            |t: &mut Tape, n: &ParamNodes| nov_loss(t, &model, n, &batch, &ocfg).unwrap().total;
        let labels = batch.labels.clone();
        let c_u = model.spec.head.total();
        let f_outer = |t: &mut Tape, n: &ParamNodes| {
            let x = t.constant(batch.labeled_weak.clone());
            let (_, _, probs) = model.forward(t, n, x).unwrap();
            let (l, _) = ce_loss(t, probs, &one_hot_rows(&labels, c_u));
            l
        };
        let exact_cfg = BilevelConfig {
            hypergrad_mode: HypergradMode::ExactUnrolled,
            ..Default::default()
        };
        let hvp_cfg = BilevelConfig {
            hypergrad_mode: HypergradMode::HvpCentralDifference,
            eps_scale: 1e-3,
            ..Default::default()
        };
        let exact = hypergrad(&f_nov, &f_outer, &params, &exact_cfg).expect("exact");
        let hvp = hypergrad(&f_nov, &f_outer, &params, &hvp_cfg).expect("hvp");
        let omega_idx = params.indices_with_prefix(&["omega."]);
        let ex: Vec<f64> = omega_idx.iter().map(|&i| exact.flat[i]).collect();
        let hv: Vec<f64> = omega_idx.iter().map(|&i| hvp.flat[i]).collect();
        let err = rel(&ex, &hv);
        out.push(CheckOutcome {
            name: "hvp-hypergradient-vs-unrolled",
            passed: err < 1e-3,
            detail: format!("max relative error {err:.3e} (tolerance 1e-3)"),
        });
    }

    // 4. assignment against brute force
    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let k = rng.gen_range(2..=5);
            let cost = Array2::from_shape_fn((k, k), |_| rng.gen_range(-3.0..3.0));
            let assign = crate::evalmetrics::hungarian_assign(&cost).expect("assignment");
            let got: f64 = assign
                .iter()
                .enumerate()
                .filter_map(|(i, j)| j.map(|j| cost[(i, j)]))
                .sum();
            let best = brute_force_assignment_cost(&cost);
            worst = worst.max((got - best).abs());
        }
        out.push(CheckOutcome {
            name: "assignment-vs-brute-force",
            passed: worst < 1e-9,
            detail: format!("max cost gap {worst:.3e} (tolerance 1e-9)"),
        });
    }

    // 5. tape replay determinism
    {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.37));
        let e = tape.exp(x);
        let s = tape.softmax_rows(e);
        let m = tape.mean_all(s);
        let _ = tape.backward(m, &[x]);
        let ok = tape.replay_matches();
        out.push(CheckOutcome {
            name: "tape-replay-bit-identical",
            passed: ok,
            detail: "recomputed values match stored values exactly".into(),
        });
    }

    out
}

fn brute_force_assignment_cost(cost: &Array2<f64>) -> f64 {
    fn rec(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let (r, c) = cost.dim();
        if row == r {
            *best = best.min(acc);
            return;
        }
        for j in 0..c {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}
