//! Closed-world training over the rebuilt labeled set: mixup supervised
//! cross-entropy plus a sharpened weak-to-strong consistency term, with the
//! pseudo-labeled portion regenerated every few epochs from the original
//! partition.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentConfig, BatchSampler, BatchSpec, Dataset, OpenWorldSplit, TrainingBatch};
use crate::models::Model;
use crate::objectives::ce_loss;
use crate::optim::{optimizer_step, OptimError, OptimizerState};
use crate::params::{flat_grad, ParamNodes, ParamVector};
use crate::pseudolabels::{
    gen_stage2_pl, rebuild_sets, topk_balance, BalanceReport, PlError, PseudoLabelSet,
};
use crate::tape::{DiffError, NodeId, Tape};

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Pl(#[from] PlError),
    #[error("bad config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Regenerate pseudo-labels every this many epochs (always at epoch 0).
    pub regen_every: usize,
    /// Sharpening temperature for the weak-view consistency targets.
    pub temperature: f64,
    /// Weak-view confidence needed before a sample enters the consistency
    /// term.
    pub mask_threshold: f64,
    /// Beta(a, a) parameter for the mixup coefficient.
    pub mixup_alpha: f64,
    pub consistency_weight: f64,
    /// Keep the discovery-stage classifier instead of reinitializing it.
    pub warm_start: bool,
    /// Optional cap on the per-class pseudo-label quota.
    pub balance_ceiling: Option<usize>,
    pub batch: BatchSpec,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 50,
            regen_every: 10,
            temperature: 0.4,
            mask_threshold: 0.5,
            mixup_alpha: 0.75,
            consistency_weight: 1.0,
            warm_start: false,
            balance_ceiling: None,
            batch: BatchSpec { labeled: 100, unlabeled: 100 },
            lr: 5e-4,
            seed: 0,
        }
    }
}

/// Convex combination of two sample/target batches with coefficient lam on
/// the first.
pub fn mixup(
    x1: &Array2<f64>,
    t1: &Array2<f64>,
    x2: &Array2<f64>,
    t2: &Array2<f64>,
    lam: f64,
) -> (Array2<f64>, Array2<f64>) {
    (
        x1 * lam + x2 * (1.0 - lam),
        t1 * lam + t2 * (1.0 - lam),
    )
}

/// Temperature sharpening of a probability row: p^(1/T), renormalized.
pub fn sharpen(row: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let powered: Vec<f64> = row.iter().map(|&p| p.max(0.0).powf(inv)).collect();
    let s: f64 = powered.iter().sum();
    if s == 0.0 {
        return vec![1.0 / row.len() as f64; row.len()];
    }
    powered.iter().map(|&p| p / s).collect()
}

fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (r, &l) in labels.iter().enumerate() {
        t[(r, l)] = 1.0;
    }
    t
}

pub struct UdaLoss {
    pub total: NodeId,
    pub sup: f64,
    pub cons: f64,
    pub n_masked: usize,
}

/// Deterministic graph-building part of the closed-world step, exposed for
/// gradient checking: supervised CE on a pre-mixed batch plus weighted CE of
/// strong-view predictions against fixed soft targets.
pub fn uda_loss(
    tape: &mut Tape,
    model: &Model,
    nodes: &ParamNodes,
    mixed_x: &Array2<f64>,
    mixed_t: &Array2<f64>,
    strong_sel: &Array2<f64>,
    targets_sel: &Array2<f64>,
    weight: f64,
) -> UdaLoss {
    let xm = tape.constant(mixed_x.clone());
    let (zm, _, probs_m) = model
        .forward(tape, nodes, xm)
        .expect("mixed batch width matches backbone input");
    let _ = zm;
    let (sup, _) = ce_loss(tape, probs_m, mixed_t);

    let n_masked = strong_sel.nrows();
    let cons = if n_masked == 0 {
        tape.scalar_const(0.0)
    } else {
        let xs = tape.constant(strong_sel.clone());
        let (_, _, probs_s) = model
            .forward(tape, nodes, xs)
            .expect("strong batch width matches backbone input");
        let (c, _) = ce_loss(tape, probs_s, targets_sel);
        c
    };
    let wc = tape.mul_scalar(cons, weight);
    let total = tape.add(sup, wc);
    UdaLoss {
        total,
        sup: tape.scalar(sup),
        cons: tape.scalar(cons),
        n_masked,
    }
}

/// One closed-world training objective on a batch: mixup the labeled side
/// against a shuffled copy of itself, and hold strong views of confidently
/// predicted unlabeled samples to their sharpened weak-view predictions.
pub fn uda_step(
    tape: &mut Tape,
    model: &Model,
    nodes: &ParamNodes,
    batch: &TrainingBatch,
    cfg: &Stage2Config,
    rng: &mut ChaCha8Rng,
) -> UdaLoss {
    let c_u = model.spec.head.total();
    let b_l = batch.labeled_weak.nrows();

    // mixup pairs the batch with a shuffled copy of itself; lam is shared
    // across the batch and kept >= 0.5 so each row stays closest to its own
    // label
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).expect("mixup alpha > 0");
    let lam_raw: f64 = beta.sample(rng);
    let lam = lam_raw.max(1.0 - lam_raw);
    let mut perm: Vec<usize> = (0..b_l).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let t1 = one_hot(&batch.labels, c_u);
    let mut x2 = Array2::zeros(batch.labeled_weak.dim());
    let mut t2 = Array2::zeros(t1.dim());
    for (r, &p) in perm.iter().enumerate() {
        x2.row_mut(r).assign(&batch.labeled_weak.row(p));
        t2.row_mut(r).assign(&t1.row(p));
    }
    let (mixed_x, mixed_t) = mixup(&batch.labeled_weak, &t1, &x2, &t2, lam);

    // weak-view predictions give detached consistency targets
    let b_u = batch.unlabeled_weak.nrows();
    let (strong_sel, targets_sel) = if b_u == 0 {
        (Array2::zeros((0, mixed_x.ncols())), Array2::zeros((0, c_u)))
    } else {
        let xw = tape.constant(batch.unlabeled_weak.clone());
        let (_, _, probs_w) = model
            .forward(tape, nodes, xw)
            .expect("weak batch width matches backbone input");
        let pw = tape.value(probs_w).clone();
        let mut rows = Vec::new();
        for r in 0..b_u {
            let row: Vec<f64> = pw.row(r).to_vec();
            let conf = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if conf >= cfg.mask_threshold {
                rows.push((r, sharpen(&row, cfg.temperature)));
            }
        }
        let mut xs = Array2::zeros((rows.len(), mixed_x.ncols()));
        let mut ts = Array2::zeros((rows.len(), c_u));
        for (i, (r, sh)) in rows.iter().enumerate() {
            xs.row_mut(i).assign(&batch.unlabeled_strong.row(*r));
            for (k, &v) in sh.iter().enumerate() {
                ts[(i, k)] = v;
            }
        }
        (xs, ts)
    };

    uda_loss(
        tape,
        model,
        nodes,
        &mixed_x,
        &mixed_t,
        &strong_sel,
        &targets_sel,
        cfg.consistency_weight,
    )
}

/// Model probabilities over the listed samples, in chunks, without
/// augmentation or gradient bookkeeping carried between chunks.
pub fn eval_probs(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    indices: &[usize],
) -> Array2<f64> {
    let c_u = model.spec.head.total();
    let mut out = Array2::zeros((indices.len(), c_u));
    for (chunk_no, chunk) in indices.chunks(256).enumerate() {
        let mut tape = Tape::new();
        let nodes = ParamNodes::from_params(&mut tape, params);
        let x = tape.constant(dataset.features_matrix(chunk));
        let (_, _, probs) = model
            .forward(&mut tape, &nodes, x)
            .expect("dataset width matches backbone input");
        let pv = tape.value(probs);
        for (r, row) in pv.rows().into_iter().enumerate() {
            out.row_mut(chunk_no * 256 + r).assign(&row);
        }
    }
    out
}

/// Fresh pseudo-label selection from the original partition using the
/// current model: novel-block argmax labels, balanced per class, then the
/// labeled/unlabeled sets rebuilt around the selection.
pub fn regenerate(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    split: &OpenWorldSplit,
    ceiling: Option<usize>,
) -> Result<(crate::pseudolabels::RebuiltSets, PseudoLabelSet, BalanceReport), Stage2Error> {
    let c_l = model.spec.head.known_classes;
    let c_u = model.spec.head.total();
    let probs = eval_probs(model, params, dataset, &split.unlabeled);
    let mut pl = gen_stage2_pl(&probs, c_l);
    pl.relabel_ids(&split.unlabeled);
    let (selected, report) = topk_balance(&pl, c_l, c_u, ceiling);
    let rebuilt = rebuild_sets(&split.labeled, &split.unlabeled, &selected)?;
    Ok((rebuilt, selected, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage2EpochRecord {
    pub epoch: usize,
    pub sup: f64,
    pub cons: f64,
    pub masked_fraction: f64,
    /// Pseudo-labels in the rebuilt labeled set during this epoch.
    pub n_selected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegenEvent {
    pub epoch: usize,
    pub n_selected: usize,
    pub per_class_quota: usize,
    pub empty_class: bool,
}

pub struct Stage2Result {
    pub params: ParamVector,
    pub history: Vec<Stage2EpochRecord>,
    pub regen_events: Vec<RegenEvent>,
    /// Selections in regeneration order, for manifest writing.
    pub selections: Vec<PseudoLabelSet>,
    /// Training diverged; `params` holds the last finite epoch checkpoint.
    pub aborted: bool,
}

pub fn train_stage2(
    model: &Model,
    start: &ParamVector,
    dataset: &Dataset,
    split: &OpenWorldSplit,
    cfg: &Stage2Config,
    aug: &AugmentConfig,
) -> Result<Stage2Result, Stage2Error> {
    if cfg.regen_every == 0 {
        return Err(Stage2Error::Config("regen_every must be at least 1"));
    }
    if cfg.epochs == 0 {
        return Err(Stage2Error::Config("epochs must be at least 1"));
    }
    // the first pseudo-label selection comes from the discovery-stage model;
    // the classifier is reinitialized only afterwards
    let mut params = start.clone();
    let mut opt = OptimizerState::adam(cfg.lr, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let omega_idx = params.indices_with_prefix(&["omega."]);

    let mut history = Vec::new();
    let mut regen_events = Vec::new();
    let mut selections = Vec::new();
    let mut current_sets = None;
    let mut n_selected = 0usize;
    let mut last_good = params.clone();

    for epoch in 0..cfg.epochs {
        if epoch % cfg.regen_every == 0 {
            let (rebuilt, selected, report) =
                regenerate(model, &params, dataset, split, cfg.balance_ceiling)?;
            n_selected = selected.entries.len();
            regen_events.push(RegenEvent {
                epoch,
                n_selected,
                per_class_quota: report.k,
                empty_class: report.empty_class,
            });
            selections.push(selected);
            current_sets = Some(rebuilt);
        }
        if epoch == 0 && !cfg.warm_start {
            params = model.reinit_theta_phi(&params, cfg.seed.wrapping_add(0x5eed));
            last_good = params.clone();
        }
        let sets = current_sets.as_ref().unwrap();
        let mut sampler = BatchSampler::new(
            dataset,
            sets.labeled.clone(),
            sets.unlabeled.clone(),
            cfg.batch,
            aug.clone(),
            cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9),
        );
        let mut sup_sum = 0.0;
        let mut cons_sum = 0.0;
        let mut masked = 0usize;
        let mut unlab_total = 0usize;
        let batches = sampler.batches_per_epoch();
        for _ in 0..batches {
            let batch = sampler.next_batch();
            let mut tape = Tape::new();
            let nodes = ParamNodes::from_params(&mut tape, &params);
            let loss = uda_step(&mut tape, &model, &nodes, &batch, cfg, &mut rng);
            let value = tape.scalar(loss.total);
            if !value.is_finite() {
                return Ok(Stage2Result {
                    params: last_good,
                    history,
                    regen_events,
                    selections,
                    aborted: true,
                });
            }
            let mut g = flat_grad(&mut tape, &nodes, &params, loss.total)?;
            for &i in &omega_idx {
                g[i] = 0.0;
            }
            optimizer_step(&mut opt, &mut params, &g)?;
            sup_sum += loss.sup;
            cons_sum += loss.cons;
            masked += loss.n_masked;
            unlab_total += batch.unlabeled_weak.nrows();
        }
        if !params.all_finite() {
            return Ok(Stage2Result {
                params: last_good,
                history,
                regen_events,
                selections,
                aborted: true,
            });
        }
        last_good = params.clone();
        history.push(Stage2EpochRecord {
            epoch,
            sup: sup_sum / batches as f64,
            cons: cons_sum / batches as f64,
            masked_fraction: if unlab_total == 0 {
                0.0
            } else {
                masked as f64 / unlab_total as f64
            },
            n_selected,
        });
    }

    Ok(Stage2Result {
        params,
        history,
        regen_events,
        selections,
        aborted: false,
    })
}
