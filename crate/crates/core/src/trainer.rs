//! SGD training: batch sampling, triplet generation, loss assembly, the
//! step-decay learning-rate schedule and the loss trace.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hashcode::{category_triplet_loss, shared_labels, weighted_triplet_loss, InstanceRep};
use crate::labelprob::classification_loss;
use crate::model::{Forward, ModelKind, ModelParams, ModelShape, Upstream};
use crate::numerics::SeededRng;
use crate::synthdata::{LabelVector, Record};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Learning rate drops tenfold after this many passes over the training split.
    pub lr_drop_epochs: usize,
    pub cls_weight: f64,
    pub cat_weight: f64,
    pub sem_weight: f64,
    /// Upper bound on weighted triplets per batch.
    pub triplet_cap: usize,
    /// Triplets sampled per category per batch.
    pub category_triplets: usize,
    pub margin: f64,
    /// Train the semantic head jointly; without it the head stays at init.
    pub semantic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            batch_size: 32,
            iterations: 15_000,
            lr_drop_epochs: 30,
            cls_weight: 1.0,
            cat_weight: 1.0,
            sem_weight: 1.0,
            triplet_cap: 256,
            category_triplets: 32,
            margin: 1.0,
            semantic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::Config {
                path: format!("train.{field}"),
                msg,
            })
        };
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr", format!("must be finite and non-negative, got {}", self.base_lr));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("lr_drop_epochs", self.lr_drop_epochs),
            ("triplet_cap", self.triplet_cap),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        for (field, v) in [
            ("cls_weight", self.cls_weight),
            ("cat_weight", self.cat_weight),
            ("sem_weight", self.sem_weight),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, format!("must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// `base_lr * 10^-floor(epoch / drop_every)`.
pub fn learning_rate(base_lr: f64, epoch: usize, drop_every: usize) -> f64 {
    base_lr * 10f64.powi(-((epoch / drop_every) as i32))
}

/// Completed passes over a split of `train_len` images after `iteration` steps.
pub fn epoch_of(iteration: usize, batch_size: usize, train_len: usize) -> usize {
    iteration * batch_size / train_len.max(1)
}

/// Every ordered `(I1, I2, I3)` over the batch (positions, repeats allowed)
/// with `SharedLabels(I1, I2) > SharedLabels(I1, I3)`, in lexicographic order.
pub fn generate_triplets(labels: &[&LabelVector]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let shared: Vec<Vec<usize>> = (0..n)
        .map(|a| (0..n).map(|b| shared_labels(labels[a], labels[b]).unwrap_or(0)).collect())
        .collect();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if shared[a][p] > shared[a][q] {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// [`generate_triplets`] subsampled uniformly to at most `cap`, keeping
/// enumeration order.
pub fn generate_triplets_capped(labels: &[&LabelVector], cap: usize, rng: &mut SeededRng) -> Vec<(usize, usize, usize)> {
    let all = generate_triplets(labels);
    if all.len() <= cap {
        return all;
    }
    let mut keep = rng.sample_indices(all.len(), cap);
    keep.sort_unstable();
    keep.into_iter().map(|k| all[k]).collect()
}

/// `count` random `(I, I+, I-)` for category `j`: anchor and positive are
/// distinct images holding `j`, the negative lacks it. Empty when the batch
/// cannot supply such a triple.
pub fn sample_category_triplets(
    labels: &[&LabelVector],
    j: usize,
    count: usize,
    rng: &mut SeededRng,
) -> Vec<(usize, usize, usize)> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i].has(j));
    if pos.len() < 2 || neg.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let a = rng.below(pos.len());
            let mut p = rng.below(pos.len() - 1);
            if p >= a {
                p += 1;
            }
            (pos[a], pos[p], neg[rng.below(neg.len())])
        })
        .collect()
}

/// Sampled work for one step, in batch positions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub batch: Vec<usize>,
    /// `(category, anchor, positive, negative)`.
    pub category_triplets: Vec<(usize, usize, usize, usize)>,
    pub semantic_triplets: Vec<(usize, usize, usize)>,
}

pub fn plan_step(
    train: &[Record],
    kind: ModelKind,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> StepPlan {
    let batch = rng.sample_indices(train.len(), cfg.batch_size.min(train.len()));
    let labels: Vec<&LabelVector> = batch.iter().map(|&i| &train[i].scene.labels).collect();
    let c = labels.first().map_or(0, |l| l.len());
    let mut category_triplets = Vec::new();
    if cfg.cat_weight > 0.0 {
        for j in 0..c {
            for (a, p, n) in sample_category_triplets(&labels, j, cfg.category_triplets, rng) {
                category_triplets.push((j, a, p, n));
            }
        }
    }
    let semantic_triplets = if kind == ModelKind::Full && cfg.semantic && cfg.sem_weight > 0.0 {
        generate_triplets_capped(&labels, cfg.triplet_cap, rng)
    } else {
        Vec::new()
    };
    StepPlan {
        batch,
        category_triplets,
        semantic_triplets,
    }
}

/// Mean loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cat: f64,
    pub sem: f64,
}

impl LossBreakdown {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.cls_weight * self.cls + cfg.cat_weight * self.cat + cfg.sem_weight * self.sem
    }

    fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.cat.is_finite() && self.sem.is_finite()
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Loss and parameter gradient of one planned step. Every component is
/// averaged over the terms that contribute to it.
pub fn step_loss_and_grad(
    params: &ModelParams,
    train: &[Record],
    plan: &StepPlan,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(LossBreakdown, ModelParams)> {
    let records: Vec<&Record> = plan.batch.iter().map(|&i| &train[i]).collect();
    let forwards: Vec<Forward> = exec
        .map(&records, |r| params.forward(r))
        .into_iter()
        .collect::<Result<_>>()?;
    let shape: &ModelShape = &params.shape;
    let mut ups: Vec<Upstream> = (0..records.len()).map(|_| Upstream::zeros(shape)).collect();
    let mut losses = LossBreakdown::default();

    if params.kind == ModelKind::Full && cfg.cls_weight > 0.0 {
        let eligible: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].scene.labels.count() > 0)
            .collect();
        let scale = 1.0 / eligible.len().max(1) as f64;
        for &i in &eligible {
            let (loss, grad) = classification_loss(&forwards[i].p, &records[i].scene.labels)?;
            losses.cls += scale * loss;
            ups[i].grad_m = Some(grad.iter().map(|g| g * scale * cfg.cls_weight).collect());
        }
    }

    if !plan.category_triplets.is_empty() {
        let scale = 1.0 / plan.category_triplets.len() as f64;
        for &(j, a, p, n) in &plan.category_triplets {
            let (loss, [ga, gp, gn]) =
                category_triplet_loss(&forwards[a].f, &forwards[p].f, &forwards[n].f, j, cfg.margin)?;
            losses.cat += scale * loss;
            let w = scale * cfg.cat_weight;
            for (idx, g) in [(a, &ga), (p, &gp), (n, &gn)] {
                let grp: &InstanceRep = g;
                add_into(&mut ups[idx].df.group_mut(j)[..], grp.group(j), w);
            }
        }
    }

    if !plan.semantic_triplets.is_empty() {
        let scale = 1.0 / plan.semantic_triplets.len() as f64;
        let q = shape.semantic_bits;
        for &(a, p, n) in &plan.semantic_triplets {
            let la = &records[a].scene.labels;
            let sim_pos = shared_labels(la, &records[p].scene.labels)?;
            let sim_neg = shared_labels(la, &records[n].scene.labels)?;
            let s = |i: usize| forwards[i].s.as_deref().ok_or_else(|| Error::Invalid("model has no semantic head".into()));
            let out = weighted_triplet_loss(s(a)?, s(p)?, s(n)?, sim_pos, sim_neg, cfg.margin)?;
            losses.sem += scale * out.loss;
            let w = scale * cfg.sem_weight;
            for (idx, g) in [(a, &out.grad_anchor), (p, &out.grad_pos), (n, &out.grad_neg)] {
                add_into(ups[idx].ds.get_or_insert_with(|| vec![0.0; q]), g, w);
            }
        }
    }

    let idx: Vec<usize> = (0..records.len()).collect();
    let per_image: Vec<Option<ModelParams>> = exec
        .map(&idx, |&i| {
            if ups[i].is_zero() {
                return Ok(None);
            }
            let mut g = params.zeros_like();
            params.backward(&forwards[i], &ups[i], &mut g)?;
            Ok(Some(g))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for g in per_image.iter().flatten() {
        grads.add_scaled(1.0, g);
    }
    Ok((losses, grads))
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub total: f64,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {:e}, {:.6}, {:.6}, {:.6}, {:.6}",
            self.iteration, self.lr, self.losses.cls, self.losses.cat, self.losses.sem, self.total
        )
    }
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut text = String::from("iter, lr, loss_cls, loss_cat, loss_sem, total\n");
    for row in trace {
        text.push_str(&row.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Plain SGD from `init`. Batches, triplets and sampling all draw from one
/// stream seeded by `seed`, so identical inputs give identical parameters.
pub fn train_from(
    init: ModelParams,
    train: &[Record],
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut params = init;
    params.check_shapes()?;
    let mut rng = SeededRng::for_stream(seed, 0x0074_7261_696e);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let epoch = epoch_of(it, cfg.batch_size.min(train.len()), train.len());
        let lr = learning_rate(cfg.base_lr, epoch, cfg.lr_drop_epochs);
        let plan = plan_step(train, params.kind, cfg, &mut rng);
        let (losses, grads) = step_loss_and_grad(&params, train, &plan, cfg, exec)?;
        let total = losses.total(cfg);
        if !losses.is_finite() || !total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("cls={} cat={} sem={}", losses.cls, losses.cat, losses.sem),
            });
        }
        if lr != 0.0 {
            params.add_scaled(-lr, &grads);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("non-finite parameters after update (cls={} cat={} sem={})", losses.cls, losses.cat, losses.sem),
                });
            }
        }
        if it % 250 == 0 {
            log::debug!("iter {it} lr {lr:e} total {total:.4}");
        }
        trace.push(TraceRow {
            iteration: it,
            lr,
            losses,
            total,
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Initializes a model of `kind` from `seed` and trains it.
pub fn train(
    kind: ModelKind,
    shape: ModelShape,
    train_split: &[Record],
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    let init = ModelParams::init(kind, shape, &mut SeededRng::for_stream(seed, 0x696e_6974))?;
    train_from(init, train_split, cfg, seed, exec)
}
