//! Loss functions and the three training stages: backbone training
//! (DiceBCE + SRIP⁺ + mixup), self-distillation against the teacher's own
//! probabilities, and frozen-backbone FiLM-transfer fine-tuning.
//!
//! Every stage is a deterministic function of its config seed; shuffling,
//! mixup draws, dropout masks, and the per-step SRIP start vectors all come
//! from seeds derived with [`crate::rng::mix`].

use std::collections::BTreeMap;

use ndarray::{Array1, Array4, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datagen::{binarize_rain, Dataset, RainMask};
use crate::error::CoreError;
use crate::eval::{confusion, metrics_report, predict_with_threshold, ConfusionCounts, MetricsReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Backbone, BackboneConfig, BackwardScope, FiLMAdapterSet, Grads, RegionTag};
use crate::orthoreg;
use crate::rng;
use crate::Result;

const LBL_SHUFFLE: u64 = 0x5348;
const LBL_MIXUP: u64 = 0x4d49;
const LBL_DROPOUT: u64 = 0x4452;
const LBL_DISTILL: u64 = 0x4449;
const LBL_FINETUNE: u64 = 0x4654;

/// SRIP⁺ regularizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SripConfig {
    /// Penalty weight λ; 0 disables the term.
    pub lambda: f64,
    /// Power-method pairs per evaluation; 1 matches the training recipe.
    pub iters: usize,
    /// Base seed; each step redraws start vectors from `seed + step`.
    pub seed: u64,
}

impl Default for SripConfig {
    fn default() -> Self {
        SripConfig {
            lambda: 0.1,
            iters: 1,
            seed: 0,
        }
    }
}

/// Training configuration. Defaults follow the published hyperparameters
/// (AdamW, lr 1e-4, 90 epochs, patience 40, dropout 0.4, α = 1); the batch
/// size defaults to the desk-scale 8 with 56 as the documented full-scale
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Early-stop patience in epochs without validation CSI improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub mixup_alpha: f64,
    pub srip: SripConfig,
    /// Epochs for the self-distillation stage; 0 returns the teacher as-is.
    pub distill_epochs: usize,
    /// Epochs per (region, year) FiLM fine-tune; 0 returns identity adapters.
    pub finetune_epochs: usize,
    /// Optional goal CSI: backbone training returns early once validation
    /// CSI reaches this value.
    #[serde(default)]
    pub stop_at_csi: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            max_epochs: 90,
            patience: 40,
            batch_size: 8,
            mixup_alpha: 1.0,
            srip: SripConfig::default(),
            distill_epochs: 30,
            finetune_epochs: 20,
            stop_at_csi: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::invalid("learning_rate must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(CoreError::invalid(format!(
                "patience {} must not exceed max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.mixup_alpha <= 0.0 {
            return Err(CoreError::invalid("mixup_alpha must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch_size must be >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// One supervised sample: input, binary target `[1][T_out][H][W]`, tag.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub x: Array4<f32>,
    pub target: Array4<f32>,
    pub tag: RegionTag,
}

pub type LabeledSet = Vec<LabeledSample>;

/// One unsupervised sample for the distillation stage; ground-truth rain
/// masks cannot pass through this type, which enforces the stage isolation.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub x: Array4<f32>,
    pub tag: RegionTag,
}

pub type UnlabeledSet = Vec<UnlabeledSample>;

/// Builds a supervised set from a dataset, binarizing rain rates with the
/// manifest threshold.
pub fn labeled_from_dataset(dataset: &Dataset) -> Result<LabeledSet> {
    let r = dataset.manifest.num_regions as usize;
    dataset
        .samples
        .iter()
        .map(|s| {
            let mask = binarize_rain(&s.rates, dataset.manifest.rain_threshold)?;
            let (t, h, w) = mask.mask.dim();
            let target = mask
                .mask
                .mapv(f32::from)
                .into_shape_with_order((1, t, h, w))
                .expect("mask reshape");
            Ok(LabeledSample {
                x: s.x.values.clone(),
                target,
                tag: RegionTag::new(s.region_id, s.year, r)?,
            })
        })
        .collect()
}

/// Builds the unsupervised view of a dataset (inputs and tags only).
pub fn unlabeled_from_dataset(dataset: &Dataset) -> Result<UnlabeledSet> {
    let r = dataset.manifest.num_regions as usize;
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(UnlabeledSample {
                x: s.x.values.clone(),
                tag: RegionTag::new(s.region_id, s.year, r)?,
            })
        })
        .collect()
}

/// A training batch; targets are binary before mixup and convex mixtures
/// afterwards.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub xs: Vec<Array4<f32>>,
    pub ys: Vec<Array4<f32>>,
    pub tags: Vec<RegionTag>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// DiceBCE loss: mean binary cross-entropy plus soft Dice, pooled over the
/// whole tensor. Predictions are clamped to `[1e-7, 1 - 1e-7]` inside the
/// logs; smoothing constant 1.
pub fn dice_bce_loss(pred: &ArrayD<f32>, target: &ArrayD<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CoreError::invalid(format!(
            "dice_bce shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(CoreError::invalid("dice_bce on empty tensors"));
    }
    let (bce, dice) = dice_bce_terms(
        pred.iter().copied(),
        target.iter().copied(),
        pred.len(),
    );
    Ok(bce + dice)
}

const BCE_EPS: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;

fn dice_bce_terms(
    pred: impl Iterator<Item = f32>,
    target: impl Iterator<Item = f32>,
    n: usize,
) -> (f64, f64) {
    let mut bce_sum = 0.0f64;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut tsum = 0.0f64;
    for (p, t) in pred.zip(target) {
        let p = f64::from(p);
        let t = f64::from(t);
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        bce_sum -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let bce = bce_sum / n as f64;
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + tsum + DICE_SMOOTH);
    (bce, dice)
}

/// Batch DiceBCE with per-sample logits gradients. BCE is averaged over all
/// elements of the batch; Dice pools its sums across the batch.
fn batch_loss_and_dz(
    preds: &[Array4<f32>],
    targets: &[&Array4<f32>],
) -> (f64, f64, Vec<Array4<f32>>) {
    let n_total: usize = preds.iter().map(|p| p.len()).sum();
    let mut bce_sum = 0.0f64;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut tsum = 0.0f64;
    for (p, t) in preds.iter().zip(targets) {
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let pv = f64::from(pv);
            let tv = f64::from(tv);
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            bce_sum -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
            inter += pv * tv;
            psum += pv;
            tsum += tv;
        }
    }
    let bce = bce_sum / n_total as f64;
    let denom = psum + tsum + DICE_SMOOTH;
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;

    // d(bce)/dz = (p - t)/N; d(dice)/dp = (2·inter + s)/denom² - 2t/denom,
    // then through the sigmoid.
    let inv_n = 1.0 / n_total as f64;
    let dice_a = (2.0 * inter + DICE_SMOOTH) / (denom * denom);
    let dice_b = 2.0 / denom;
    let dzs = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let mut dz = Array4::<f32>::zeros(p.dim());
            for ((g, &pv), &tv) in dz.iter_mut().zip(p.iter()).zip(t.iter()) {
                let pv = f64::from(pv);
                let tv = f64::from(tv);
                let dbce_dz = (pv - tv) * inv_n;
                let ddice_dp = dice_a - dice_b * tv;
                let ddice_dz = ddice_dp * pv * (1.0 - pv);
                *g = (dbce_dz + ddice_dz) as f32;
            }
            dz
        })
        .collect();
    (bce, dice, dzs)
}

/// Mixup with an explicit λ and partner permutation. Tags stay on the
/// i-side. The λ ∈ {0, 1} endpoints reproduce the unmixed/permuted batch
/// bitwise.
pub fn mixup_with(batch: &TrainBatch, lambda: f64, perm: &[usize]) -> Result<TrainBatch> {
    let b = batch.len();
    if b == 0 {
        return Err(CoreError::invalid("mixup on an empty batch"));
    }
    if perm.len() != b {
        return Err(CoreError::invalid("mixup permutation length mismatch"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::invalid(format!("mixup lambda {lambda} outside [0,1]")));
    }
    if lambda == 1.0 {
        return Ok(batch.clone());
    }
    if lambda == 0.0 {
        return Ok(TrainBatch {
            xs: perm.iter().map(|&j| batch.xs[j].clone()).collect(),
            ys: perm.iter().map(|&j| batch.ys[j].clone()).collect(),
            tags: batch.tags.clone(),
        });
    }
    let mix = |a: &Array4<f32>, b_: &Array4<f32>| {
        let mut out = a.clone();
        for (o, (&av, &bv)) in out.iter_mut().zip(a.iter().zip(b_.iter())) {
            *o = (lambda * f64::from(av) + (1.0 - lambda) * f64::from(bv)) as f32;
        }
        out
    };
    Ok(TrainBatch {
        xs: (0..b).map(|i| mix(&batch.xs[i], &batch.xs[perm[i]])).collect(),
        ys: (0..b).map(|i| mix(&batch.ys[i], &batch.ys[perm[i]])).collect(),
        tags: batch.tags.clone(),
    })
}

/// A mixed batch along with the draw that produced it.
#[derive(Debug, Clone)]
pub struct MixupOutcome {
    pub batch: TrainBatch,
    pub lambda: f64,
    pub partner: Vec<usize>,
}

/// Samples one λ ~ Beta(α, α) per batch plus a partner permutation and
/// applies [`mixup_with`].
pub fn mixup_batch(batch: &TrainBatch, alpha: f64, rng: &mut ChaCha8Rng) -> Result<MixupOutcome> {
    if alpha <= 0.0 {
        return Err(CoreError::invalid("mixup alpha must be positive"));
    }
    if batch.is_empty() {
        return Err(CoreError::invalid("mixup on an empty batch"));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| CoreError::invalid(format!("beta distribution: {e}")))?;
    let lambda = beta.sample(rng);
    let partner = random_permutation(batch.len(), rng);
    let batch = mixup_with(batch, lambda, &partner)?;
    Ok(MixupOutcome {
        batch,
        lambda,
        partner,
    })
}

fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_param(&mut self, name: &str, mut view: ndarray::ArrayViewMutD<f32>, grad: &ArrayD<f32>) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        let wd = self.weight_decay as f32;
        for ((p, g), (mi, vi)) in view
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / bc1 as f32;
            let vhat = *vi / bc2 as f32;
            *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
        }
    }
}

/// One row of the line-oriented training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_csi: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_iou: Option<f64>,
    pub srip_term: f64,
}

/// Renders the training log CSV
/// (`epoch,train_loss,val_CSI,val_F1,val_IoU,srip_term`).
pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let fmt = |m: Option<f64>| m.map_or("NA".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from("epoch,train_loss,val_CSI,val_F1,val_IoU,srip_term\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{},{},{:.6}\n",
            r.epoch,
            r.train_loss,
            fmt(r.val_csi),
            fmt(r.val_f1),
            fmt(r.val_iou),
            r.srip_term
        ));
    }
    out
}

/// A trained checkpoint plus its epoch-by-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Pooled confusion counts of a model over a labeled set at a threshold.
pub fn evaluate_counts(
    backbone: &Backbone,
    adapters: Option<&FiLMAdapterSet>,
    set: &[LabeledSample],
    threshold: f64,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for sample in set {
        let probs = backbone.forward(&sample.x, &sample.tag, adapters)?;
        let pred = predict_with_threshold(&probs, threshold)?;
        let truth = target_mask(&sample.target)?;
        counts = counts + confusion(&pred, &truth)?;
    }
    Ok(counts)
}

/// Metric report of a model over a labeled set at a threshold.
pub fn evaluate_set(
    backbone: &Backbone,
    adapters: Option<&FiLMAdapterSet>,
    set: &[LabeledSample],
    threshold: f64,
) -> Result<MetricsReport> {
    Ok(metrics_report(&evaluate_counts(backbone, adapters, set, threshold)?))
}

fn target_mask(target: &Array4<f32>) -> Result<RainMask> {
    let t = target.index_axis(Axis(0), 0);
    RainMask::new(t.mapv(|v| u8::from(v >= 0.5)))
}

/// Adds the SRIP⁺ penalty and its kernel gradients for the current step.
fn apply_srip(
    backbone: &Backbone,
    srip: &SripConfig,
    step: u64,
    grads: &mut Grads,
) -> Result<f64> {
    if srip.lambda == 0.0 {
        return Ok(0.0);
    }
    let kernels = backbone.ortho_kernels();
    let names: Vec<String> = kernels.iter().map(|(n, _)| n.clone()).collect();
    let mats: Vec<_> = kernels
        .iter()
        .map(|(_, view)| orthoreg::kernel_as_matrix(view).map(|k| k.matrix().clone()))
        .collect::<Result<_>>()?;
    let (loss, kernel_grads) = orthoreg::srip_penalty_with_grads(
        &mats,
        srip.lambda,
        srip.iters.max(1),
        srip.seed.wrapping_add(step),
    )?;
    for (name, g) in names.iter().zip(kernel_grads) {
        let (out_c, in_c) = g.dim();
        let g5 = g
            .mapv(|v| v as f32)
            .into_shape_with_order((out_c, in_c, 1, 1, 1))
            .expect("kernel grad reshape");
        grads.accumulate(name, g5.into_dyn());
    }
    Ok(loss)
}

struct EpochStats {
    loss_sum: f64,
    srip_sum: f64,
    steps: usize,
}

/// Runs one epoch of supervised batches; shared by backbone training and
/// distillation (which passes soft targets and disables mixup).
#[allow(clippy::too_many_arguments)]
fn supervised_epoch(
    backbone: &mut Backbone,
    opt: &mut AdamW,
    samples: &[(&Array4<f32>, &Array4<f32>, &RegionTag)],
    cfg: &TrainConfig,
    epoch: usize,
    use_mixup: bool,
    stage_label: u64,
    global_step: &mut u64,
) -> Result<EpochStats> {
    use rand::Rng;
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::rng_for(cfg.seed, &[stage_label, LBL_SHUFFLE, epoch as u64]);
    for i in (1..n).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut stats = EpochStats {
        loss_sum: 0.0,
        srip_sum: 0.0,
        steps: 0,
    };
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch = TrainBatch {
            xs: chunk.iter().map(|&i| samples[i].0.clone()).collect(),
            ys: chunk.iter().map(|&i| samples[i].1.clone()).collect(),
            tags: chunk.iter().map(|&i| samples[i].2.clone()).collect(),
        };
        let batch = if use_mixup {
            let mut mix_rng =
                rng::rng_for(cfg.seed, &[stage_label, LBL_MIXUP, epoch as u64, step as u64]);
            mixup_batch(&batch, cfg.mixup_alpha, &mut mix_rng)?.batch
        } else {
            batch
        };

        // Forward every sample, keeping caches for the backward pass.
        let mut preds = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let mut drop_rng = rng::rng_for(
                cfg.seed,
                &[stage_label, LBL_DROPOUT, epoch as u64, step as u64, i as u64],
            );
            let (p, cache) =
                backbone.forward_train(&batch.xs[i], &batch.tags[i], None, Some(&mut drop_rng))?;
            preds.push(p);
            caches.push(cache);
        }

        let targets: Vec<&Array4<f32>> = batch.ys.iter().collect();
        let (bce, dice, dzs) = batch_loss_and_dz(&preds, &targets);

        let mut grads = Grads::default();
        for (cache, dz) in caches.iter().zip(&dzs) {
            backbone.backward(cache, dz, BackwardScope::Full, &mut grads, None);
        }
        let srip_term = apply_srip(backbone, &cfg.srip, *global_step, &mut grads)?;
        let loss = bce + dice + srip_term;
        if !loss.is_finite() {
            return Err(CoreError::Diverged {
                context: format!("epoch {epoch} step {step}"),
            });
        }

        opt.begin_step();
        backbone.visit_params_mut(&mut |name, view| {
            if let Some(g) = grads.get(name) {
                opt.step_param(name, view, g);
            }
        });

        stats.loss_sum += loss;
        stats.srip_sum += srip_term;
        stats.steps += 1;
        *global_step += 1;
    }
    Ok(stats)
}

/// Stage 1: trains the backbone with DiceBCE + SRIP⁺ and per-batch mixup,
/// early-stopping on validation CSI at threshold 0.5.
///
/// An empty validation set disables early stopping and returns the final
/// epoch. Deterministic in `cfg.seed`.
pub fn train_backbone(
    model_cfg: &BackboneConfig,
    cfg: &TrainConfig,
    num_regions: usize,
    train: &LabeledSet,
    val: &LabeledSet,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::invalid("training set is empty"));
    }
    let mut backbone = Backbone::build(model_cfg, num_regions, cfg.seed)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(f64, Backbone, usize)> = None;
    let mut since_best = 0usize;
    let mut global_step = 0u64;
    let mut final_epoch = 0usize;

    for epoch in 0..cfg.max_epochs {
        final_epoch = epoch;
        let samples: Vec<_> = train.iter().map(|s| (&s.x, &s.target, &s.tag)).collect();
        let stats = supervised_epoch(
            &mut backbone,
            &mut opt,
            &samples,
            cfg,
            epoch,
            true,
            0,
            &mut global_step,
        )?;
        let steps = stats.steps.max(1) as f64;

        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate_set(&backbone, None, val, 0.5)?)
        };
        log.push(TrainLogRow {
            epoch,
            train_loss: stats.loss_sum / steps,
            val_csi: report.as_ref().and_then(|r| r.csi),
            val_f1: report.as_ref().and_then(|r| r.f1),
            val_iou: report.as_ref().and_then(|r| r.iou),
            srip_term: stats.srip_sum / steps,
        });

        if let Some(report) = report {
            let csi = report.csi.unwrap_or(f64::NEG_INFINITY);
            let improved = match &best {
                None => true,
                Some((best_csi, _, _)) => csi > *best_csi,
            };
            if improved {
                best = Some((csi, backbone.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            if matches!(cfg.stop_at_csi, Some(goal) if csi >= goal) {
                break;
            }
        }
    }

    let (best_csi, best_backbone, best_epoch) = match best {
        Some((csi, bb, epoch)) => (
            if csi.is_finite() { Some(csi) } else { None },
            bb,
            epoch,
        ),
        None => (None, backbone, final_epoch),
    };
    let mut checkpoint = Checkpoint::new(best_backbone, cfg.clone());
    checkpoint.epoch = best_epoch;
    checkpoint.best_val_csi = best_csi;
    Ok(TrainOutcome { checkpoint, log })
}

/// Stage 2: self-distillation. The student starts from the teacher weights
/// and trains against the teacher's probabilities; no ground-truth masks
/// enter this stage (the input type has none) and mixup is off. The teacher
/// is never modified.
pub fn self_distill(
    teacher: &Checkpoint,
    cfg: &TrainConfig,
    train: &UnlabeledSet,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.distill_epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: teacher.clone(),
            log: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(CoreError::invalid("distillation set is empty"));
    }

    // Teacher soft targets, computed once in eval mode.
    let soft: Vec<Array4<f32>> = train
        .iter()
        .map(|s| teacher.backbone.forward(&s.x, &s.tag, None))
        .collect::<Result<_>>()?;

    let mut student = teacher.backbone.clone();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..cfg.distill_epochs {
        let samples: Vec<_> = train
            .iter()
            .zip(&soft)
            .map(|(s, y)| (&s.x, y, &s.tag))
            .collect();
        let stats = supervised_epoch(
            &mut student,
            &mut opt,
            &samples,
            cfg,
            epoch,
            false,
            LBL_DISTILL,
            &mut global_step,
        )?;
        let steps = stats.steps.max(1) as f64;
        log.push(TrainLogRow {
            epoch,
            train_loss: stats.loss_sum / steps,
            val_csi: None,
            val_f1: None,
            val_iou: None,
            srip_term: stats.srip_sum / steps,
        });
    }

    let mut checkpoint = Checkpoint::new(student, cfg.clone());
    checkpoint.epoch = cfg.distill_epochs.saturating_sub(1);
    checkpoint.adapters = teacher.adapters.clone();
    Ok(TrainOutcome { checkpoint, log })
}

/// Stage 3: FiLM-transfer fine-tuning for one (region, year) pair. Only the
/// per-level `(γ_f, β_f)` adapters receive updates; backbone parameters are
/// never written (the backbone is only borrowed).
pub fn film_finetune(
    checkpoint: &Checkpoint,
    region_id: u32,
    year: i32,
    region_set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<FiLMAdapterSet> {
    cfg.validate()?;
    if region_set.is_empty() {
        return Err(CoreError::invalid(format!(
            "fine-tune set for region {region_id} year {year} is empty"
        )));
    }
    for s in region_set {
        if s.tag.region_id != region_id || s.tag.year != year {
            return Err(CoreError::invalid(format!(
                "fine-tune set contains tag ({}, {}), expected ({region_id}, {year})",
                s.tag.region_id, s.tag.year
            )));
        }
    }
    let backbone = &checkpoint.backbone;
    let cfg_model = &backbone.config;
    let mut adapters = FiLMAdapterSet::identity(cfg_model, region_id, year);
    if cfg.finetune_epochs == 0 {
        return Ok(adapters);
    }

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    use rand::Rng;
    for epoch in 0..cfg.finetune_epochs {
        let n = region_set.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::rng_for(
            cfg.seed,
            &[LBL_FINETUNE, LBL_SHUFFLE, u64::from(region_id), year as u64, epoch as u64],
        );
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut preds = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &region_set[i];
                let (p, cache) = backbone.forward_train(&s.x, &s.tag, Some(&adapters), None)?;
                preds.push(p);
                caches.push(cache);
            }
            let targets: Vec<&Array4<f32>> =
                chunk.iter().map(|&i| &region_set[i].target).collect();
            let (bce, dice, dzs) = batch_loss_and_dz(&preds, &targets);
            if !(bce + dice).is_finite() {
                return Err(CoreError::Diverged {
                    context: format!("finetune region {region_id} year {year} epoch {epoch}"),
                });
            }
            let mut unused = Grads::default();
            let mut ag: Vec<(Array1<f32>, Array1<f32>)> = (0..cfg_model.levels)
                .map(|l| {
                    let c = cfg_model.channels_at(l);
                    (Array1::zeros(c), Array1::zeros(c))
                })
                .collect();
            for (cache, dz) in caches.iter().zip(&dzs) {
                backbone.backward(cache, dz, BackwardScope::AdaptersOnly, &mut unused, Some(&mut ag));
            }
            opt.begin_step();
            for (l, (dg, db)) in ag.into_iter().enumerate() {
                opt.step_param(
                    &format!("film.level{l}.gamma"),
                    adapters.levels[l].gamma.view_mut().into_dyn(),
                    &dg.into_dyn(),
                );
                opt.step_param(
                    &format!("film.level{l}.beta"),
                    adapters.levels[l].beta.view_mut().into_dyn(),
                    &db.into_dyn(),
                );
            }
        }
    }
    Ok(adapters)
}
