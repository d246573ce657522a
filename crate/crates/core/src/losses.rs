//! Ground-truth decomposition and the training objective.
//!
//! Category `k` always occupies slot `k` (fixed matching). Absent categories
//! are padded with the not-exist label: their mask channels are ignored by
//! the mask losses, their classification terms are down-weighted, and their
//! attention maps are pulled towards the uniform distribution.

use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};
use crate::heads::{Aggregation, PredictionBundle};
use crate::segmap::{LabelMap, UNLABELED};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied inside the log of the attention cross-entropy.
pub const ATTN_LOG_FLOOR: f64 = 1e-12;

/// Smoothing constant in the dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal: f64,
    pub dice: f64,
    pub ce: f64,
    pub focal_ce: f64,
    pub attn: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Multiplier on not-exist terms of the classification and attention losses.
    pub null_weight: f64,
    /// Fraction of the schedule after which the attention loss is dropped.
    pub attn_detach_fraction: f64,
    /// Supervise absent categories' attention with the uniform target.
    pub null_attn_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal: 20.0,
            dice: 1.0,
            ce: 1.0,
            focal_ce: 2.0,
            attn: 0.1,
            alpha: 0.25,
            gamma: 2.0,
            null_weight: 0.1,
            attn_detach_fraction: 0.75,
            null_attn_target: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.focal,
            self.dice,
            self.ce,
            self.focal_ce,
            self.attn,
            self.null_weight,
            self.gamma,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PftError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PftError::Config("alpha must lie in [0, 1]".into()));
        }
        if !(self.attn_detach_fraction > 0.0 && self.attn_detach_fraction <= 1.0) {
            return Err(PftError::Config("attn_detach_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Whether the attention loss still contributes at `step` (0-based).
    pub fn attn_active(&self, step: usize, total_steps: usize) -> bool {
        (step as f64) < self.attn_detach_fraction * total_steps as f64
    }
}

/// `K` padded label-mask pairs; slot `k` holds category `k`'s mask when present.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Option<Vec<u8>>>,
}

pub fn decompose_gt(labels: &LabelMap, classes: usize) -> Result<GroundTruthSet> {
    let mut masks: Vec<Option<Vec<u8>>> = vec![None; classes];
    let n = labels.labels.len();
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == UNLABELED {
            continue;
        }
        let slot = masks
            .get_mut(l as usize)
            .ok_or_else(|| PftError::Data(format!("label {l} out of range for {classes} categories")))?;
        slot.get_or_insert_with(|| vec![0; n])[i] = 1;
    }
    Ok(GroundTruthSet {
        height: labels.height,
        width: labels.width,
        masks,
    })
}

impl GroundTruthSet {
    pub fn classes(&self) -> usize {
        self.masks.len()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.masks[k].is_some()
    }

    pub fn num_present(&self) -> usize {
        self.masks.iter().filter(|m| m.is_some()).count()
    }

    /// Overlay of all masks; pixels covered by none are unlabeled.
    pub fn reconstruct(&self) -> LabelMap {
        let mut out = LabelMap::filled(self.height, self.width, UNLABELED);
        for (k, m) in self.masks.iter().enumerate() {
            if let Some(m) = m {
                for (o, &v) in out.labels.iter_mut().zip(m) {
                    if v != 0 {
                        *o = k as u8;
                    }
                }
            }
        }
        out
    }

    fn stride_for(&self, h: usize, w: usize) -> Result<usize> {
        if h == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w.max(1)) || self.height / h != self.width / w {
            return Err(PftError::Shape {
                op: "ground_truth_stride",
                lhs: vec![self.height, self.width],
                rhs: vec![h, w],
            });
        }
        Ok(self.height / h)
    }

    /// Fraction of each `stride x stride` block covered by category `k`.
    pub fn area_downsample(&self, k: usize, stride: usize) -> Vec<f64> {
        let (h, w) = (self.height / stride, self.width / stride);
        let mut out = vec![0.0; h * w];
        if let Some(mask) = &self.masks[k] {
            let inv = 1.0 / (stride * stride) as f64;
            for y in 0..self.height {
                for x in 0..self.width {
                    if mask[y * self.width + x] != 0 {
                        out[(y / stride) * w + x / stride] += inv;
                    }
                }
            }
        }
        out
    }

    /// `[K * h * w]` binary targets: downsampled masks re-binarised at `> 0`.
    pub fn mask_targets(&self, stride: usize) -> Vec<f64> {
        (0..self.classes())
            .flat_map(|k| {
                self.area_downsample(k, stride)
                    .into_iter()
                    .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            })
            .collect()
    }

    /// Attention targets at `stride`: per category a distribution over the
    /// `h * w` cells plus the weight of its cross-entropy term.
    pub fn attention_targets(&self, stride: usize, null_weight: f64, null_target: bool) -> (Vec<f64>, Vec<f64>) {
        let n = (self.height / stride) * (self.width / stride);
        let uniform = 1.0 / n as f64;
        let mut dist = Vec::with_capacity(self.classes() * n);
        let mut weights = Vec::with_capacity(self.classes());
        for k in 0..self.classes() {
            let area = self.area_downsample(k, stride);
            let total: f64 = area.iter().sum();
            if self.is_present(k) {
                if total > 0.0 {
                    dist.extend(area.iter().map(|a| a / total));
                } else {
                    dist.extend(std::iter::repeat_n(uniform, n));
                }
                weights.push(1.0);
            } else {
                dist.extend(std::iter::repeat_n(uniform, n));
                weights.push(if null_target { null_weight } else { 0.0 });
            }
        }
        (dist, weights)
    }
}

/// A scalar loss on the tape. `degenerate` is set when no category was
/// present and the loss was defined as zero.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub value: Var,
    pub degenerate: bool,
}

fn zero_term(tape: &mut Tape<'_>) -> Term {
    Term {
        value: tape.constant(Tensor::scalar(0.0)),
        degenerate: true,
    }
}

fn spatial(tape: &Tape<'_>, v: Var, op: &'static str) -> Result<[usize; 3]> {
    crate::tensor::chw(tape.shape(v), op)
}

/// Sigmoid focal loss on present categories' mask logits `[K, h, w]`, mean
/// over pixels and present categories.
pub fn focal_loss(tape: &mut Tape<'_>, mask_logits: Var, gt: &GroundTruthSet, alpha: f64, gamma: f64) -> Result<Term> {
    let [k, h, w] = spatial(tape, mask_logits, "focal_loss")?;
    let present = gt.num_present();
    if present == 0 {
        log::warn!("focal loss: no present categories, loss is zero");
        return Ok(zero_term(tape));
    }
    let targets = gt.mask_targets(gt.stride_for(h, w)?);
    let hw = h * w;
    let norm = 1.0 / (present * hw) as f64;
    let mut sign = Vec::with_capacity(k * hw);
    let mut coef = Vec::with_capacity(k * hw);
    for (i, &t) in targets.iter().enumerate() {
        let on = gt.is_present(i / hw);
        sign.push(if t > 0.5 { 1.0 } else { -1.0 });
        let alpha_t = if t > 0.5 { alpha } else { 1.0 - alpha };
        coef.push(if on { -alpha_t * norm } else { 0.0 });
    }
    // z = logit signed towards the target, so p_t = sigmoid(z)
    let z = tape.mul_const(mask_logits, &sign)?;
    let nz = tape.neg(z);
    let one_minus = tape.sigmoid(nz);
    let modulator = tape.powf(one_minus, gamma);
    let log_pt = tape.log_sigmoid(z);
    let prod = tape.mul(modulator, log_pt)?;
    let weighted = tape.mul_const(prod, &coef)?;
    Ok(Term {
        value: tape.sum(weighted),
        degenerate: false,
    })
}

/// `1 - (2 sum(m t) + 1) / (sum m + sum t + 1)` averaged over present
/// categories; `mask_probs` is `[K, h, w]` in (0, 1).
pub fn dice_loss(tape: &mut Tape<'_>, mask_probs: Var, gt: &GroundTruthSet) -> Result<Term> {
    let [k, h, w] = spatial(tape, mask_probs, "dice_loss")?;
    let present = gt.num_present();
    if present == 0 {
        log::warn!("dice loss: no present categories, loss is zero");
        return Ok(zero_term(tape));
    }
    let targets = gt.mask_targets(gt.stride_for(h, w)?);
    let hw = h * w;
    let flat = tape.reshape(mask_probs, &[k, hw])?;
    let inter = tape.mul_const(flat, &targets)?;
    let inter = tape.sum_axis(inter, 1)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let target_area: Vec<f64> = targets.chunks(hw).map(|c| c.iter().sum::<f64>() + DICE_SMOOTH).collect();
    let area = tape.constant(Tensor::new(vec![k], target_area)?);
    let den = tape.sum_axis(flat, 1)?;
    let den = tape.add(den, area)?;
    let ratio = tape.div(num, den)?;
    let weights: Vec<f64> = (0..k)
        .map(|c| if gt.is_present(c) { -1.0 / present as f64 } else { 0.0 })
        .collect();
    let weighted = tape.mul_const(ratio, &weights)?;
    let s = tape.sum(weighted);
    Ok(Term {
        value: tape.add_scalar(s, 1.0),
        degenerate: false,
    })
}

/// Two-class cross-entropy on `[K, 2]` logits; not-exist targets weighted by
/// `null_weight`; mean over all `K`.
pub fn ce_loss(tape: &mut Tape<'_>, prob_logits: Var, gt: &GroundTruthSet, null_weight: f64) -> Result<Var> {
    let k = gt.classes();
    if tape.shape(prob_logits) != [k, 2] {
        return Err(PftError::Shape {
            op: "ce_loss",
            lhs: tape.shape(prob_logits).to_vec(),
            rhs: vec![k, 2],
        });
    }
    let logp = tape.log_softmax(prob_logits, 1)?;
    let mut coef = vec![0.0; 2 * k];
    for c in 0..k {
        if gt.is_present(c) {
            coef[2 * c] = -1.0 / k as f64;
        } else {
            coef[2 * c + 1] = -null_weight / k as f64;
        }
    }
    let picked = tape.mul_const(logp, &coef)?;
    Ok(tape.sum(picked))
}

/// Focal-style cross-entropy `-alpha_t (1 - p_t)^gamma log p_t` on each
/// scale's `[K, 2]` logits; mean over categories, then scales.
pub fn focal_ce_loss(tape: &mut Tape<'_>, prob_logits: &[Var], gt: &GroundTruthSet, alpha: f64, gamma: f64) -> Result<Var> {
    let k = gt.classes();
    let mut target = vec![0.0; 2 * k];
    let mut other = vec![0.0; 2 * k];
    let mut coef = vec![0.0; k];
    for c in 0..k {
        let (t, o, a) = if gt.is_present(c) { (0, 1, alpha) } else { (1, 0, 1.0 - alpha) };
        target[2 * c + t] = 1.0;
        other[2 * c + o] = 1.0;
        coef[c] = -a / (k * prob_logits.len()) as f64;
    }
    let mut total: Option<Var> = None;
    for &logits in prob_logits {
        let logp = tape.log_softmax(logits, 1)?;
        let probs = tape.softmax(logits, 1)?;
        let log_pt = tape.mul_const(logp, &target)?;
        let log_pt = tape.sum_axis(log_pt, 1)?;
        let q = tape.mul_const(probs, &other)?;
        let q = tape.sum_axis(q, 1)?;
        let modulator = tape.powf(q, gamma);
        let prod = tape.mul(modulator, log_pt)?;
        let weighted = tape.mul_const(prod, &coef)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    total.ok_or_else(|| PftError::Config("focal_ce_loss needs at least one scale".into()))
}

/// Cross-entropy of one attention map `[K, h, w]` against the normalised
/// ground truth, mean over categories, before `lambda_attn`.
pub fn attention_ce(tape: &mut Tape<'_>, weights: Var, gt: &GroundTruthSet, cfg: &LossConfig) -> Result<Var> {
    let [k, h, w] = spatial(tape, weights, "attention_ce")?;
    let stride = gt.stride_for(h, w)?;
    let (dist, class_w) = gt.attention_targets(stride, cfg.null_weight, cfg.null_attn_target);
    let n = h * w;
    let coef: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(i, t)| -t * class_w[i / n] / k as f64)
        .collect();
    let logw = tape.log_clamped(weights, ATTN_LOG_FLOOR);
    let terms = tape.mul_const(logw, &coef)?;
    Ok(tape.sum(terms))
}

/// `lambda_attn` times the mean of [`attention_ce`] over every supplied map
/// (all layers and scales).
pub fn attention_weight_loss(tape: &mut Tape<'_>, maps: &[Vec<Var>], gt: &GroundTruthSet, cfg: &LossConfig) -> Result<Var> {
    let flat: Vec<Var> = maps.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Err(PftError::Config("attention loss needs at least one map".into()));
    }
    let mut acc = attention_ce(tape, flat[0], gt, cfg)?;
    for &m in &flat[1..] {
        let ce = attention_ce(tape, m, gt, cfg)?;
        acc = tape.add(acc, ce)?;
    }
    Ok(tape.scale(acc, cfg.attn / flat.len() as f64))
}

/// Scalar values of the loss components, summed over supervision points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub focal_ce: f64,
    pub focal: f64,
    pub dice: f64,
    /// Includes `lambda_attn`; zero once detached.
    pub attn: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub values: LossValues,
    pub attn_active: bool,
}

fn sum_vars(tape: &mut Tape<'_>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

/// Classification and mask terms of one supervision point, each unweighted.
fn point_terms(
    tape: &mut Tape<'_>,
    bundle: &PredictionBundle,
    gt: &GroundTruthSet,
    cfg: &LossConfig,
    aggregation: Aggregation,
) -> Result<[Var; 4]> {
    let focal_ce = focal_ce_loss(tape, &bundle.prob_logits, gt, cfg.alpha, cfg.gamma)?;
    let (ce, focal, dice) = match aggregation {
        Aggregation::LogitAverage => {
            let ce = ce_loss(tape, bundle.avg_prob_logits, gt, cfg.null_weight)?;
            let focal = focal_loss(tape, bundle.avg_mask_logits, gt, cfg.alpha, cfg.gamma)?.value;
            let dice = dice_loss(tape, bundle.m, gt)?.value;
            (ce, focal, dice)
        }
        Aggregation::PredictionAverage => {
            let n = bundle.prob_logits.len() as f64;
            let mut ces = Vec::new();
            let mut focals = Vec::new();
            let mut dices = Vec::new();
            for (&pl, &ml) in bundle.prob_logits.iter().zip(&bundle.mask_logits) {
                ces.push(ce_loss(tape, pl, gt, cfg.null_weight)?);
                focals.push(focal_loss(tape, ml, gt, cfg.alpha, cfg.gamma)?.value);
                let m = tape.sigmoid(ml);
                dices.push(dice_loss(tape, m, gt)?.value);
            }
            let ce = sum_vars(tape, &ces)?;
            let focal = sum_vars(tape, &focals)?;
            let dice = sum_vars(tape, &dices)?;
            (tape.scale(ce, 1.0 / n), tape.scale(focal, 1.0 / n), tape.scale(dice, 1.0 / n))
        }
    };
    Ok([ce, focal_ce, focal, dice])
}

/// Deep-supervised objective: classification and mask losses at every
/// supervision point (input queries plus each layer), plus the attention
/// loss over all layers' maps until the detach boundary.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape<'_>,
    bundles: &[PredictionBundle],
    attn_maps: &[Vec<Var>],
    gt: &GroundTruthSet,
    cfg: &LossConfig,
    aggregation: Aggregation,
    step: usize,
    total_steps: usize,
) -> Result<LossBreakdown> {
    if bundles.is_empty() {
        return Err(PftError::Config("total loss needs at least one supervision point".into()));
    }
    let mut values = LossValues::default();
    let mut parts = Vec::new();
    for bundle in bundles {
        let [ce, focal_ce, focal, dice] = point_terms(tape, bundle, gt, cfg, aggregation)?;
        values.ce += tape.item(ce);
        values.focal_ce += tape.item(focal_ce);
        values.focal += tape.item(focal);
        values.dice += tape.item(dice);
        for (v, lambda) in [(ce, cfg.ce), (focal_ce, cfg.focal_ce), (focal, cfg.focal), (dice, cfg.dice)] {
            if lambda != 0.0 {
                parts.push(tape.scale(v, lambda));
            }
        }
    }
    let attn_active = cfg.attn_active(step, total_steps) && !attn_maps.is_empty();
    if attn_active {
        let attn = attention_weight_loss(tape, attn_maps, gt, cfg)?;
        values.attn = tape.item(attn);
        if cfg.attn != 0.0 {
            parts.push(attn);
        }
    }
    let total = if parts.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        sum_vars(tape, &parts)?
    };
    values.total = tape.item(total);
    Ok(LossBreakdown {
        total,
        values,
        attn_active,
    })
}
