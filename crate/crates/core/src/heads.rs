//! Probability and mask heads, logit averaging across scales, and
//! probability-mask marginalisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};
use crate::params::{Bindings, Conv, Linear, ParamStore};
use crate::segmap::LabelMap;
use crate::tensor::{Tape, Tensor, Var};

/// How the per-scale predictions are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average logits, then softmax / sigmoid.
    #[default]
    LogitAverage,
    /// Supervise every scale separately and average per-scale scores.
    PredictionAverage,
}

/// Head outputs for one set of per-scale queries.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// `[K, 2]` per scale; column 0 is "present", column 1 "not-exist".
    pub prob_logits: Vec<Var>,
    pub avg_prob_logits: Var,
    /// `[K]` present-class probability of the averaged logits.
    pub p: Var,
    /// `[K, H/4, W/4]` per scale.
    pub mask_logits: Vec<Var>,
    pub avg_mask_logits: Var,
    /// `sigmoid(avg_mask_logits)`.
    pub m: Var,
}

#[derive(Debug, Clone)]
pub struct Heads {
    prob: Vec<Linear>,
    mlp: Vec<[Linear; 3]>,
    mask_conv: Conv,
}

fn average(tape: &mut Tape<'_>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = tape.add(acc, *x)?;
    }
    if xs.len() == 1 {
        return Ok(acc);
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64))
}

/// First column of a row-wise two-class softmax, `[K, 2] -> [K]`.
pub fn present_probability(tape: &mut Tape<'_>, logits: Var) -> Result<Var> {
    let k = tape.shape(logits)[0];
    let probs = tape.softmax(logits, 1)?;
    let first = tape.narrow(probs, 1, 0, 1)?;
    tape.reshape(first, &[k])
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, scales: &[usize], rng: &mut R) -> Self {
        let prob = scales
            .iter()
            .map(|s| Linear::new(store, &format!("head.prob{s}"), channels, 2, rng))
            .collect();
        let mlp = scales
            .iter()
            .map(|s| std::array::from_fn(|j| Linear::new(store, &format!("head.mask_mlp{s}.{j}"), channels, channels, rng)))
            .collect();
        let mask_conv = Conv::new(store, "head.mask_feature", channels, channels, 3, 1, 1.0, rng);
        Self { prob, mlp, mask_conv }
    }

    pub fn mask_conv(&self) -> &Conv {
        &self.mask_conv
    }

    pub fn mask_mlp(&self, i: usize) -> &[Linear; 3] {
        &self.mlp[i]
    }

    pub fn prob_linear(&self, i: usize) -> &Linear {
        &self.prob[i]
    }

    /// `M`: one 3x3 convolution of the stride-4 level.
    pub fn mask_feature(&self, tape: &mut Tape<'_>, b: &Bindings, p4: Var) -> Result<Var> {
        self.mask_conv.forward(tape, b, p4)
    }

    /// Per-scale logits, their average, and `p`.
    pub fn probability_head(&self, tape: &mut Tape<'_>, b: &Bindings, qs: &[Var]) -> Result<(Vec<Var>, Var, Var)> {
        self.check_scales(qs)?;
        let logits = qs
            .iter()
            .zip(&self.prob)
            .map(|(q, lin)| lin.forward(tape, b, *q))
            .collect::<Result<Vec<_>>>()?;
        let avg = average(tape, &logits)?;
        let p = present_probability(tape, avg)?;
        Ok((logits, avg, p))
    }

    /// `MLP(Q_s) x M` per scale, their average, and `m = sigmoid(avg)`.
    pub fn mask_head(&self, tape: &mut Tape<'_>, b: &Bindings, qs: &[Var], mask_feature: Var) -> Result<(Vec<Var>, Var, Var)> {
        self.check_scales(qs)?;
        let [c, h, w] = crate::tensor::chw(tape.shape(mask_feature), "mask_head")?;
        let flat = tape.reshape(mask_feature, &[c, h * w])?;
        let mut logits = Vec::with_capacity(qs.len());
        for (q, mlp) in qs.iter().zip(&self.mlp) {
            let k = tape.shape(*q)[0];
            let mut x = *q;
            for (j, lin) in mlp.iter().enumerate() {
                x = lin.forward(tape, b, x)?;
                if j + 1 < mlp.len() {
                    x = tape.gelu(x);
                }
            }
            let l = tape.matmul(x, flat)?;
            logits.push(tape.reshape(l, &[k, h, w])?);
        }
        let avg = average(tape, &logits)?;
        let m = tape.sigmoid(avg);
        Ok((logits, avg, m))
    }

    pub fn predict(&self, tape: &mut Tape<'_>, b: &Bindings, qs: &[Var], mask_feature: Var) -> Result<PredictionBundle> {
        let (prob_logits, avg_prob_logits, p) = self.probability_head(tape, b, qs)?;
        let (mask_logits, avg_mask_logits, m) = self.mask_head(tape, b, qs, mask_feature)?;
        Ok(PredictionBundle {
            prob_logits,
            avg_prob_logits,
            p,
            mask_logits,
            avg_mask_logits,
            m,
        })
    }

    fn check_scales(&self, qs: &[Var]) -> Result<()> {
        if qs.len() != self.prob.len() {
            return Err(PftError::Config(format!(
                "heads built for {} scales, got {} query sets",
                self.prob.len(),
                qs.len()
            )));
        }
        Ok(())
    }
}

/// Per-pixel class scores `p[k] * m[k, y, x]` under the chosen aggregation.
pub fn class_scores(tape: &mut Tape<'_>, bundle: &PredictionBundle, aggregation: Aggregation) -> Result<Tensor> {
    match aggregation {
        Aggregation::LogitAverage => Ok(marginal_scores(tape.value(bundle.p), &tape.tensor(bundle.m))),
        Aggregation::PredictionAverage => {
            let n = bundle.prob_logits.len();
            let mut acc: Option<Tensor> = None;
            for (pl, ml) in bundle.prob_logits.iter().zip(&bundle.mask_logits) {
                let p = present_probability(tape, *pl)?;
                let m = tape.sigmoid(*ml);
                let s = marginal_scores(tape.value(p), &tape.tensor(m));
                acc = Some(match acc {
                    None => s,
                    Some(mut a) => {
                        a.data_mut().iter_mut().zip(s.data()).for_each(|(x, y)| *x += y);
                        a
                    }
                });
            }
            let mut a = acc.expect("at least one scale");
            a.data_mut().iter_mut().for_each(|x| *x /= n as f64);
            Ok(a)
        }
    }
}

/// `p[k] * m[k, ..]` for `m` of shape `[K, h, w]`.
pub fn marginal_scores(p: &[f64], m: &Tensor) -> Tensor {
    let k = p.len();
    let hw = m.len() / k.max(1);
    let data = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| p[i / hw] * v)
        .collect();
    Tensor::new(m.shape().to_vec(), data).expect("score shape")
}

/// Per-pixel argmax over the category axis of `[K, h, w]` scores; ties go to
/// the lowest category index.
pub fn argmax_scores(scores: &Tensor) -> Result<LabelMap> {
    let [k, h, w] = crate::tensor::chw(scores.shape(), "argmax_scores")?;
    if k == 0 || k > 255 {
        return Err(PftError::Config(format!("cannot encode {k} categories in a label map")));
    }
    let hw = h * w;
    let s = scores.data();
    let labels = (0..hw)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if s[c * hw + px] > s[best * hw + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Probability-mask marginalisation: `argmax_k p[k] * m[k, y, x]`.
pub fn class_prediction(p: &[f64], m: &Tensor) -> Result<LabelMap> {
    if m.shape().first() != Some(&p.len()) {
        return Err(PftError::Shape {
            op: "class_prediction",
            lhs: vec![p.len()],
            rhs: m.shape().to_vec(),
        });
    }
    argmax_scores(&marginal_scores(p, m))
}
