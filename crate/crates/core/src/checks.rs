//! Finite-difference gradient suite over every differentiable op, every
//! loss and the full one-layer model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{multi_head_attention, AttentionParams};
use crate::error::Result;
use crate::heads::Aggregation;
use crate::losses::{
    attention_ce, ce_loss, decompose_gt, dice_loss, focal_ce_loss, focal_loss, total_loss, GroundTruthSet, LossConfig,
};
use crate::model::{ModelConfig, PftModel};
use crate::params::{Bindings, ParamStore};
use crate::segmap::{LabelMap, UNLABELED};
use crate::synth::generate_scene;
use crate::tensor::{grad_check, grad_check_sampled, GradCheckReport, Tape, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub entries_checked: usize,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum with fixed random coefficients, so every output entry
/// contributes a distinct gradient.
fn probe(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.mul_const(y, &c)?;
    Ok(tape.sum(w))
}

/// Random label map with some pixels of each of a random subset of classes.
pub fn random_labels(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let labels = (0..h * w)
        .map(|_| {
            if rng.random_bool(0.1) {
                UNLABELED
            } else {
                rng.random_range(0..classes.max(2) - 1) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, labels).expect("sized")
}

fn random_gt(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> GroundTruthSet {
    decompose_gt(&random_labels(h, w, classes, rng), classes).expect("labels in range")
}

struct Runner {
    rng: ChaCha8Rng,
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, tolerance: f64, mut instance: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng, u64) -> Result<GradCheckReport>,
    {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in 0..INSTANCES {
            let r = instance(&mut self.rng, i as u64)?;
            worst = worst.max(r.max_rel_error);
            checked += r.entries_checked;
        }
        log::debug!("{name}: max rel err {worst:.3e}");
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: worst,
            tolerance,
            instances: INSTANCES,
            entries_checked: checked,
        });
        Ok(())
    }
}

fn unary(
    runner: &mut Runner,
    name: &str,
    shape: &[usize],
    op: impl Fn(&mut Tape<'_>, Var) -> Result<Var> + Copy,
) -> Result<()> {
    runner.check(name, OP_TOLERANCE, |rng, i| {
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let y = op(t, v[0])?;
                probe(t, y, i)
            },
            &[randn(shape, rng)],
            GRAD_EPS,
        )
    })
}

fn op_checks(r: &mut Runner) -> Result<()> {
    r.check("matmul", OP_TOLERANCE, |rng, i| {
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, i)
            },
            &[randn(&[4, 5], rng), randn(&[5, 2], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("batched_matmul", OP_TOLERANCE, |rng, i| {
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, i)
            },
            &[randn(&[2, 3, 4], rng), randn(&[2, 4, 3], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("add_sub_mul_div", OP_TOLERANCE, |rng, i| {
        let mut d = Tensor::rand_uniform(&[3, 4], 0.5, 2.0, rng);
        if rng.random_bool(0.5) {
            d.data_mut().iter_mut().for_each(|x| *x = -*x);
        }
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let s = t.add(v[0], v[1])?;
                let m = t.mul(s, v[1])?;
                let q = t.div(m, v[2])?;
                let y = t.sub(q, v[0])?;
                probe(t, y, i)
            },
            &[randn(&[3, 4], rng), randn(&[3, 4], rng), d],
            GRAD_EPS,
        )
    })?;
    r.check("linear", OP_TOLERANCE, |rng, i| {
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let y = t.linear(v[0], v[1], v[2])?;
                probe(t, y, i)
            },
            &[randn(&[3, 4], rng), randn(&[4, 5], rng), randn(&[5], rng)],
            GRAD_EPS,
        )
    })?;
    unary(r, "softmax", &[3, 5], |t, x| t.softmax(x, 1))?;
    unary(r, "softmax_axis0", &[4, 2, 3], |t, x| t.softmax(x, 0))?;
    unary(r, "log_softmax", &[3, 5], |t, x| t.log_softmax(x, 1))?;
    r.check("layer_norm", OP_TOLERANCE, |rng, i| {
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                probe(t, y, i)
            },
            &[randn(&[3, 6], rng), randn(&[6], rng), randn(&[6], rng)],
            GRAD_EPS,
        )
    })?;
    unary(r, "gelu", &[12], |t, x| Ok(t.gelu(x)))?;
    unary(r, "sigmoid", &[12], |t, x| Ok(t.sigmoid(x)))?;
    unary(r, "log_sigmoid", &[12], |t, x| Ok(t.log_sigmoid(x)))?;
    unary(r, "exp", &[12], |t, x| Ok(t.exp(x)))?;
    unary(r, "powf_of_sigmoid", &[12], |t, x| {
        let s = t.sigmoid(x);
        Ok(t.powf(s, 2.0))
    })?;
    unary(r, "ln_of_exp", &[12], |t, x| {
        let e = t.exp(x);
        let e = t.add_scalar(e, 0.5);
        Ok(t.ln(e))
    })?;
    unary(r, "log_clamped_of_softmax", &[2, 6], |t, x| {
        let s = t.softmax(x, 1)?;
        Ok(t.log_clamped(s, 1e-12))
    })?;
    unary(r, "permute_reshape", &[2, 3, 4], |t, x| {
        let p = t.permute(x, &[2, 0, 1])?;
        let p = t.reshape(p, &[4, 6])?;
        t.transpose(p)
    })?;
    unary(r, "sum_mean_axis", &[2, 3, 4], |t, x| {
        let s = t.sum_axis(x, 1)?;
        let m = t.mean_axis(s, 0)?;
        let e = t.exp(m);
        Ok(t.scale(e, 0.7))
    })?;
    unary(r, "concat_narrow", &[4, 3], |t, x| {
        let a = t.narrow(x, 0, 1, 2)?;
        let b = t.narrow(x, 1, 0, 2)?;
        let bt = t.transpose(b)?;
        let c = t.concat(&[a, x], 0)?;
        let d = t.concat(&[bt, bt], 1)?;
        let sc = t.sigmoid(c);
        let sd = t.sigmoid(d);
        let s1 = t.sum(sc);
        let s1 = t.reshape(s1, &[1])?;
        let s2 = t.sum(sd);
        let s2 = t.reshape(s2, &[1])?;
        let s = t.concat(&[s1, s2], 0)?;
        Ok(t.gelu(s))
    })?;
    r.check("add_row", OP_TOLERANCE, |rng, i| {
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.gelu(y);
                probe(t, y, i)
            },
            &[randn(&[3, 4], rng), randn(&[4], rng)],
            GRAD_EPS,
        )
    })?;
    for (name, groups) in [("conv2d", 1), ("conv2d_grouped", 2)] {
        r.check(name, OP_TOLERANCE, |rng, i| {
            grad_check(
                |t: &mut Tape<'_>, v: &[Var]| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), groups)?;
                    probe(t, y, i)
                },
                &[randn(&[4, 5, 4], rng), randn(&[4, 4 / groups, 3, 3], rng), randn(&[4], rng)],
                GRAD_EPS,
            )
        })?;
    }
    unary(r, "avg_pool2", &[2, 4, 6], |t, x| t.avg_pool2(x))?;
    unary(r, "resize_bilinear_up", &[2, 3, 4], |t, x| t.resize_bilinear(x, 7, 5))?;
    unary(r, "resize_bilinear_down", &[2, 8, 8], |t, x| t.resize_bilinear(x, 3, 5))?;
    // The key bias shifts every logit of a row equally, so its gradient is
    // exactly zero and the relative error there measures rounding noise only.
    // It is held constant in the check and its analytic gradient asserted
    // to vanish instead.
    r.check("multi_head_attention", OP_TOLERANCE, |rng, i| {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 8, rng);
        let key_bias = p.k.bias.index();
        let params: Vec<Tensor> = store.tensors().cloned().collect();
        let objective = |t: &mut Tape<'_>, x: &[Var], b: &Bindings| -> Result<Var> {
            let (out, logits) = multi_head_attention(t, b, &p, x[0], x[1], x[2], 2)?;
            let w = t.softmax(logits, 2)?;
            let a = probe(t, out, i)?;
            let c = probe(t, w, i + 100)?;
            t.add(a, c)
        };
        let mut inputs = vec![randn(&[3, 8], rng), randn(&[5, 8], rng), randn(&[5, 8], rng)];
        inputs.extend(params.iter().enumerate().filter(|(j, _)| *j != key_bias).map(|(_, t)| t.clone()));
        let mut report = grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let mut vars = v[3..].to_vec();
                let kb = t.constant(params[key_bias].clone());
                vars.insert(key_bias, kb);
                objective(t, &v[..3], &Bindings::from_vars(vars))
            },
            &inputs,
            GRAD_EPS,
        )?;
        let mut tape = Tape::new();
        let x: Vec<Var> = inputs[..3].iter().map(|t| tape.input(t.clone(), true)).collect();
        let b = store.bind(&mut tape);
        let y = objective(&mut tape, &x, &b)?;
        let grads = tape.backward(y)?;
        let kb_grad = grads.tensor(b.vars()[key_bias]);
        let kb_max = kb_grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if kb_max > 1e-12 {
            report.max_rel_error = 1.0;
        }
        Ok(report)
    })?;
    Ok(())
}

fn loss_checks(r: &mut Runner) -> Result<()> {
    let cfg = LossConfig::default();
    let (k, gh, gw) = (4, 8, 8);
    r.check("focal_loss", OP_TOLERANCE, |rng, _| {
        let gt = random_gt(gh, gw, k, rng);
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| Ok(focal_loss(t, v[0], &gt, cfg.alpha, cfg.gamma)?.value),
            &[randn(&[k, 4, 4], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("dice_loss", OP_TOLERANCE, |rng, _| {
        let gt = random_gt(gh, gw, k, rng);
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let m = t.sigmoid(v[0]);
                Ok(dice_loss(t, m, &gt)?.value)
            },
            &[randn(&[k, 4, 4], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("ce_loss", OP_TOLERANCE, |rng, _| {
        let gt = random_gt(gh, gw, k, rng);
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| ce_loss(t, v[0], &gt, cfg.null_weight),
            &[randn(&[k, 2], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("linear_softmax_ce", OP_TOLERANCE, |rng, _| {
        let gt = random_gt(gh, gw, k, rng);
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let logits = t.linear(v[0], v[1], v[2])?;
                ce_loss(t, logits, &gt, cfg.null_weight)
            },
            &[randn(&[k, 3], rng), randn(&[3, 2], rng), randn(&[2], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("focal_ce_loss", OP_TOLERANCE, |rng, _| {
        let gt = random_gt(gh, gw, k, rng);
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| focal_ce_loss(t, v, &gt, cfg.alpha, cfg.gamma),
            &[randn(&[k, 2], rng), randn(&[k, 2], rng), randn(&[k, 2], rng)],
            GRAD_EPS,
        )
    })?;
    r.check("attention_ce", OP_TOLERANCE, |rng, _| {
        let gt = random_gt(gh, gw, k, rng);
        grad_check(
            |t: &mut Tape<'_>, v: &[Var]| {
                let flat = t.reshape(v[0], &[k, 16])?;
                let w = t.softmax(flat, 1)?;
                let w = t.reshape(w, &[k, 4, 4])?;
                attention_ce(t, w, &gt, &cfg)
            },
            &[randn(&[k, 4, 4], rng)],
            GRAD_EPS,
        )
    })?;
    Ok(())
}

/// Configuration of the end-to-end check: one layer, three categories,
/// sixteen channels on a 32x32 image (8x8 at the mask resolution).
pub fn grad_check_model_config() -> ModelConfig {
    ModelConfig {
        classes: 3,
        channels: 16,
        layers: 1,
        heads: 2,
        aggregation: Aggregation::LogitAverage,
        ..ModelConfig::default()
    }
}

/// Whether a parameter's gradient is identically zero: key-projection biases
/// shift all logits of a softmax row by the same amount.
pub fn is_structurally_zero(name: &str) -> bool {
    name.ends_with(".k.bias")
}

/// Sampled check of the total loss with respect to every parameter. Key
/// biases are held constant; their analytic gradient must vanish instead
/// (a violation is reported as relative error 1).
pub fn model_grad_check(seed: u64, per_param: usize) -> Result<GradCheckReport> {
    let config = grad_check_model_config();
    let mut model = PftModel::new(config.clone(), seed)?;
    // At the 0.02 init the queries are nearly identical, self-attention is
    // almost uniform and its key gradients (~1e-8) fall below the
    // finite-difference noise floor. Unit-scale queries give a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("queries.") {
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
    }
    let model = model;
    let scene = generate_scene(seed, 32, 32, config.classes)?;
    let gt = decompose_gt(&scene.labels, config.classes)?;
    let cfg = LossConfig::default();
    let objective = |t: &mut Tape<'_>, b: &Bindings| -> Result<Var> {
        let x = t.constant(scene.image.clone());
        let out = model.forward(t, b, x)?;
        let loss = total_loss(t, &out.bundles, &out.decoder.attn_weights, &gt, &cfg, config.aggregation, 0, 10)?;
        Ok(loss.total)
    };
    let fixed: Vec<bool> = model.params.iter().map(|(n, _)| is_structurally_zero(n)).collect();
    let all: Vec<Tensor> = model.params.tensors().cloned().collect();
    let inputs: Vec<Tensor> = all.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(t, _)| t.clone()).collect();
    let mut report = grad_check_sampled(
        |t: &mut Tape<'_>, v: &[Var]| {
            let mut free = v.iter();
            let vars = all
                .iter()
                .zip(&fixed)
                .map(|(p, &f)| if f { t.constant(p.clone()) } else { *free.next().expect("one var per free param") })
                .collect();
            objective(t, &Bindings::from_vars(vars))
        },
        &inputs,
        GRAD_EPS,
        per_param,
        seed,
    )?;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let y = objective(&mut tape, &b)?;
    let grads = tape.backward(y)?;
    for (j, _) in fixed.iter().enumerate().filter(|(_, f)| **f) {
        let g = grads.tensor(b.vars()[j]);
        if g.data().iter().any(|x| x.abs() > 1e-10) {
            report.max_rel_error = 1.0;
        }
    }
    Ok(report)
}

/// Runs every check; each op and loss over [`INSTANCES`] random instances.
pub fn run_grad_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut r = Runner {
        rng: ChaCha8Rng::seed_from_u64(seed),
        entries: Vec::new(),
    };
    op_checks(&mut r)?;
    loss_checks(&mut r)?;
    let report = model_grad_check(seed, 4)?;
    r.entries.push(SuiteEntry {
        name: "full_model_total_loss".into(),
        max_rel_error: report.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        instances: 1,
        entries_checked: report.entries_checked,
    });
    Ok(r.entries)
}
