use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TrainConfig;
use super::optimizer::{lr_at, AdamW};
use crate::error::{PftError, Result};
use crate::eval::{pearson_attn_mask, ConfusionMatrix, MetricsReport, PearsonEntry};
use crate::heads::{argmax_scores, class_scores};
use crate::losses::{decompose_gt, total_loss, LossValues};
use crate::model::PftModel;
use crate::segmap::LabelMap;
use crate::synth::{dataset, generate_scene, split_seed, SceneSample, Split};
use crate::tensor::{read_container, write_container, Container, Tape, Tensor};

/// Loss values of one optimiser step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub attn_active: bool,
    pub losses: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub report: MetricsReport,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: PftModel,
    pub optimizer: AdamW,
    /// Number of completed optimiser steps.
    pub step: usize,
}

fn flip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64)
}

/// Loss values and parameter gradients for one image.
pub fn image_gradients(
    model: &PftModel,
    config: &TrainConfig,
    image: &Tensor,
    labels: &LabelMap,
    step: usize,
) -> Result<(LossValues, Vec<Tensor>)> {
    let gt = decompose_gt(labels, config.classes)?;
    let loss_cfg = config.effective_loss();
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let x = tape.constant(image.clone());
    let out = model.forward(&mut tape, &b, x)?;
    let loss = total_loss(
        &mut tape,
        &out.bundles,
        &out.decoder.attn_weights,
        &gt,
        &loss_cfg,
        model.config.aggregation,
        step,
        config.iterations,
    )?;
    if !loss.values.total.is_finite() {
        return Err(PftError::NonFinite(format!("loss at step {step}")));
    }
    let grads = tape.backward(loss.total)?;
    Ok((loss.values, b.vars().iter().map(|&v| grads.tensor(v)).collect()))
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = PftModel::new(config.model_config(), config.seed)?;
        let optimizer = AdamW::new(&model.params);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    /// Training images of a step, with their deterministic flips applied.
    pub fn batch(&self, step: usize) -> Result<Vec<(Tensor, LabelMap)>> {
        let c = &self.config;
        (0..c.batch_size)
            .map(|i| {
                let index = step * c.batch_size + i;
                let seed = split_seed(Split::Train, c.data_seed(), index % c.train_size);
                let sample = generate_scene(seed, c.height, c.width, c.classes)?;
                if c.hflip && flip_rng(c.seed, index).random_bool(0.5) {
                    Ok((sample.image.flip_horizontal()?, sample.labels.flip_horizontal()))
                } else {
                    Ok((sample.image, sample.labels))
                }
            })
            .collect()
    }

    /// One optimiser step. On error (including non-finite losses or
    /// gradients) the state is left untouched.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let batch = self.batch(step)?;
        let n = batch.len() as f64;
        let mut sum: Option<Vec<Tensor>> = None;
        let mut losses = LossValues::default();
        for (image, labels) in &batch {
            let (values, grads) = image_gradients(&self.model, &self.config, image, labels, step)?;
            losses.ce += values.ce / n;
            losses.focal_ce += values.focal_ce / n;
            losses.focal += values.focal / n;
            losses.dice += values.dice / n;
            losses.attn += values.attn / n;
            losses.total += values.total / n;
            sum = Some(match sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let mut grads = sum.expect("batch is non-empty");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        let lr = lr_at(self.config.lr, step, self.config.iterations);
        self.optimizer
            .step(&mut self.model.params, &grads, step, lr, self.config.weight_decay)?;
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            attn_active: self.config.effective_loss().attn_active(step, self.config.iterations) && losses.attn != 0.0,
            losses,
        })
    }

    /// Trains until `self.step == target`, calling `on_step` after each step.
    pub fn run_until(&mut self, target: usize, mut on_step: impl FnMut(&TrainState, &StepLog) -> Result<()>) -> Result<()> {
        if target > self.config.iterations {
            return Err(PftError::Config(format!(
                "cannot train past the schedule ({target} > {})",
                self.config.iterations
            )));
        }
        while self.step < target {
            let log = self.train_step()?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    pub fn validation_set(&self) -> Result<Vec<SceneSample>> {
        let c = &self.config;
        dataset(Split::Val, c.val_size, c.data_seed(), c.height, c.width, c.classes)
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = IndexMap::new();
        for (name, t) in self.model.params.iter() {
            tensors.insert(format!("param/{name}"), t.clone());
        }
        for ((name, _), m) in self.model.params.iter().zip(&self.optimizer.m) {
            tensors.insert(format!("adam_m/{name}"), m.clone());
        }
        for ((name, _), v) in self.model.params.iter().zip(&self.optimizer.v) {
            tensors.insert(format!("adam_v/{name}"), v.clone());
        }
        Container {
            meta: json!({
                "kind": "pft-train-state",
                "step": self.step,
                "config_hash": self.config.hash(),
                "config": self.config,
            }),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| PftError::Checkpoint(format!("bad embedded config: {e}")))?;
        let hash = c.meta["config_hash"].as_str().unwrap_or_default();
        if hash != config.hash() {
            return Err(PftError::Checkpoint("config hash does not match the embedded config".into()));
        }
        let step = c.meta["step"]
            .as_u64()
            .ok_or_else(|| PftError::Checkpoint("missing step".into()))? as usize;
        let mut state = Self::new(config)?;
        let pick = |prefix: &str| -> IndexMap<String, Tensor> {
            c.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        state.model.params.load_from(&pick("param/"))?;
        let mut moments = state.model.params.clone();
        moments.load_from(&pick("adam_m/"))?;
        state.optimizer.m = moments.tensors().cloned().collect();
        moments.load_from(&pick("adam_v/"))?;
        state.optimizer.v = moments.tensors().cloned().collect();
        state.step = step;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        write_container(&mut out, &self.to_container())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(BufReader::new(fs::File::open(path)?))?)
    }
}

/// Single-scale mIoU over `val`, plus attention/mask correlations on the
/// first `pearson_samples` images. Correlations are taken against the
/// fractional-area masks of present categories at each query scale;
/// undefined (constant) pairs are skipped.
pub fn evaluate(model: &PftModel, val: &[SceneSample], pearson_samples: usize) -> Result<MetricsReport> {
    let classes = model.config.classes;
    let layers = model.config.layers;
    let scales = model.config.scales.clone();
    let mut cm = ConfusionMatrix::new(classes);
    let mut sums = vec![vec![(0.0, 0usize); scales.len()]; layers];
    for (n, sample) in val.iter().enumerate() {
        let [_, h, w] = [3, sample.labels.height, sample.labels.width];
        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let x = tape.constant(sample.image.clone());
        let out = model.forward(&mut tape, &b, x)?;
        let scores = class_scores(&mut tape, out.final_bundle(), model.config.aggregation)?.resize_bilinear(h, w)?;
        cm.accumulate(&argmax_scores(&scores)?, &sample.labels)?;
        if n >= pearson_samples {
            continue;
        }
        let gt = decompose_gt(&sample.labels, classes)?;
        for (l, layer) in out.decoder.attn_weights.iter().enumerate() {
            for (j, &wv) in layer.iter().enumerate() {
                let values = tape.value(wv);
                let hw = values.len() / classes;
                for k in (0..classes).filter(|&k| gt.is_present(k)) {
                    let mask = gt.area_downsample(k, scales[j]);
                    match pearson_attn_mask(&values[k * hw..(k + 1) * hw], &mask) {
                        Ok(r) => {
                            sums[l][j].0 += r;
                            sums[l][j].1 += 1;
                        }
                        Err(PftError::UndefinedCorrelation(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    let (miou, per_class) = cm.miou()?;
    let mut pearson_by_scale_layer = Vec::new();
    for (l, row) in sums.iter().enumerate() {
        for (j, &(s, count)) in row.iter().enumerate() {
            pearson_by_scale_layer.push(PearsonEntry {
                layer: l,
                scale: scales[j],
                mean: if count > 0 { s / count as f64 } else { 0.0 },
                count,
            });
        }
    }
    Ok(MetricsReport {
        miou,
        per_class,
        pearson_by_scale_layer,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.evals.last().map(|e| &e.report)
    }
}

const CSV_HEADER: &str = "step,L_ce,L_focal_ce,L_focal,L_dice,L_attn,total";

fn csv_row(log: &StepLog) -> String {
    let l = &log.losses;
    format!(
        "{},{},{},{},{},{},{}",
        log.step, l.ce, l.focal_ce, l.focal, l.dice, l.attn, l.total
    )
}

/// Trains `state` to `until` (the end of the schedule when `None`),
/// evaluating every `eval_every` steps and at the end. With an output
/// directory, writes `loss.csv`, `metrics.json` and `final.ckpt`; when a
/// step fails the last good state goes to `last_good.ckpt`.
pub fn train(mut state: TrainState, until: Option<usize>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let target = until.unwrap_or(state.config.iterations);
    let val = state.validation_set()?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("loss.csv");
            let fresh = !path.exists() || state.step == 0;
            let mut f = BufWriter::new(fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?);
            if fresh {
                writeln!(f, "{CSV_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let every = state.config.eval_every;
    let pearson_samples = state.config.pearson_samples;
    let result = state.run_until(target, |s, log| {
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", csv_row(log))?;
        }
        if log.step % 50 == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", log.step, log.lr, log.losses.total);
        }
        steps.push(*log);
        if every > 0 && s.step % every == 0 && s.step < target {
            let report = evaluate(&s.model, &val, pearson_samples)?;
            log::info!("step {} val mIoU {:.4}", s.step, report.miou);
            evals.push(EvalLog { step: s.step, report });
        }
        Ok(())
    });
    if let Some(f) = csv.as_mut() {
        f.flush()?;
    }
    if let Err(e) = result {
        if let Some(dir) = out_dir {
            state.save(&dir.join("last_good.ckpt"))?;
            log::error!("training stopped at step {}: {e}", state.step);
        }
        return Err(e);
    }
    let report = evaluate(&state.model, &val, pearson_samples)?;
    log::info!("step {} val mIoU {:.4}", state.step, report.miou);
    evals.push(EvalLog { step: state.step, report });
    if let Some(dir) = out_dir {
        state.save(&dir.join("final.ckpt"))?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_vec_pretty(&json!({
                "config_hash": state.config.hash(),
                "evals": evals,
            }))?,
        )?;
    }
    Ok(TrainOutcome { state, steps, evals })
}
