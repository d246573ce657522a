use std::fs;

use pft_core::params::ParamStore;
use pft_core::tensor::Tensor;
use pft_core::train::{lr_at, train, Ablation, AdamW, TrainConfig, TrainState};
use pft_core::PftError;

fn tiny() -> TrainConfig {
    TrainConfig {
        classes: 3,
        channels: 8,
        layers: 1,
        heads: 2,
        height: 32,
        width: 32,
        iterations: 8,
        batch_size: 2,
        train_size: 16,
        val_size: 4,
        eval_every: 0,
        pearson_samples: 2,
        ..TrainConfig::default()
    }
}

fn scalar_store(v: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("theta", Tensor::new(vec![1], vec![v]).unwrap());
    store
}

fn theta(store: &ParamStore) -> f64 {
    store.tensors().next().unwrap().data()[0]
}

#[test]
fn adamw_matches_scalar_reference() {
    let (lr, wd, b1, b2, eps) = (1e-2, 0.1, 0.9, 0.999, 1e-8);
    let grads = [0.5, -1.2, 0.3, 2.0, -0.7];
    let mut store = scalar_store(1.5);
    let mut opt = AdamW::new(&store);
    let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        opt.step(&mut store, &[Tensor::new(vec![1], vec![*g]).unwrap()], t, lr, wd).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        x = x * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        assert!((theta(&store) - x).abs() < 1e-15, "step {t}");
    }
}

#[test]
fn first_adam_step_is_signed_lr() {
    let g = 0.37;
    let mut store = scalar_store(0.0);
    let mut opt = AdamW::new(&store);
    opt.step(&mut store, &[Tensor::new(vec![1], vec![g]).unwrap()], 0, 1e-3, 0.0).unwrap();
    assert!((theta(&store) + 1e-3 * g / (g + 1e-8)).abs() < 1e-18);
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let mut store = scalar_store(0.8);
    let mut opt = AdamW::new(&store);
    for t in 0..5 {
        opt.step(&mut store, &[Tensor::zeros(&[1])], t, 1e-2, 0.0).unwrap();
    }
    assert_eq!(theta(&store), 0.8);
}

#[test]
fn weight_decay_alone_shrinks_geometrically() {
    let mut store = scalar_store(2.0);
    let mut opt = AdamW::new(&store);
    let mut expect = 2.0;
    for t in 0..4 {
        let lr = lr_at(0.1, t, 10);
        opt.step(&mut store, &[Tensor::zeros(&[1])], t, lr, 0.5).unwrap();
        expect *= 1.0 - lr * 0.5;
        assert!((theta(&store) - expect).abs() < 1e-15);
    }
}

#[test]
fn non_finite_gradient_is_rejected_without_side_effects() {
    let mut store = scalar_store(1.0);
    let mut opt = AdamW::new(&store);
    let before = (store.clone(), opt.clone());
    let err = opt.step(&mut store, &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()], 0, 1e-3, 0.0);
    assert!(matches!(err, Err(PftError::NonFinite(msg)) if msg.contains("theta")));
    assert_eq!((store, opt), before);
}

#[test]
fn linear_decay_is_monotone() {
    let lrs: Vec<f64> = (0..100).map(|s| lr_at(1e-3, s, 100)).collect();
    assert_eq!(lrs[0], 1e-3);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs[99] < lrs[0] && lrs[99] > 0.0);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let a = train(TrainState::new(tiny()).unwrap(), None, None).unwrap();
    let b = train(TrainState::new(tiny()).unwrap(), None, None).unwrap();
    assert_eq!(a.state.model.params, b.state.model.params);
    assert_eq!(a.state.optimizer, b.state.optimizer);
    assert_eq!(a.final_report().unwrap().miou.to_bits(), b.final_report().unwrap().miou.to_bits());
    let mut other = tiny();
    other.seed = 8;
    let c = train(TrainState::new(other).unwrap(), None, None).unwrap();
    assert_ne!(a.state.model.params, c.state.model.params);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(TrainState::new(tiny()).unwrap(), None, None).unwrap();
    let half = train(TrainState::new(tiny()).unwrap(), Some(4), Some(dir.path())).unwrap();
    assert_eq!(half.state.step, 4);
    let resumed = TrainState::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(resumed.model.params, half.state.model.params);
    let done = train(resumed, None, Some(dir.path())).unwrap();
    assert_eq!(done.state.model.params, full.state.model.params);
    assert_eq!(done.state.optimizer, full.state.optimizer);
    assert_eq!(done.final_report(), full.final_report());

    // The log continues rather than restarting.
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let steps: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..8).collect::<Vec<_>>());
}

#[test]
fn tampered_checkpoint_config_is_rejected() {
    let state = TrainState::new(tiny()).unwrap();
    let mut c = state.to_container();
    c.meta["config"]["lr"] = serde_json::json!(0.5);
    assert!(matches!(TrainState::from_container(&c), Err(PftError::Checkpoint(_))));
}

#[test]
fn attention_column_is_zero_after_detach() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let boundary = (config.loss.attn_detach_fraction * config.iterations as f64).ceil() as usize;
    train(TrainState::new(config).unwrap(), None, Some(dir.path())).unwrap();
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,L_ce,L_focal_ce,L_focal,L_dice,L_attn,total");
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let step = cols[0] as usize;
        if step < boundary {
            assert!(cols[5] > 0.0, "step {step}");
        } else {
            assert_eq!(cols[5], 0.0, "step {step}");
        }
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["evals"].as_array().unwrap().len(), 1);
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny();
    config.lr = 1e300;
    let err = train(TrainState::new(config).unwrap(), None, Some(dir.path())).unwrap_err();
    assert!(matches!(err, PftError::NonFinite(_)), "{err}");
    let saved = TrainState::load(&dir.path().join("last_good.ckpt")).unwrap();
    assert!(saved.model.params.tensors().all(|t| t.is_finite()));
    assert!(saved.step < 8);
}

#[test]
fn batches_cycle_the_training_set_with_seeded_flips() {
    let state = TrainState::new(tiny()).unwrap();
    let a = state.batch(3).unwrap();
    assert_eq!(a, state.batch(3).unwrap());
    // Step 8 of batch 2 wraps to the same scenes as step 0, flipped independently.
    let wrap = state.batch(8).unwrap();
    let first = state.batch(0).unwrap();
    for ((x, l), (y, m)) in first.iter().zip(&wrap) {
        assert!(x == y || *x == y.flip_horizontal().unwrap());
        assert!(l == m || *l == m.flip_horizontal());
    }
}

#[test]
fn ablation_variants_configure_the_model() {
    let base = tiny();
    let s32 = Ablation::SingleScale(32).apply(&base).model_config();
    assert_eq!(s32.scales, vec![32]);
    assert!(!s32.cross_scale);
    assert_eq!(Ablation::NoAttnLoss.apply(&base).effective_loss().attn, 0.0);
    assert!(!Ablation::NoCrossScale.apply(&base).model_config().cross_scale);
    assert!(!Ablation::AttnLossNoNullTarget.apply(&base).loss.null_attn_target);
    assert_eq!(Ablation::ALL.len(), 7);
    for v in Ablation::ALL {
        assert_eq!(v.to_string().parse::<Ablation>().unwrap(), v);
        v.apply(&base).validate().unwrap();
    }
    assert!("single_scale_4".parse::<Ablation>().is_err());
    assert!("bogus".parse::<Ablation>().is_err());
}

#[test]
fn config_round_trips_through_json() {
    let mut c = tiny();
    c.ablation.single_scale_only = Some(16);
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
    let partial: TrainConfig = serde_json::from_str(r#"{"iterations": 5, "loss": {"attn": 0.0}}"#).unwrap();
    assert_eq!(partial.iterations, 5);
    assert_eq!(partial.loss.focal, 20.0);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"iters": 5}"#).is_err());
}
