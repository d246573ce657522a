use pft_core::heads::{Aggregation, PredictionBundle};
use pft_core::losses::{
    attention_ce, attention_weight_loss, ce_loss, decompose_gt, dice_loss, focal_ce_loss, focal_loss, total_loss,
    GroundTruthSet, LossConfig,
};
use pft_core::segmap::{LabelMap, UNLABELED};
use pft_core::tensor::{Tape, Tensor, Var};
use pft_core::{ModelConfig, PftModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn filled_gt(h: usize, w: usize, label: u8, classes: usize) -> GroundTruthSet {
    decompose_gt(&LabelMap::filled(h, w, label), classes).unwrap()
}

fn random_labels(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    // Blocky maps so every category survives downsampling by 4.
    let mut map = LabelMap::filled(h, w, 0);
    for by in 0..h / 4 {
        for bx in 0..w / 4 {
            let l = rng.random_range(0..classes) as u8;
            for y in 0..4 {
                for x in 0..4 {
                    map.set(by * 4 + y, bx * 4 + x, l);
                }
            }
        }
    }
    map
}

/// Cross-entropy `-sum t log w` and entropy of `t`, computed directly.
fn ce(t: &[f64], w: &[f64]) -> f64 {
    t.iter().zip(w).filter(|(t, _)| **t > 0.0).map(|(t, w)| -t * w.ln()).sum()
}

#[test]
fn decompose_round_trips_labeled_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let mut map = random_labels(16, 16, 6, &mut rng);
        for _ in 0..10 {
            let (y, x) = (rng.random_range(0..16), rng.random_range(0..16));
            map.set(y, x, UNLABELED);
        }
        let gt = decompose_gt(&map, 6).unwrap();
        assert_eq!(gt.reconstruct(), map);
        for k in 0..6 {
            assert_eq!(gt.is_present(k), map.labels.contains(&(k as u8)));
        }
    }
}

#[test]
fn focal_single_pixel_hand_value() {
    let gt = filled_gt(4, 4, 0, 1);
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 1, 1]));
    let t = focal_loss(&mut tape, l, &gt, 0.25, 2.0).unwrap();
    assert!(!t.degenerate);
    assert!((tape.item(t.value) - 0.25 * 0.25 * LN2).abs() < 1e-15);
    assert!((tape.item(t.value) - 0.043321).abs() < 1e-6);
}

#[test]
fn focal_and_dice_vanish_on_perfect_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let map = random_labels(16, 16, 3, &mut rng);
    let gt = decompose_gt(&map, 3).unwrap();
    let targets = gt.mask_targets(4);
    let logits: Vec<f64> = targets.iter().map(|t| if *t > 0.5 { 40.0 } else { -40.0 }).collect();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![3, 4, 4], logits).unwrap());
    let focal = focal_loss(&mut tape, l, &gt, 0.25, 2.0).unwrap();
    assert!(tape.item(focal.value) >= 0.0 && tape.item(focal.value) < 1e-30);
    let m = tape.constant(Tensor::new(vec![3, 4, 4], targets).unwrap());
    let dice = dice_loss(&mut tape, m, &gt).unwrap();
    assert!(tape.item(dice.value).abs() < 1e-15);
}

#[test]
fn dice_of_disjoint_masks() {
    // Left half labelled, prediction on the right half: A = 100 each.
    let mut map = LabelMap::filled(10, 20, UNLABELED);
    for y in 0..10 {
        for x in 0..10 {
            map.set(y, x, 0);
        }
    }
    let gt = decompose_gt(&map, 1).unwrap();
    let m: Vec<f64> = (0..200).map(|i| if i % 20 >= 10 { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::new();
    let mv = tape.constant(Tensor::new(vec![1, 10, 20], m).unwrap());
    let d = dice_loss(&mut tape, mv, &gt).unwrap();
    assert!((tape.item(d.value) - (1.0 - 1.0 / 201.0)).abs() < 1e-15);
    assert!((tape.item(d.value) - 0.99502).abs() < 1e-5);
}

#[test]
fn mask_losses_without_present_categories_are_flagged() {
    let gt = filled_gt(8, 8, UNLABELED, 3);
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[3, 2, 2]));
    let f = focal_loss(&mut tape, l, &gt, 0.25, 2.0).unwrap();
    let d = dice_loss(&mut tape, l, &gt).unwrap();
    assert!(f.degenerate && d.degenerate);
    assert_eq!(tape.item(f.value), 0.0);
    assert_eq!(tape.item(d.value), 0.0);
}

#[test]
fn ce_hand_values() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[1, 2]));
    let present = ce_loss(&mut tape, zero, &filled_gt(4, 4, 0, 1), 0.1).unwrap();
    assert!((tape.item(present) - LN2).abs() < 1e-12);
    let absent = ce_loss(&mut tape, zero, &filled_gt(4, 4, UNLABELED, 1), 0.1).unwrap();
    assert!((tape.item(absent) - 0.1 * LN2).abs() < 1e-12);
    assert!((tape.item(absent) - 0.06931).abs() < 1e-5);
    // A logit margin of 10 in favour of the target.
    let confident = tape.constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap());
    let c = ce_loss(&mut tape, confident, &filled_gt(4, 4, 0, 1), 0.1).unwrap();
    assert!((tape.item(c) - (-10f64).exp().ln_1p()).abs() < 1e-15);
    assert!((tape.item(c) - 4.54e-5).abs() < 1e-7);
    let wrong = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(ce_loss(&mut tape, wrong, &filled_gt(4, 4, 0, 1), 0.1).is_err());
}

#[test]
fn focal_ce_hand_values() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[1, 2]));
    let present = focal_ce_loss(&mut tape, &[zero], &filled_gt(4, 4, 0, 1), 0.25, 2.0).unwrap();
    assert!((tape.item(present) - 0.043321).abs() < 1e-6);
    let absent = focal_ce_loss(&mut tape, &[zero], &filled_gt(4, 4, UNLABELED, 1), 0.25, 2.0).unwrap();
    assert!((tape.item(absent) - 0.75 * 0.25 * LN2).abs() < 1e-15);
    // 0.1875 ln 2 = 0.1299650; the usual quoted figure 0.129963 is rounded loosely.
    assert!((tape.item(absent) - 0.129963).abs() < 5e-6);
    let sure = tape.constant(Tensor::new(vec![1, 2], vec![40.0, -40.0]).unwrap());
    let s = focal_ce_loss(&mut tape, &[sure], &filled_gt(4, 4, 0, 1), 0.25, 2.0).unwrap();
    assert!(tape.item(s).abs() < 1e-60);
    // Mean over scales.
    let three = focal_ce_loss(&mut tape, &[zero, zero, sure], &filled_gt(4, 4, 0, 1), 0.25, 2.0).unwrap();
    assert!((tape.item(three) - 2.0 / 3.0 * 0.25 * 0.25 * LN2).abs() < 1e-15);
}

#[test]
fn attention_ce_of_uniform_full_mask_is_log16() {
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::full(&[1, 4, 4], 1.0 / 16.0));
    let v = attention_ce(&mut tape, w, &filled_gt(16, 16, 0, 1), &cfg).unwrap();
    assert!((tape.item(v) - 16f64.ln()).abs() < 1e-12);
    assert!((tape.item(v) - 2.7726).abs() < 1e-4);

    // Second category absent: its uniform term is weighted by 0.1.
    let w2 = tape.constant(Tensor::full(&[2, 4, 4], 1.0 / 16.0));
    let v2 = attention_ce(&mut tape, w2, &filled_gt(16, 16, 0, 2), &cfg).unwrap();
    assert!((tape.item(v2) - 1.1 * 16f64.ln() / 2.0).abs() < 1e-12);

    let loss = attention_weight_loss(&mut tape, &[vec![w, w], vec![w]], &filled_gt(16, 16, 0, 1), &cfg).unwrap();
    assert!((tape.item(loss) - 0.1 * 16f64.ln()).abs() < 1e-12);
}

#[test]
fn attention_ce_obeys_gibbs_inequality() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let map = random_labels(16, 16, 1 + rng.random_range(1..4), &mut rng);
        let k = map.labels.iter().map(|l| *l as usize).max().unwrap() + 1;
        let gt = decompose_gt(&map, k).unwrap();
        for stride in [4, 8] {
            let (target, _) = gt.attention_targets(stride, 0.1, true);
            let n = (16 / stride) * (16 / stride);
            let shape = [k, 16 / stride, 16 / stride];
            let mut tape = Tape::new();
            let exact = tape.constant(Tensor::new(shape.to_vec(), target.clone()).unwrap());
            let at_target = attention_ce(&mut tape, exact, &gt, &cfg).unwrap();
            let at_target = tape.item(at_target);
            let entropy: f64 = (0..k)
                .map(|c| {
                    let t = &target[c * n..(c + 1) * n];
                    let weight = if gt.is_present(c) { 1.0 } else { 0.1 };
                    weight * ce(t, t)
                })
                .sum::<f64>()
                / k as f64;
            assert!((at_target - entropy).abs() < 1e-9);

            // Moving mass from uniform towards the target lowers the loss.
            let mut last = f64::INFINITY;
            for mix in [0.0, 0.3, 0.7, 0.95] {
                let w: Vec<f64> = target.iter().map(|t| mix * t + (1.0 - mix) / n as f64).collect();
                let wv = tape.constant(Tensor::new(shape.to_vec(), w).unwrap());
                let v = attention_ce(&mut tape, wv, &gt, &cfg).unwrap();
                let v = tape.item(v);
                assert!(v >= entropy - 1e-12);
                assert!(v <= last + 1e-12);
                last = v;
            }
        }
    }
}

#[test]
fn absent_slots_receive_no_mask_gradient() {
    let mut map = LabelMap::filled(16, 16, 0);
    for y in 0..8 {
        for x in 0..16 {
            map.set(y, x, 2);
        }
    }
    let gt = decompose_gt(&map, 4).unwrap();
    let logits = Tensor::randn(&[4, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let mut tape = Tape::new();
    let l = tape.input(logits, true);
    let f = focal_loss(&mut tape, l, &gt, 0.25, 2.0).unwrap().value;
    let m = tape.sigmoid(l);
    let d = dice_loss(&mut tape, m, &gt).unwrap().value;
    let total = tape.add(f, d).unwrap();
    let g = tape.backward(total).unwrap();
    let grad = g.tensor(l);
    for k in 0..4 {
        let slot = &grad.data()[k * 16..(k + 1) * 16];
        if gt.is_present(k) {
            assert!(slot.iter().any(|v| *v != 0.0));
        } else {
            assert!(slot.iter().all(|v| *v == 0.0), "slot {k}");
        }
    }
}

#[test]
fn losses_are_invariant_to_category_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let perm = [2u8, 0, 3, 1];
    let map = random_labels(16, 16, 3, &mut rng);
    let permuted = LabelMap::new(16, 16, map.labels.iter().map(|l| perm[*l as usize]).collect()).unwrap();
    let mask = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
    let prob = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let reorder = |t: &Tensor, row: usize| {
        let mut data = vec![0.0; t.len()];
        for k in 0..4 {
            let dst = perm[k] as usize;
            data[dst * row..(dst + 1) * row].copy_from_slice(&t.data()[k * row..(k + 1) * row]);
        }
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    let eval = |map: &LabelMap, mask: Tensor, prob: Tensor| {
        let gt = decompose_gt(map, 4).unwrap();
        let mut tape = Tape::new();
        let ml = tape.constant(mask);
        let pl = tape.constant(prob);
        let f = focal_loss(&mut tape, ml, &gt, 0.25, 2.0).unwrap().value;
        let m = tape.sigmoid(ml);
        let d = dice_loss(&mut tape, m, &gt).unwrap().value;
        let c = ce_loss(&mut tape, pl, &gt, 0.1).unwrap();
        let fc = focal_ce_loss(&mut tape, &[pl], &gt, 0.25, 2.0).unwrap();
        [f, d, c, fc].map(|v| tape.item(v))
    };
    let a = eval(&map, mask.clone(), prob.clone());
    let b = eval(&permuted, reorder(&mask, 16), reorder(&prob, 2));
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn dice_only_total_vanishes_on_perfect_masks() {
    let map = random_labels(16, 16, 3, &mut ChaCha8Rng::seed_from_u64(5));
    let gt = decompose_gt(&map, 3).unwrap();
    let cfg = LossConfig {
        focal: 0.0,
        ce: 0.0,
        focal_ce: 0.0,
        attn: 0.0,
        ..LossConfig::default()
    };
    let mut tape = Tape::new();
    let pl = tape.constant(Tensor::zeros(&[3, 2]));
    let targets = Tensor::new(vec![3, 4, 4], gt.mask_targets(4)).unwrap();
    let m = tape.constant(targets);
    let ml = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let bundle = PredictionBundle {
        prob_logits: vec![pl],
        avg_prob_logits: pl,
        p: pl,
        mask_logits: vec![ml],
        avg_mask_logits: ml,
        m,
    };
    let out = total_loss(&mut tape, &[bundle], &[], &gt, &cfg, Aggregation::LogitAverage, 0, 10).unwrap();
    assert!(out.values.total.abs() < 1e-15);
}

fn model_and_scene() -> (PftModel, Tensor, GroundTruthSet) {
    let config = ModelConfig {
        classes: 3,
        channels: 8,
        layers: 2,
        heads: 2,
        ..ModelConfig::default()
    };
    let model = PftModel::new(config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
    let gt = decompose_gt(&random_labels(32, 32, 3, &mut rng), 3).unwrap();
    (model, image, gt)
}

#[test]
fn every_supervision_point_contributes() {
    let (model, image, gt) = model_and_scene();
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let b = model.params.bind_frozen(&mut tape);
    let x = tape.constant(image);
    let out = model.forward(&mut tape, &b, x).unwrap();
    assert_eq!(out.bundles.len(), 3);
    let all = total_loss(&mut tape, &out.bundles, &[], &gt, &cfg, Aggregation::LogitAverage, 0, 10).unwrap();
    let mut sum = 0.0;
    for bundle in &out.bundles {
        let one = total_loss(&mut tape, std::slice::from_ref(bundle), &[], &gt, &cfg, Aggregation::LogitAverage, 0, 10).unwrap();
        sum += one.values.total;
    }
    assert!((all.values.total - sum).abs() < 1e-12);
}

#[test]
fn attention_gradient_stops_at_the_detach_boundary() {
    let (model, image, gt) = model_and_scene();
    let cfg = LossConfig {
        focal: 0.0,
        dice: 0.0,
        ce: 0.0,
        focal_ce: 0.0,
        ..LossConfig::default()
    };
    let total_steps = 10;
    let boundary = (cfg.attn_detach_fraction * total_steps as f64).ceil() as usize;
    let grad_norm = |step: usize| {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = model.forward(&mut tape, &b, x).unwrap();
        let loss = total_loss(
            &mut tape,
            &out.bundles,
            &out.decoder.attn_weights,
            &gt,
            &cfg,
            Aggregation::LogitAverage,
            step,
            total_steps,
        )
        .unwrap();
        let g = tape.backward(loss.total).unwrap();
        let norm: f64 = b.vars().iter().map(|v| g.tensor(*v).data().iter().map(|x| x * x).sum::<f64>()).sum();
        (loss.values.attn, loss.attn_active, norm)
    };
    let (before, active, norm) = grad_norm(boundary - 1);
    assert!(active && before > 0.0 && norm > 0.0);
    let (after, active, norm) = grad_norm(boundary);
    assert!(!active);
    assert_eq!(after, 0.0);
    assert_eq!(norm, 0.0);
}

#[test]
fn all_losses_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = LossConfig::default();
    for _ in 0..30 {
        let gt = decompose_gt(&random_labels(16, 16, 4, &mut rng), 4).unwrap();
        let mut tape = Tape::new();
        let ml = tape.constant(Tensor::randn(&[4, 4, 4], 3.0, &mut rng));
        let pl = tape.constant(Tensor::randn(&[4, 2], 3.0, &mut rng));
        let raw = Tensor::randn(&[4, 2, 2], 2.0, &mut rng);
        let wl: Var = tape.constant(raw);
        let flat = tape.reshape(wl, &[4, 4]).unwrap();
        let sm = tape.softmax(flat, 1).unwrap();
        let w = tape.reshape(sm, &[4, 2, 2]).unwrap();
        let m = tape.sigmoid(ml);
        let vals = [
            focal_loss(&mut tape, ml, &gt, 0.25, 2.0).unwrap().value,
            dice_loss(&mut tape, m, &gt).unwrap().value,
            ce_loss(&mut tape, pl, &gt, 0.1).unwrap(),
            focal_ce_loss(&mut tape, &[pl], &gt, 0.25, 2.0).unwrap(),
            attention_ce(&mut tape, w, &gt, &cfg).unwrap(),
        ];
        assert!(vals.iter().all(|v| tape.item(*v) >= 0.0));
    }
}
