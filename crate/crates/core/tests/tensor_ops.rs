use pft_core::tensor::{grad_check, relative_error, Tape, Tensor, Var};
use pft_core::PftError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn forward(inputs: &[Tensor], f: impl FnOnce(&mut Tape<'_>, &[Var]) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone(), false)).collect();
    let y = f(&mut tape, &vars);
    tape.tensor(y)
}

#[test]
fn matmul_identity_and_zeros() {
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng(1));
    let y = forward(&[Tensor::eye(3), a.clone()], |tp, v| tp.matmul(v[0], v[1]).unwrap());
    assert_eq!(y, a);
    let y = forward(&[Tensor::zeros(&[2, 3]), Tensor::ones(&[3, 4])], |tp, v| tp.matmul(v[0], v[1]).unwrap());
    assert_eq!(y, Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(PftError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut r = rng(2);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 2], 1.0, &mut r);
    let report = grad_check(
        |tp: &mut Tape<'_>, v: &[Var]| {
            let y = tp.matmul(v[0], v[1])?;
            let y = tp.mul(y, y)?;
            Ok(tp.sum(y))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn matmul_is_linear_in_each_argument() {
    let mut r = rng(3);
    let a1 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let a2 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let sum_first = forward(&[a1.clone(), a2.clone(), b.clone()], |tp, v| {
        let s = tp.add(v[0], v[1]).unwrap();
        tp.matmul(s, v[2]).unwrap()
    });
    let separate = forward(&[a1, a2, b], |tp, v| {
        let x = tp.matmul(v[0], v[2]).unwrap();
        let y = tp.matmul(v[1], v[2]).unwrap();
        tp.add(x, y).unwrap()
    });
    assert!(sum_first.max_abs_diff(&separate) <= 1e-12);

    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b1 = Tensor::randn(&[4, 2], 1.0, &mut r);
    let b2 = Tensor::randn(&[4, 2], 1.0, &mut r);
    let sum_second = forward(&[a.clone(), b1.clone(), b2.clone()], |tp, v| {
        let s = tp.add(v[1], v[2]).unwrap();
        tp.matmul(v[0], s).unwrap()
    });
    let separate = forward(&[a, b1, b2], |tp, v| {
        let x = tp.matmul(v[0], v[1]).unwrap();
        let y = tp.matmul(v[0], v[2]).unwrap();
        tp.add(x, y).unwrap()
    });
    assert!(sum_second.max_abs_diff(&separate) <= 1e-12);
}

#[test]
fn softmax_hand_values() {
    let y = forward(&[Tensor::zeros(&[4])], |tp, v| tp.softmax(v[0], 0).unwrap());
    assert!(y.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let y = forward(&[t(&[2], &[0.0, 3f64.ln()])], |tp, v| tp.softmax(v[0], 0).unwrap());
    assert!((y.data()[0] - 0.25).abs() < 1e-12);
    assert!((y.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_is_stable_on_large_logits() {
    let y = forward(&[t(&[3], &[1000.0, 1000.0, -1000.0])], |tp, v| tp.softmax(v[0], 0).unwrap());
    assert!(y.is_finite());
    assert!((y.data()[0] - 0.5).abs() < 1e-12);
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(shape in shape_strategy(), axis_pick in 0usize..4, seed in any::<u64>(), scale in 0.1f64..20.0) {
        let axis = axis_pick % shape.len();
        let x = Tensor::randn(&shape, scale, &mut rng(seed));
        let y = forward(&[x], |tp, v| tp.softmax(v[0], axis).unwrap());
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| y.data()[(o * len + j) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn softmax_is_shift_invariant(shape in shape_strategy(), seed in any::<u64>(), c in -50.0f64..50.0) {
        let axis = shape.len() - 1;
        let x = Tensor::randn(&shape, 1.0, &mut rng(seed));
        let shifted = Tensor::new(shape.clone(), x.data().iter().map(|v| v + c).collect()).unwrap();
        let a = forward(&[x], |tp, v| tp.softmax(v[0], axis).unwrap());
        let b = forward(&[shifted], |tp, v| tp.softmax(v[0], axis).unwrap());
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }
}

#[test]
fn layer_norm_hand_values() {
    let gain = Tensor::ones(&[2]);
    let bias = Tensor::zeros(&[2]);
    let y = forward(&[t(&[1, 2], &[1.0, -1.0]), gain.clone(), bias.clone()], |tp, v| {
        tp.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] - expect).abs() < 1e-12);
    assert!((y.data()[1] + expect).abs() < 1e-12);
    assert!((y.data()[0] - 0.999995).abs() < 1e-6);

    let y = forward(&[t(&[1, 2], &[3.0, 3.0]), gain, bias], |tp, v| tp.layer_norm(v[0], v[1], v[2]).unwrap());
    assert_eq!(y.data(), &[0.0, 0.0]);
}

#[test]
fn layer_norm_moments() {
    let x = Tensor::randn(&[5, 16], 3.0, &mut rng(4));
    let y = forward(&[x, Tensor::ones(&[16]), Tensor::zeros(&[16])], |tp, v| {
        tp.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
}

#[test]
fn layer_norm_rejects_empty_channels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 0]));
    let g = tape.constant(Tensor::zeros(&[0]));
    let b = tape.constant(Tensor::zeros(&[0]));
    assert!(tape.layer_norm(x, g, b).is_err());
}

#[test]
fn conv_identity_kernel_copies_input() {
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng(5));
    let k = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
    let y = forward(&[x.clone(), k], |tp, v| tp.conv2d(v[0], v[1], None, 1).unwrap());
    assert_eq!(y, x);
}

#[test]
fn conv_ones_kernel_on_centered_impulse() {
    let mut x = Tensor::zeros(&[1, 3, 3]);
    x.data_mut()[4] = 1.0;
    let k = Tensor::ones(&[1, 1, 3, 3]);
    let y = forward(&[x, k], |tp, v| tp.conv2d(v[0], v[1], None, 1).unwrap());
    assert_eq!(y.data(), &[1.0; 9]);
}

#[test]
fn conv_rejects_indivisible_groups() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
    assert!(tape.conv2d(x, k, None, 2).is_err());
}

#[test]
fn conv_matches_direct_loop_oracle() {
    let mut r = rng(6);
    let (cin, cout, h, w, groups) = (4, 6, 5, 4, 2);
    let x = Tensor::randn(&[cin, h, w], 1.0, &mut r);
    let k = Tensor::randn(&[cout, cin / groups, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[cout], 1.0, &mut r);
    let y = forward(&[x.clone(), k.clone(), b.clone()], |tp, v| {
        tp.conv2d(v[0], v[1], Some(v[2]), groups).unwrap()
    });
    let (gi, go) = (cin / groups, cout / groups);
    for o in 0..cout {
        let g = o / go;
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o];
                for ci in 0..gi {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (yy as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let xv = x.data()[((g * gi + ci) * h + sy as usize) * w + sx as usize];
                            acc += xv * k.data()[((o * gi + ci) * 3 + dy) * 3 + dx];
                        }
                    }
                }
                assert!((y.data()[(o * h + yy) * w + xx] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn resize_hand_values() {
    let y = forward(&[t(&[1, 1, 2], &[1.0, 3.0])], |tp, v| tp.resize_bilinear(v[0], 1, 4).unwrap());
    let expect = [1.0, 1.5, 2.5, 3.0];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let y = forward(&[t(&[1, 1, 1], &[0.7])], |tp, v| tp.resize_bilinear(v[0], 2, 2).unwrap());
    assert_eq!(y.data(), &[0.7; 4]);
    let c = Tensor::full(&[2, 3, 5], -1.25);
    for (oh, ow) in [(1, 1), (7, 2), (6, 10)] {
        let y = c.resize_bilinear(oh, ow).unwrap();
        assert!(y.data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
    }
}

#[test]
fn backward_basic_rules() {
    let x = Tensor::randn(&[3, 2], 1.0, &mut rng(7));
    let mut tape = Tape::new();
    let v = tape.input(x.clone(), true);
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.tensor(v), Tensor::ones(&[3, 2]));

    let mut tape = Tape::new();
    let v = tape.input(x.clone(), true);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (gv, xv) in g.tensor(v).data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_accumulates_over_paths() {
    let mut tape = Tape::new();
    let v = tape.input(Tensor::scalar(3.0), true);
    let a = tape.scale(v, 2.0);
    let b = tape.mul(v, v).unwrap();
    let y = tape.add(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.tensor(v).item(), 2.0 + 6.0);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let v = tape.input(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(v), Err(PftError::NonScalarRoot(_))));
}

#[test]
fn composite_linear_softmax_ce_gradient() {
    let mut r = rng(8);
    let x = Tensor::randn(&[4, 3], 1.0, &mut r);
    let w = Tensor::randn(&[3, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5], 1.0, &mut r);
    let targets = [0usize, 2, 4, 1];
    let report = grad_check(
        |tp: &mut Tape<'_>, v: &[Var]| {
            let logits = tp.linear(v[0], v[1], v[2])?;
            let logp = tp.log_softmax(logits, 1)?;
            let mut onehot = vec![0.0; 20];
            for (i, &c) in targets.iter().enumerate() {
                onehot[i * 5 + c] = -0.25;
            }
            let picked = tp.mul_const(logp, &onehot)?;
            Ok(tp.sum(picked))
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn grad_check_is_tight_on_sum_of_squares() {
    let x = Tensor::randn(&[6], 1.0, &mut rng(9));
    let report = grad_check(
        |tp: &mut Tape<'_>, v: &[Var]| {
            let sq = tp.mul(v[0], v[0])?;
            Ok(tp.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");
}

#[test]
fn grad_check_flags_a_wrong_gradient() {
    // x * detach(x) has analytic gradient x against a true slope of 2x.
    let x = Tensor::rand_uniform(&[5], 0.5, 2.0, &mut rng(10));
    let report = grad_check(
        |tp: &mut Tape<'_>, v: &[Var]| {
            let d = tp.detach(v[0]);
            let sq = tp.mul(v[0], d)?;
            Ok(tp.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!((report.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{report:?}");
    assert!(!report.passes(1e-4));
    assert!((relative_error(2.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn every_op_and_loss_passes_the_gradient_suite() {
    let entries = pft_core::checks::run_grad_suite(11).unwrap();
    assert!(entries.iter().filter(|e| e.name != "full_model_total_loss").all(|e| e.instances >= 10));
    for e in &entries {
        assert!(e.passes(), "{} max rel err {:e} > {:e}", e.name, e.max_rel_error, e.tolerance);
    }
}

#[test]
fn forward_is_deterministic() {
    let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng(12));
    let k = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng(13));
    let run = || {
        forward(&[x.clone(), k.clone()], |tp, v| {
            let c = tp.conv2d(v[0], v[1], None, 1).unwrap();
            let c = tp.gelu(c);
            let p = tp.avg_pool2(c).unwrap();
            tp.resize_bilinear(p, 5, 5).unwrap()
        })
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
