use proptest::prelude::*;
use s3_core::autodiff::{Tape, Tensor};
use s3_core::gradcheck::{numeric_gradient, rel_err, GradcheckOptions, STEP};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// Largest relative error between the taped gradient of `f` at `x` and
/// central differences of the same function.
fn fd_error(x: &[f64], shape: &[usize], f: impl Fn(&Tape, &Tensor) -> Tensor) -> f64 {
    let tape = Tape::new();
    let leaf = tape.param(x.to_vec(), shape).unwrap();
    let out = f(&tape, &leaf);
    tape.backward(&out).unwrap();
    let analytic = tape.grad(&leaf).unwrap();
    let mut eval = |p: &[f64]| {
        let t = Tape::new();
        let c = Tensor::new(p.to_vec(), shape).unwrap();
        Ok(f(&t, &c).item().unwrap())
    };
    let numeric = numeric_gradient(&mut eval, x, STEP).unwrap();
    analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn sum_of_add_matches_differences(a in vec_strategy(6), b in vec_strategy(6)) {
        let err = fd_error(&a, &[2, 3], |t, x| {
            let other = Tensor::new(b.clone(), &[2, 3]).unwrap();
            t.sum(&t.add(x, &other).unwrap())
        });
        prop_assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn weighted_mul_matches_differences(a in vec_strategy(5), w in vec_strategy(5)) {
        let err = fd_error(&a, &[5], |t, x| {
            let sq = t.mul(x, x).unwrap();
            let weights = Tensor::new(w.clone(), &[5]).unwrap();
            t.sum(&t.mul(&sq, &weights).unwrap())
        });
        prop_assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn slice_concat_matches_differences(a in vec_strategy(8), w in vec_strategy(8)) {
        let err = fd_error(&a, &[4, 2], |t, x| {
            let top = t.slice(x, 0, 0, 1).unwrap();
            let rest = t.slice(x, 0, 1, 4).unwrap();
            let joined = t.concat(&[&rest, &top, &top], 0).unwrap();
            let weights = Tensor::new(w.iter().copied().chain([0.5, -0.25]).collect(), &[5, 2]).unwrap();
            t.sum(&t.mul(&joined, &weights).unwrap())
        });
        prop_assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn slice_then_concat_reconstructs(a in vec_strategy(12), cut in 1usize..4) {
        let t = Tape::new();
        let x = Tensor::new(a.clone(), &[4, 3]).unwrap();
        let head = t.slice(&x, 0, 0, cut).unwrap();
        let tail = t.slice(&x, 0, cut, 4).unwrap();
        let joined = t.concat(&[&head, &tail], 0).unwrap();
        prop_assert_eq!(joined.values(), &a[..]);
    }

    #[test]
    fn detach_is_value_transparent(a in vec_strategy(4), b in vec_strategy(4)) {
        let t = Tape::new();
        let x = t.param(a.clone(), &[4]).unwrap();
        let c = Tensor::new(b.clone(), &[4]).unwrap();
        let with_const = t.mul(&x, &c).unwrap();
        let tracked = t.param(b.clone(), &[4]).unwrap();
        let with_detach = t.mul(&x, &t.detach(&tracked)).unwrap();
        prop_assert_eq!(with_const.values(), with_detach.values());
    }

    #[test]
    fn composite_expression_matches_differences(a in vec_strategy(6)) {
        // relu kinks are avoided by shifting inputs away from zero.
        let shifted: Vec<f64> = a.iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect();
        let err = fd_error(&shifted, &[3, 2], |t, x| {
            let w = Tensor::new(vec![0.3, -1.2, 0.7, 0.4], &[2, 2]).unwrap();
            let h = t.relu(&t.matmul(x, &w).unwrap());
            let z = t.add(&t.mul(&h, x).unwrap(), &t.scale(x, 0.5)).unwrap();
            let r = t.reduce_sum(&z, &[0]).unwrap();
            t.softmax_cross_entropy(&r, &[1]).unwrap()
        });
        prop_assert!(err <= 1e-4, "rel err {err}");
    }
}

#[test]
fn backward_twice_accumulates() {
    let tape = Tape::new();
    let x = tape.param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
    let y = tape.sum(&tape.mul(&x, &x).unwrap());
    tape.backward(&y).unwrap();
    let once = tape.grad(&x).unwrap();
    tape.backward(&y).unwrap();
    let twice = tape.grad(&x).unwrap();
    assert_eq!(once, vec![2.0, -4.0, 6.0]);
    assert_eq!(twice, vec![4.0, -8.0, 12.0]);
}

#[test]
fn detach_examples() {
    let tape = Tape::new();
    let x = tape.param(vec![1.5, -2.0], &[2]).unwrap();
    let d = tape.detach(&x);
    assert_eq!(d.values(), x.values());
    assert!(!d.is_tracked());
    let y = tape.sum(&tape.mul(&x, &d).unwrap());
    tape.backward(&y).unwrap();
    // Gradient is detach(x), not 2x.
    assert_eq!(tape.grad(&x).unwrap(), vec![1.5, -2.0]);
}

#[test]
fn conv1d_matches_naive_loops() {
    let (len, cin, cout, k, pad) = (7, 2, 3, 3, 1);
    let input: Vec<f64> = (0..len * cin).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
    let kernel: Vec<f64> = (0..cout * cin * k).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
    let bias = vec![0.1, -0.2, 0.3];
    let tape = Tape::new();
    let out = tape
        .conv1d(
            &Tensor::new(input.clone(), &[len, cin]).unwrap(),
            &Tensor::new(kernel.clone(), &[cout, cin, k]).unwrap(),
            &Tensor::new(bias.clone(), &[cout]).unwrap(),
            pad,
        )
        .unwrap();
    let out_len = len + 2 * pad - k + 1;
    assert_eq!(out.shape(), &[out_len, cout]);
    for t in 0..out_len {
        for o in 0..cout {
            let mut acc = bias[o];
            for c in 0..cin {
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if (0..len as isize).contains(&src) {
                        acc += kernel[(o * cin + c) * k + j] * input[src as usize * cin + c];
                    }
                }
            }
            assert!((out.values()[t * cout + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits: [[f64; 3]; 2] = [[2.0, -1.0, 0.5], [0.0, 3.0, -2.0]];
    let labels = [2, 1];
    let expected: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, y)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / 2.0;
    let tape = Tape::new();
    let t = Tensor::new(logits.concat(), &[2, 3]).unwrap();
    let loss = tape.softmax_cross_entropy(&t, &labels).unwrap();
    assert!((loss.item().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn identity_matmul_and_reduce() {
    let tape = Tape::new();
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert_eq!(tape.matmul(&eye, &a).unwrap().values(), a.values());
    let total = tape.reduce_sum(&Tensor::ones(&[2, 3]), &[]).unwrap();
    assert_eq!(total.item(), Some(6.0));
}

#[test]
fn primitive_suite_over_hundred_inputs() {
    let report = s3_core::gradcheck::run(&GradcheckOptions {
        seed: 17,
        trials: 100,
        corrupt: None,
    })
    .unwrap();
    for case in &report.cases {
        assert!(case.passed(), "{} rel err {}", case.name, case.max_rel_err);
    }
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.param(vec![0.3, -0.7, 1.1, 0.2], &[2, 2]).unwrap();
        let y = tape.matmul(&x, &x).unwrap();
        let loss = tape.softmax_cross_entropy(&y, &[0, 1]).unwrap();
        tape.backward(&loss).unwrap();
        (loss.item().unwrap().to_bits(), tape.grad(&x).unwrap())
    };
    assert_eq!(run(), run());
}
