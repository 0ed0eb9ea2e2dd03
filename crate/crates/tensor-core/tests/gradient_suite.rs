//! Finite-difference verification of every kernel, plus row-wise invariants.

use proptest::prelude::*;
use std::time::Instant;
use tensor_core::gradcheck::{kernel_suite, FD_STEP};
use tensor_core::rng::Prng;
use tensor_core::{Tape, Tensor};

#[test]
fn every_kernel_matches_central_differences() {
    let started = Instant::now();
    let reports = kernel_suite(100, 0xC0FFEE).expect("suite runs");
    for r in &reports {
        assert!(
            r.max_rel_err <= 1e-5,
            "{}: max relative error {} over {} instances",
            r.kernel,
            r.max_rel_err,
            r.instances
        );
    }
    assert!(reports.len() >= 20, "expected full kernel coverage");
    assert!(
        started.elapsed().as_secs() < 60,
        "gradient suite too slow: {:?}",
        started.elapsed()
    );
}

#[test]
fn composite_gradient_is_deterministic() {
    let run = || {
        let mut rng = Prng::new(99);
        let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let x = x.requires_grad();
        let tape = Tape::new();
        let sm = tape.softmax(&x).unwrap();
        let y = tape.matmul(&sm, &x).unwrap();
        let loss = tape.mean_all(&y).unwrap();
        let grads = tape.gradients(&loss).unwrap();
        grads.get(&x).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_a_distribution(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = Prng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 3.0).collect();
        let x = Tensor::matrix(rows, cols, data).unwrap();
        let tape = Tape::new();
        let y = tape.softmax(&x).unwrap();
        for i in 0..rows {
            let row = y.row_slice(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row sum {sum}");
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = Prng::new(seed ^ 0xABCD);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() + 0.1).collect();
        let x = Tensor::matrix(rows, cols, data).unwrap();
        let tape = Tape::new();
        let (y, zero_rows) = tape.l2_normalize(&x).unwrap();
        for i in 0..rows {
            if zero_rows.contains(&i) {
                continue;
            }
            let norm: f64 = y.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9, "row norm {norm}");
        }
    }

    #[test]
    fn concat_then_slice_roundtrips(
        widths in proptest::collection::vec(1usize..5, 1..4),
        rows in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = Prng::new(seed ^ 0x77);
        let parts: Vec<Tensor> = widths
            .iter()
            .map(|&w| {
                let data: Vec<f64> = (0..rows * w).map(|_| rng.normal()).collect();
                Tensor::matrix(rows, w, data).unwrap()
            })
            .collect();
        let tape = Tape::new();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cat = tape.concat_cols(&refs).unwrap();
        let mut offset = 0;
        for (part, &w) in parts.iter().zip(&widths) {
            let back = tape.slice_cols(&cat, offset, w).unwrap();
            prop_assert_eq!(back.data(), part.data());
            offset += w;
        }
    }
}

#[test]
fn finite_difference_step_documented() {
    assert_eq!(FD_STEP, 1e-6);
}
