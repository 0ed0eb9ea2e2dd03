//! Central finite-difference verification of reverse-mode gradients.
//!
//! [`check`] compares tape gradients of an arbitrary scalar-valued graph
//! against `(f(x+h) − f(x−h)) / 2h`, element by element. [`kernel_suite`]
//! runs that comparison over randomized instances of every kernel.

use crate::rng::Prng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Result, TensorError};
use std::sync::Arc;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Scale-aware relative error: |a − b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub elements: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Verifies reverse-mode gradients of `f` (a scalar-valued graph over
/// `inputs`) against central finite differences with step `h`.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<CheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().requires_grad()).collect();
    let tape = Tape::new();
    let loss = f(&tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let grads = tape.gradients(&loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        f(&t, perturbed)?.item()
    };

    let mut max_rel = 0.0_f64;
    let mut elements = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut data_p = input.data().to_vec();
            let mut data_m = input.data().to_vec();
            data_p[j] += h;
            data_m[j] -= h;
            plus[i] = Tensor::from_vec(input.shape(), data_p)?;
            minus[i] = Tensor::from_vec(input.shape(), data_m)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic.data()[j], numeric));
            elements += 1;
        }
    }
    Ok(CheckReport {
        max_rel_err: max_rel,
        elements,
    })
}

/// Result of checking one kernel over many random instances.
#[derive(Clone, Debug)]
pub struct KernelReport {
    pub kernel: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    Tensor::from_vec(shape, data).expect("random tensor")
}

/// Random tensor whose entries stay away from a kink at zero.
fn rand_tensor_off_kink(rng: &mut Prng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.normal();
            if v.abs() < 1e-2 {
                v + 0.5_f64.copysign(if v >= 0.0 { 1.0 } else { -1.0 })
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("random tensor")
}

fn small_dims(rng: &mut Prng) -> (usize, usize) {
    (2 + rng.below(3), 2 + rng.below(4))
}

/// Runs `instances` random gradient checks per kernel and reports the worst
/// relative error seen for each. Composite graphs get one entry as well.
pub fn kernel_suite(instances: usize, seed: u64) -> Result<Vec<KernelReport>> {
    let mut rng = Prng::new(seed);
    let mut reports = Vec::new();

    // Reduce any output to a scalar through a fixed random weighting so every
    // output element influences the loss.
    fn weighted_sum(tape: &Tape, t: &Tensor, rng: &mut Prng) -> Result<Tensor> {
        let w: Vec<f64> = (0..t.numel()).map(|_| rng.uniform_in(0.5, 1.5)).collect();
        let w = Tensor::from_vec(t.shape(), w)?;
        let prod = tape.mul(t, &w)?;
        tape.sum_all(&prod)
    }

    macro_rules! kernel {
        ($name:literal, $gen:expr, $build:expr) => {{
            let mut worst = 0.0_f64;
            for _ in 0..instances {
                #[allow(clippy::redundant_closure_call)]
                let inputs: Vec<Tensor> = ($gen)(&mut rng);
                let wrng = rng.fork(0x5eed);
                let report = check(
                    |tape: &Tape, ins: &[Tensor]| {
                        #[allow(clippy::redundant_closure_call)]
                        let out: Tensor = ($build)(tape, ins)?;
                        weighted_sum(tape, &out, &mut wrng.clone())
                    },
                    &inputs,
                    FD_STEP,
                )?;
                worst = worst.max(report.max_rel_err);
            }
            reports.push(KernelReport {
                kernel: $name,
                instances,
                max_rel_err: worst,
            });
        }};
    }

    kernel!(
        "matmul",
        |rng: &mut Prng| {
            let (n, k) = small_dims(rng);
            let (_, m) = small_dims(rng);
            vec![rand_tensor(rng, &[n, k]), rand_tensor(rng, &[k, m])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.matmul(&ins[0], &ins[1])
    );

    kernel!(
        "add_same",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.add(&ins[0], &ins[1])
    );

    kernel!(
        "add_row_broadcast",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.add(&ins[0], &ins[1])
    );

    kernel!(
        "add_col_broadcast",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, 1])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.add(&ins[0], &ins[1])
    );

    kernel!(
        "mul_same",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.mul(&ins[0], &ins[1])
    );

    kernel!(
        "mul_scalar_broadcast",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[1])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.mul(&ins[0], &ins[1])
    );

    kernel!(
        "mul_row_broadcast",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.mul(&ins[0], &ins[1])
    );

    kernel!(
        "exp",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.exp(&ins[0])
    );

    kernel!(
        "log",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            let data: Vec<f64> = (0..r * c).map(|_| rng.uniform_in(0.2, 3.0)).collect();
            vec![Tensor::from_vec(&[r, c], data).unwrap()]
        },
        |tape: &Tape, ins: &[Tensor]| tape.log(&ins[0])
    );

    kernel!(
        "relu",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor_off_kink(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.relu(&ins[0])
    );

    kernel!(
        "leaky_relu",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor_off_kink(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.leaky_relu(&ins[0], 0.2)
    );

    kernel!(
        "elu",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor_off_kink(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.elu(&ins[0])
    );

    kernel!(
        "scale",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.scale(&ins[0], 2.5)
    );

    kernel!(
        "clamp_min",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor_off_kink(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.clamp_min(&ins[0], 0.0)
    );

    kernel!(
        "concat_cols",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            let (_, c2) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c2])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.concat_cols(&[&ins[0], &ins[1]])
    );

    kernel!(
        "concat_rows",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            let (r2, _) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r2, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.concat_rows(&[&ins[0], &ins[1]])
    );

    kernel!(
        "slice_cols",
        |rng: &mut Prng| {
            let r = 2 + rng.below(3);
            vec![rand_tensor(rng, &[r, 5])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.slice_cols(&ins[0], 1, 3)
    );

    kernel!(
        "gather_rows",
        |rng: &mut Prng| vec![rand_tensor(rng, &[4, 3])],
        |tape: &Tape, ins: &[Tensor]| tape.gather_rows(&ins[0], &[2, 0, 2])
    );

    kernel!(
        "transpose",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.transpose(&ins[0])
    );

    kernel!(
        "reshape",
        |rng: &mut Prng| {
            let r = 2 + rng.below(3);
            vec![rand_tensor(rng, &[r, 4])]
        },
        |tape: &Tape, ins: &[Tensor]| {
            let n = ins[0].numel();
            tape.reshape(&ins[0], &[n])
        }
    );

    kernel!(
        "softmax",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.softmax(&ins[0])
    );

    kernel!(
        "masked_softmax",
        |rng: &mut Prng| {
            let r = 2 + rng.below(3);
            let c = 4;
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| {
            let (r, c) = ins[0].rows_cols();
            // deterministic mask with at least one live entry per row
            let mask: Vec<bool> = (0..r * c).map(|k| k % 3 != 1 || k % c == 0).collect();
            tape.masked_softmax(&ins[0], &Arc::new(mask))
        }
    );

    kernel!(
        "layer_norm",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![
                rand_tensor(rng, &[r, c]),
                rand_tensor(rng, &[c]),
                rand_tensor(rng, &[c]),
            ]
        },
        |tape: &Tape, ins: &[Tensor]| tape.layer_norm(&ins[0], &ins[1], &ins[2])
    );

    kernel!(
        "l2_normalize",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor_off_kink(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| Ok(tape.l2_normalize(&ins[0])?.0)
    );

    kernel!(
        "sum_all",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.sum_all(&ins[0])
    );

    kernel!(
        "mean_all",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.mean_all(&ins[0])
    );

    kernel!(
        "sum_axis0",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.sum_axis0(&ins[0])
    );

    kernel!(
        "sum_axis1",
        |rng: &mut Prng| {
            let (r, c) = small_dims(rng);
            vec![rand_tensor(rng, &[r, c])]
        },
        |tape: &Tape, ins: &[Tensor]| tape.sum_axis1(&ins[0])
    );

    // Composite graph mixing five tensors through several kernels.
    kernel!(
        "composite",
        |rng: &mut Prng| {
            vec![
                rand_tensor(rng, &[3, 4]),
                rand_tensor(rng, &[4, 3]),
                rand_tensor(rng, &[3]),
                rand_tensor(rng, &[3]),
                rand_tensor(rng, &[3, 3]),
            ]
        },
        |tape: &Tape, ins: &[Tensor]| {
            let prod = tape.matmul(&ins[0], &ins[1])?;
            let normed = tape.layer_norm(&prod, &ins[2], &ins[3])?;
            let mixed = tape.add(&normed, &ins[4])?;
            let attn = tape.softmax(&mixed)?;
            let out = tape.matmul(&attn, &ins[4])?;
            let (unit, _) = tape.l2_normalize(&out)?;
            tape.exp(&tape.mean_all(&unit)?)
        }
    );

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_finite_differences() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let report = check(
            |tape, ins| {
                let sq = tape.mul(&ins[0], &ins[0])?;
                tape.sum_all(&sq)
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-7), "max err {}", report.max_rel_err);
    }
}
