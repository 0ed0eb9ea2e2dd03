//! AdamW with decoupled weight decay and a cosine schedule with linear
//! warm-up over the first 15% of training.

use tensor_core::{Gradients, Tensor};

use crate::error::Result;
use crate::model::ParameterStore;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParameterStore, weight_decay: f64) -> AdamW {
        let m = (0..store.len())
            .map(|i| vec![0.0; store.tensor_at(i).numel()])
            .collect();
        let v = (0..store.len())
            .map(|i| vec![0.0; store.tensor_at(i).numel()])
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    /// One decoupled-decay update over every parameter in store order.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let tensor = store.tensor_at(i);
            let grad = grads.get(tensor);
            let g = grad.data();
            let mut data = tensor.data().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -=
                    lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * data[k]);
            }
            let shape = tensor.shape().to_vec();
            store.set(i, Tensor::from_vec(&shape, data)?);
        }
        Ok(())
    }
}

/// Linear warm-up to the peak over the first `warmup_frac` of training,
/// then cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct CosineWarmup {
    pub peak_lr: f64,
    pub warmup_frac: f64,
}

impl CosineWarmup {
    pub fn new(peak_lr: f64, warmup_frac: f64) -> CosineWarmup {
        CosineWarmup {
            peak_lr,
            warmup_frac,
        }
    }

    /// Learning rate at `progress` ∈ [0, 1] through training.
    pub fn at_progress(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        if p < self.warmup_frac {
            self.peak_lr * p / self.warmup_frac
        } else if self.warmup_frac >= 1.0 {
            self.peak_lr
        } else {
            let span = (p - self.warmup_frac) / (1.0 - self.warmup_frac);
            self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * span).cos())
        }
    }

    /// Step-indexed convenience for a fixed step count.
    pub fn at_step(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return 0.0;
        }
        self.at_progress(step as f64 / total_steps as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Modality;
    use std::collections::BTreeMap;

    #[test]
    fn schedule_starts_at_zero_peaks_at_warmup_and_decays() {
        let sched = CosineWarmup::new(1e-2, 0.15);
        assert_eq!(sched.at_step(0, 1000), 0.0);
        let peak = sched.at_step(150, 1000);
        assert!((peak - 1e-2).abs() < 1e-12);
        for step in 0..150 {
            assert!(sched.at_step(step, 1000) < peak + 1e-15);
        }
        let end = sched.at_step(999, 1000);
        assert!(end < 1e-5, "end lr {end}");
        // monotone decay after the peak
        let mut prev = peak;
        for step in (150..1000).step_by(50) {
            let lr = sched.at_step(step, 1000);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn adamw_reduces_a_quadratic() {
        use tensor_core::Tape;
        let spec = crate::model::ModelSpec {
            d: 2,
            d_in: 4,
            mhca_heads: 1,
            gat_heads: 1,
            use_ffn: false,
            modalities: vec![Modality::Graph],
            feature_dims: BTreeMap::new(),
            entities_kg1: 1,
            entities_kg2: 1,
        };
        let mut store = spec.init_params(3).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        let loss_of = |store: &ParameterStore| {
            let tape = Tape::new();
            let x = store.get("xg.1").unwrap();
            let sq = tape.mul(x, x).unwrap();
            tape.sum_all(&sq).unwrap().item().unwrap()
        };
        let initial = loss_of(&store);
        for _ in 0..200 {
            let tape = Tape::new();
            let x = store.get("xg.1").unwrap().clone();
            let sq = tape.mul(&x, &x).unwrap();
            let loss = tape.sum_all(&sq).unwrap();
            let grads = tape.gradients(&loss).unwrap();
            opt.step(&mut store, &grads, 0.05).unwrap();
        }
        let after = loss_of(&store);
        assert!(after < initial * 0.01, "loss {initial} -> {after}");
    }
}
