use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; parameters and state are untouched.
    SkippedNonFinite,
}

impl AdamW {
    /// One update with learning rate `lr`. Weight decay is applied to the
    /// parameter directly, separately from the adaptive step.
    pub fn step<T: Element>(
        &self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<StepOutcome> {
        if grads.len() != params.len() || state.m.len() != params.len() {
            return Err(TensorError::invalid(
                "adamw",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            ));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() || state.m[i].len() != p.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step = T::of(lr / bc1);
        let bc2 = T::of(bc2);
        let decay = T::of(1.0 - lr * self.weight_decay);

        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            let mut p = params.get(id).data().to_vec();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let denom = (v[j] / bc2).sqrt() + eps;
                p[j] = p[j] * decay - step * m[j] / denom;
            }
            params.set(id, Tensor::new(params.get(id).shape(), p)?)?;
        }
        Ok(StepOutcome::Applied)
    }
}

/// Linear warmup from 0 to `lr0`, then half-cosine down to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: u64, warmup_steps: u64, total_steps: u64, lr0: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return lr0 * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return lr0;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    lr0 * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, SpecBuilder};

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut b = SpecBuilder::new();
        b.add("x", [1], Init::Zeros);
        let mut s = ParamStore::init(&b.finish(), 0).unwrap();
        s.set(crate::params::ParamId(0), Tensor::from_f64([1], &[v]).unwrap())
            .unwrap();
        s
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.tensors()[0].data()[0]
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s);
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = [Tensor::zeros([1]).unwrap()];
        opt.step(&mut s, &g, &mut st, 0.1).unwrap();
        assert_eq!(value(&s), 1.5);
    }

    #[test]
    fn pure_decay_branch() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        let g = [Tensor::zeros([1]).unwrap()];
        AdamW::default().step(&mut s, &g, &mut st, 1.0).unwrap();
        assert!((value(&s) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_unroll() {
        let (lr, wd) = (0.01, 0.05);
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let g = [Tensor::from_f64([1], &[1.0]).unwrap()];
        let opt = AdamW::default();
        opt.step(&mut s, &g, &mut st, lr).unwrap();
        opt.step(&mut s, &g, &mut st, lr).unwrap();
        // with a constant gradient the bias-corrected m̂ = v̂ = 1 at every step
        let mhat = 1.0;
        let vhat: f64 = 1.0;
        let upd = lr * mhat / (vhat.sqrt() + 1e-8);
        let mut x = 1.0;
        for _ in 0..2 {
            x = x * (1.0 - lr * wd) - upd;
        }
        assert!((value(&s) - x).abs() < 1e-12, "{} vs {x}", value(&s));
    }

    #[test]
    fn non_finite_grad_skips() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let g = [Tensor::from_f64([1], &[f64::NAN]).unwrap()];
        let out = AdamW::default().step(&mut s, &g, &mut st, 0.1).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(value(&s), 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let lr0 = 5e-4;
        assert_eq!(cosine_warmup_lr(0, 10, 110, lr0), 0.0);
        assert_eq!(cosine_warmup_lr(10, 10, 110, lr0), lr0);
        assert!(cosine_warmup_lr(110, 10, 110, lr0).abs() < 1e-20);
        assert!((cosine_warmup_lr(60, 10, 110, lr0) - lr0 / 2.0).abs() < 1e-18);
        // continuity at the junction
        assert!((cosine_warmup_lr(10, 10, 110, lr0) - cosine_warmup_lr(9, 10, 110, lr0) - lr0 / 10.0).abs() < 1e-18);
    }
}
