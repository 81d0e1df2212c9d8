use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        Self::for_shapes(params.tensors())
    }

    pub fn for_shapes(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter in `params` with the matching entry of
    /// `grads`. `skip[i]` leaves parameter `i` untouched.
    pub fn step_tensors(
        &self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
        skip: &[bool],
        state: &mut AdamState,
        lr: f64,
    ) -> Result<()> {
        if state.m.len() != params.len() || grads.len() != params.len() {
            return Err(AutodiffError::Parameter(format!(
                "optimizer state holds {} buffers for {} parameters",
                state.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !skip[i] && !g.is_finite() {
                return Err(AutodiffError::Divergence {
                    param: names[i].clone(),
                });
            }
            if g.numel() != params[i].numel() || state.m[i].len() != params[i].numel() {
                return Err(AutodiffError::Shape {
                    op: "adamw_step",
                    lhs: params[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            if skip[i] {
                continue;
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (((p, g), mi), vi) in params[i]
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p *= decay;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Updates the trainable members of a [`ParamSet`].
    pub fn step(&self, params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
        let names = params.names().to_vec();
        let skip: Vec<bool> = params.ids().map(|id| !params.is_trainable(id)).collect();
        let mut tensors = params.tensors().to_vec();
        self.step_tensors(&mut tensors, grads, &names, &skip, state, lr)?;
        params.replace_tensors(tensors);
        Ok(())
    }
}

/// Learning-rate schedule evaluated per optimizer step (0-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup to `peak`, then cosine decay to `floor` at `total`.
    Cosine {
        peak: f64,
        floor: f64,
        warmup: u64,
        total: u64,
    },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine {
                peak,
                floor,
                warmup,
                total,
            } => {
                if step < warmup {
                    peak * (step + 1) as f64 / warmup as f64
                } else if step >= total {
                    floor
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let progress = (step - warmup) as f64 / span;
                    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn decay_only_step_scales_params() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap()];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::for_shapes(&params);
        opt.step_tensors(&mut params, &grads, &names(1), &[false], &mut state, 1.0)
            .unwrap();
        let got = params[0].data();
        for (g, w) in got.iter().zip([0.9, -1.8, 3.6]) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // m = 0.1 g, v = 0.05 g², bias corrections divide those back to g and g².
        let (lr, wd, eps, g, p0) = (0.1, 0.01, 1e-8, 2.0, 1.0);
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps,
            weight_decay: wd,
        };
        let mut params = vec![Tensor::scalar(p0)];
        let grads = vec![Tensor::scalar(g)];
        let mut state = AdamState::for_shapes(&params);
        opt.step_tensors(&mut params, &grads, &names(1), &[false], &mut state, lr)
            .unwrap();
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.95) * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.95);
        let want = p0 * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        assert!((params[0].item() - want).abs() < 1e-15);
        assert!((params[0].item() - (0.999 - 0.1)).abs() < 1e-8);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn identical_inputs_give_identical_states() {
        let run = || {
            let opt = AdamW::default();
            let mut params = vec![Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()];
            let grads = vec![Tensor::new(vec![2], vec![0.5, 1e-3]).unwrap()];
            let mut state = AdamState::for_shapes(&params);
            for _ in 0..2 {
                opt.step_tensors(&mut params, &grads, &names(1), &[false], &mut state, 0.01)
                    .unwrap();
            }
            (params, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let opt = AdamW::default();
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
        let mut state = AdamState::for_shapes(&params);
        let err = opt
            .step_tensors(&mut params, &grads, &names(2), &[false, false], &mut state, 0.1)
            .unwrap_err();
        assert_eq!(err, AutodiffError::Divergence { param: "p1".into() });
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            peak: 1.0,
            floor: 0.0,
            warmup: 10,
            total: 110,
        };
        assert!((s.at(9) - 1.0).abs() < 1e-12);
        assert!((s.at(60) - 0.5).abs() < 1e-12);
        assert_eq!(s.at(200), 0.0);
    }
}
