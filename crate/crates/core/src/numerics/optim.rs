//! Named parameter sets, AdamW with decoupled weight decay, and the
//! cosine-annealing schedule with linear warmup.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Ordered, named model parameters. The order defines the parameter index
/// used by the tape and the flat checkpoint payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, DenseMatrix)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseMatrix) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn value(&self, idx: usize) -> &DenseMatrix {
        &self.entries[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut DenseMatrix {
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.values().len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let shapes: Vec<DenseMatrix> = params
            .iter()
            .map(|(_, p)| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamWState {
            m: shapes.clone(),
            v: shapes,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Decoupled weight decay is applied to the parameters
/// before the moment update.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<DenseMatrix>],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Contract("learning rate must be nonnegative".into()));
    }
    for (idx, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter '{}'",
                    params.name(idx)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for idx in 0..params.len() {
        let g = match grads.get(idx).and_then(|g| g.as_ref()) {
            Some(g) => g,
            None => continue,
        };
        let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
        let p = params.value_mut(idx);
        if wd > 0.0 {
            for v in p.values_mut() {
                *v -= lr * wd * *v;
            }
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..g.values().len() {
            let gi = g.values()[i];
            m.values_mut()[i] = b1 * m.values()[i] + (1.0 - b1) * gi;
            v.values_mut()[i] = b2 * v.values()[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.values()[i] / bc1;
            let v_hat = v.values()[i] / bc2;
            p.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine annealing to `floor_lr`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Contract(
                "warmup_steps must not exceed total_steps".into(),
            ));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
            floor_lr: 0.0,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        let lr = if step < self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else if self.total_steps == self.warmup_steps {
            self.base_lr
        } else {
            let progress =
                (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        Ok(lr.max(self.floor_lr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", DenseMatrix::from_vec(1, 1, vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = scalar_params(3.5);
        let mut state = AdamWState::new(&params, 0.0);
        let g = Some(DenseMatrix::zeros(1, 1));
        adamw_step(&mut params, &[g], &mut state, 0.1).unwrap();
        assert_eq!(params.value(0).scalar(), 3.5);
    }

    #[test]
    fn first_step_closed_form() {
        // bias-corrected m_hat / sqrt(v_hat) = 1 on the first step with g = 1
        let mut params = scalar_params(1.0);
        let mut state = AdamWState::new(&params, 0.0);
        let g = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap());
        adamw_step(&mut params, &[g], &mut state, 0.1).unwrap();
        assert!((params.value(0).scalar() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut params = ParamSet::new();
        params.push("embed.w1", DenseMatrix::zeros(1, 1));
        let mut state = AdamWState::new(&params, 0.0);
        let g = Some(DenseMatrix::zeros(1, 1).map(|_| f64::NAN));
        match adamw_step(&mut params, &[g], &mut state, 0.1) {
            Err(Error::Training(msg)) => assert!(msg.contains("embed.w1")),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    /// 20-step trajectory against an independent scalar AdamW reimplementation.
    #[test]
    fn trajectory_matches_scalar_oracle() {
        let lr = 0.05;
        let wd = 0.01;
        let mut params = scalar_params(2.0);
        let mut state = AdamWState::new(&params, wd);

        // oracle state
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut p = 2.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;

        for t in 1..=20u32 {
            let g = (t as f64 * 0.37).sin();
            let gm = Some(DenseMatrix::from_vec(1, 1, vec![g]).unwrap());
            adamw_step(&mut params, &[gm], &mut state, lr).unwrap();

            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            p -= lr * m_hat / (v_hat.sqrt() + eps);

            assert!((params.value(0).scalar() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-3, 10, 110).unwrap();
        assert!((s.lr_at(10).unwrap() - 1e-3).abs() < 1e-18);
        assert!(s.lr_at(110).unwrap().abs() < 1e-18);
        // midpoint of decay
        assert!((s.lr_at(60).unwrap() - 5e-4).abs() < 1e-12);
        assert!(s.lr_at(111).is_err());
    }

    #[test]
    fn schedule_continuous_at_warmup() {
        let s = LrSchedule::new(1e-3, 7, 50).unwrap();
        let before = s.lr_at(6).unwrap();
        let at = s.lr_at(7).unwrap();
        let after = s.lr_at(8).unwrap();
        assert!(before < at && after < at);
        assert!((at - 1e-3).abs() < 1e-18);
        for step in 0..=50 {
            let lr = s.lr_at(step).unwrap();
            assert!((0.0..=1e-3).contains(&lr));
        }
    }

    #[test]
    fn schedule_rejects_bad_warmup() {
        assert!(LrSchedule::new(1e-3, 20, 10).is_err());
    }
}
