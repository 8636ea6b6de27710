use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Result, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |n: usize| vec![T::zero(); n];
        Self {
            config,
            step_count: 0,
            m: params.iter().map(|(_, _, t)| zeros(t.len())).collect(),
            v: params.iter().map(|(_, _, t)| zeros(t.len())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update. Parameters without a gradient keep
/// their value but their moments still decay.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.len() != params.get(id).len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
    }
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as f64;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let step_size = T::from_f64(cfg.lr / (1.0 - cfg.beta1.powf(t)));
    let bc2_sqrt = T::from_f64((1.0 - cfg.beta2.powf(t)).sqrt());
    let eps = T::from_f64(cfg.eps);
    for id in params.ids() {
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        match grads.get(id) {
            Some(g) => {
                let p = params.get_mut(id).data_mut();
                for j in 0..p.len() {
                    m[j] = b1 * m[j] + (one - b1) * g[j];
                    v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                    p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
                }
            }
            None => {
                if m.iter().any(|x| *x != T::zero()) {
                    let p = params.get_mut(id).data_mut();
                    for j in 0..p.len() {
                        m[j] *= b1;
                        v[j] *= b2;
                        p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[3], &[value, -value, 2.0 * value]).unwrap())
            .unwrap();
        s
    }

    fn grads_of(store: &ParamStore<f64>, g: &[f64]) -> Gradients<f64> {
        let mut out = Gradients::zeros_like(store);
        let mut tape = Tape::with_params(store);
        let w = tape.param(crate::tensor::ParamId(0));
        let c = tape.constant(Tensor::from_f64(&[3], g).unwrap());
        let prod = tape.mul(w, c).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        out.accumulate(&tape.param_gradients());
        out
    }

    #[test]
    fn first_step_moves_each_weight_by_about_lr() {
        let mut store = single(1.0);
        let before = store.get(crate::tensor::ParamId(0)).clone();
        let cfg = AdamConfig::with_lr(0.01);
        let mut state = AdamState::new(&store, cfg);
        let g = [3.0, -1e-3, 1e-9];
        let grads = grads_of(&store, &g);
        adam_step(&mut store, &grads, &mut state).unwrap();
        let after = store.get(crate::tensor::ParamId(0));
        for (j, &gj) in g.iter().enumerate() {
            let delta = before.data()[j] - after.data()[j];
            let expect = cfg.lr * gj / (gj.abs() + cfg.eps);
            assert!((delta - expect).abs() < 1e-12, "{delta} vs {expect}");
            assert!(delta.abs() <= cfg.lr + 1e-15);
        }
        // |g| >> eps: the step saturates at lr.
        assert!((before.data()[0] - after.data()[0] - 0.01).abs() < 1e-9);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = single(0.5);
        let before = store.get(crate::tensor::ParamId(0)).clone();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let grads = grads_of(&store, &[0.0, 0.0, 0.0]);
        adam_step(&mut store, &grads, &mut state).unwrap();
        assert_eq!(store.get(crate::tensor::ParamId(0)), &before);
    }

    #[test]
    fn step_count_increments_once_per_step() {
        let mut store = single(1.0);
        let mut state = AdamState::new(&store, AdamConfig::default());
        for n in 1..=4 {
            let g = grads_of(&store, &[1.0, 1.0, 1.0]);
            adam_step(&mut store, &g, &mut state).unwrap();
            assert_eq!(state.step_count(), n);
            assert_eq!(state.first_moment(0).len(), 3);
            assert_eq!(state.second_moment(0).len(), 3);
        }
    }

    #[test]
    fn quadratic_descends_monotonically_and_matches_scalar_simulation() {
        // f(w) = w^2 from w = 1 with lr = 0.1.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new(&store, cfg);

        // Independent scalar simulation of the textbook update.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expected.push(w);
        }

        let mut prev = 1.0;
        for want in expected {
            let mut tape = Tape::with_params(&store);
            let x = tape.param(id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            let g = tape.param_gradients();
            drop(tape);
            adam_step(&mut store, &g, &mut state).unwrap();
            let now: f64 = store.get(id).data()[0];
            assert!(now < prev, "w must decrease: {now} !< {prev}");
            assert!((now - want).abs() < 1e-12, "{now} vs {want}");
            prev = now;
        }
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut store = single(1.0);
        let mut other = ParamStore::<f64>::new();
        other.add("a", Tensor::zeros(&[1])).unwrap();
        other.add("b", Tensor::zeros(&[1])).unwrap();
        let mut state = AdamState::new(&other, AdamConfig::default());
        let g = Gradients::zeros_like(&store);
        assert!(adam_step(&mut store, &g, &mut state).is_err());
    }
}
