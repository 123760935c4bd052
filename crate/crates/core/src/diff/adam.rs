//! Adam with bias correction and per-group learning-rate multipliers.

use crate::diff::{ParamStore, Tensor};
use crate::error::{domain, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments1: Vec<Vec<f64>>,
    moments2: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments1: store.iter().map(|g| vec![0.0; g.data.len()]).collect(),
            moments2: store.iter().map(|g| vec![0.0; g.data.len()]).collect(),
        }
    }

    pub fn moments(&self, idx: usize) -> (&[f64], &[f64]) {
        (&self.moments1[idx], &self.moments2[idx])
    }

    /// Overwrites a group's moment buffers (checkpoint restore).
    pub fn set_moments(&mut self, idx: usize, m1: Vec<f64>, m2: Vec<f64>) {
        assert_eq!(m1.len(), self.moments1[idx].len(), "moment length mismatch");
        assert_eq!(m2.len(), self.moments2[idx].len(), "moment length mismatch");
        self.moments1[idx] = m1;
        self.moments2[idx] = m2;
    }

    /// One update over all trainable groups. `grads[i]` pairs with group i;
    /// None means the group received no gradient this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(domain("adam_step: gradient/group count mismatch"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let Some(grad) = &grads[idx] else { continue };
            let g = store.group_mut(idx);
            if !g.trainable {
                continue;
            }
            if grad.data.len() != g.data.len() {
                return Err(domain(format!("adam_step: shape mismatch for group {}", g.name)));
            }
            let lr = self.lr * g.lr_mult;
            let (m, v) = (&mut self.moments1[idx], &mut self.moments2[idx]);
            for i in 0..g.data.len() {
                let gi = grad.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                g.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Applies the same row mapping that was applied to the parameter group,
    /// so cloned rows inherit their source moments and dropped rows vanish.
    pub fn reindex_rows(&mut self, idx: usize, cols: usize, mapping: &[usize]) {
        for moments in [&mut self.moments1[idx], &mut self.moments2[idx]] {
            let mut data = Vec::with_capacity(mapping.len() * cols);
            for &i in mapping {
                data.extend_from_slice(&moments[i * cols..(i + 1) * cols]);
            }
            *moments = data;
        }
    }

    /// Shape consistency with the store; used by the training integrity check.
    pub fn consistent_with(&self, store: &ParamStore) -> bool {
        store.len() == self.moments1.len()
            && store
                .iter()
                .enumerate()
                .all(|(i, g)| self.moments1[i].len() == g.data.len() && self.moments2[i].len() == g.data.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", data.len(), 1, data, 1.0);
        s
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = store_with(vec![1.0, -2.0, 3.0]);
        let mut adam = AdamState::new(&s, 1e-2);
        adam.step(&mut s, &[Some(Tensor::new(3, 1, vec![0.0; 3]))]).unwrap();
        assert_eq!(s.get("p").data, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // one bias-corrected step from zero moments: |update| = lr * g/(|g| + eps')
        // which is ~lr independent of |g|.
        for g in [1e-4, 1.0, 1e4] {
            let mut s = store_with(vec![0.0]);
            let mut adam = AdamState::new(&s, 1e-2);
            adam.step(&mut s, &[Some(Tensor::new(1, 1, vec![g]))]).unwrap();
            let update = s.get("p").data[0].abs();
            assert!((update - 1e-2).abs() < 1e-5, "g={g} update={update}");
        }
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut s = store_with(vec![0.5, -0.5]);
            let mut adam = AdamState::new(&s, 3e-3);
            for i in 0..50 {
                let g = Tensor::new(2, 1, vec![(i as f64).sin(), (i as f64).cos()]);
                adam.step(&mut s, &[Some(g)]).unwrap();
            }
            s.get("p").data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let mut s = store_with(vec![1.0]);
        let mut adam = AdamState::new(&s, 1e-2);
        assert!(adam.step(&mut s, &[Some(Tensor::new(2, 1, vec![0.0; 2]))]).is_err());
    }

    #[test]
    fn reindex_rows_tracks_mapping() {
        let mut s = ParamStore::new();
        s.add("p", 3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 1.0);
        let mut adam = AdamState::new(&s, 1e-2);
        adam.step(&mut s, &[Some(Tensor::new(3, 2, vec![1.0; 6]))]).unwrap();
        let mapping = vec![2, 0, 0];
        s.reindex_rows("p", &mapping).unwrap();
        adam.reindex_rows(0, 2, &mapping);
        assert!(adam.consistent_with(&s));
        let (m1, _) = adam.moments(0);
        assert_eq!(m1.len(), 6);
        assert_eq!(m1[2..4], m1[4..6]);
    }
}
