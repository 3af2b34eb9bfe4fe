use std::f64::consts::PI;
use std::path::Path;

use crate::diffcore::{load_all, save_all, Tensor};
use crate::error::{Error, Result};
use crate::netcore::ParamStore;

/// AdamW with decoupled weight decay applied to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.entries.iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter flagged in `trainable`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, trainable: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in store.entries.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let decay = if e.value.rank() >= 2 { self.weight_decay } else { 0.0 };
            let mut w = (*e.value).clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in w.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= lr * (mh / (vh.sqrt() + self.eps) + decay * *x);
            }
            e.value = std::sync::Arc::new(w);
        }
    }

    /// Moments as `[t, m₀, v₀, m₁, v₁, …]`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ts = vec![Tensor::scalar(self.t as f64)];
        for (m, v) in self.m.iter().zip(&self.v) {
            ts.push(Tensor::vector(m.clone()));
            ts.push(Tensor::vector(v.clone()));
        }
        save_all(path, &ts)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let ts = load_all(path.as_ref())?;
        if ts.len() != 1 + 2 * self.m.len() {
            return Err(Error::Format(format!(
                "optimizer state holds {} tensors, expected {}",
                ts.len(),
                1 + 2 * self.m.len()
            )));
        }
        self.t = ts[0].item() as u64;
        for i in 0..self.m.len() {
            let (m, v) = (&ts[1 + 2 * i], &ts[2 + 2 * i]);
            if m.numel() != self.m[i].len() || v.numel() != self.v[i].len() {
                return Err(Error::Format(format!("optimizer moment {i} has the wrong size")));
            }
            self.m[i] = m.data().to_vec();
            self.v[i] = v.data().to_vec();
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at `total`.
pub fn lr_at(step: u64, lr: f64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup.min(step)) as f64 / span).min(1.0);
    0.5 * lr * (1.0 + (PI * p).cos())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Group;

    #[test]
    fn schedule_shape() {
        assert!((lr_at(0, 1.0, 10, 100) - 0.1).abs() < 1e-15);
        assert!((lr_at(9, 1.0, 10, 100) - 1.0).abs() < 1e-15);
        assert!((lr_at(10, 1.0, 10, 100) - 1.0).abs() < 1e-15);
        assert!((lr_at(55, 1.0, 10, 100) - 0.5).abs() < 1e-12);
        assert!(lr_at(100, 1.0, 10, 100).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimizes_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![3.0, -2.0]), Group::Backbone);
        let b = store.add("b", Tensor::vector(vec![1.0]), Group::Prior);
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(a).data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut store, &[g, vec![1.0]], 0.01, &[true, false]);
        }
        assert!(store.get(a).data().iter().all(|x| x.abs() < 1e-3));
        assert_eq!(store.get(b).data(), &[1.0]);
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![1.0, 2.0]), Group::Backbone);
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, &[vec![0.5, -0.5]], 0.1, &[true]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("optim.t4dr");
        opt.save(&p).unwrap();
        let mut back = AdamW::new(&store, 0.1);
        back.load(&p).unwrap();
        assert_eq!(back.t, 1);
        assert_eq!(back.m, opt.m);
        assert_eq!(back.v, opt.v);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
