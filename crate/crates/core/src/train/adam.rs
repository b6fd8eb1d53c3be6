//! Adam optimizer with global-norm gradient clipping.
//!
//! Moment vectors are kept in f64 regardless of the model dtype, keyed by
//! parameter name and created lazily on first use, so parameters that never
//! receive a gradient (frozen, or belonging to an encoder whose modality was
//! dropped) are never touched. Clipping rescales the whole gradient when its
//! global L2 norm exceeds the threshold, before any moment update.

use indexmap::IndexMap;

use crate::dtype::Real;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Completed update count (drives bias correction).
    pub t: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "contract violation: learning rate must be positive");
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update to every parameter named in `grads`.
    /// Returns the pre-clip global gradient norm.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Vec<T>>,
    ) -> f64 {
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|g| {
                let v = g.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert!(!p.frozen, "contract violation: gradient offered for frozen parameter {name}");
            assert!(
                p.data.len() == g.len(),
                "contract violation: gradient length {} vs parameter {name} length {}",
                g.len(),
                p.data.len()
            );
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i].to_f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let delta = self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                p.data[i] = T::from_f64(p.data[i].to_f64() - delta);
            }
        }
        norm
    }
}
