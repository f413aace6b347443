//! Named parameter storage and the Adam update rule.
//!
//! A [`ParameterStore`] owns every trainable tensor by name (sorted map, so
//! iteration and serialization order are stable), together with the Adam
//! first/second-moment buffers and the shared step counter. Training binds
//! parameters onto a [`Tape`](super::Tape), runs backward, and feeds the
//! name-keyed gradients back through [`ParameterStore::adam_step`].

use super::{AutodiffError, Tape, Value};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named `f64` tensors with Adam optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics if the name is already taken — parameter
    /// names are created once, at network construction.
    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(data.len(), rows * cols, "parameter data length mismatch");
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                rows,
                cols,
                data: data.clone(),
                m: vec![0.0; rows * cols],
                v: vec![0.0; rows * cols],
            },
        );
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<(usize, usize)> {
        self.entries.get(name).map(|e| (e.rows, e.cols))
    }

    pub fn data(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.data.as_slice())
    }

    /// Overwrites a tensor's values (shape must match). Used by tests and by
    /// closed-form initialization.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) {
        let e = self.entries.get_mut(name).expect("unknown parameter");
        assert_eq!(data.len(), e.data.len(), "set_data length mismatch");
        e.data = data;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clears the Adam moment buffers and the step counter while keeping
    /// the parameter data, so a new training stage starts with fresh
    /// optimizer state.
    pub fn reset_moments(&mut self) {
        self.step = 0;
        for e in self.entries.values_mut() {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Binds a stored tensor onto a tape as a named parameter leaf.
    pub fn bind(&self, tape: &Tape, name: &str) -> Value {
        let e = self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        tape.named_param(name, e.rows, e.cols, e.data.clone())
    }

    /// One Adam update with bias correction:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
    /// `p <- p - lr * m-hat / (sqrt(v-hat) + eps)`.
    ///
    /// Only the parameters named in `grads` are updated (others are frozen
    /// for this step); the step counter advances once per call.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        cfg: &AdamConfig,
    ) -> Result<(), AutodiffError> {
        // Validate everything before mutating anything.
        for (name, g) in grads {
            let e = self
                .entries
                .get(name)
                .ok_or_else(|| AutodiffError::NameMismatch(name.clone()))?;
            if g.len() != e.data.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: (e.rows, e.cols),
                    rhs: (g.len(), 1),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, g) in grads {
            let e = self.entries.get_mut(name).expect("validated above");
            for i in 0..g.len() {
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                e.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    // -- checkpoint plumbing (the file format itself lives in `io`) --------

    pub(crate) fn parts(&self) -> (u64, impl Iterator<Item = (&String, &Entry)>) {
        (self.step, self.entries.iter())
    }

    pub(crate) fn from_parts(
        step: u64,
        parts: Vec<(String, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)>,
    ) -> Self {
        let mut entries = BTreeMap::new();
        for (name, rows, cols, data, m, v) in parts {
            entries.insert(name, Entry { rows, cols, data, m, v });
        }
        ParameterStore { entries, step }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, the very first update is lr * g / (|g| + eps),
        // i.e. almost exactly lr in the direction opposing the gradient.
        let mut store = ParameterStore::new();
        store.insert("p", 1, 2, vec![1.0, -2.0]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![10.0, -0.5]);
        let cfg = AdamConfig::default();
        store.adam_step(&grads, &cfg).unwrap();
        let p = store.data("p").unwrap();
        assert_abs_diff_eq!(p[0], 1.0 - cfg.lr, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], -2.0 + cfg.lr, epsilon = 1e-9);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize (p - 3)^2; a few hundred Adam steps should land near 3.
        let mut store = ParameterStore::new();
        store.insert("p", 1, 1, vec![0.0]);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let p = store.data("p").unwrap()[0];
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), vec![2.0 * (p - 3.0)]);
            store.adam_step(&grads, &cfg).unwrap();
        }
        assert_abs_diff_eq!(store.data("p").unwrap()[0], 3.0, epsilon = 1e-3);
    }

    #[test]
    fn adam_rejects_unknown_names_and_bad_shapes() {
        let mut store = ParameterStore::new();
        store.insert("p", 1, 2, vec![0.0, 0.0]);
        let cfg = AdamConfig::default();

        let mut unknown = BTreeMap::new();
        unknown.insert("q".to_string(), vec![1.0]);
        assert_eq!(
            store.adam_step(&unknown, &cfg).unwrap_err(),
            AutodiffError::NameMismatch("q".into())
        );

        let mut bad = BTreeMap::new();
        bad.insert("p".to_string(), vec![1.0]);
        assert!(matches!(
            store.adam_step(&bad, &cfg).unwrap_err(),
            AutodiffError::ShapeMismatch { .. }
        ));
        // Failed calls must not advance the step counter.
        assert_eq!(store.step_count(), 0);
    }
}
