//! Small MLP building blocks on the autodiff tape.
//!
//! Networks here are plain fully-connected stacks with softplus activations,
//! an optional input skip connection, and a linear output layer. Activations
//! are laid out features-by-batch (`[dim, n]`), parameters multiply from the
//! left, and all parameters live in a [`ParameterStore`] under a per-network
//! name prefix (`"sdf.w0"`, `"sdf.b0"`, ...).

use crate::autodiff::{ParameterStore, Tape, Value};
use rand::Rng;

/// A standard-normal sample via the Box-Muller transform. Kept local so
/// weight initialization stays bit-reproducible under a fixed seed.
pub fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sinusoidal positional encoding: for input rows `p` appends
/// `sin(2^k p), cos(2^k p)` for `k = 0..octaves`, keeping the raw input as
/// the leading rows. `[d, n] -> [d (1 + 2 octaves), n]`.
pub fn positional_encoding(v: &Value, octaves: usize) -> Value {
    let mut parts: Vec<Value> = Vec::with_capacity(1 + 2 * octaves);
    parts.push(v.clone());
    for k in 0..octaves {
        let scaled = v.scale((1u64 << k) as f64);
        parts.push(scaled.sin());
        parts.push(scaled.cos());
    }
    let refs: Vec<&Value> = parts.iter().collect();
    Value::concat_rows(&refs)
}

/// Number of rows produced by [`positional_encoding`] for `d` input rows.
pub fn encoded_dim(d: usize, octaves: usize) -> usize {
    d * (1 + 2 * octaves)
}

/// Description of a fully-connected network; the actual parameters live in a
/// [`ParameterStore`] under `prefix`.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    input_dim: usize,
    hidden_dim: usize,
    hidden_layers: usize,
    output_dim: usize,
    /// Hidden layer index whose input is augmented with the network input.
    skip_at: Option<usize>,
}

/// Tape-bound parameter values for one MLP, created once per recording so
/// each parameter appears as a single leaf.
pub struct MlpBinding {
    layers: Vec<(Value, Value)>,
}

impl Mlp {
    pub fn new(
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        output_dim: usize,
        skip_at: Option<usize>,
    ) -> Self {
        assert!(hidden_layers >= 1, "need at least one hidden layer");
        if let Some(s) = skip_at {
            assert!(s >= 1 && s < hidden_layers, "skip index out of range");
        }
        Mlp {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
            hidden_layers,
            output_dim,
            skip_at,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        for l in 0..self.hidden_layers {
            let mut fan_in = if l == 0 { self.input_dim } else { self.hidden_dim };
            if self.skip_at == Some(l) {
                fan_in += self.input_dim;
            }
            dims.push((self.hidden_dim, fan_in));
        }
        dims.push((self.output_dim, self.hidden_dim));
        dims
    }

    /// Registers parameters with He-style initialization (biases zero).
    /// When `zero_init_output` is set the output layer starts at exactly
    /// zero, so the freshly built network is the constant zero function.
    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng, zero_init_output: bool) {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (l, &(rows, cols)) in dims.iter().enumerate() {
            let std = if l == last {
                if zero_init_output {
                    0.0
                } else {
                    (1.0 / cols as f64).sqrt()
                }
            } else {
                (2.0 / cols as f64).sqrt()
            };
            let w: Vec<f64> = (0..rows * cols).map(|_| std * randn(rng)).collect();
            store.insert(&format!("{}.w{l}", self.prefix), rows, cols, w);
            store.insert(&format!("{}.b{l}", self.prefix), rows, 1, vec![0.0; rows]);
        }
    }

    /// Binds all layer parameters onto `tape`.
    pub fn bind(&self, tape: &Tape, store: &ParameterStore) -> MlpBinding {
        let layers = (0..=self.hidden_layers)
            .map(|l| {
                (
                    store.bind(tape, &format!("{}.w{l}", self.prefix)),
                    store.bind(tape, &format!("{}.b{l}", self.prefix)),
                )
            })
            .collect();
        MlpBinding { layers }
    }

    /// Forward pass: softplus hidden layers, linear output. `input` must be
    /// `[input_dim, n]`.
    pub fn forward(&self, binding: &MlpBinding, input: &Value) -> Value {
        assert_eq!(input.rows(), self.input_dim, "mlp input dimension");
        let mut h = input.clone();
        for l in 0..self.hidden_layers {
            if self.skip_at == Some(l) {
                h = Value::concat_rows(&[&h, input]);
            }
            let (w, b) = &binding.layers[l];
            h = w.matmul(&h).add(b).softplus();
        }
        let (w, b) = &binding.layers[self.hidden_layers];
        w.matmul(&h).add(b)
    }
}
