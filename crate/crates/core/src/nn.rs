//! Parameter storage, the small set of layers the network is built from, and the
//! optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Grads, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |&id| self.name(id).starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect(),
    )
}

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, fan_in, fan_out, bound),
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, 1, fan_out, bound));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Same as [`Linear::new`] but with every entry zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::from_vec(1, dim, vec![1.0; dim]),
        );
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(1, dim));
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::LeakyRelu => g.leaky_relu(x, 0.2),
        }
    }
}

/// A stack of linear maps with an activation between consecutive layers (none
/// after the last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i < last {
                x = self.act.apply(g, x);
            }
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adaptive-moment optimizer with decoupled weight decay. Parameters without a
/// gradient in a step are left untouched, including their decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let c = self.cfg;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.param(id) else {
                continue;
            };
            let p = store.value_mut(id);
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; p.data.len()],
                v: vec![0.0; p.data.len()],
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            for (((w, &gr), m), v) in p
                .data
                .iter_mut()
                .zip(&grad.data)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gr;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
    }
}
