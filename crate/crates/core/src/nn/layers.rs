use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// `U(±sqrt(6 / fan_in))`, for layers followed by ReLU.
    HeUniform,
    /// `U(±sqrt(6 / (fan_in + fan_out)))`.
    XavierUniform,
}

impl Init {
    pub fn sample(self, fan_in: usize, fan_out: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let bound = match self {
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    }
}

/// Affine map `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::new(
            vec![out_dim, in_dim],
            init.sample(in_dim, out_dim, in_dim * out_dim, rng),
        )
        .expect("sized by construction");
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Applies the layer to `x[.., in_dim]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, bound.var(self.weight()))?;
        Ok(tape.add(y, bound.var(self.bias()))?)
    }
}

/// Stack of linear layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last {
                    Init::XavierUniform
                } else {
                    Init::HeUniform
                };
                LinearLayer::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product self-attention.
///
/// Each head owns its query, key and value projections (`head_dim × model_dim`);
/// head outputs are concatenated and mapped back through a `model_dim ×
/// model_dim` output projection. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadSelfAttention {
    pub head_count: usize,
    pub model_dim: usize,
    query: Vec<ParamId>,
    key: Vec<ParamId>,
    value: Vec<ParamId>,
    output: ParamId,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        head_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(Error::Config(format!(
                "attention model_dim {model_dim} is not divisible by head_count {head_count}"
            )));
        }
        let hd = model_dim / head_count;
        let mut proj = |kind: &str, h: usize, rng: &mut _| {
            let w = Init::XavierUniform.sample(model_dim, hd, hd * model_dim, rng);
            store.add(
                format!("{name}.{kind}{h}"),
                Tensor::new(vec![hd, model_dim], w).expect("sized"),
            )
        };
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for h in 0..head_count {
            query.push(proj("q", h, rng));
            key.push(proj("k", h, rng));
            value.push(proj("v", h, rng));
        }
        let wo = Init::XavierUniform.sample(model_dim, model_dim, model_dim * model_dim, rng);
        let output = store.add(
            format!("{name}.out"),
            Tensor::new(vec![model_dim, model_dim], wo).expect("sized"),
        );
        Ok(Self {
            head_count,
            model_dim,
            query,
            key,
            value,
            output,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }

    pub fn query(&self, h: usize) -> ParamId {
        self.query[h]
    }

    pub fn key(&self, h: usize) -> ParamId {
        self.key[h]
    }

    pub fn value(&self, h: usize) -> ParamId {
        self.value[h]
    }

    pub fn output(&self) -> ParamId {
        self.output
    }

    /// `x` is `[T, D]` or `[B, T, D]`; the output has the same shape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, bound, x)?.0)
    }

    /// Forward pass that also returns each head's `[B, T, T]` attention
    /// weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(x).to_vec();
        let (batched, t, d) = match shape.as_slice() {
            [t, d] => (false, *t, *d),
            [_, t, d] => (true, *t, *d),
            _ => {
                return Err(Error::Config(format!(
                    "attention expects [T, D] or [B, T, D], got {shape:?}"
                )))
            }
        };
        if d != self.model_dim {
            return Err(Error::Config(format!(
                "attention input width {d} != model_dim {}",
                self.model_dim
            )));
        }
        let x3 = if batched {
            x
        } else {
            tape.reshape(x, &[1, t, d])?
        };
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.head_count);
        let mut weights = Vec::with_capacity(self.head_count);
        for h in 0..self.head_count {
            let q = tape.matmul_nt(x3, bound.var(self.query[h]))?;
            let k = tape.matmul_nt(x3, bound.var(self.key[h]))?;
            let v = tape.matmul_nt(x3, bound.var(self.value[h]))?;
            let kt = tape.transpose(k)?;
            let scores = tape.bmm(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores)?;
            weights.push(attn);
            heads.push(tape.bmm(attn, v)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 2)?
        };
        let out = tape.matmul_nt(cat, bound.var(self.output))?;
        let out = if batched {
            out
        } else {
            tape.reshape(out, &[t, d])?
        };
        Ok((out, weights))
    }
}

/// Residual self-attention followed by a residual position-wise ReLU
/// feed-forward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attention: MultiHeadSelfAttention,
    ff_in: LinearLayer,
    ff_out: LinearLayer,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        head_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attention = MultiHeadSelfAttention::new(
            store,
            &format!("{name}.attn"),
            model_dim,
            head_count,
            rng,
        )?;
        let hidden = 2 * model_dim;
        let ff_in = LinearLayer::new(
            store,
            &format!("{name}.ff0"),
            model_dim,
            hidden,
            Init::HeUniform,
            rng,
        );
        let ff_out = LinearLayer::new(
            store,
            &format!("{name}.ff1"),
            hidden,
            model_dim,
            Init::XavierUniform,
            rng,
        );
        Ok(Self {
            attention,
            ff_in,
            ff_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let a = self.attention.forward(tape, bound, x)?;
        let h = tape.add(x, a)?;
        let f = self.ff_in.forward(tape, bound, h)?;
        let f = tape.relu(f);
        let f = self.ff_out.forward(tape, bound, f)?;
        Ok(tape.add(h, f)?)
    }
}

/// Fixed sinusoidal position code, `[T, D]`.
pub fn positional_encoding(steps: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * rate;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![steps, dim], data).expect("sized")
}
