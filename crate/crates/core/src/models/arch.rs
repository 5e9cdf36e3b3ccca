use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{positional_encoding, Bound, EncoderBlock, Init, LinearLayer, ParamStore};
use crate::{Error, Result};

/// Self-attention trunk over a channel-major `N × T` series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqSpec {
    pub channels: usize,
    pub steps: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Flat rows `[B, N·T]` → per-step embedding of the `N` channel values plus
/// a sinusoidal position code → encoder blocks → flattened `[B, T·E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqTrunk {
    spec: SeqSpec,
    embed: LinearLayer,
    blocks: Vec<EncoderBlock>,
    position: Tensor,
}

impl SeqTrunk {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &SeqSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.channels == 0 || spec.steps == 0 || spec.embed_dim == 0 {
            return Err(Error::Config(format!("degenerate sequence spec {spec:?}")));
        }
        let embed = LinearLayer::new(
            store,
            &format!("{name}.embed"),
            spec.channels,
            spec.embed_dim,
            Init::XavierUniform,
            rng,
        );
        let blocks = (0..spec.layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    spec.embed_dim,
                    spec.heads,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            embed,
            blocks,
            position: positional_encoding(spec.steps, spec.embed_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.channels * self.spec.steps
    }

    pub fn output_dim(&self) -> usize {
        self.spec.steps * self.spec.embed_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let (n, t, e) = (self.spec.channels, self.spec.steps, self.spec.embed_dim);
        let x = tape.reshape(x, &[b, n, t])?;
        let x = tape.transpose(x)?;
        let h = self.embed.forward(tape, bound, x)?;
        let pe = tape.constant(self.position.clone());
        let mut h = tape.add(h, pe)?;
        for block in &self.blocks {
            h = block.forward(tape, bound, h)?;
        }
        Ok(tape.reshape(h, &[b, t * e])?)
    }
}
