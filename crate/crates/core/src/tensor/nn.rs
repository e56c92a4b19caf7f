//! Transformer building blocks over a [`ParamStore`].
//!
//! Layers only hold [`ParamId`]s; the numbers live in the store, so a layer can
//! be used with any tape borrowing that store.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Initial value scheme for a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
}

pub fn init_tensor<T: Scalar, R: Rng>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let n = rows * cols;
    let data: Vec<T> = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Xavier | Init::Normal(_) => {
            let std = match init {
                Init::Normal(s) => s,
                _ => (2.0 / (rows + cols) as f64).sqrt(),
            };
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::lit(d.sample(rng))).collect()
        }
    };
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(fan_in, fan_out, init, rng),
            trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(vec![1, fan_out]),
                trainable,
            )
        });
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, trainable: bool) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![1, width], T::one()), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![1, width]), trainable),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, T::lit(self.eps))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        out_init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, Init::Xavier, trainable, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, out_init, trainable, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of an attention layer together with the tape node holding its weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub scores: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let mut lin = |suffix: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{suffix}"), width, width, true, Init::Xavier, trainable, rng)
        };
        let q = lin("q", rng);
        let k = lin("k", rng);
        let v = lin("v", rng);
        let out = lin("out", rng);
        MultiHeadAttention { q, k, v, out, heads }
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, context: Var) -> Result<Attended> {
        self.forward_spans(tape, x, context, None)
    }

    /// As [`MultiHeadAttention::forward`], restricting each query row to a
    /// span of context rows when `spans` is given.
    pub fn forward_spans<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        context: Var,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<Attended> {
        let k = self.k.forward(tape, context)?;
        let v = self.v.forward(tape, context)?;
        self.attend_projected(tape, x, k, v, spans)
    }

    /// Attention with keys and values already projected by `self.k` / `self.v`.
    pub fn attend_projected<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        k: Var,
        v: Var,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<Attended> {
        let q = self.q.forward(tape, x)?;
        let scores = match spans {
            Some(sp) => tape.attention_spans(q, k, v, self.heads, sp)?,
            None => tape.attention(q, k, v, self.heads)?,
        };
        let out = self.out.forward(tape, scores)?;
        Ok(Attended { out, scores })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.q.params(), self.k.params(), self.v.params(), self.out.params()].concat()
    }
}

/// Bottleneck adapter: `x + up(gelu(down(x)))`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        let hidden = (width / 4).max(1);
        Adapter {
            down: Linear::new(store, &format!("{name}.down"), width, hidden, true, Init::Xavier, true, rng),
            up: Linear::new(store, &format!("{name}.up"), hidden, width, true, Init::Zeros, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, x)?;
        let h = tape.gelu(h);
        let h = self.up.forward(tape, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.down.params(), self.up.params()].concat()
    }
}

/// Pre-norm self-attention block with an optional adapter after the FFN.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub adapter: Option<Adapter>,
}

impl TransformerBlock {
    /// Base weights are created frozen; the adapter (if any) is trainable.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        with_adapter: bool,
        rng: &mut R,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, false),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, false, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, false),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, 4 * width, Init::Xavier, false, rng),
            adapter: with_adapter.then(|| Adapter::new(store, &format!("{name}.adapter"), width, rng)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_spans(tape, x, None)
    }

    /// Self-attention restricted per row to `spans`, so several sequences
    /// stacked along the row axis are processed independently.
    pub fn forward_spans<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward_spans(tape, h, h, spans)?;
        let x = tape.add(x, a.out)?;
        let h = self.ln2.forward(tape, x)?;
        let f = self.ffn.forward(tape, h)?;
        let x = tape.add(x, f)?;
        match &self.adapter {
            Some(ad) => ad.forward(tape, x),
            None => Ok(x),
        }
    }
}
