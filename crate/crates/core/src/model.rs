//! Components shared by both observation pipelines: the dual encoders, the
//! soft-prompt bank, the hard-prompt vocabulary and the cross-attention module.

use rand::Rng;

use crate::encoders::{EncodedBatch, EncoderConfig, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompts::{PromptKind, SoftPromptBank, Vocab, CONTEXT_INIT};
use crate::tensor::nn::{Attended, FeedForward, Init, LayerNorm, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of shared context embeddings in every soft prompt.
    pub context_len: usize,
    /// Softmax temperature applied to cosine similarities.
    pub tau: f64,
    /// Insert bottleneck adapters into the frozen encoder blocks.
    pub adapters: bool,
    /// Hidden width of the cross-attention FFN as a multiple of the model width.
    pub ca_hidden_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            context_len: 3,
            tau: 0.01,
            adapters: true,
            ca_hidden_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be at least 1".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.ca_hidden_mult == 0 {
            return Err(Error::Config("ca_hidden_mult must be at least 1".into()));
        }
        Ok(())
    }
}

/// `CA(q, K, V) = q + FFN(LN(q + MHA(q, K, V)))`. The FFN output layer
/// starts at zero, so a fresh module is the identity on `q`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub mha: MultiHeadAttention,
    pub ln: LayerNorm,
    pub ffn: FeedForward,
}

/// Cross-attention result plus the attention node for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    pub out: Var,
    pub scores: Var,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        heads: usize,
        hidden_mult: usize,
        rng: &mut R,
    ) -> Self {
        CrossAttention {
            mha: MultiHeadAttention::new(store, "ca.mha", width, heads, true, rng),
            ln: LayerNorm::new(store, "ca.ln", width, true),
            ffn: FeedForward::new(store, "ca.ffn", width, hidden_mult * width, Init::Zeros, true, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.mha.params(), self.ln.params(), self.ffn.params()].concat()
    }

    /// Keys and values for a context, reusable across many queries.
    pub fn project_kv<T: Scalar>(&self, tape: &mut Tape<'_, T>, context: Var) -> Result<(Var, Var)> {
        Ok((self.mha.k.forward(tape, context)?, self.mha.v.forward(tape, context)?))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q: Var,
        context: Var,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<Refined> {
        let (k, v) = self.project_kv(tape, context)?;
        self.forward_projected(tape, q, k, v, spans)
    }

    pub fn forward_projected<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<Refined> {
        let Attended { out, scores } = self.mha.attend_projected(tape, q, k, v, spans)?;
        let h = tape.add(q, out)?;
        let n = self.ln.forward(tape, h)?;
        let f = self.ffn.forward(tape, n)?;
        let out = tape.add(q, f)?;
        Ok(Refined { out, scores })
    }
}

/// Encoders, prompts and cross-attention, with their parameters in one store.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub num_states: usize,
    pub num_objects: usize,
    pub vocab: Vocab,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub bank: SoftPromptBank,
    pub ca: CrossAttention,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        num_states: usize,
        num_objects: usize,
        vocab: Vocab,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let image = ImageEncoder::new(store, enc, config.adapters, rng)?;
        let text = TextEncoder::new(store, enc, vocab.table_rows(), config.adapters, rng)?;
        let table = store.get(text.table);
        let context_init: Vec<Vec<T>> = CONTEXT_INIT
            .iter()
            .map(|w| table.row_slice(vocab.id(w)).to_vec())
            .collect();
        let generic_init = table.row_slice(vocab.id("object")).to_vec();
        let bank = SoftPromptBank::new(
            store,
            config.context_len,
            num_states,
            num_objects,
            enc.width,
            &context_init,
            Some(&generic_init),
            rng,
        )?;
        let ca = CrossAttention::new(store, enc.width, enc.heads, config.ca_hidden_mult, rng);
        Ok(Backbone {
            config: config.clone(),
            num_states,
            num_objects,
            vocab,
            image,
            text,
            bank,
            ca,
        })
    }

    pub fn encode_images<T: Scalar>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<EncodedBatch> {
        self.image.encode(tape, images)
    }

    pub fn encode_prompts<T: Scalar>(&self, tape: &mut Tape<'_, T>, kinds: &[PromptKind]) -> Result<EncodedBatch> {
        let seqs = kinds
            .iter()
            .map(|&k| self.bank.build(tape, k))
            .collect::<Result<Vec<_>>>()?;
        self.text.encode(tape, &seqs)
    }

    /// Encodes soft prompts followed by hard prompts in a single batch.
    pub fn encode_mixed<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        kinds: &[PromptKind],
        texts: &[&str],
    ) -> Result<EncodedBatch> {
        let mut seqs = kinds
            .iter()
            .map(|&k| self.bank.build(tape, k))
            .collect::<Result<Vec<_>>>()?;
        for t in texts {
            let ids = self.vocab.tokenize(t)?;
            seqs.push(self.text.embed_tokens(tape, &ids)?);
        }
        self.text.encode(tape, &seqs)
    }

    pub fn tau<T: Scalar>(&self) -> T {
        T::lit(self.config.tau)
    }

    /// Every soft-prompt kind for primitives: states first, then objects.
    pub fn primitive_kinds(&self) -> Vec<PromptKind> {
        (0..self.num_states)
            .map(PromptKind::State)
            .chain((0..self.num_objects).map(PromptKind::Object))
            .collect()
    }
}

/// Row-wise softmax of `values / tau` in double precision.
pub fn softmax_rows(values: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) / tau).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    out
}

/// Indices sorted by descending score; ties keep the lower index first.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}
