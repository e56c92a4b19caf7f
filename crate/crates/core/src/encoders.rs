//! Small frozen transformer encoders with trainable adapters and output
//! projections into a shared embedding space.
//!
//! Both encoders accept batches: sequences are stacked along the row axis and
//! self-attention is restricted to each sequence's own rows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{patchify, Image};
use crate::tensor::nn::{init_tensor, Init, Linear, TransformerBlock};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Standard deviation of frozen embedding tables.
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub embed_dim: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            channels: 3,
            patch: 8,
            width: 64,
            heads: 4,
            image_layers: 2,
            text_layers: 2,
            embed_dim: 64,
            max_text_len: 32,
        }
    }
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width < 4 || self.embed_dim == 0 || self.channels == 0 || self.max_text_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive (width ≥ 4)".into()));
        }
        Ok(())
    }
}

/// Encoder output for a batch of sequences.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// All token rows after the final block, sequences stacked.
    pub tokens: Var,
    /// `(first row, length)` of each sequence inside `tokens`; the first row is `[CLS]`.
    pub spans: Vec<(usize, usize)>,
    /// Final-block `[CLS]` rows, one per sequence (`batch × width`).
    pub cls_tokens: Var,
    /// Projected `[CLS]` rows in the shared space (`batch × embed_dim`).
    pub cls: Var,
}

impl EncodedBatch {
    /// Per-row attention spans covering each row's own sequence.
    pub fn row_spans(&self) -> Vec<(usize, usize)> {
        row_spans(&self.spans)
    }
}

fn row_spans(spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
    spans
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n((s, n), n))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        adapters: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let patch_embed = Linear::new(store, "image.patch_embed", config.patch_dim(), w, true, Init::Xavier, false, rng);
        let cls = store.add("image.cls", init_tensor(1, w, Init::Normal(EMBED_STD), rng), false);
        let pos = store.add(
            "image.pos",
            init_tensor(config.num_patches() + 1, w, Init::Normal(EMBED_STD), rng),
            false,
        );
        let blocks = (0..config.image_layers)
            .map(|i| TransformerBlock::new(store, &format!("image.block{i}"), w, config.heads, adapters, rng))
            .collect();
        let proj = Linear::new(store, "image.proj", w, config.embed_dim, false, Init::Xavier, true, rng);
        Ok(ImageEncoder {
            config: config.clone(),
            patch_embed,
            cls,
            pos,
            blocks,
            proj,
        })
    }

    /// Same weights with every adapter removed from the forward pass.
    pub fn without_adapters(&self) -> Self {
        let mut e = self.clone();
        e.blocks.iter_mut().for_each(|b| b.adapter = None);
        e
    }

    pub fn num_adapters(&self) -> usize {
        self.blocks.iter().filter(|b| b.adapter.is_some()).count()
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<EncodedBatch> {
        let cfg = &self.config;
        if images.is_empty() {
            return Err(Error::Contract("encode_image on an empty batch".into()));
        }
        let n = cfg.num_patches();
        let b = images.len();
        let mut patches = Vec::with_capacity(b * n * cfg.patch_dim());
        for img in images {
            if img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.channels {
                return Err(Error::Config(format!(
                    "image is {}x{}x{}, encoder expects {}x{}x{}",
                    img.height, img.width, img.channels, cfg.image_size, cfg.image_size, cfg.channels
                )));
            }
            let (_, p) = patchify(img, cfg.patch)?;
            patches.extend(p.into_iter().map(|x| T::lit(x as f64)));
        }
        let x = tape.input(Tensor::matrix(b * n, cfg.patch_dim(), patches)?);
        let emb = self.patch_embed.forward(tape, x)?;
        let cls = tape.param(self.cls);
        let cls_rep = tape.select_rows(cls, &vec![0; b])?;
        let stacked = tape.concat_rows(&[cls_rep, emb])?;
        // Interleave into [cls_0, patches_0, cls_1, patches_1, ...].
        let order: Vec<usize> = (0..b)
            .flat_map(|i| std::iter::once(i).chain((0..n).map(move |j| b + i * n + j)))
            .collect();
        let seq = tape.select_rows(stacked, &order)?;
        let pos = tape.param(self.pos);
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..=n).collect();
        let pos_rows = tape.select_rows(pos, &pos_idx)?;
        let mut h = tape.add(seq, pos_rows)?;

        let spans: Vec<(usize, usize)> = (0..b).map(|i| (i * (n + 1), n + 1)).collect();
        let rs = row_spans(&spans);
        for blk in &self.blocks {
            h = blk.forward_spans(tape, h, Some(&rs))?;
        }
        let cls_idx: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let cls_tokens = tape.select_rows(h, &cls_idx)?;
        let cls = self.proj.forward(tape, cls_tokens)?;
        Ok(EncodedBatch {
            tokens: h,
            spans,
            cls_tokens,
            cls,
        })
    }

    /// Applies the output projection to token rows (used for refined `[CLS]` rows).
    pub fn project<T: Scalar>(&self, tape: &mut Tape<'_, T>, rows: Var) -> Result<Var> {
        self.proj.forward(tape, rows)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub table: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub proj: Linear,
}

impl TextEncoder {
    /// `table_rows` is the number of token ids (vocabulary plus reserved buckets).
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        table_rows: usize,
        adapters: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let table = store.add("text.table", init_tensor(table_rows, w, Init::Normal(EMBED_STD), rng), false);
        let cls = store.add("text.cls", init_tensor(1, w, Init::Normal(EMBED_STD), rng), false);
        let pos = store.add(
            "text.pos",
            init_tensor(config.max_text_len + 1, w, Init::Normal(EMBED_STD), rng),
            false,
        );
        let blocks = (0..config.text_layers)
            .map(|i| TransformerBlock::new(store, &format!("text.block{i}"), w, config.heads, adapters, rng))
            .collect();
        let proj = Linear::new(store, "text.proj", w, config.embed_dim, false, Init::Xavier, true, rng);
        Ok(TextEncoder {
            config: config.clone(),
            table,
            cls,
            pos,
            blocks,
            proj,
        })
    }

    pub fn without_adapters(&self) -> Self {
        let mut e = self.clone();
        e.blocks.iter_mut().for_each(|b| b.adapter = None);
        e
    }

    pub fn num_adapters(&self) -> usize {
        self.blocks.iter().filter(|b| b.adapter.is_some()).count()
    }

    /// Looks up frozen token embeddings (`ids.len() × width`).
    pub fn embed_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.table);
        tape.select_rows(table, ids)
    }

    /// Encodes embedding sequences (each `len × width`). A `[CLS]` row is
    /// prepended to every sequence.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, seqs: &[Var]) -> Result<EncodedBatch> {
        if seqs.is_empty() {
            return Err(Error::Contract("encode_text on an empty batch".into()));
        }
        let w = self.config.width;
        let cls = tape.param(self.cls);
        let mut parts = Vec::with_capacity(2 * seqs.len());
        let mut spans = Vec::with_capacity(seqs.len());
        let mut pos_idx = Vec::new();
        let mut row = 0;
        for &s in seqs {
            let (len, sw) = (tape.value(s).rows(), tape.value(s).cols());
            if sw != w {
                return Err(Error::Shape {
                    op: "encode_text",
                    lhs: vec![len, sw],
                    rhs: vec![w],
                });
            }
            if len > self.config.max_text_len {
                return Err(Error::Config(format!(
                    "text sequence of {len} tokens exceeds the maximum of {}",
                    self.config.max_text_len
                )));
            }
            parts.push(cls);
            parts.push(s);
            spans.push((row, len + 1));
            pos_idx.extend(0..=len);
            row += len + 1;
        }
        let seq = tape.concat_rows(&parts)?;
        let pos = tape.param(self.pos);
        let pos_rows = tape.select_rows(pos, &pos_idx)?;
        let mut h = tape.add(seq, pos_rows)?;
        let rs = row_spans(&spans);
        for blk in &self.blocks {
            h = blk.forward_spans(tape, h, Some(&rs))?;
        }
        let cls_idx: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let cls_tokens = tape.select_rows(h, &cls_idx)?;
        let cls = self.proj.forward(tape, cls_tokens)?;
        Ok(EncodedBatch {
            tokens: h,
            spans,
            cls_tokens,
            cls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            width: 8,
            heads: 2,
            image_layers: 2,
            text_layers: 2,
            embed_dim: 6,
            max_text_len: 8,
        }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(8, 8, 3, (0..192).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn batch_encoding_matches_single_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut store, &small(), true, &mut rng).unwrap();
        let (a, b) = (image(1), image(2));
        let mut tape = Tape::new(&store);
        let both = enc.encode(&mut tape, &[&a, &b]).unwrap();
        let single = enc.encode(&mut tape, &[&b]).unwrap();
        let row1 = tape.value(both.cls).row_slice(1).to_vec();
        let lone = tape.value(single.cls).row_slice(0).to_vec();
        for (x, y) in row1.iter().zip(&lone) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(tape.value(both.tokens).rows(), 2 * 5);
    }

    #[test]
    fn text_sequences_are_independent_and_position_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut store, &small(), 10, true, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let s1 = enc.embed_tokens(&mut tape, &[1, 2, 3]).unwrap();
        let s2 = enc.embed_tokens(&mut tape, &[2, 1, 3]).unwrap();
        let both = enc.encode(&mut tape, &[s1, s2]).unwrap();
        let alone = enc.encode(&mut tape, &[s1]).unwrap();
        assert_eq!(tape.value(both.cls).row_slice(0), tape.value(alone.cls).row_slice(0));
        assert_ne!(tape.value(both.cls).row_slice(0), tape.value(both.cls).row_slice(1));
    }

    #[test]
    fn overlong_text_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let enc = TextEncoder::new(&mut store, &small(), 10, false, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let s = enc.embed_tokens(&mut tape, &[0; 9]).unwrap();
        assert!(matches!(enc.encode(&mut tape, &[s]), Err(Error::Config(_))));
    }
}
