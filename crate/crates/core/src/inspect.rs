//! Cross-attention maps for a single image, with every image token as a query.

use std::io::Write;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::llm::PloLlm;
use crate::prompts::{CueFixtures, PromptKind};
use crate::tensor::{ParamStore, Scalar, Tape};
use crate::vlm::{FirstObservation, PloVlm};

/// Attention weights `[head][query][key]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub label: String,
    pub queries: Vec<String>,
    pub keys: Vec<String>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl AttentionMap {
    /// Columns `head,query,<keys>`; one row per head and image token.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["head".to_string(), "query".to_string()];
        header.extend(self.keys.iter().cloned());
        w.write_record(&header)?;
        for (h, rows) in self.weights.iter().enumerate() {
            for (q, row) in rows.iter().enumerate() {
                let mut rec = vec![h.to_string(), self.queries[q].clone()];
                rec.extend(row.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn image_token_labels(patches: usize) -> Vec<String> {
    std::iter::once("[CLS]".to_string())
        .chain((0..patches).map(|i| format!("patch{i}")))
        .collect()
}

fn to_f64<T: Scalar>(w: Vec<Vec<Vec<T>>>) -> Vec<Vec<Vec<f64>>> {
    w.into_iter()
        .map(|h| h.into_iter().map(|r| r.into_iter().map(|x| x.as_f64()).collect()).collect())
        .collect()
}

/// The refinement attention of a two-step model, or `None` when its order
/// skips refinement.
pub fn vlm_attention<T: Scalar>(model: &PloVlm, store: &ParamStore<T>, image: &Image) -> Result<Option<AttentionMap>> {
    let bb = &model.backbone;
    let mut tape = Tape::new(store);
    let kinds = bb.primitive_kinds();
    let text = bb.encode_prompts(&mut tape, &kinds)?;
    let t_prim = tape.slice_rows(text.cls, 0, kinds.len())?;
    let img = bb.encode_images(&mut tape, &[image])?;
    let pre = tape.cosine(img.cls, t_prim)?;
    let row = tape.value(pre).to_f64_vec();
    let Some(choice) = model.choose(&row)? else {
        return Ok(None);
    };
    let (kind, idx) = match choice {
        FirstObservation::StateFirst(s) => (PromptKind::State(s), s),
        FirstObservation::ObjectFirst(o) => (PromptKind::Object(o), bb.num_states + o),
    };
    let span = text.spans[idx];
    let rows = img.spans[0].1;
    let r = bb.ca.forward(&mut tape, img.tokens, text.tokens, Some(&vec![span; rows]))?;
    let weights = tape.attention_weights(r.scores).expect("attention node");
    let ctx = bb.bank.context_len();
    let mut keys = vec!["[CLS]".to_string()];
    keys.extend((0..ctx).map(|i| format!("ctx{i}")));
    let label = match kind {
        PromptKind::State(s) => {
            keys.push(format!("state:{}", s));
            keys.push("[object]".into());
            format!("state-first:{s}")
        }
        PromptKind::Object(o) => {
            keys.push(format!("object:{}", o));
            format!("object-first:{o}")
        }
        PromptKind::Composition(..) => unreachable!("observations are primitives"),
    };
    Ok(Some(AttentionMap {
        label,
        queries: image_token_labels(rows - 1),
        keys,
        weights: to_f64(weights),
    }))
}

/// One map per refinement step of `pair`'s cue chain.
pub fn llm_attention<T: Scalar>(
    model: &PloLlm,
    store: &ParamStore<T>,
    image: &Image,
    pair: usize,
    cues: &CueFixtures,
) -> Result<Vec<AttentionMap>> {
    let bb = &model.backbone;
    if pair >= bb.num_states * bb.num_objects || pair >= cues.sequences.len() {
        return Err(Error::Index {
            index: pair,
            len: cues.sequences.len(),
        });
    }
    let chain = cues.cues(pair);
    if chain.len() != model.steps {
        return Err(Error::Config(format!(
            "pair {pair} has {} cues, model expects {}",
            chain.len(),
            model.steps
        )));
    }
    let mut tape = Tape::new(store);
    let texts: Vec<&str> = chain.iter().map(String::as_str).collect();
    let text = bb.encode_mixed(&mut tape, &[], &texts)?;
    let (kt, vt) = bb.ca.project_kv(&mut tape, text.tokens)?;
    let img = bb.encode_images(&mut tape, &[image])?;
    let rows = img.spans[0].1;
    let mut q = img.tokens;
    let mut maps = Vec::new();
    for (i, cue) in texts.iter().enumerate().take(model.steps.saturating_sub(1)) {
        let r = bb.ca.forward_projected(&mut tape, q, kt, vt, Some(&vec![text.spans[i]; rows]))?;
        let weights = tape.attention_weights(r.scores).expect("attention node");
        let mut keys = vec!["[CLS]".to_string()];
        keys.extend(cue.split_whitespace().map(str::to_lowercase));
        maps.push(AttentionMap {
            label: format!("pair{pair}:step{}", i + 1),
            queries: image_token_labels(rows - 1),
            keys,
            weights: to_f64(weights),
        });
        q = r.out;
    }
    Ok(maps)
}
