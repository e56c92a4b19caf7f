//! Two-step observation: pick the more salient primitive, refine the image
//! with that primitive's prompt tokens, then classify the composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{rank_desc, softmax_rows, Backbone};
use crate::prompts::PromptKind;
use crate::tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationOrder {
    /// Follow the pre-observing classifier.
    Dynamic,
    StateFirst,
    ObjectFirst,
    /// Skip refinement; compositions are scored from the raw image vector.
    None,
}

impl ObservationOrder {
    pub const ALL: [ObservationOrder; 4] = [
        ObservationOrder::None,
        ObservationOrder::StateFirst,
        ObservationOrder::ObjectFirst,
        ObservationOrder::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObservationOrder::Dynamic => "dynamic",
            ObservationOrder::StateFirst => "state-first",
            ObservationOrder::ObjectFirst => "object-first",
            ObservationOrder::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

/// Which primitive was observed first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstObservation {
    StateFirst(usize),
    ObjectFirst(usize),
}

/// Scores are states first, then objects. An exact tie between the best
/// state and the best object goes to the object.
pub fn pre_observe(scores: &[f64], num_states: usize) -> Result<FirstObservation> {
    if num_states == 0 || scores.len() <= num_states {
        return Err(Error::Contract(format!(
            "pre-observation needs states and objects, got {} scores for {num_states} states",
            scores.len()
        )));
    }
    let argmax = |xs: &[f64]| {
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate() {
            if x > xs[best] {
                best = i;
            }
        }
        best
    };
    let s = argmax(&scores[..num_states]);
    let o = argmax(&scores[num_states..]);
    Ok(if scores[s] > scores[num_states + o] {
        FirstObservation::StateFirst(s)
    } else {
        FirstObservation::ObjectFirst(o)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VlmLossWeights {
    pub obs: f64,
    pub state: f64,
    pub object: f64,
    pub comp: f64,
}

impl Default for VlmLossWeights {
    fn default() -> Self {
        VlmLossWeights {
            obs: 1.0,
            state: 0.01,
            object: 0.01,
            comp: 1.0,
        }
    }
}

/// Loss values of one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VlmLoss {
    pub total: f64,
    pub obs: f64,
    /// State classification after an object-first observation.
    pub state: f64,
    /// Object classification after a state-first observation.
    pub object: f64,
    pub comp: f64,
    pub state_first: usize,
    pub object_first: usize,
}

/// Tape handles of one forward pass.
pub struct VlmPass {
    /// `B × d` image vectors.
    pub v: Var,
    /// `B × d` refined image vectors (equal to `v` without observation).
    pub v_tilde: Var,
    /// `B × (|S| + |O|)` pre-observation cosines.
    pub pre: Var,
    /// `(|S| + |O|) × d` primitive prompt vectors.
    pub t_prim: Var,
    /// `K × d` candidate composition vectors.
    pub t_comp: Var,
    /// `B × K` cosines between refined image vectors and candidates.
    pub comp: Var,
    pub choices: Vec<Option<FirstObservation>>,
    /// Attention node of the refinement, when it ran.
    pub attention: Option<Var>,
    /// Prompt token rows each sample attended to.
    pub attended_spans: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct PloVlm {
    pub backbone: Backbone,
    pub order: ObservationOrder,
    pub weights: VlmLossWeights,
}

/// Inference output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VlmScores {
    /// `B × K` composition probabilities, row-major.
    pub probs: Vec<f64>,
    pub candidates: Vec<usize>,
    pub choices: Vec<Option<FirstObservation>>,
}

impl VlmScores {
    pub fn row(&self, b: usize) -> &[f64] {
        let k = self.candidates.len();
        &self.probs[b * k..(b + 1) * k]
    }

    /// Candidate pair indices by descending probability.
    pub fn ranking(&self, b: usize) -> Vec<usize> {
        rank_desc(self.row(b)).into_iter().map(|i| self.candidates[i]).collect()
    }
}

impl PloVlm {
    pub fn new(backbone: Backbone, order: ObservationOrder) -> Self {
        PloVlm {
            backbone,
            order,
            weights: VlmLossWeights::default(),
        }
    }

    /// First observation for one row of pre-observation scores under the
    /// configured order; `None` when refinement is skipped.
    pub fn choose(&self, pre: &[f64]) -> Result<Option<FirstObservation>> {
        let ns = self.backbone.num_states;
        Ok(match self.order {
            ObservationOrder::None => None,
            ObservationOrder::Dynamic => Some(pre_observe(pre, ns)?),
            ObservationOrder::StateFirst => Some(FirstObservation::StateFirst(rank_desc(&pre[..ns])[0])),
            ObservationOrder::ObjectFirst => Some(FirstObservation::ObjectFirst(rank_desc(&pre[ns..])[0])),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, images: &[&Image], candidates: &[usize]) -> Result<VlmPass> {
        let bb = &self.backbone;
        if candidates.is_empty() {
            return Err(Error::Config("empty composition candidate set".into()));
        }
        let (ns, no) = (bb.num_states, bb.num_objects);
        let mut kinds = bb.primitive_kinds();
        for &p in candidates {
            if p >= ns * no {
                return Err(Error::Index { index: p, len: ns * no });
            }
            kinds.push(PromptKind::Composition(p / no, p % no));
        }
        let text = bb.encode_prompts(tape, &kinds)?;
        let t_prim = tape.slice_rows(text.cls, 0, ns + no)?;
        let t_comp = tape.slice_rows(text.cls, ns + no, candidates.len())?;
        let img = bb.encode_images(tape, images)?;
        let v = img.cls;
        let pre = tape.cosine(v, t_prim)?;

        let width = ns + no;
        let pre_vals: Vec<f64> = tape.value(pre).to_f64_vec();
        let choices: Vec<Option<FirstObservation>> =
            pre_vals.chunks(width).map(|row| self.choose(row)).collect::<Result<_>>()?;

        let (v_tilde, attention, attended_spans) = if self.order == ObservationOrder::None {
            (v, None, Vec::new())
        } else {
            let spans: Vec<(usize, usize)> = choices
                .iter()
                .map(|c| match c.expect("refinement orders always choose") {
                    FirstObservation::StateFirst(s) => text.spans[s],
                    FirstObservation::ObjectFirst(o) => text.spans[ns + o],
                })
                .collect();
            let r = bb.ca.forward(tape, img.cls_tokens, text.tokens, Some(&spans))?;
            let vt = bb.image.project(tape, r.out)?;
            (vt, Some(r.scores), spans)
        };
        let comp = tape.cosine(v_tilde, t_comp)?;
        Ok(VlmPass {
            v,
            v_tilde,
            pre,
            t_prim,
            t_comp,
            comp,
            choices,
            attention,
            attended_spans,
        })
    }

    /// Weighted four-term loss. `labels` are `(state, object)`; every label's
    /// pair must be among `candidates`.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        images: &[&Image],
        labels: &[(usize, usize)],
        candidates: &[usize],
    ) -> Result<(Var, VlmLoss)> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let pass = self.forward(tape, images, candidates)?;
        let bb = &self.backbone;
        let (ns, no) = (bb.num_states, bb.num_objects);
        let b = images.len();
        let inv_tau = T::one() / bb.tau::<T>();
        let w = &self.weights;

        let mut y_obs = vec![T::zero(); b * (ns + no)];
        for (i, &(s, o)) in labels.iter().enumerate() {
            y_obs[i * (ns + no) + s] = T::one();
            y_obs[i * (ns + no) + ns + o] = T::one();
        }
        let pre_logits = tape.scale(pass.pre, inv_tau);
        let l_obs = tape.bce_with_logits(pre_logits, &y_obs)?;

        let targets = labels
            .iter()
            .map(|&(s, o)| {
                let p = s * no + o;
                candidates.iter().position(|&c| c == p).ok_or_else(|| {
                    Error::Contract(format!("label pair {p} is not a candidate composition"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let comp_logits = tape.scale(pass.comp, inv_tau);
        let l_comp = tape.cross_entropy(comp_logits, &targets)?;

        let mut parts = vec![(l_obs, w.obs), (l_comp, w.comp)];
        let mut report = VlmLoss::default();
        let mut l_state = None;
        let mut l_object = None;
        if self.order != ObservationOrder::None {
            let post = tape.cosine(pass.v_tilde, pass.t_prim)?;
            let post = tape.scale(post, inv_tau);
            let mut sf = Vec::new();
            let mut of = Vec::new();
            for (i, c) in pass.choices.iter().enumerate() {
                match c.expect("refinement orders always choose") {
                    FirstObservation::StateFirst(_) => sf.push(i),
                    FirstObservation::ObjectFirst(_) => of.push(i),
                }
            }
            report.state_first = sf.len();
            report.object_first = of.len();
            let frac = |n: usize| T::lit(n as f64 / b as f64);
            if !sf.is_empty() {
                // State observed: classify the remaining object.
                let rows = tape.select_rows(post, &sf)?;
                let cols = tape.slice_cols(rows, ns, no)?;
                let t: Vec<usize> = sf.iter().map(|&i| labels[i].1).collect();
                let ce = tape.cross_entropy(cols, &t)?;
                let ce = tape.scale(ce, frac(sf.len()));
                l_object = Some(ce);
                parts.push((ce, w.object));
            }
            if !of.is_empty() {
                let rows = tape.select_rows(post, &of)?;
                let cols = tape.slice_cols(rows, 0, ns)?;
                let t: Vec<usize> = of.iter().map(|&i| labels[i].0).collect();
                let ce = tape.cross_entropy(cols, &t)?;
                let ce = tape.scale(ce, frac(of.len()));
                l_state = Some(ce);
                parts.push((ce, w.state));
            }
        }
        let mut total = None;
        for (v, wt) in parts {
            let term = tape.scale(v, T::lit(wt));
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let total = total.expect("at least two terms");
        report.total = tape.scalar(total).as_f64();
        report.obs = tape.scalar(l_obs).as_f64();
        report.comp = tape.scalar(l_comp).as_f64();
        report.state = l_state.map_or(0.0, |v| tape.scalar(v).as_f64());
        report.object = l_object.map_or(0.0, |v| tape.scalar(v).as_f64());
        Ok((total, report))
    }

    /// Composition probabilities `softmax(cos(ṽ, t_c) / τ)` over `candidates`.
    pub fn score<T: Scalar>(&self, store: &ParamStore<T>, images: &[&Image], candidates: &[usize]) -> Result<VlmScores> {
        let mut tape = Tape::new(store);
        let pass = self.forward(&mut tape, images, candidates)?;
        let cos = tape.value(pass.comp).to_f64_vec();
        Ok(VlmScores {
            probs: softmax_rows(&cos, candidates.len(), self.backbone.config.tau),
            candidates: candidates.to_vec(),
            choices: pass.choices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_observation_picks_the_global_maximum() {
        assert_eq!(pre_observe(&[0.1, 0.9, 0.2, 0.3], 2).unwrap(), FirstObservation::StateFirst(1));
        assert_eq!(pre_observe(&[0.1, 0.2, 0.2, 0.7], 2).unwrap(), FirstObservation::ObjectFirst(1));
        // exact tie between best state and best object
        assert_eq!(pre_observe(&[0.5, 0.1, 0.5, 0.2], 2).unwrap(), FirstObservation::ObjectFirst(0));
        assert!(pre_observe(&[0.5, 0.1], 2).is_err());
    }

    #[test]
    fn order_names_round_trip() {
        for o in ObservationOrder::ALL {
            assert_eq!(ObservationOrder::parse(o.name()), Some(o));
        }
    }
}
