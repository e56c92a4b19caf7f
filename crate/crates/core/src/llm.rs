//! Multi-step observation: every candidate composition follows its own chain
//! of hard-prompt cues, refining the image representation after each cue.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{rank_desc, softmax_rows, Backbone};
use crate::prompts::{CueFixtures, PromptKind};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FusionWeights {
    pub soft: f64,
    pub hard: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { soft: 0.7, hard: 0.3 }
    }
}

impl FusionWeights {
    pub fn new(soft: f64, hard: f64) -> Result<Self> {
        if !(soft >= 0.0 && hard >= 0.0) || !soft.is_finite() || !hard.is_finite() {
            return Err(Error::Config(format!(
                "fusion weights must be non-negative, got soft={soft} hard={hard}"
            )));
        }
        Ok(FusionWeights { soft, hard })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LlmLossWeights {
    pub step: f64,
    pub comp: f64,
}

impl Default for LlmLossWeights {
    fn default() -> Self {
        LlmLossWeights { step: 1.0, comp: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LlmLoss {
    pub total: f64,
    pub step: f64,
    pub comp: f64,
    /// Cross-entropy of each step, in order.
    pub steps: Vec<f64>,
}

pub struct LlmPass {
    /// `B × d` unrefined image vectors.
    pub v: Var,
    /// `K × d` candidate composition vectors.
    pub t_comp: Var,
    /// Per step, `B × K` cosines between each chain's current image vector
    /// and that candidate's cue.
    pub step_scores: Vec<Var>,
    /// `B × K` cosines between `v` and the composition prompts.
    pub soft: Var,
    /// Per refinement step, the attention node (rows ordered sample-major).
    pub attention: Vec<Var>,
    /// Per refinement step, `B·K × d` refined vectors `v^(i+1)`.
    pub refined: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PloLlm {
    pub backbone: Backbone,
    pub steps: usize,
    pub fusion: FusionWeights,
    pub weights: LlmLossWeights,
}

/// Inference output for a batch; matrices are `B × K`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LlmScores {
    pub candidates: Vec<usize>,
    /// Per step probability matrices.
    pub step_probs: Vec<Vec<f64>>,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub fused: Vec<f64>,
}

impl LlmScores {
    pub fn row<'a>(&self, m: &'a [f64], b: usize) -> &'a [f64] {
        let k = self.candidates.len();
        &m[b * k..(b + 1) * k]
    }

    /// Candidate pair indices by descending fused score.
    pub fn ranking(&self, b: usize) -> Vec<usize> {
        rank_desc(self.row(&self.fused, b))
            .into_iter()
            .map(|i| self.candidates[i])
            .collect()
    }
}

/// `p^Hard = ∏_i p_i`, element-wise over equally shaped step matrices.
pub fn hard_probability(step_probs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0; step_probs.first().map_or(0, Vec::len)];
    for p in step_probs {
        out.iter_mut().zip(p).for_each(|(a, &b)| *a *= b);
    }
    out
}

pub fn fuse(soft: &[f64], hard: &[f64], w: FusionWeights) -> Vec<f64> {
    soft.iter().zip(hard).map(|(&s, &h)| w.soft * s + w.hard * h).collect()
}

impl PloLlm {
    pub fn new(backbone: Backbone, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("number of observation cues must be at least 1".into()));
        }
        Ok(PloLlm {
            backbone,
            steps,
            fusion: FusionWeights::default(),
            weights: LlmLossWeights::default(),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        images: &[&Image],
        candidates: &[usize],
        cues: &CueFixtures,
    ) -> Result<LlmPass> {
        let bb = &self.backbone;
        let n = self.steps;
        if cues.n != n {
            return Err(Error::Config(format!(
                "cue fixtures have {} cues per composition, model expects {n}",
                cues.n
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Config("empty composition candidate set".into()));
        }
        let no = bb.num_objects;
        let npairs = bb.num_states * no;
        let mut kinds = Vec::with_capacity(candidates.len());
        let mut texts: Vec<&str> = Vec::with_capacity(candidates.len() * n);
        for &p in candidates {
            if p >= npairs || p >= cues.sequences.len() {
                return Err(Error::Contract(format!("candidate {p} has no cue sequence")));
            }
            kinds.push(PromptKind::Composition(p / no, p % no));
            texts.extend(cues.cues(p).iter().map(String::as_str));
        }
        let k = candidates.len();
        let text = bb.encode_mixed(tape, &kinds, &texts)?;
        let t_comp = tape.slice_rows(text.cls, 0, k)?;
        let t_cue = tape.slice_rows(text.cls, k, k * n)?;
        let (kt, vt) = bb.ca.project_kv(tape, text.tokens)?;

        let img = bb.encode_images(tape, images)?;
        let b = images.len();
        let sample_rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let mut q = tape.select_rows(img.cls_tokens, &sample_rows)?;
        let mut vi = tape.select_rows(img.cls, &sample_rows)?;

        let mut step_scores = Vec::with_capacity(n);
        let mut attention = Vec::new();
        let mut refined = Vec::new();
        for i in 0..n {
            let cue_rows: Vec<usize> = (0..b).flat_map(|_| (0..k).map(move |j| j * n + i)).collect();
            let t_i = tape.select_rows(t_cue, &cue_rows)?;
            let a = tape.normalize_rows(vi)?;
            let c = tape.normalize_rows(t_i)?;
            let dots = tape.row_dot(a, c)?;
            step_scores.push(tape.reshape(dots, b, k)?);
            if i + 1 < n {
                let spans: Vec<(usize, usize)> = (0..b)
                    .flat_map(|_| (0..k).map(|j| text.spans[k + j * n + i]))
                    .collect();
                let r = bb.ca.forward_projected(tape, q, kt, vt, Some(&spans))?;
                q = r.out;
                vi = bb.image.project(tape, q)?;
                attention.push(r.scores);
                refined.push(vi);
            }
        }
        let soft = tape.cosine(img.cls, t_comp)?;
        Ok(LlmPass {
            v: img.cls,
            t_comp,
            step_scores,
            soft,
            attention,
            refined,
        })
    }

    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        images: &[&Image],
        labels: &[(usize, usize)],
        candidates: &[usize],
        cues: &CueFixtures,
    ) -> Result<(Var, LlmLoss)> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let pass = self.forward(tape, images, candidates, cues)?;
        let no = self.backbone.num_objects;
        let targets = labels
            .iter()
            .map(|&(s, o)| {
                let p = s * no + o;
                candidates.iter().position(|&c| c == p).ok_or_else(|| {
                    Error::Contract(format!("label pair {p} is not a candidate composition"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let inv_tau = T::one() / self.backbone.tau::<T>();
        let mut report = LlmLoss::default();
        let mut l_step: Option<Var> = None;
        for &s in &pass.step_scores {
            let logits = tape.scale(s, inv_tau);
            let ce = tape.cross_entropy(logits, &targets)?;
            report.steps.push(tape.scalar(ce).as_f64());
            l_step = Some(match l_step {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        let l_step = l_step.expect("at least one step");
        let soft_logits = tape.scale(pass.soft, inv_tau);
        let l_comp = tape.cross_entropy(soft_logits, &targets)?;
        let a = tape.scale(l_step, T::lit(self.weights.step));
        let c = tape.scale(l_comp, T::lit(self.weights.comp));
        let total = tape.add(a, c)?;
        report.step = tape.scalar(l_step).as_f64();
        report.comp = tape.scalar(l_comp).as_f64();
        report.total = tape.scalar(total).as_f64();
        Ok((total, report))
    }

    pub fn score<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &[&Image],
        candidates: &[usize],
        cues: &CueFixtures,
    ) -> Result<LlmScores> {
        let mut tape = Tape::new(store);
        let pass = self.forward(&mut tape, images, candidates, cues)?;
        let tau = self.backbone.config.tau;
        let k = candidates.len();
        let step_probs: Vec<Vec<f64>> = pass
            .step_scores
            .iter()
            .map(|&s| softmax_rows(&tape.value(s).to_f64_vec(), k, tau))
            .collect();
        let hard = hard_probability(&step_probs);
        let soft = softmax_rows(&tape.value(pass.soft).to_f64_vec(), k, tau);
        let fused = fuse(&soft, &hard, self.fusion);
        Ok(LlmScores {
            candidates: candidates.to_vec(),
            step_probs,
            hard,
            soft,
            fused,
        })
    }
}
