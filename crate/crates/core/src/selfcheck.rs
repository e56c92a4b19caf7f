//! Finite-difference checks of the primitive ops and of both full training
//! losses, run at double precision on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::image::Image;
use crate::llm::PloLlm;
use crate::model::{Backbone, ModelConfig};
use crate::prompts::{CueFixtures, Vocab};
use crate::space::CompositionSpace;
use crate::synth::derive_seed;
use crate::tensor::gradcheck::{check_params, op_suite, sample_coords, CheckResult, DEFAULT_STEP};
use crate::tensor::ParamStore;
use crate::vlm::{ObservationOrder, PloVlm};

pub use crate::tensor::gradcheck::DEFAULT_TOLERANCE;

const COORDS_PER_PARAM: usize = 3;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            channels: 3,
            patch: 8,
            width: 16,
            heads: 2,
            image_layers: 1,
            text_layers: 1,
            embed_dim: 12,
            max_text_len: 24,
        },
        ..ModelConfig::default()
    }
}

fn small_space() -> CompositionSpace {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    CompositionSpace::new(names("state", 2), names("thing", 3), vec![0, 1, 3, 5], vec![2], vec![4])
        .expect("fixed space is valid")
}

struct Fixture {
    space: CompositionSpace,
    images: Vec<Image>,
    labels: Vec<(usize, usize)>,
    candidates: Vec<usize>,
}

fn fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let space = small_space();
    let cfg = small_config();
    let n = cfg.encoder.image_size;
    let images = (0..3)
        .map(|_| {
            let px = (0..n * n * 3).map(|_| rng.gen::<f32>()).collect();
            Image::new(n, n, 3, px).expect("image shape")
        })
        .collect::<Vec<_>>();
    let candidates = space.seen().to_vec();
    let labels = (0..images.len())
        .map(|_| space.pair(candidates[rng.gen_range(0..candidates.len())]))
        .collect();
    Fixture {
        space,
        images,
        labels,
        candidates,
    }
}

fn backbone(space: &CompositionSpace, extra: &[String], rng: &mut ChaCha8Rng) -> Result<(Backbone, ParamStore<f64>)> {
    let mut texts: Vec<&str> = space.states.iter().chain(&space.objects).map(String::as_str).collect();
    texts.extend(extra.iter().map(String::as_str));
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(
        &mut store,
        &small_config(),
        space.num_states(),
        space.num_objects(),
        Vocab::build(texts),
        rng,
    )?;
    Ok((bb, store.cast()))
}

fn vlm_instance(seed: u64, order: ObservationOrder) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = fixture(&mut rng);
    let (bb, store) = backbone(&f.space, &[], &mut rng)?;
    let model = PloVlm::new(bb, order);
    let images: Vec<&Image> = f.images.iter().collect();
    let coords = sample_coords(&store, COORDS_PER_PARAM, &mut rng);
    let err = check_params(&store, &coords, DEFAULT_STEP, |t| {
        Ok(model.loss(t, &images, &f.labels, &f.candidates)?.0)
    })?;
    Ok(err)
}

fn llm_instance(seed: u64, steps: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = fixture(&mut rng);
    let cues = CueFixtures::fallback(&f.space, steps);
    let cue_texts: Vec<String> = cues.sequences.iter().flat_map(|s| s.cues.clone()).collect();
    let (bb, store) = backbone(&f.space, &cue_texts, &mut rng)?;
    let model = PloLlm::new(bb, steps)?;
    let images: Vec<&Image> = f.images.iter().collect();
    let coords = sample_coords(&store, COORDS_PER_PARAM, &mut rng);
    let err = check_params(&store, &coords, DEFAULT_STEP, |t| {
        Ok(model.loss(t, &images, &f.labels, &f.candidates, &cues)?.0)
    })?;
    Ok(err)
}

/// Worst error over `instances` freshly initialized models and inputs.
fn worst(name: String, seed: u64, instances: usize, run: impl Fn(u64) -> Result<f64>) -> Result<CheckResult> {
    let mut max_rel_err = 0.0f64;
    for i in 0..instances {
        let err = run(derive_seed(&[seed, i as u64]))?;
        max_rel_err = max_rel_err.max(err);
    }
    Ok(CheckResult {
        name,
        instances,
        max_rel_err,
    })
}

/// Full-loss check of the two-step model for one observation order.
pub fn vlm_check(seed: u64, order: ObservationOrder, instances: usize) -> Result<CheckResult> {
    worst(format!("plo-vlm loss ({})", order.name()), seed, instances, |s| vlm_instance(s, order))
}

/// Full-loss check of the cue-chain model.
pub fn llm_check(seed: u64, steps: usize, instances: usize) -> Result<CheckResult> {
    worst(format!("plo-llm loss ({steps} cues)"), seed, instances, |s| llm_instance(s, steps))
}

/// Every primitive op plus both full losses.
pub fn full_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(seed, instances)?;
    for order in ObservationOrder::ALL {
        out.push(vlm_check(seed, order, instances)?);
    }
    out.push(llm_check(seed, 3, instances)?);
    Ok(out)
}
