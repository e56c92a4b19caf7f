//! Invariant checks that panic on violation; shared by the invariant tests
//! and the acceptance report.

use plo_core::config::ModelKind;
use plo_core::image::Image;
use plo_core::prompts::{PromptKind, SoftPromptBank};
use plo_core::run::{Model, Session};
use plo_core::space::Split;
use plo_core::tensor::{Adam, ParamStore, Tape};
use plo_core::vlm::ObservationOrder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cosine, ranking, small_config, small_session};

fn images(session: &Session, n: usize) -> Vec<&Image> {
    session.data.split(Split::Test).into_iter().take(n).map(|s| &s.image).collect()
}

fn all_pairs(session: &Session) -> Vec<usize> {
    (0..session.data.space.num_pairs()).collect()
}

fn zero_cross_attention(session: &mut Session) {
    for id in session.backbone().ca.params() {
        let n = session.store.get(id).numel();
        session.store.set_values(id, &vec![0.0; n]).unwrap();
    }
}

fn vlm_session(order: ObservationOrder, seed: u64) -> Session {
    let mut cfg = small_config(ModelKind::Vlm);
    cfg.seed = seed;
    cfg.model.observation_order = order;
    small_session(cfg)
}

fn llm_session(seed: u64) -> Session {
    let mut cfg = small_config(ModelKind::Llm);
    cfg.seed = seed;
    small_session(cfg)
}

pub fn prompt_lengths() {
    for m in 1..=8 {
        let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
        let mut store = ParamStore::<f64>::new();
        let bank = SoftPromptBank::new(&mut store, m, 3, 4, 6, &[], None, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        for (kind, want) in [
            (PromptKind::State(2), m + 2),
            (PromptKind::Object(3), m + 1),
            (PromptKind::Composition(1, 0), m + 2),
        ] {
            assert_eq!(bank.prompt_len(kind), want, "M={m} {kind:?}");
            let v = bank.build(&mut tape, kind).unwrap();
            assert_eq!(tape.value(v).rows(), want, "M={m} {kind:?}");
        }
        // The state prompt ends with the generic object slot; the composition
        // prompt with the object embedding.
        let st = bank.build(&mut tape, PromptKind::State(1)).unwrap();
        assert_eq!(tape.value(st).row_slice(m + 1), store.get(bank.generic).row_slice(0));
        let cp = bank.build(&mut tape, PromptKind::Composition(1, 2)).unwrap();
        assert_eq!(tape.value(cp).row_slice(m + 1), store.get(bank.objects).row_slice(2));
        assert_eq!(tape.value(cp).row_slice(m), store.get(bank.states).row_slice(1));
    }
}

pub fn frozen_weights_unchanged() {
    for kind in [ModelKind::Vlm, ModelKind::Llm] {
        let mut s = small_session(small_config(kind));
        let before = s.store.clone();
        let frozen = s.store.frozen_ids();
        assert!(!frozen.is_empty());
        let mut adam = Adam::new(s.config.adam_config());
        let train: Vec<usize> = (0..s.data.samples.len())
            .filter(|&i| s.data.samples[i].split == Split::Train)
            .collect();
        let candidates = s.data.space.seen().to_vec();
        for step in 0..10 {
            let batch: Vec<usize> = train.iter().cycle().skip(step * 4).take(8).copied().collect();
            s.train_step(&mut adam, &batch, &candidates).unwrap();
        }
        for id in frozen {
            let a: Vec<u64> = before.get(id).data().iter().map(|x| x.to_bits() as u64).collect();
            let b: Vec<u64> = s.store.get(id).data().iter().map(|x| x.to_bits() as u64).collect();
            assert_eq!(a, b, "{kind:?}: frozen {} moved", s.store.name(id));
        }
        let moved = s
            .store
            .trainable_ids()
            .into_iter()
            .filter(|&id| before.get(id).data() != s.store.get(id).data())
            .count();
        assert!(moved > 0, "{kind:?}: no trainable parameter changed");
    }
}

pub fn zero_ca_vlm() {
    for order in ObservationOrder::ALL {
        let mut s = vlm_session(order, 11);
        zero_cross_attention(&mut s);
        let Model::Vlm(m) = &s.model else { unreachable!() };
        let imgs = images(&s, 6);
        let cands = all_pairs(&s);
        let mut tape = Tape::new(&s.store);
        let pass = m.forward(&mut tape, &imgs, &cands).unwrap();
        assert_eq!(tape.value(pass.v).data(), tape.value(pass.v_tilde).data(), "{order:?}");

        let v = tape.value(pass.v).cast::<f64>();
        let t = tape.value(pass.t_comp).cast::<f64>();
        let scores = m.score(&s.store, &imgs, &cands).unwrap();
        for b in 0..imgs.len() {
            let raw: Vec<f64> = (0..cands.len()).map(|k| cosine(v.row_slice(b), t.row_slice(k))).collect();
            let want: Vec<usize> = ranking(&raw).into_iter().map(|k| cands[k]).collect();
            assert_eq!(scores.ranking(b), want, "{order:?} row {b}");
        }
    }
}

pub fn zero_ca_llm() {
    let mut s = llm_session(12);
    zero_cross_attention(&mut s);
    let store = s.store.cast::<f64>();
    let Model::Llm(m) = &s.model else { unreachable!() };
    let cues = s.cues.as_ref().unwrap();
    let imgs = images(&s, 4);
    let cands = all_pairs(&s);
    let k = cands.len();
    let mut tape = Tape::new(&store);
    let pass = m.forward(&mut tape, &imgs, &cands, cues).unwrap();
    let v = tape.value(pass.v).clone();

    // Independently encode every cue and compare each step with the raw cosine.
    let bb = &m.backbone;
    let texts: Vec<&str> = cands.iter().flat_map(|&p| cues.cues(p).iter().map(String::as_str)).collect();
    let mut tape2 = Tape::new(&store);
    let enc = bb.encode_mixed(&mut tape2, &[], &texts).unwrap();
    let t = tape2.value(enc.cls).clone();
    let scores = m.score(&store, &imgs, &cands, cues).unwrap();
    for b in 0..imgs.len() {
        let mut summed = vec![0.0; k];
        for (i, step) in pass.step_scores.iter().enumerate() {
            let got = tape.value(*step).row_slice(b).to_vec();
            for j in 0..k {
                let raw = cosine(v.row_slice(b), t.row_slice(j * m.steps + i));
                assert!((got[j] - raw).abs() < 1e-12, "row {b} step {i} cand {j}: {} vs {raw}", got[j]);
                summed[j] += raw;
            }
        }
        // Product of per-step softmaxes ranks like the summed similarities.
        assert_eq!(ranking(scores.row(&scores.hard, b)), ranking(&summed), "row {b}");
    }
}

pub fn probabilities(seed: u64) {
    for order in ObservationOrder::ALL {
        let s = vlm_session(order, seed);
        let Model::Vlm(m) = &s.model else { unreachable!() };
        let cands = all_pairs(&s);
        let sc = m.score(&s.store, &images(&s, 5), &cands).unwrap();
        for b in 0..5 {
            let sum: f64 = sc.row(b).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "vlm {order:?}: row sums to {sum}");
        }
    }
    let s = llm_session(seed);
    let Model::Llm(m) = &s.model else { unreachable!() };
    let cands = all_pairs(&s);
    let sc = m.score(&s.store, &images(&s, 5), &cands, s.cues.as_ref().unwrap()).unwrap();
    for b in 0..5 {
        for p in sc.step_probs.iter().chain([&sc.soft]) {
            let sum: f64 = sc.row(p, b).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "llm row sums to {sum}");
        }
        for j in 0..cands.len() {
            let product: f64 = sc.step_probs.iter().map(|p| sc.row(p, b)[j]).product();
            let hard = sc.row(&sc.hard, b)[j];
            assert!((hard - product).abs() <= 1e-9, "hard {hard} vs product {product}");
        }
    }
}

pub fn tape_softmax_rows(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::<f32>::new();
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..40));
        let data: Vec<f32> = (0..r * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let temp = rng.gen_range(0.01f32..2.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(plo_core::tensor::Tensor::matrix(r, c, data).unwrap());
        let p = tape.softmax(x, temp).unwrap();
        for row in 0..r {
            let sum: f64 = tape.value(p).row_slice(row).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        }
    }
}

