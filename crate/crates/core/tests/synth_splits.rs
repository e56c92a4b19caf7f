use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use plo_core::space::Split;
use plo_core::synth::{make_space, make_splits, read_dataset, write_dataset, Renderer, SynthConfig};
use plo_core::Error;
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig {
        num_states: 4,
        num_objects: 5,
        num_val_unseen: 3,
        num_test_unseen: 3,
        train_per_pair: 2,
        eval_per_pair: 1,
        image_size: 16,
        ..SynthConfig::default()
    }
}

fn assert_well_formed(cfg: &SynthConfig) {
    let sp = make_space(cfg).unwrap();
    let seen = sp.seen();
    for split in [Split::Val, Split::Test] {
        for &p in sp.unseen(split) {
            let (s, o) = sp.pair(p);
            assert!(!seen.contains(&p), "seed {}: unseen pair {p} is seen", cfg.seed);
            assert!(seen.iter().any(|&q| sp.pair(q).0 == s), "seed {}: state {s} unseen", cfg.seed);
            assert!(seen.iter().any(|&q| sp.pair(q).1 == o), "seed {}: object {o} unseen", cfg.seed);
        }
    }
    let val = sp.unseen(Split::Val);
    assert!(sp.unseen(Split::Test).iter().all(|p| !val.contains(p)));
    assert_eq!(seen.len() + val.len() + sp.unseen(Split::Test).len(), sp.num_pairs());
}

#[test]
fn default_split_is_well_formed_on_100_seeds() {
    for seed in 0..100 {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        assert_well_formed(&cfg);
        let sp = make_space(&cfg).unwrap();
        assert_eq!(sp.seen().len(), 48);
        assert_eq!(sp.unseen(Split::Test).len(), 16);
    }
}

#[test]
fn training_samples_come_from_seen_pairs_only() {
    let ds = make_splits(&small()).unwrap();
    for s in ds.split(Split::Train) {
        assert!(ds.space.is_seen(ds.pair_of(s)));
    }
    let test = ds.split(Split::Test);
    assert!(test.iter().any(|s| !ds.space.is_seen(ds.pair_of(s))));
}

#[test]
fn write_read_round_trip_and_stable_indices() {
    let ds = make_splits(&small()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&ds, tmp.path()).unwrap();
    let back = read_dataset(tmp.path()).unwrap();
    assert_eq!(back, ds);

    let fingerprint = |sp: &plo_core::space::CompositionSpace| {
        let mut h = DefaultHasher::new();
        for p in 0..sp.num_pairs() {
            (p, sp.pair_name(p)).hash(&mut h);
        }
        sp.seen().hash(&mut h);
        h.finish()
    };
    assert_eq!(fingerprint(&back.space), fingerprint(&ds.space));
}

#[test]
fn identical_config_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&make_splits(&small()).unwrap(), a.path()).unwrap();
    write_dataset(&make_splits(&small()).unwrap(), b.path()).unwrap();
    for f in ["pairs.txt", "train_pairs.txt", "val_pairs.txt", "test_pairs.txt", "images.bin", "images.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_validation_unseen_set_round_trips() {
    let cfg = SynthConfig { num_val_unseen: 0, ..small() };
    let ds = make_splits(&cfg).unwrap();
    assert!(ds.space.unseen(Split::Val).is_empty());
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&ds, tmp.path()).unwrap();
    assert_eq!(read_dataset(tmp.path()).unwrap(), ds);
}

#[test]
fn malformed_pair_line_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&make_splits(&small()).unwrap(), tmp.path()).unwrap();
    let path = tmp.path().join("train_pairs.txt");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("just-one-word\n");
    let line = text.lines().count();
    std::fs::write(&path, text).unwrap();
    match read_dataset(tmp.path()) {
        Err(Error::Parse { path, line: l, .. }) => {
            assert!(path.ends_with("train_pairs.txt"));
            assert_eq!(l, line);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(tmp.path()), Err(Error::Missing { .. })));
}

#[test]
fn without_conditioning_a_state_changes_every_object_alike() {
    let cfg = SynthConfig { object_conditioning: 0.0, noise: 0.0, ..small() };
    let r = Renderer::new(&cfg).unwrap();
    // raw(s, o) = α_s·base(o) + k·effect(s), so the object difference divided
    // by α_s is the same base difference for every state.
    let (o1, o2) = (0, 3);
    let base_diff: Vec<f64> = r.base(o1).iter().zip(r.base(o2)).map(|(a, b)| a - b).collect();
    for s in 0..cfg.num_states {
        let a = r.raw(s, o1);
        let b = r.raw(s, o2);
        for (i, want) in base_diff.iter().enumerate() {
            let got = (a[i] - b[i]) / r.alpha(s);
            assert!((got - want).abs() < 1e-12, "state {s} pixel {i}: {got} vs {want}");
        }
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance between renderings of one state on two different objects,
/// over every state and object pair.
fn same_state_spread(conditioning: f64, seed: u64) -> (f64, usize) {
    let cfg = SynthConfig { object_conditioning: conditioning, seed, ..SynthConfig::default() };
    let r = Renderer::new(&cfg).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for s in 0..cfg.num_states {
        let imgs: Vec<_> = (0..cfg.num_objects).map(|o| r.render(s, o, Split::Train, 0)).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                total += l2(&imgs[i].pixels, &imgs[j].pixels);
                n += 1;
            }
        }
    }
    (total / n as f64, n)
}

#[test]
fn conditioning_strength_weakly_increases_spread() {
    for seed in 0..3 {
        let mut prev = f64::NEG_INFINITY;
        for c in [0.0, 0.4, 0.8, 1.2] {
            let (d, n) = same_state_spread(c, seed);
            assert!(n >= 100);
            assert!(d >= prev, "seed {seed}: spread {d} at {c} below {prev}");
            prev = d;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_grids_keep_primitives_seen(
        ns in 2usize..7,
        no in 2usize..7,
        seed in any::<u64>(),
        frac in 0.0f64..0.4,
    ) {
        let unseen = ((ns * no) as f64 * frac) as usize;
        let cfg = SynthConfig {
            num_states: ns,
            num_objects: no,
            num_val_unseen: unseen / 2,
            num_test_unseen: unseen - unseen / 2,
            seed,
            ..SynthConfig::default()
        };
        match make_space(&cfg) {
            Ok(_) => assert_well_formed(&cfg),
            Err(e) => prop_assert!(matches!(e, Error::Config(_))),
        }
    }

    #[test]
    fn pixels_stay_in_range(s in 0usize..4, o in 0usize..5, idx in 0usize..4, noise in 0.0f64..0.5) {
        let cfg = SynthConfig { noise, ..small() };
        let img = Renderer::new(&cfg).unwrap().render(s, o, Split::Test, idx);
        prop_assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
