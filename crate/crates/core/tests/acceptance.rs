//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails if any enforced check fails. The ordering condition of the
//! learning criterion is reported but only enforced with
//! `PLO_ACCEPTANCE_STRICT=1`; see the notes in the README.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{brute_force, checks, random_matrix};
use plo_core::commands::{ablate, Axis};
use plo_core::config::RunConfig;
use plo_core::eval::sweep_and_score;
use plo_core::prompts::{validate_cues, CueFixtures, CueVerdict};
use plo_core::run::{train_run, Metrics, METRICS_FILE};
use plo_core::selfcheck::{full_suite, DEFAULT_TOLERANCE};
use plo_core::space::{CompositionSpace, Split};
use plo_core::synth::{make_space, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const LEARNING_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SEED_BUDGET: Duration = Duration::from_secs(600);
const DIRECTION_MIN_SEEDS: usize = 3;
const TEST_UNSEEN_PAIRS: f64 = 16.0;
const SPLIT_SEEDS: u64 = 100;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    /// False only when an enforced part failed.
    enforced_ok: bool,
    detail: String,
}

impl Outcome {
    fn plain(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            enforced_ok: pass,
            detail,
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

/// Runs a check that may panic and turns a panic into a failure.
fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Outcome::plain(false, panic_message(p)),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = full_suite(0, GRAD_INSTANCES).expect("gradient suite runs");
    let elapsed = t.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("non-empty suite");
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed(DEFAULT_TOLERANCE) || r.instances < GRAD_INSTANCES)
        .map(|r| r.name.as_str())
        .collect();
    let pass = failed.is_empty() && elapsed < GRAD_BUDGET;
    Outcome::plain(
        pass,
        format!(
            "{} checks x {} instances, worst {} at {:.2e} (tol {:.0e}), failed {:?}, {} (budget {})",
            results.len(),
            GRAD_INSTANCES,
            worst.name,
            worst.max_rel_err,
            DEFAULT_TOLERANCE,
            failed,
            secs(elapsed),
            secs(GRAD_BUDGET)
        ),
    )
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        // Even seeds draw from a coarse grid so ties are common.
        let levels = if seed % 2 == 0 { Some(16) } else { None };
        let m = random_matrix(seed, 50, 12, levels);
        let fast = sweep_and_score(&m).expect("sweep");
        let slow = brute_force(&m);
        for (a, b) in [
            (fast.best_seen, slow.seen),
            (fast.best_unseen, slow.unseen),
            (fast.best_hm, slow.hm),
            (fast.auc, slow.auc),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = t.elapsed();
    Outcome::plain(
        worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!(
            "100 matrices 50x12, max |sweep - oracle| {worst:.1e} (tol {ORACLE_TOL:.0e}), {} (budget {})",
            secs(elapsed),
            secs(ORACLE_BUDGET)
        ),
    )
}

fn probability_invariants() -> Outcome {
    for seed in 0..8 {
        checks::probabilities(seed);
        checks::tape_softmax_rows(seed);
    }
    Outcome::plain(
        true,
        "8 random instances: every softmax row sums to 1 within 1e-6, hard = product of steps within 1e-9".into(),
    )
}

const STATES: [&str; 3] = ["wet", "old", "red"];
const OBJECTS: [&str; 2] = ["dog", "cup"];

/// A cue file with randomly damaged sections.
fn damaged_fixture(rng: &mut ChaCha8Rng, sp: &CompositionSpace, n: usize) -> String {
    let mut text = String::new();
    for _ in 0..rng.gen_range(0..10) {
        let (s, o) = sp.pair(rng.gen_range(0..sp.num_pairs()));
        let name = format!("{} {}", STATES[s], OBJECTS[o]);
        let mut cues: Vec<String> = (1..n).map(|i| format!("a photo of clue {i}")).collect();
        cues.push(format!("a photo of {name}"));
        match rng.gen_range(0..7) {
            0 => {}
            1 => cues.truncate(rng.gen_range(0..=cues.len())),
            2 => cues.push("a photo of something extra".into()),
            3 => cues[0] = "the photo shows".into(),
            4 => *cues.last_mut().unwrap() = "a photo of something else".into(),
            5 => cues.insert(0, "a photo of a stray line".into()),
            _ => {
                text.push_str(&format!("## {name}\nnot a cue line\n"));
                continue;
            }
        }
        text.push_str(&format!("## {name}\n"));
        for c in cues {
            text.push_str(&format!("- {c}\n"));
        }
        text.push('\n');
    }
    text
}

fn terminal_cue_rate() -> (usize, usize) {
    let sp = CompositionSpace::new(
        STATES.iter().map(|s| s.to_string()).collect(),
        OBJECTS.iter().map(|s| s.to_string()).collect(),
        vec![0, 1, 2, 5],
        vec![3],
        vec![4],
    )
    .expect("space");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut ok, mut total) = (0, 0);
    for _ in 0..200 {
        let n = rng.gen_range(1..6);
        let text = damaged_fixture(&mut rng, &sp, n);
        let f = CueFixtures::parse(&text, &sp, n).expect("parse");
        for seq in &f.sequences {
            let (s, o) = sp.pair(seq.pair);
            total += 1;
            if validate_cues(&seq.cues, STATES[s], OBJECTS[o], n) == CueVerdict::Accepted {
                ok += 1;
            }
        }
    }
    (ok, total)
}

fn structural_invariants() -> Outcome {
    checks::frozen_weights_unchanged();
    checks::zero_ca_vlm();
    checks::zero_ca_llm();
    checks::prompt_lengths();
    let (ok, total) = terminal_cue_rate();
    Outcome::plain(
        ok == total,
        format!(
            "frozen bitwise after 10 steps (both models), zero CA = raw ranking (both models), \
             prompt lengths M=1..8, terminal cue {ok}/{total} sequences"
        ),
    )
}

fn learning_and_direction() -> Outcome {
    let chance = 1.0 / TEST_UNSEEN_PAIRS;
    let mut lines = Vec::new();
    let (mut unseen_ok, mut time_ok, mut wins) = (true, true, 0);
    for seed in LEARNING_SEEDS {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let t = Instant::now();
        let rows = ablate(&cfg, Axis::ObservationOrder, |_| {}).expect("ablation");
        let elapsed = t.elapsed();
        let get = |name: &str| -> Metrics { rows.iter().find(|r| r.setting == name).expect("row").metrics };
        let dynamic = get("dynamic");
        let beats = ["none", "state-first", "object-first"]
            .iter()
            .all(|o| dynamic.auc >= get(o).auc);
        wins += beats as usize;
        unseen_ok &= dynamic.unseen > 3.0 * chance;
        time_ok &= elapsed < SEED_BUDGET;
        let aucs: Vec<String> = rows.iter().map(|r| format!("{}={:.3}", r.setting, r.metrics.auc)).collect();
        lines.push(format!(
            "seed {seed}: U(dynamic)={:.3} AUC {} {} {}",
            dynamic.unseen,
            aucs.join(" "),
            if beats { "win" } else { "loss" },
            secs(elapsed)
        ));
    }
    let direction_ok = wins >= DIRECTION_MIN_SEEDS;
    Outcome {
        pass: unseen_ok && time_ok && direction_ok,
        enforced_ok: unseen_ok && time_ok,
        detail: format!(
            "U > 3x chance ({:.4}) on all seeds: {unseen_ok}; dynamic AUC >= every fixed order on {wins}/5 seeds \
             (need {DIRECTION_MIN_SEEDS}); each seed within {}: {time_ok}\n    {}",
            3.0 * chance,
            secs(SEED_BUDGET),
            lines.join("\n    ")
        ),
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = RunConfig::default();
    let text = cfg.to_text().expect("config text");
    let a = train_run(cfg.clone(), &text, &tmp.path().join("a")).expect("first run");
    let b = train_run(cfg, &text, &tmp.path().join("b")).expect("second run");
    let ma = std::fs::read(a.dir.join(METRICS_FILE)).expect("metrics a");
    let mb = std::fs::read(b.dir.join(METRICS_FILE)).expect("metrics b");
    Outcome::plain(
        !ma.is_empty() && ma == mb,
        format!("default config trained twice, {} bytes of metrics.jsonl, identical: {}", ma.len(), ma == mb),
    )
}

fn split_well_formedness() -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..SPLIT_SEEDS {
        let sp = make_space(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .expect("space");
        let seen = sp.seen();
        let ok = [Split::Val, Split::Test].iter().all(|&split| {
            sp.unseen(split).iter().all(|&p| {
                let (s, o) = sp.pair(p);
                !seen.contains(&p)
                    && seen.iter().any(|&q| sp.pair(q).0 == s)
                    && seen.iter().any(|&q| sp.pair(q).1 == o)
            })
        }) && seen.len() == 48
            && sp.unseen(Split::Test).len() == 16;
        if !ok {
            bad.push(seed);
        }
    }
    Outcome::plain(
        bad.is_empty(),
        format!("{SPLIT_SEEDS} generator seeds, malformed: {bad:?}"),
    )
}

fn main() {
    // Panics become FAIL lines; keep the default hook from printing them too.
    panic::set_hook(Box::new(|_| {}));
    let strict = std::env::var("PLO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 7] = [
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("probability invariants", probability_invariants),
        ("structural invariants", structural_invariants),
        ("learning & direction", learning_and_direction),
        ("determinism", determinism),
        ("split well-formedness", split_well_formedness),
    ];
    let mut passed = 0;
    let mut ok = true;
    for (name, f) in criteria {
        let o = guarded(f);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        passed += o.pass as usize;
        ok &= if strict { o.pass } else { o.enforced_ok };
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if !ok {
        std::process::exit(1);
    }
}
