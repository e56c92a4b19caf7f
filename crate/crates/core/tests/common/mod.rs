//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use plo_core::eval::ScoreMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Metrics computed by brute force.
#[derive(Clone, Copy, Debug)]
pub struct OracleMetrics {
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
}

/// Prediction of one row after adding `bias` to every unseen column. Ties go
/// to the lowest column. The infinite biases restrict the argmax to one kind.
fn predict(row: &[f64], unseen: &[bool], bias: f64) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (c, (&x, &u)) in row.iter().zip(unseen).enumerate() {
        let v = if bias == f64::INFINITY {
            if !u {
                continue;
            }
            x
        } else if bias == f64::NEG_INFINITY {
            if u {
                continue;
            }
            x
        } else if u {
            x + bias
        } else {
            x
        };
        if best == usize::MAX || v > best_val {
            best = c;
            best_val = v;
        }
    }
    best
}

fn accuracies(m: &ScoreMatrix, bias: f64) -> (f64, f64) {
    let (mut s_ok, mut s_n, mut u_ok, mut u_n) = (0usize, 0usize, 0usize, 0usize);
    for r in 0..m.rows() {
        let hit = predict(m.row(r), &m.unseen, bias) == m.labels[r];
        if m.unseen[m.labels[r]] {
            u_n += 1;
            u_ok += hit as usize;
        } else {
            s_n += 1;
            s_ok += hit as usize;
        }
    }
    (s_ok as f64 / s_n as f64, u_ok as f64 / u_n as f64)
}

/// Evaluates every bias at which any seen/unseen pair of scores in any row
/// swaps order, every midpoint between consecutive such biases, and both
/// infinities.
pub fn brute_force(m: &ScoreMatrix) -> OracleMetrics {
    let mut crit = Vec::new();
    for r in 0..m.rows() {
        let row = m.row(r);
        for (j, &sj) in row.iter().enumerate() {
            for (k, &sk) in row.iter().enumerate() {
                if !m.unseen[j] && m.unseen[k] {
                    crit.push(sj - sk);
                }
            }
        }
    }
    crit.sort_by(f64::total_cmp);
    crit.dedup();
    let mut biases = vec![f64::NEG_INFINITY];
    for (i, &c) in crit.iter().enumerate() {
        biases.push(c);
        if let Some(&next) = crit.get(i + 1) {
            biases.push((c + next) / 2.0);
        }
    }
    biases.push(f64::INFINITY);

    let pts: Vec<(f64, f64)> = biases.iter().map(|&b| accuracies(m, b)).collect();
    let hm = |s: f64, u: f64| if s + u > 0.0 { 2.0 * s * u / (s + u) } else { 0.0 };
    let mut auc = 0.0;
    for w in pts.windows(2) {
        auc += (w[1].1 - w[0].1) * w[0].0;
    }
    OracleMetrics {
        seen: pts.iter().map(|p| p.0).fold(0.0, f64::max),
        unseen: pts.iter().map(|p| p.1).fold(0.0, f64::max),
        hm: pts.iter().map(|&(s, u)| hm(s, u)).fold(0.0, f64::max),
        auc,
    }
}

/// Random matrix with both column kinds and both row origins. With
/// `levels = Some(n)` scores are multiples of `1/n`, which makes ties common
/// and all sums exact.
pub fn random_matrix(seed: u64, rows: usize, cols: usize, levels: Option<u32>) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unseen: Vec<bool> = (0..cols).map(|_| rng.gen_bool(0.4)).collect();
    unseen[0] = false;
    unseen[cols - 1] = true;
    let seen_cols: Vec<usize> = (0..cols).filter(|&c| !unseen[c]).collect();
    let unseen_cols: Vec<usize> = (0..cols).filter(|&c| unseen[c]).collect();
    let labels: Vec<usize> = (0..rows)
        .map(|r| match r {
            0 => seen_cols[0],
            1 => unseen_cols[0],
            _ => rng.gen_range(0..cols),
        })
        .collect();
    let scores = (0..rows * cols)
        .map(|_| match levels {
            Some(n) => rng.gen_range(0..=n) as f64 / n as f64,
            None => rng.gen::<f64>(),
        })
        .collect();
    let names = (0..cols).map(|c| format!("c{c}")).collect();
    ScoreMatrix::new(names, unseen, scores, labels).expect("valid matrix")
}

/// A model and dataset small enough to train in a fraction of a second.
pub const SMALL_CONFIG: &str = r#"
seed = 5

[model]
image_size = 16
patch_size = 8
width = 16
heads = 2
image_layers = 1
text_layers = 1
embed_dim = 16
max_text_len = 24
cues = 3

[train]
batch_size = 8
epochs = 2

[synth]
num_states = 3
num_objects = 4
num_val_unseen = 2
num_test_unseen = 2
train_per_pair = 3
eval_per_pair = 2
"#;

pub fn small_config(kind: plo_core::config::ModelKind) -> plo_core::config::RunConfig {
    let mut c = plo_core::config::RunConfig::parse(SMALL_CONFIG, "small").expect("valid config");
    c.model.kind = kind;
    c
}

/// A fresh session; cue-chain models get template cues.
pub fn small_session(cfg: plo_core::config::RunConfig) -> plo_core::run::Session {
    let data = plo_core::run::load_data(&cfg).expect("synthetic data");
    let cues = match cfg.model.kind {
        plo_core::config::ModelKind::Llm => {
            Some(plo_core::prompts::CueFixtures::fallback(&data.space, cfg.model.cues))
        }
        plo_core::config::ModelKind::Vlm => None,
    };
    plo_core::run::Session::with_parts(cfg, data, cues).expect("session")
}

/// Row-wise cosine similarity, computed in f64.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Column indices by descending value, ties to the lower index.
pub fn ranking(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}
