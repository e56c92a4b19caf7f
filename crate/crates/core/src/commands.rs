//! Implementations behind the `plo` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::eval::World;
use crate::inspect::{llm_attention, vlm_attention, AttentionMap};
use crate::llm::FusionWeights;
use crate::prompts::CueFixtures;
use crate::run::{load_data, write_report, Evaluation, Metrics, Model, RunDir, Session};
use crate::space::Split;
use crate::synth::{make_splits, write_dataset};
use crate::tensor::gradcheck::CheckResult;
use crate::vlm::ObservationOrder;

/// Default cue counts swept by the cue-count ablation.
pub const CUE_COUNTS: [usize; 5] = [1, 2, 3, 4, 5];
/// Hard-path weights swept by the fusion ablation.
pub const FUSION_GRID: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];

/// Writes the synthetic dataset described by `cfg`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let ds = make_splits(&cfg.synth_config())?;
    let dir = RunDir::create(out)?;
    write_dataset(&ds, dir.path())?;
    dir.commit()
}

/// Writes template cue fixtures for every composition of the dataset.
pub fn gen_cues(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    if out.exists() {
        return Err(Error::Config(format!("output {} already exists", out.display())));
    }
    let ds = load_data(cfg)?;
    let text = CueFixtures::fallback(&ds.space, n).to_text(&ds.space);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = out.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, out)?;
    Ok(())
}

/// Evaluates the checkpoint of a run directory.
pub fn eval_run(run: &Path, split: Split, world: Option<World>, out: Option<&Path>) -> Result<Evaluation> {
    let session = Session::open(run)?;
    let world = world.unwrap_or_else(|| session.config.eval.world.into());
    let ev = session.evaluate(split, world)?;
    if let Some(out) = out {
        let dir = RunDir::create(out)?;
        write_report(dir.path(), &ev.report)?;
        let mut scores = Vec::new();
        ev.matrix.write_csv(&mut scores)?;
        fs::write(dir.join(crate::run::SCORES_CSV), scores)?;
        dir.commit()?;
    }
    Ok(ev)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    ObservationOrder,
    CueCount,
    FusionLambda,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "observation-order" => Some(Axis::ObservationOrder),
            "cue-count" => Some(Axis::CueCount),
            "fusion-lambda" => Some(Axis::FusionLambda),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::ObservationOrder => "observation-order",
            Axis::CueCount => "cue-count",
            Axis::FusionLambda => "fusion-lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub metrics: Metrics,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("setting,S,U,HM,AUC\n");
    for r in rows {
        let m = r.metrics;
        out.push_str(&format!("{},{},{},{},{}\n", r.setting, m.seen, m.unseen, m.hm, m.auc));
    }
    out
}

fn test_metrics(session: &Session) -> Result<Metrics> {
    let world = session.config.eval.world.into();
    Ok(Metrics::from(&session.evaluate(Split::Test, world)?.report))
}

fn cues_for(cfg: &RunConfig, space: &crate::space::CompositionSpace, n: usize) -> Result<CueFixtures> {
    match &cfg.data.cues {
        Some(p) => {
            let s = p.to_string_lossy();
            if s.contains("{n}") {
                CueFixtures::load(Path::new(&s.replace("{n}", &n.to_string())), space, n)
            } else if n == cfg.model.cues {
                CueFixtures::load(p, space, n)
            } else {
                Ok(CueFixtures::fallback(space, n))
            }
        }
        None => Ok(CueFixtures::fallback(space, n)),
    }
}

/// Trains one model per setting of `axis` and reports test metrics.
/// `progress` receives each row as it completes.
pub fn ablate(cfg: &RunConfig, axis: Axis, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let data = load_data(cfg)?;
    let mut rows = Vec::new();
    let mut push = |setting: String, metrics: Metrics, rows: &mut Vec<AblationRow>| {
        let row = AblationRow { setting, metrics };
        progress(&row);
        rows.push(row);
    };
    match axis {
        Axis::ObservationOrder => {
            for order in ObservationOrder::ALL {
                let mut c = cfg.clone();
                c.model.kind = ModelKind::Vlm;
                c.model.observation_order = order;
                let mut s = Session::with_parts(c, data.clone(), None)?;
                s.train(|_| Ok(()))?;
                push(order.name().to_string(), test_metrics(&s)?, &mut rows);
            }
        }
        Axis::CueCount => {
            for n in CUE_COUNTS {
                let mut c = cfg.clone();
                c.model.kind = ModelKind::Llm;
                c.model.cues = n;
                let cues = cues_for(&c, &data.space, n)?;
                let mut s = Session::with_parts(c, data.clone(), Some(cues))?;
                s.train(|_| Ok(()))?;
                push(n.to_string(), test_metrics(&s)?, &mut rows);
            }
        }
        Axis::FusionLambda => {
            let mut c = cfg.clone();
            c.model.kind = ModelKind::Llm;
            let cues = cues_for(&c, &data.space, c.model.cues)?;
            let mut s = Session::with_parts(c, data.clone(), Some(cues))?;
            s.train(|_| Ok(()))?;
            for lambda in FUSION_GRID {
                if let Model::Llm(m) = &mut s.model {
                    m.fusion = FusionWeights::new(1.0 - lambda, lambda)?;
                }
                push(lambda.to_string(), test_metrics(&s)?, &mut rows);
            }
        }
    }
    Ok(rows)
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Attention maps for one sample of `split`. Cue-chain models use `pair`,
/// or the sample's own composition when it is `None`.
pub fn attention_maps(session: &Session, split: Split, index: usize, pair: Option<usize>) -> Result<Vec<AttentionMap>> {
    let samples = session.data.split(split);
    let sample = *samples.get(index).ok_or(Error::Index {
        index,
        len: samples.len(),
    })?;
    match &session.model {
        Model::Vlm(m) => Ok(vlm_attention(m, &session.store, &sample.image)?.into_iter().collect()),
        Model::Llm(m) => {
            let pair = pair.unwrap_or_else(|| session.data.pair_of(sample));
            let cues = session
                .cues
                .as_ref()
                .ok_or_else(|| Error::Contract("plo-llm session without cues".into()))?;
            llm_attention(m, &session.store, &sample.image, pair, cues)
        }
    }
}

/// Writes one CSV per map into a new directory `out`; returns the file names.
pub fn dump_attention(maps: &[AttentionMap], out: &Path) -> Result<Vec<String>> {
    let dir = RunDir::create(out)?;
    let mut names = Vec::new();
    for m in maps {
        let name = format!("attn_{}.csv", file_label(&m.label));
        m.write_csv(fs::File::create(dir.join(&name))?)?;
        names.push(name);
    }
    dir.commit()?;
    Ok(names)
}

pub fn gradcheck(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    crate::selfcheck::full_suite(seed, instances)
}
