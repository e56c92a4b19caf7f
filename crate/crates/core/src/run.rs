//! Training and evaluation sessions plus the run-directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FeasibilityMode, ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    calibrate_threshold, feasible_pairs, open_world_columns, read_mask, similarity_feasibility, sweep_and_score,
    EvalReport, ScoreMatrix, World,
};
use crate::image::Image;
use crate::llm::PloLlm;
use crate::model::Backbone;
use crate::prompts::{CueFixtures, Vocab};
use crate::space::Split;
use crate::synth::{derive_seed, make_splits, read_dataset, Dataset, Sample};
use crate::tensor::{restore_checkpoint, write_checkpoint, Adam, ParamStore, Tape, Var};
use crate::vlm::{FirstObservation, PloVlm};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const BRANCH_FILE: &str = "branch_stats.csv";
pub const REPAIR_FILE: &str = "cue_repairs.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

const INIT_STREAM: u64 = 101;
const SHUFFLE_STREAM: u64 = 202;

#[derive(Clone, Debug)]
pub enum Model {
    Vlm(PloVlm),
    Llm(PloLlm),
}

impl Model {
    pub fn backbone(&self) -> &Backbone {
        match self {
            Model::Vlm(m) => &m.backbone,
            Model::Llm(m) => &m.backbone,
        }
    }
}

/// Loss of one batch with named components.
#[derive(Clone, Debug, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub state_first: usize,
    pub object_first: usize,
}

/// Ranking scores for a batch: `rows × candidates`, plus first observations
/// when the model makes them.
#[derive(Clone, Debug)]
pub struct BatchScores {
    pub scores: Vec<f64>,
    pub choices: Vec<Option<FirstObservation>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "S")]
    pub seen: f64,
    #[serde(rename = "U")]
    pub unseen: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Metrics {
            seen: r.best_seen,
            unseen: r.best_unseen,
            hm: r.best_hm,
            auc: r.auc,
        }
    }
}

/// One `metrics.jsonl` line. Epoch 0 describes the initialization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub first_batch_loss: Option<f64>,
    pub components: BTreeMap<String, f64>,
    pub state_first: usize,
    pub object_first: usize,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct Training {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub matrix: ScoreMatrix,
    pub warnings: Vec<String>,
    /// Per sample row, the first observation made (two-step models only).
    pub choices: Vec<Option<FirstObservation>>,
    pub threshold: Option<f64>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => read_dataset(p),
        None => make_splits(&cfg.synth_config()),
    }
}

pub fn load_cues(cfg: &RunConfig, data: &Dataset) -> Result<Option<CueFixtures>> {
    if cfg.model.kind != ModelKind::Llm {
        return Ok(None);
    }
    match &cfg.data.cues {
        Some(p) => CueFixtures::load(p, &data.space, cfg.model.cues).map(Some),
        None => Err(Error::Config(
            "plo-llm needs observation cues: set data.cues to a fixture file (`plo gen-cues` writes a template)".into(),
        )),
    }
}

pub fn build_vocab(data: &Dataset, cues: Option<&CueFixtures>) -> Vocab {
    let sp = &data.space;
    let mut texts: Vec<&str> = sp.states.iter().chain(&sp.objects).map(String::as_str).collect();
    if let Some(c) = cues {
        texts.extend(c.sequences.iter().flat_map(|s| s.cues.iter().map(String::as_str)));
    }
    Vocab::build(texts)
}

pub struct Session {
    pub config: RunConfig,
    pub data: Dataset,
    pub cues: Option<CueFixtures>,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = load_data(&config)?;
        Self::with_data(config, data)
    }

    /// Builds a freshly initialized model over an already loaded dataset.
    pub fn with_data(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let cues = load_cues(&config, &data)?;
        Self::with_parts(config, data, cues)
    }

    pub fn with_parts(config: RunConfig, data: Dataset, cues: Option<CueFixtures>) -> Result<Self> {
        config.validate()?;
        if let Some(c) = &cues {
            if c.n != config.model.cues {
                return Err(Error::Config(format!(
                    "cue fixtures have {} cues per composition, model.cues is {}",
                    c.n, config.model.cues
                )));
            }
        }
        let vocab = build_vocab(&data, cues.as_ref());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT_STREAM]));
        let sp = &data.space;
        let backbone = Backbone::new(
            &mut store,
            &config.model_config(),
            sp.num_states(),
            sp.num_objects(),
            vocab,
            &mut rng,
        )?;
        let model = match config.model.kind {
            ModelKind::Vlm => {
                let mut m = PloVlm::new(backbone, config.model.observation_order);
                m.weights = config.vlm_weights();
                Model::Vlm(m)
            }
            ModelKind::Llm => {
                let mut m = PloLlm::new(backbone, config.model.cues)?;
                m.weights = config.llm_weights();
                m.fusion = config.fusion();
                Model::Llm(m)
            }
        };
        Ok(Session {
            config,
            data,
            cues,
            model,
            store,
        })
    }

    /// Restores a session from a run directory.
    pub fn open(dir: &Path) -> Result<Self> {
        let (config, _) = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let mut s = Session::new(config)?;
        s.load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        Ok(s)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        crate::tensor::load_checkpoint(&mut self.store, path)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&self.store, &mut buf)?;
        Ok(buf)
    }

    pub fn backbone(&self) -> &Backbone {
        self.model.backbone()
    }

    fn cues(&self) -> Result<&CueFixtures> {
        self.cues
            .as_ref()
            .ok_or_else(|| Error::Contract("plo-llm session without cues".into()))
    }

    /// Builds the loss of one batch on `tape`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_, f32>,
        images: &[&Image],
        labels: &[(usize, usize)],
        candidates: &[usize],
    ) -> Result<(Var, BatchLoss)> {
        let mut out = BatchLoss::default();
        let var = match &self.model {
            Model::Vlm(m) => {
                let (v, l) = m.loss(tape, images, labels, candidates)?;
                out.total = l.total;
                for (k, x) in [("obs", l.obs), ("state", l.state), ("object", l.object), ("comp", l.comp)] {
                    out.components.insert(k.to_string(), x);
                }
                out.state_first = l.state_first;
                out.object_first = l.object_first;
                v
            }
            Model::Llm(m) => {
                let (v, l) = m.loss(tape, images, labels, candidates, self.cues()?)?;
                out.total = l.total;
                out.components.insert("step".into(), l.step);
                out.components.insert("comp".into(), l.comp);
                for (i, x) in l.steps.iter().enumerate() {
                    out.components.insert(format!("step{}", i + 1), *x);
                }
                v
            }
        };
        Ok((var, out))
    }

    /// Ranking scores of `images` against `candidates`.
    pub fn score_batch(&self, images: &[&Image], candidates: &[usize]) -> Result<BatchScores> {
        Ok(match &self.model {
            Model::Vlm(m) => {
                let s = m.score(&self.store, images, candidates)?;
                BatchScores {
                    scores: s.probs,
                    choices: s.choices,
                }
            }
            Model::Llm(m) => {
                let s = m.score(&self.store, images, candidates, self.cues()?)?;
                BatchScores {
                    scores: s.fused,
                    choices: vec![None; images.len()],
                }
            }
        })
    }

    fn eval_batch_size(&self) -> usize {
        self.config.train.batch_size.max(1)
    }

    /// Scores every sample against `candidates`, in chunks.
    pub fn score_samples(&self, samples: &[&Sample], candidates: &[usize]) -> Result<BatchScores> {
        let mut scores = Vec::with_capacity(samples.len() * candidates.len());
        let mut choices = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.eval_batch_size()) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let b = self.score_batch(&images, candidates)?;
            scores.extend(b.scores);
            choices.extend(b.choices);
        }
        Ok(BatchScores { scores, choices })
    }

    /// Score matrix over `columns` (pair indices); a column is unseen when
    /// its pair is not a training pair.
    pub fn score_matrix(&self, samples: &[&Sample], columns: &[usize]) -> Result<(ScoreMatrix, Vec<Option<FirstObservation>>)> {
        let sp = &self.data.space;
        let labels = samples
            .iter()
            .map(|s| {
                let p = self.data.pair_of(s);
                columns.iter().position(|&c| c == p).ok_or_else(|| {
                    Error::Contract(format!("sample pair '{}' is not among the columns", sp.pair_name(p)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let b = self.score_samples(samples, columns)?;
        let m = ScoreMatrix::new(
            columns.iter().map(|&c| sp.pair_name(c)).collect(),
            columns.iter().map(|&c| !sp.is_seen(c)).collect(),
            b.scores,
            labels,
        )?;
        Ok((m, b.choices))
    }

    /// Primitive prompt vectors `(states, objects)` in the shared space.
    pub fn primitive_vectors(&self) -> Result<(Vectors, Vectors)> {
        let bb = self.backbone();
        let mut tape = Tape::new(&self.store);
        let enc = bb.encode_prompts(&mut tape, &bb.primitive_kinds())?;
        let t = tape.value(enc.cls);
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row_slice(r).iter().map(|&x| x as f64).collect()).collect();
        let (s, o) = rows.split_at(bb.num_states);
        Ok((s.to_vec(), o.to_vec()))
    }

    fn open_world_feasible(&self) -> Result<(Vec<usize>, Option<f64>)> {
        let sp = &self.data.space;
        match self.config.eval.feasibility {
            FeasibilityMode::Mask => {
                let path = self
                    .config
                    .eval
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Config("eval.feasibility = \"mask\" needs eval.mask".into()))?;
                Ok((read_mask(path, sp)?, None))
            }
            FeasibilityMode::Similarity => {
                let (st, ob) = self.primitive_vectors()?;
                let f = similarity_feasibility(sp, &st, &ob);
                let threshold = match self.config.eval.threshold {
                    Some(t) => t,
                    None => {
                        let val: Vec<&Sample> = self
                            .data
                            .split(Split::Val)
                            .into_iter()
                            .filter(|s| !sp.is_seen(self.data.pair_of(s)))
                            .collect();
                        if val.is_empty() {
                            -1.0
                        } else {
                            let all: Vec<usize> = (0..sp.num_pairs()).collect();
                            let scores = self.score_samples(&val, &all)?.scores;
                            let labels: Vec<usize> = val.iter().map(|s| self.data.pair_of(s)).collect();
                            calibrate_threshold(sp, &f, &scores, &labels)
                        }
                    }
                };
                Ok((feasible_pairs(&f, threshold), Some(threshold)))
            }
        }
    }

    pub fn evaluate(&self, split: Split, world: World) -> Result<Evaluation> {
        let samples = self.data.split(split);
        let sp = &self.data.space;
        let (columns, warnings, threshold) = match world {
            World::Closed => (sp.closed_world_columns(split), Vec::new(), None),
            World::Open => {
                let (feasible, threshold) = self.open_world_feasible()?;
                let required: Vec<usize> = samples.iter().map(|s| self.data.pair_of(s)).collect();
                let (cols, warnings) = open_world_columns(sp, &feasible, &required);
                (cols, warnings, threshold)
            }
        };
        let (matrix, choices) = self.score_matrix(&samples, &columns)?;
        let report = sweep_and_score(&matrix)?;
        Ok(Evaluation {
            report,
            matrix,
            warnings,
            choices,
            threshold,
        })
    }

    fn validation_metrics(&self) -> Result<Option<Metrics>> {
        let val = self.data.split(Split::Val);
        let has_unseen = val.iter().any(|s| !self.data.space.is_seen(self.data.pair_of(s)));
        let has_seen = val.iter().any(|s| self.data.space.is_seen(self.data.pair_of(s)));
        if !(has_seen && has_unseen) {
            return Ok(None);
        }
        Ok(Some(Metrics::from(&self.evaluate(Split::Val, World::Closed)?.report)))
    }

    fn train_set(&self) -> Result<(Vec<&Sample>, Vec<usize>)> {
        let train = self.data.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Validation("dataset has no training samples".into()));
        }
        Ok((train, self.data.space.seen().to_vec()))
    }

    /// Mean loss over the training set without updating anything.
    pub fn train_loss(&self) -> Result<BatchLoss> {
        let (train, candidates) = self.train_set()?;
        let mut acc = Accumulator::default();
        for chunk in train.chunks(self.config.train.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let labels: Vec<(usize, usize)> = chunk.iter().map(|s| (s.state, s.object)).collect();
            let mut tape = Tape::new(&self.store);
            let (_, l) = self.batch_loss(&mut tape, &images, &labels, &candidates)?;
            acc.add(&l, chunk.len());
        }
        Ok(acc.mean())
    }

    /// One optimizer step on the samples at `batch` (indices into
    /// `data.samples`); returns its loss.
    pub fn train_step(&mut self, adam: &mut Adam<f32>, batch: &[usize], candidates: &[usize]) -> Result<BatchLoss> {
        let (grads, loss) = {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &self.data.samples[i]).collect();
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let labels: Vec<(usize, usize)> = samples.iter().map(|s| (s.state, s.object)).collect();
            let mut tape = Tape::new(&self.store);
            let (var, loss) = self.batch_loss(&mut tape, &images, &labels, candidates)?;
            if !loss.total.is_finite() {
                return Err(Error::Degenerate(format!("training loss became {}", loss.total)));
            }
            (tape.backward(var)?, loss)
        };
        self.store.zero_grad();
        grads.accumulate_into(&mut self.store)?;
        adam.step(&mut self.store)?;
        Ok(loss)
    }

    /// Runs the configured epochs, keeping the checkpoint with the best
    /// validation AUC (earliest on ties). The store holds that checkpoint on
    /// return. `observe` sees each record as it is produced.
    pub fn train(&mut self, mut observe: impl FnMut(&EpochRecord) -> Result<()>) -> Result<Training> {
        let mut adam = Adam::new(self.config.adam_config());
        let init = self.train_loss()?;
        let mut records = Vec::new();
        let first = EpochRecord {
            epoch: 0,
            loss: init.total,
            first_batch_loss: None,
            components: init.components,
            state_first: init.state_first,
            object_first: init.object_first,
            val: self.validation_metrics()?,
        };
        observe(&first)?;
        let mut best = (first.val.map_or(f64::NEG_INFINITY, |m| m.auc), 0usize, self.checkpoint_bytes()?);
        records.push(first);

        let batch_size = self.config.train.batch_size;
        let train: Vec<usize> = (0..self.data.samples.len())
            .filter(|&i| self.data.samples[i].split == Split::Train)
            .collect();
        let candidates = self.data.space.seen().to_vec();
        for epoch in 1..=self.config.train.epochs {
            let mut order = train.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, SHUFFLE_STREAM, epoch as u64]));
            order.shuffle(&mut rng);
            let mut acc = Accumulator::default();
            let mut first_batch = None;
            for idx in order.chunks(batch_size) {
                let l = self.train_step(&mut adam, idx, &candidates)?;
                first_batch.get_or_insert(l.total);
                acc.add(&l, idx.len());
            }
            let mean = acc.mean();
            let rec = EpochRecord {
                epoch,
                loss: mean.total,
                first_batch_loss: first_batch,
                components: mean.components,
                state_first: mean.state_first,
                object_first: mean.object_first,
                val: self.validation_metrics()?,
            };
            observe(&rec)?;
            if let Some(m) = rec.val {
                if m.auc > best.0 {
                    best = (m.auc, epoch, self.checkpoint_bytes()?);
                }
            } else if best.0 == f64::NEG_INFINITY {
                // Without validation metrics the latest epoch is kept.
                best = (f64::NEG_INFINITY, epoch, self.checkpoint_bytes()?);
            }
            records.push(rec);
        }
        restore_checkpoint(&mut self.store, &best.2)?;
        Ok(Training {
            records,
            best_epoch: best.1,
            best_checkpoint: best.2,
        })
    }
}

#[derive(Default)]
struct Accumulator {
    weight: usize,
    total: f64,
    components: BTreeMap<String, f64>,
    state_first: usize,
    object_first: usize,
}

impl Accumulator {
    fn add(&mut self, l: &BatchLoss, n: usize) {
        self.weight += n;
        self.total += l.total * n as f64;
        for (k, v) in &l.components {
            *self.components.entry(k.clone()).or_default() += v * n as f64;
        }
        self.state_first += l.state_first;
        self.object_first += l.object_first;
    }

    fn mean(self) -> BatchLoss {
        let w = self.weight.max(1) as f64;
        BatchLoss {
            total: self.total / w,
            components: self.components.into_iter().map(|(k, v)| (k, v / w)).collect(),
            state_first: self.state_first,
            object_first: self.object_first,
        }
    }
}

/// Per true pair, how often each primitive was observed first.
pub fn branch_stats_csv(data: &Dataset, samples: &[&Sample], choices: &[Option<FirstObservation>]) -> String {
    let sp = &data.space;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, c) in samples.iter().zip(choices) {
        let e = counts.entry(data.pair_of(s)).or_default();
        match c {
            Some(FirstObservation::StateFirst(_)) => e.0 += 1,
            Some(FirstObservation::ObjectFirst(_)) => e.1 += 1,
            None => {}
        }
    }
    let mut out = String::from("pair,seen,state_first,object_first,state_first_fraction\n");
    for (p, (sf, of)) in counts {
        let total = sf + of;
        let frac = if total > 0 { sf as f64 / total as f64 } else { 0.0 };
        out.push_str(&format!(
            "{},{},{sf},{of},{frac}\n",
            sp.pair_name(p),
            if sp.is_seen(p) { "seen" } else { "unseen" }
        ));
    }
    out
}

/// A directory built under a temporary name and renamed into place on
/// [`RunDir::commit`]. Dropping it uncommitted removes the temporary tree.
pub struct RunDir {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            return Err(Error::Config(format!("output {} already exists", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no file name", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(RunDir {
            tmp,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.tmp, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(REPORT_JSON), report.to_json()? + "\n")?;
    report.write_csv(&dir.join(REPORT_CSV))
}

/// One embedding per row.
pub type Vectors = Vec<Vec<f64>>;

/// Summary of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub dir: PathBuf,
    pub training: Training,
    pub test: Evaluation,
}

/// Trains a model and writes a complete run directory. `config_text` is
/// copied verbatim as the config snapshot.
pub fn train_run(config: RunConfig, config_text: &str, out: &Path) -> Result<TrainResult> {
    let run = RunDir::create(out)?;
    let mut session = Session::new(config)?;
    fs::write(run.join(CONFIG_FILE), config_text)?;
    fs::write(run.join(VOCAB_FILE), session.backbone().vocab.to_text())?;
    if let Some(c) = &session.cues {
        fs::write(run.join(REPAIR_FILE), c.report_text())?;
    }
    let mut metrics = String::new();
    let training = session.train(|rec| {
        metrics.push_str(&serde_json::to_string(rec)?);
        metrics.push('\n');
        Ok(())
    })?;
    fs::write(run.join(METRICS_FILE), &metrics)?;
    fs::write(run.join(CHECKPOINT_FILE), &training.best_checkpoint)?;
    let world = session.config.eval.world.into();
    let test = session.evaluate(Split::Test, world)?;
    write_report(run.path(), &test.report)?;
    let mut scores = Vec::new();
    test.matrix.write_csv(&mut scores)?;
    fs::write(run.join(SCORES_CSV), scores)?;
    if matches!(session.model, Model::Vlm(_)) {
        let samples = session.data.split(Split::Test);
        fs::write(run.join(BRANCH_FILE), branch_stats_csv(&session.data, &samples, &test.choices))?;
    }
    let dir = run.commit()?;
    Ok(TrainResult { dir, training, test })
}
