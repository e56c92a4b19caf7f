//! Generalized evaluation: a calibration bias added to unseen columns is swept
//! over every value that changes a prediction, tracing seen/unseen accuracy.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::ser::{SerializeStruct, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum World {
    Closed,
    Open,
}

impl World {
    pub fn name(self) -> &'static str {
        match self {
            World::Closed => "closed",
            World::Open => "open",
        }
    }

    pub fn parse(s: &str) -> Option<World> {
        match s {
            "closed" => Some(World::Closed),
            "open" => Some(World::Open),
            _ => None,
        }
    }
}

/// Test scores, `rows × cols` row-major. A row's origin is the kind of its
/// true column.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub names: Vec<String>,
    pub unseen: Vec<bool>,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(names: Vec<String>, unseen: Vec<bool>, scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let cols = names.len();
        if unseen.len() != cols {
            return Err(Error::Shape {
                op: "score matrix columns",
                lhs: vec![cols],
                rhs: vec![unseen.len()],
            });
        }
        if scores.len() != labels.len() * cols {
            return Err(Error::Shape {
                op: "score matrix",
                lhs: vec![labels.len(), cols],
                rhs: vec![scores.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index { index: l, len: cols });
        }
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("score matrix contains a non-finite value".into()));
        }
        Ok(ScoreMatrix {
            names,
            unseen,
            scores,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.scores[r * c..(r + 1) * c]
    }

    pub fn row_is_unseen(&self, r: usize) -> bool {
        self.unseen[self.labels[r]]
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![None; self.cols()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.cols() {
                return Err(Error::Index {
                    index: old,
                    len: self.cols(),
                });
            }
            remap[old] = Some(new);
        }
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                remap[l].ok_or_else(|| {
                    Error::Contract(format!("column '{}' holds a true label and cannot be dropped", self.names[l]))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::with_capacity(self.rows() * keep.len());
        for r in 0..self.rows() {
            let row = self.row(r);
            scores.extend(keep.iter().map(|&c| row[c]));
        }
        ScoreMatrix::new(
            keep.iter().map(|&c| self.names[c].clone()).collect(),
            keep.iter().map(|&c| self.unseen[c]).collect(),
            scores,
            labels,
        )
    }

    /// CSV with a header `label,origin,<names>`, a `column_kind` row, then one
    /// row per sample.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string(), "origin".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut kinds = vec!["column_kind".to_string(), String::new()];
        kinds.extend(self.unseen.iter().map(|&u| kind(u).to_string()));
        w.write_record(&kinds)?;
        for r in 0..self.rows() {
            let mut rec = vec![self.names[self.labels[r]].clone(), kind(self.row_is_unseen(r)).to_string()];
            rec.extend(self.row(r).iter().map(|x| format!("{x:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut records = rd.records();
        let header = records
            .next()
            .ok_or_else(|| Error::parse(source, 1, "empty score matrix"))??;
        if header.len() < 3 || &header[0] != "label" || &header[1] != "origin" {
            return Err(Error::parse(source, 1, "header must be 'label,origin,<compositions>'"));
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let kinds = records
            .next()
            .ok_or_else(|| Error::parse(source, 2, "missing column_kind row"))??;
        if kinds.len() != header.len() || &kinds[0] != "column_kind" {
            return Err(Error::parse(source, 2, "second row must be 'column_kind,,<seen|unseen>...'"));
        }
        let unseen = kinds
            .iter()
            .skip(2)
            .map(|k| parse_kind(k).ok_or_else(|| Error::parse(source, 2, format!("bad column kind '{k}'"))))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 3;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::parse(source, line, format!("expected {} fields", header.len())));
            }
            let label = names
                .iter()
                .position(|n| n == &rec[0])
                .ok_or_else(|| Error::parse(source, line, format!("label '{}' is not a column", &rec[0])))?;
            match parse_kind(&rec[1]) {
                Some(u) if u == unseen[label] => {}
                _ => return Err(Error::parse(source, line, format!("origin '{}' disagrees with the label column", &rec[1]))),
            }
            for f in rec.iter().skip(2) {
                scores.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::parse(source, line, format!("bad score '{f}'")))?,
                );
            }
            labels.push(label);
        }
        ScoreMatrix::new(names, unseen, scores, labels)
    }
}

fn kind(unseen: bool) -> &'static str {
    if unseen {
        "unseen"
    } else {
        "seen"
    }
}

fn parse_kind(s: &str) -> Option<bool> {
    match s {
        "seen" => Some(false),
        "unseen" => Some(true),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

fn bias_json(b: f64) -> serde_json::Value {
    if b.is_finite() {
        serde_json::json!(b)
    } else if b > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

impl Serialize for CurvePoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("CurvePoint", 3)?;
        st.serialize_field("bias", &bias_json(self.bias))?;
        st.serialize_field("seen", &self.seen)?;
        st.serialize_field("unseen", &self.unseen)?;
        st.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
    /// Points in ascending bias order.
    pub curve: Vec<CurvePoint>,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Area under the step function that holds each point's seen accuracy until
/// the next point's unseen accuracy.
pub fn staircase_area(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].unseen - w[0].unseen) * w[0].seen)
        .sum()
}

impl EvalReport {
    pub fn from_curve(curve: Vec<CurvePoint>) -> Self {
        let best_seen = curve.iter().map(|p| p.seen).fold(0.0, f64::max);
        let best_unseen = curve.iter().map(|p| p.unseen).fold(0.0, f64::max);
        let best_hm = curve.iter().map(|p| harmonic_mean(p.seen, p.unseen)).fold(0.0, f64::max);
        let auc = staircase_area(&curve);
        EvalReport {
            best_seen,
            best_unseen,
            best_hm,
            auc,
            curve,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str = "S,U,HM,AUC";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.best_seen, self.best_unseen, self.best_hm, self.auc)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_line()))?;
        Ok(())
    }
}

/// Highest score among the columns of one kind; ties keep the lower column.
fn best_of(row: &[f64], unseen: &[bool], want_unseen: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (c, (&x, &u)) in row.iter().zip(unseen).enumerate() {
        if u == want_unseen && best.is_none_or(|(_, b)| x > b) {
            best = Some((c, x));
        }
    }
    best
}

/// How one row's prediction depends on the bias `b`.
struct RowSwitch {
    /// The row predicts its best unseen column when `b > margin`, or when
    /// `b == margin` and `tie_unseen`.
    margin: f64,
    tie_unseen: bool,
    correct_if_seen: bool,
    correct_if_unseen: bool,
}

pub fn sweep_and_score(m: &ScoreMatrix) -> Result<EvalReport> {
    if m.rows() == 0 {
        return Err(Error::Protocol("score matrix has no rows".into()));
    }
    if !m.unseen.iter().any(|&u| u) || m.unseen.iter().all(|&u| u) {
        return Err(Error::Protocol("need at least one seen and one unseen column".into()));
    }
    let n_unseen = (0..m.rows()).filter(|&r| m.row_is_unseen(r)).count();
    let n_seen = m.rows() - n_unseen;
    if n_seen == 0 || n_unseen == 0 {
        return Err(Error::Protocol(format!(
            "need seen and unseen samples, got {n_seen} seen and {n_unseen} unseen"
        )));
    }
    let mut rows: Vec<RowSwitch> = (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let (is, ms) = best_of(row, &m.unseen, false).expect("a seen column exists");
            let (iu, mu) = best_of(row, &m.unseen, true).expect("an unseen column exists");
            let label = m.labels[r];
            RowSwitch {
                margin: ms - mu,
                tie_unseen: iu < is,
                correct_if_seen: label == is,
                correct_if_unseen: label == iu,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.margin.total_cmp(&b.margin));

    // At b = -inf every row predicts seen.
    let mut seen_ok = rows.iter().filter(|r| r.correct_if_seen).count();
    let mut unseen_ok = 0usize;
    let point = |bias: f64, s: usize, u: usize| CurvePoint {
        bias,
        seen: s as f64 / n_seen as f64,
        unseen: u as f64 / n_unseen as f64,
    };
    let mut curve = vec![point(f64::NEG_INFINITY, seen_ok, unseen_ok)];
    let mut i = 0;
    while i < rows.len() {
        let b = rows[i].margin;
        let mut j = i;
        while j < rows.len() && rows[j].margin == b {
            j += 1;
        }
        let group = &rows[i..j];
        // At the critical value only tied rows that prefer the unseen column flip.
        for pass in [true, false] {
            for r in group.iter().filter(|r| r.tie_unseen == pass) {
                seen_ok -= r.correct_if_seen as usize;
                unseen_ok += r.correct_if_unseen as usize;
            }
            if pass {
                curve.push(point(b, seen_ok, unseen_ok));
            }
        }
        let next = rows.get(j).map_or(f64::INFINITY, |r| r.margin);
        let mid = if next.is_finite() {
            b + (next - b) / 2.0
        } else {
            f64::INFINITY
        };
        curve.push(point(mid, seen_ok, unseen_ok));
        i = j;
    }
    if curve.last().map(|p| p.bias) != Some(f64::INFINITY) {
        curve.push(point(f64::INFINITY, seen_ok, unseen_ok));
    }
    Ok(EvalReport::from_curve(curve))
}

/// Open-world candidate pruning.
#[derive(Clone, Debug, PartialEq)]
pub enum Feasibility {
    /// Explicit list of feasible pairs, one `state object` per line.
    MaskFile(std::path::PathBuf),
    /// Keep pairs whose similarity score reaches the threshold.
    Similarity { threshold: f64 },
}

pub fn read_mask(path: &Path, space: &CompositionSpace) -> Result<Vec<usize>> {
    if !path.exists() {
        return Err(Error::Missing {
            what: "feasibility mask",
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path)?;
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            [s, o] => out.push(
                space
                    .find_pair(s, o)
                    .ok_or_else(|| Error::parse(&source, i + 1, format!("unknown composition '{s} {o}'")))?,
            ),
            _ => return Err(Error::parse(&source, i + 1, "expected 'state object'")),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per pair, the largest cosine between its object and any object seen with
/// its state, or between its state and any state seen with its object.
pub fn similarity_feasibility(space: &CompositionSpace, states: &[Vec<f64>], objects: &[Vec<f64>]) -> Vec<f64> {
    (0..space.num_pairs())
        .map(|p| {
            let (s, o) = space.pair(p);
            space
                .seen()
                .iter()
                .map(|&q| space.pair(q))
                .filter_map(|(qs, qo)| match (qs == s, qo == o) {
                    (true, _) => Some(cosine(&objects[o], &objects[qo])),
                    (false, true) => Some(cosine(&states[s], &states[qs])),
                    _ => None,
                })
                .fold(-1.0, f64::max)
        })
        .collect()
}

/// Pair indices with `score >= threshold`.
pub fn feasible_pairs(scores: &[f64], threshold: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&p| scores[p] >= threshold).collect()
}

/// Open-world columns: seen pairs always, non-seen pairs only if feasible.
/// True test pairs removed by the filter are put back with a warning.
pub fn open_world_columns(
    space: &CompositionSpace,
    feasible: &[usize],
    required: &[usize],
) -> (Vec<usize>, Vec<String>) {
    let mut keep = vec![false; space.num_pairs()];
    for &p in space.seen().iter().chain(feasible) {
        keep[p] = true;
    }
    let mut warnings = Vec::new();
    for &p in required {
        if !keep[p] {
            warnings.push(format!(
                "feasibility filter removed ground-truth pair '{}'; keeping it",
                space.pair_name(p)
            ));
            keep[p] = true;
        }
    }
    ((0..keep.len()).filter(|&p| keep[p]).collect(), warnings)
}

pub fn closed_world_columns(space: &CompositionSpace, split: Split) -> Vec<usize> {
    space.closed_world_columns(split)
}

/// Fraction of rows whose true column wins among the kept unseen columns.
/// Rows whose true column is not kept count as wrong.
fn unseen_accuracy(scores: &[f64], labels: &[usize], num_pairs: usize, keep_unseen: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = &scores[r * num_pairs..(r + 1) * num_pairs];
            let best = (0..num_pairs)
                .filter(|&c| keep_unseen[c])
                .fold(None::<usize>, |b, c| match b {
                    Some(b) if row[b] >= row[c] => Some(b),
                    _ => Some(c),
                });
            best == Some(l)
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Picks the similarity threshold that maximizes validation unseen accuracy.
///
/// `scores` are open-world model scores (`rows × num_pairs`) for validation
/// samples of unseen pairs, `labels` their true pair indices. Candidates are
/// `-1` and every distinct feasibility value of a non-seen pair; ties go to
/// the lowest threshold.
pub fn calibrate_threshold(space: &CompositionSpace, feasibility: &[f64], scores: &[f64], labels: &[usize]) -> f64 {
    let n = space.num_pairs();
    let mut candidates: Vec<f64> = (0..n).filter(|&p| !space.is_seen(p)).map(|p| feasibility[p]).collect();
    candidates.push(-1.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, -1.0);
    for &t in &candidates {
        let keep: Vec<bool> = (0..n).map(|p| !space.is_seen(p) && feasibility[p] >= t).collect();
        let acc = unseen_accuracy(scores, labels, n, &keep);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}
