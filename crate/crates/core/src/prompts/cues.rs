//! Observation-cue fixtures.
//!
//! Grammar (UTF-8, blank-line separated sections):
//!
//! ```text
//! ## {state} {object}
//! - a photo of ...
//! - a photo of {state} {object}
//! ```
//!
//! Sections that fail validation, pairs without a section, and malformed
//! sections fall back to repeated template cues; every replacement is logged
//! in a repair report.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::space::CompositionSpace;

const PREFIX: &str = "a photo of";

pub fn terminal_cue(state: &str, object: &str) -> String {
    format!("{PREFIX} {state} {object}")
}

/// `n` copies of the template cue.
pub fn fallback_cues(state: &str, object: &str, n: usize) -> Vec<String> {
    vec![terminal_cue(state, object); n]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CueRejection {
    Count { got: usize, expected: usize },
    /// 1-based cue line lacking the required prefix.
    Prefix { line: usize },
    Terminal,
}

impl fmt::Display for CueRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CueRejection::Count { got, expected } => write!(f, "count: {got} cues, expected {expected}"),
            CueRejection::Prefix { line } => write!(f, "prefix: cue {line} does not start with \"{PREFIX}\""),
            CueRejection::Terminal => write!(f, "terminal: last cue is not the template"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CueVerdict {
    Accepted,
    Rejected(CueRejection),
}

pub fn validate_cues<S: AsRef<str>>(lines: &[S], state: &str, object: &str, n: usize) -> CueVerdict {
    if lines.len() != n {
        return CueVerdict::Rejected(CueRejection::Count {
            got: lines.len(),
            expected: n,
        });
    }
    if let Some(i) = lines.iter().position(|l| !l.as_ref().starts_with(PREFIX)) {
        return CueVerdict::Rejected(CueRejection::Prefix { line: i + 1 });
    }
    match lines.last() {
        Some(l) if l.as_ref() == terminal_cue(state, object) => CueVerdict::Accepted,
        _ => CueVerdict::Rejected(CueRejection::Terminal),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueSequence {
    pub pair: usize,
    pub cues: Vec<String>,
}

/// Cue sequences for every pair of a space, indexed by pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueFixtures {
    pub n: usize,
    pub sequences: Vec<CueSequence>,
    /// Repair report lines, in file order then pair order.
    pub report: Vec<String>,
}

impl CueFixtures {
    /// Parses fixture text. Never fails: problems end up in the report.
    pub fn parse(text: &str, space: &CompositionSpace, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("cue count must be at least 1".into()));
        }
        let mut found: Vec<Option<Vec<String>>> = vec![None; space.num_pairs()];
        let mut report = Vec::new();
        let mut rejected: Vec<Option<String>> = vec![None; space.num_pairs()];

        struct Section {
            pair: Option<usize>,
            header_line: usize,
            cues: Vec<String>,
            malformed: Option<usize>,
        }
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix("## ") {
                let name = h.trim();
                let pair = (0..space.num_pairs()).find(|&p| space.pair_name(p) == name);
                if pair.is_none() {
                    report.push(format!("SKIPPED line {line_no}: unknown composition \"{name}\""));
                }
                sections.push(Section {
                    pair,
                    header_line: line_no,
                    cues: Vec::new(),
                    malformed: None,
                });
            } else if let Some(cue) = line.strip_prefix("- ") {
                match sections.last_mut() {
                    Some(sec) => sec.cues.push(cue.trim().to_string()),
                    None => report.push(format!("SKIPPED line {line_no}: cue outside any section")),
                }
            } else {
                match sections.last_mut() {
                    Some(sec) if sec.malformed.is_none() => sec.malformed = Some(line_no),
                    Some(_) => {}
                    None => report.push(format!("SKIPPED line {line_no}: text outside any section")),
                }
            }
        }

        for sec in sections {
            let Some(p) = sec.pair else { continue };
            if found[p].is_some() || rejected[p].is_some() {
                report.push(format!(
                    "SKIPPED line {}: duplicate section for {}",
                    sec.header_line,
                    space.pair_name(p)
                ));
                continue;
            }
            let (s, o) = space.pair(p);
            if let Some(l) = sec.malformed {
                rejected[p] = Some(format!("malformed line {l}"));
                continue;
            }
            match validate_cues(&sec.cues, &space.states[s], &space.objects[o], n) {
                CueVerdict::Accepted => found[p] = Some(sec.cues),
                CueVerdict::Rejected(r) => rejected[p] = Some(r.to_string()),
            }
        }

        let mut sequences = Vec::with_capacity(space.num_pairs());
        for p in 0..space.num_pairs() {
            let (s, o) = space.pair(p);
            let cues = match found[p].take() {
                Some(c) => c,
                None => {
                    let reason = rejected[p].take().unwrap_or_else(|| "missing".to_string());
                    report.push(format!(
                        "REPLACED {} {}: {reason}",
                        space.states[s], space.objects[o]
                    ));
                    fallback_cues(&space.states[s], &space.objects[o], n)
                }
            };
            sequences.push(CueSequence { pair: p, cues });
        }
        Ok(CueFixtures { n, sequences, report })
    }

    pub fn load(path: &Path, space: &CompositionSpace, n: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "cue fixture file",
                path: path.to_path_buf(),
            });
        }
        Self::parse(&fs::read_to_string(path)?, space, n)
    }

    /// Template-only fixtures for every pair.
    pub fn fallback(space: &CompositionSpace, n: usize) -> Self {
        let sequences = (0..space.num_pairs())
            .map(|p| {
                let (s, o) = space.pair(p);
                CueSequence {
                    pair: p,
                    cues: fallback_cues(&space.states[s], &space.objects[o], n),
                }
            })
            .collect();
        CueFixtures {
            n,
            sequences,
            report: Vec::new(),
        }
    }

    pub fn cues(&self, pair: usize) -> &[String] {
        &self.sequences[pair].cues
    }

    /// Serializes in fixture grammar.
    pub fn to_text(&self, space: &CompositionSpace) -> String {
        let mut out = String::new();
        for (i, seq) in self.sequences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("## {}\n", space.pair_name(seq.pair)));
            for c in &seq.cues {
                out.push_str(&format!("- {c}\n"));
            }
        }
        out
    }

    pub fn report_text(&self) -> String {
        self.report.iter().map(|l| format!("{l}\n")).collect()
    }

    /// Reorders the first `n - 1` cues of every sequence by `perm`,
    /// keeping the terminal cue in place.
    pub fn permute_leading(&self, perm: &[usize]) -> Result<Self> {
        let k = self.n.saturating_sub(1);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..k).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "cue order {perm:?} is not a permutation of the first {k} cues"
            )));
        }
        let mut out = self.clone();
        for seq in &mut out.sequences {
            let lead: Vec<String> = perm.iter().map(|&i| seq.cues[i].clone()).collect();
            seq.cues.splice(0..k, lead);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> CompositionSpace {
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        CompositionSpace::new(names(&["mashed", "ripe"]), names(&["banana", "potato"]), vec![0, 1, 2], vec![], vec![3])
            .unwrap()
    }

    const GOOD: &str = "## mashed banana
- a photo of a soft yellow paste
- a photo of fruit crushed into a pulp
- a photo of a smooth mixture made from bananas
- a photo of mashed banana
";

    #[test]
    fn conforming_entry_is_kept_verbatim() {
        let fx = CueFixtures::parse(GOOD, &space(), 4).unwrap();
        assert_eq!(fx.cues(0)[0], "a photo of a soft yellow paste");
        assert_eq!(fx.cues(0)[3], "a photo of mashed banana");
        // the three other pairs are missing
        assert_eq!(fx.report.len(), 3);
        assert!(fx.report.iter().all(|l| l.starts_with("REPLACED") && l.ends_with("missing")));
    }

    #[test]
    fn short_entry_is_replaced() {
        let text = "## ripe potato\n- a photo of a tuber\n- a photo of ripe potato\n";
        let fx = CueFixtures::parse(text, &space(), 4).unwrap();
        assert_eq!(fx.cues(3), fallback_cues("ripe", "potato", 4).as_slice());
        assert!(fx.report.contains(&"REPLACED ripe potato: count: 2 cues, expected 4".to_string()));
    }

    #[test]
    fn validation_reasons() {
        let ok = fallback_cues("old", "car", 4);
        assert_eq!(validate_cues(&ok, "old", "car", 4), CueVerdict::Accepted);
        let mut bad = ok.clone();
        bad[1] = "an image of wheels".into();
        assert_eq!(
            validate_cues(&bad, "old", "car", 4),
            CueVerdict::Rejected(CueRejection::Prefix { line: 2 })
        );
        let mut wrong_end = ok.clone();
        wrong_end[3] = "a photo of new car".into();
        assert_eq!(
            validate_cues(&wrong_end, "old", "car", 4),
            CueVerdict::Rejected(CueRejection::Terminal)
        );
        assert_eq!(fallback_cues("old", "car", 1), vec!["a photo of old car".to_string()]);
    }

    #[test]
    fn malformed_sections_are_reported_not_fatal() {
        let text = "stray words\n## mashed potato\n- a photo of x\nnot a cue\n## purple banana\n- a photo of purple banana\n";
        let fx = CueFixtures::parse(text, &space(), 1).unwrap();
        assert!(fx.report[0].starts_with("SKIPPED line 1"));
        assert!(fx.report.iter().any(|l| l.starts_with("SKIPPED line 5")));
        assert!(fx.report.contains(&"REPLACED mashed potato: malformed line 4".to_string()));
        for p in 0..4 {
            assert_eq!(fx.cues(p).len(), 1);
        }
    }

    #[test]
    fn text_round_trip_and_permutation() {
        let sp = space();
        let fx = CueFixtures::parse(GOOD, &sp, 4).unwrap();
        let again = CueFixtures::parse(&fx.to_text(&sp), &sp, 4).unwrap();
        assert_eq!(again.sequences, fx.sequences);
        assert!(again.report.is_empty());
        let rev = fx.permute_leading(&[2, 1, 0]).unwrap();
        assert_eq!(rev.cues(0)[0], "a photo of a smooth mixture made from bananas");
        assert_eq!(rev.cues(0)[3], "a photo of mashed banana");
        assert!(fx.permute_leading(&[0, 0, 1]).is_err());
    }
}
