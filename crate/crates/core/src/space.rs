//! State × object composition space with seen / unseen splits.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Which unseen subset a query refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Pair index `state * |O| + object`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositionSpace {
    pub states: Vec<String>,
    pub objects: Vec<String>,
    seen: Vec<usize>,
    val_unseen: Vec<usize>,
    test_unseen: Vec<usize>,
}

impl CompositionSpace {
    /// Builds and validates a space. Pair lists are sorted and deduplicated.
    pub fn new(
        states: Vec<String>,
        objects: Vec<String>,
        mut seen: Vec<usize>,
        mut val_unseen: Vec<usize>,
        mut test_unseen: Vec<usize>,
    ) -> Result<Self> {
        for v in [&mut seen, &mut val_unseen, &mut test_unseen] {
            v.sort_unstable();
            v.dedup();
        }
        let space = CompositionSpace {
            states,
            objects,
            seen,
            val_unseen,
            test_unseen,
        };
        space.validate()?;
        Ok(space)
    }

    fn validate(&self) -> Result<()> {
        if self.states.is_empty() || self.objects.is_empty() {
            return Err(Error::Validation("need at least one state and one object".into()));
        }
        let n = self.num_pairs();
        for &p in self.seen.iter().chain(&self.val_unseen).chain(&self.test_unseen) {
            if p >= n {
                return Err(Error::Index { index: p, len: n });
            }
        }
        let seen: HashSet<usize> = self.seen.iter().copied().collect();
        for (name, list) in [("val", &self.val_unseen), ("test", &self.test_unseen)] {
            if let Some(&p) = list.iter().find(|p| seen.contains(p)) {
                return Err(Error::Validation(format!(
                    "{name} unseen pair '{}' is also seen",
                    self.pair_name(p)
                )));
            }
            for &p in list.iter() {
                let (s, o) = self.pair(p);
                let s_ok = self.seen.iter().any(|&q| self.pair(q).0 == s);
                let o_ok = self.seen.iter().any(|&q| self.pair(q).1 == o);
                if !(s_ok && o_ok) {
                    return Err(Error::Validation(format!(
                        "{name} unseen pair '{}' uses a primitive absent from seen pairs",
                        self.pair_name(p)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.states.len() * self.objects.len()
    }

    pub fn index(&self, state: usize, object: usize) -> usize {
        state * self.objects.len() + object
    }

    pub fn pair(&self, index: usize) -> (usize, usize) {
        (index / self.objects.len(), index % self.objects.len())
    }

    pub fn pair_name(&self, index: usize) -> String {
        let (s, o) = self.pair(index);
        format!("{} {}", self.states[s], self.objects[o])
    }

    pub fn find_pair(&self, state: &str, object: &str) -> Option<usize> {
        let s = self.states.iter().position(|x| x == state)?;
        let o = self.objects.iter().position(|x| x == object)?;
        Some(self.index(s, o))
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &[],
            Split::Val => &self.val_unseen,
            Split::Test => &self.test_unseen,
        }
    }

    pub fn is_seen(&self, pair: usize) -> bool {
        self.seen.binary_search(&pair).is_ok()
    }

    /// Candidate columns for a split in the closed world: seen ∪ unseen(split),
    /// ascending by pair index.
    pub fn closed_world_columns(&self, split: Split) -> Vec<usize> {
        let mut cols: Vec<usize> = self.seen.iter().chain(self.unseen(split)).copied().collect();
        cols.sort_unstable();
        cols
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        (0..self.num_pairs()).map(|p| self.is_seen(p)).collect()
    }

    pub fn unseen_mask(&self, split: Split) -> Vec<bool> {
        let u = self.unseen(split);
        (0..self.num_pairs()).map(|p| u.binary_search(&p).is_ok()).collect()
    }
}
