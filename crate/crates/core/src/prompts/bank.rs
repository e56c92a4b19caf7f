use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{init_tensor, Init};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Words whose embeddings initialize the shared context, one per slot.
pub const CONTEXT_INIT: [&str; 3] = ["a", "photo", "of"];

const PROMPT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptSort {
    State,
    Object,
    Composition,
}

/// A fully specified soft prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    /// `[context; x_s; o]`
    State(usize),
    /// `[context; x_o]`
    Object(usize),
    /// `[context; x_s; x_o]`
    Composition(usize, usize),
}

impl PromptKind {
    /// Checks that the indices the sort needs are present.
    pub fn new(sort: PromptSort, state: Option<usize>, object: Option<usize>) -> Result<Self> {
        let missing = |what: &str| Error::Contract(format!("{sort:?} prompt needs a {what} index"));
        Ok(match sort {
            PromptSort::State => PromptKind::State(state.ok_or_else(|| missing("state"))?),
            PromptSort::Object => PromptKind::Object(object.ok_or_else(|| missing("object"))?),
            PromptSort::Composition => PromptKind::Composition(
                state.ok_or_else(|| missing("state"))?,
                object.ok_or_else(|| missing("object"))?,
            ),
        })
    }
}

/// Learnable prompt embeddings. The context rows are a single parameter, so
/// every prompt built from the bank reads the same storage.
#[derive(Clone, Debug)]
pub struct SoftPromptBank {
    pub context: ParamId,
    pub states: ParamId,
    pub objects: ParamId,
    pub generic: ParamId,
    context_len: usize,
    num_states: usize,
    num_objects: usize,
}

impl SoftPromptBank {
    /// `context_init` supplies initial rows for the first context slots
    /// (normally the embeddings of [`CONTEXT_INIT`]); remaining slots and all
    /// category embeddings start from N(0, 0.02²).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        context_len: usize,
        num_states: usize,
        num_objects: usize,
        width: usize,
        context_init: &[Vec<T>],
        generic_init: Option<&[T]>,
        rng: &mut R,
    ) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::Config("prompt context length must be at least 1".into()));
        }
        let mut ctx: Tensor<T> = init_tensor(context_len, width, Init::Normal(PROMPT_STD), rng);
        for (i, row) in context_init.iter().take(context_len).enumerate() {
            if row.len() != width {
                return Err(Error::Shape {
                    op: "context init",
                    lhs: vec![context_len, width],
                    rhs: vec![row.len()],
                });
            }
            ctx.data_mut()[i * width..(i + 1) * width].copy_from_slice(row);
        }
        let states = init_tensor(num_states, width, Init::Normal(PROMPT_STD), rng);
        let objects = init_tensor(num_objects, width, Init::Normal(PROMPT_STD), rng);
        let mut generic: Tensor<T> = init_tensor(1, width, Init::Normal(PROMPT_STD), rng);
        if let Some(g) = generic_init {
            generic.data_mut().copy_from_slice(g);
        }
        Ok(SoftPromptBank {
            context: store.add("prompt.context", ctx, true),
            states: store.add("prompt.states", states, true),
            objects: store.add("prompt.objects", objects, true),
            generic: store.add("prompt.generic", generic, true),
            context_len,
            num_states,
            num_objects,
        })
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn prompt_len(&self, kind: PromptKind) -> usize {
        match kind {
            PromptKind::Object(_) => self.context_len + 1,
            PromptKind::State(_) | PromptKind::Composition(..) => self.context_len + 2,
        }
    }

    fn check(&self, state: Option<usize>, object: Option<usize>) -> Result<()> {
        if let Some(s) = state.filter(|&s| s >= self.num_states) {
            return Err(Error::Index {
                index: s,
                len: self.num_states,
            });
        }
        if let Some(o) = object.filter(|&o| o >= self.num_objects) {
            return Err(Error::Index {
                index: o,
                len: self.num_objects,
            });
        }
        Ok(())
    }

    /// Embedding sequence for one prompt (`prompt_len × width`).
    pub fn build<T: Scalar>(&self, tape: &mut Tape<'_, T>, kind: PromptKind) -> Result<Var> {
        let ctx = tape.param(self.context);
        let parts = match kind {
            PromptKind::State(s) => {
                self.check(Some(s), None)?;
                let st = tape.param(self.states);
                let xs = tape.select_rows(st, &[s])?;
                let o = tape.param(self.generic);
                vec![ctx, xs, o]
            }
            PromptKind::Object(o) => {
                self.check(None, Some(o))?;
                let ob = tape.param(self.objects);
                let xo = tape.select_rows(ob, &[o])?;
                vec![ctx, xo]
            }
            PromptKind::Composition(s, o) => {
                self.check(Some(s), Some(o))?;
                let st = tape.param(self.states);
                let xs = tape.select_rows(st, &[s])?;
                let ob = tape.param(self.objects);
                let xo = tape.select_rows(ob, &[o])?;
                vec![ctx, xs, xo]
            }
        };
        tape.concat_rows(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(m: usize) -> (ParamStore<f64>, SoftPromptBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let b = SoftPromptBank::new(&mut store, m, 3, 4, 5, &[], None, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn lengths_follow_prompt_structure() {
        for m in 1..6 {
            let (store, b) = bank(m);
            let mut tape = Tape::new(&store);
            for kind in [PromptKind::State(1), PromptKind::Object(2), PromptKind::Composition(0, 3)] {
                let v = b.build(&mut tape, kind).unwrap();
                assert_eq!(tape.value(v).rows(), b.prompt_len(kind));
            }
            assert_eq!(b.prompt_len(PromptKind::State(0)), m + 2);
            assert_eq!(b.prompt_len(PromptKind::Object(0)), m + 1);
        }
    }

    #[test]
    fn state_prompt_ends_with_generic_word() {
        let (store, b) = bank(2);
        let mut tape = Tape::new(&store);
        let v = b.build(&mut tape, PromptKind::State(0)).unwrap();
        assert_eq!(tape.value(v).row_slice(3), store.get(b.generic).data());
    }

    #[test]
    fn missing_index_is_contract_error() {
        assert!(matches!(
            PromptKind::new(PromptSort::Composition, Some(1), None),
            Err(Error::Contract(_))
        ));
        assert_eq!(
            PromptKind::new(PromptSort::Object, None, Some(2)).unwrap(),
            PromptKind::Object(2)
        );
    }
}
