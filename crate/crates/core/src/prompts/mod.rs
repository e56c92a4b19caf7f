//! Soft prompts over a shared learnable context, and hard-prompt observation
//! cues with their fixture format.

mod bank;
pub mod cues;
mod vocab;

pub use bank::{PromptKind, PromptSort, SoftPromptBank, CONTEXT_INIT};
pub use cues::{fallback_cues, terminal_cue, validate_cues, CueFixtures, CueRejection, CueSequence, CueVerdict};
pub use vocab::{fnv1a64, Vocab, OOV_BUCKETS};
