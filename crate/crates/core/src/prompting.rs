//! Turns (dialogue history, slot) pairs into encoder source / decoder target
//! text.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, Turn, NONE_VALUE};
use crate::error::{Error, Result};
use crate::schema::{describe, DescriptionVariant, Domain, Schema, SlotSpec};

pub const SEPARATOR: &str = "[sep]";
pub const USER_PREFIX: &str = "user:";
pub const SYSTEM_PREFIX: &str = "system:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub slot_id: String,
    pub source: String,
    pub target: String,
    pub variant: DescriptionVariant,
}

impl TrainingExample {
    /// Splits the source back into (context, description).
    pub fn split_source(&self) -> Option<(&str, &str)> {
        self.source.split_once(&format!(" {SEPARATOR} "))
    }
}

/// Collapses whitespace (newlines included) and defuses separator look-alikes
/// so the separator occurs exactly once per source.
fn clean_utterance(text: &str) -> String {
    text.split_whitespace()
        .map(|w| if w.eq_ignore_ascii_case(SEPARATOR) { "sep" } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

fn push_turn(out: &mut Vec<String>, turn: &Turn) {
    let system = clean_utterance(&turn.system_utterance);
    if !system.is_empty() {
        out.push(format!("{SYSTEM_PREFIX} {system}"));
    }
    out.push(format!("{USER_PREFIX} {}", clean_utterance(&turn.user_utterance)));
}

fn context_from(turns: &[Turn], first: usize, t: usize) -> String {
    let mut parts = Vec::with_capacity(2 * (t - first));
    for turn in &turns[first..t] {
        push_turn(&mut parts, turn);
    }
    parts.join(" ")
}

fn check_turn(turns: &[Turn], t: usize) -> Result<()> {
    if t == 0 || t > turns.len() {
        return Err(Error::Index(format!(
            "turn {t} out of range for a dialogue with {} turns",
            turns.len()
        )));
    }
    Ok(())
}

/// History up to and including the user utterance of turn `t` (1-based):
/// `user: U1 system: R1 ... user: Ut`. Empty system utterances are skipped.
pub fn serialize_context(turns: &[Turn], t: usize) -> Result<String> {
    check_turn(turns, t)?;
    Ok(context_from(turns, 0, t))
}

pub fn join_source(context: &str, description: &str) -> String {
    format!("{context} {SEPARATOR} {description}")
}

/// Builds the source for turn `t`, dropping whole oldest turns until
/// `token_count(source) <= max_tokens`. The latest turn and the description
/// are always kept, so the result may still exceed the budget; backends clip
/// what is left.
pub fn fit_source(
    turns: &[Turn],
    t: usize,
    description: &str,
    max_tokens: usize,
    token_count: impl Fn(&str) -> usize,
) -> Result<String> {
    check_turn(turns, t)?;
    let mut first = 0;
    loop {
        let source = join_source(&context_from(turns, first, t), description);
        if first + 1 >= t || token_count(&source) <= max_tokens {
            return Ok(source);
        }
        first += 1;
    }
}

/// Deterministic per-example random source for description rendering.
pub fn example_rng(seed: u64, dialogue_id: &str, turn_index: usize, slot_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(dialogue_id.as_bytes());
    h.update([0]);
    h.update((turn_index as u64).to_le_bytes());
    h.update(slot_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// One (turn, slot) example. Absent slots get the target `none`.
pub fn build_example(
    dialogue: &Dialogue,
    t: usize,
    spec: &SlotSpec,
    variant: DescriptionVariant,
    seed: u64,
) -> Result<TrainingExample> {
    let context = serialize_context(&dialogue.turns, t)?;
    let slot_id = spec.id();
    let mut rng = example_rng(seed, &dialogue.dialogue_id, t, &slot_id);
    let description = describe(spec, variant, &mut rng)?;
    let target = dialogue.turns[t - 1]
        .gold_state
        .get(&slot_id)
        .cloned()
        .unwrap_or_else(|| NONE_VALUE.to_string());
    Ok(TrainingExample {
        dialogue_id: dialogue.dialogue_id.clone(),
        turn_index: t,
        slot_id,
        source: join_source(&context, &description),
        target,
        variant,
    })
}

/// [`build_example`] with the history clipped by [`fit_source`] when the
/// source exceeds `max_tokens`.
pub fn build_fitted_example(
    dialogue: &Dialogue,
    t: usize,
    spec: &SlotSpec,
    variant: DescriptionVariant,
    seed: u64,
    max_tokens: usize,
    token_count: impl Fn(&str) -> usize,
) -> Result<TrainingExample> {
    let mut example = build_example(dialogue, t, spec, variant, seed)?;
    if token_count(&example.source) > max_tokens {
        let description = example.split_source().map(|(_, d)| d.to_string()).unwrap_or_default();
        example.source = fit_source(&dialogue.turns, t, &description, max_tokens, token_count)?;
    }
    Ok(example)
}

/// One example per (turn, slot) for every slot of `domains` (all schema
/// slots when `None`), ordered by (dialogue_id, turn_index, slot_id).
pub fn expand_corpus<'a>(
    corpus: &'a [Dialogue],
    schema: &'a Schema,
    variant: DescriptionVariant,
    seed: u64,
    domains: Option<&BTreeSet<Domain>>,
) -> impl Iterator<Item = Result<TrainingExample>> + 'a {
    let mut slots: Vec<&SlotSpec> = schema
        .slots()
        .iter()
        .filter(|s| domains.is_none_or(|d| d.contains(&s.domain)))
        .collect();
    slots.sort_by_key(|s| s.id());
    let mut dialogues: Vec<&Dialogue> = corpus.iter().collect();
    dialogues.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    dialogues.into_iter().flat_map(move |d| {
        let slots = slots.clone();
        (1..=d.turns.len()).flat_map(move |t| {
            let slots = slots.clone();
            slots
                .into_iter()
                .map(move |spec| build_example(d, t, spec, variant, seed))
        })
    })
}

/// Debug dump: `source<TAB>target`, one example per line.
pub fn write_examples_tsv(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        writeln!(w, "{}\t{}", ex.source, ex.target)?;
    }
    w.flush()?;
    Ok(())
}
