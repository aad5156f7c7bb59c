//! Template-generated dialogues for desk-scale runs.
//!
//! Every gold value is spelled out verbatim in a user utterance next to the
//! slot's display name, and value pools are shared by slot type across
//! domains, so a model that learns to read descriptions can transfer.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BeliefState, Dialogue, Partition, Turn};
use crate::schema::{Domain, Schema, SlotSpec, SlotType};

const TIMES: &[&str] = &[
    "08:00", "08:30", "09:15", "09:45", "10:30", "11:00", "11:45", "12:15", "13:30", "14:00", "15:15", "16:45",
    "17:30", "18:00", "19:15", "20:30",
];
const PLACES: &[&str] = &[
    "cambridge",
    "london",
    "ely",
    "norwich",
    "stansted",
    "peterborough",
    "leicester",
    "stevenage",
    "broxbourne",
    "bishops",
    "kings",
    "birmingham",
];
const NAMES: &[&str] = &[
    "gardenia", "alpha", "cotto", "nandos", "acorn", "lovell", "finches", "hobsons", "gonville", "meghna", "rajmahal",
    "varsity",
];
const FOODS: &[&str] = &[
    "italian", "chinese", "indian", "thai", "british", "french", "korean", "turkish",
];
const ATTRACTION_TYPES: &[&str] = &[
    "museum",
    "college",
    "park",
    "theatre",
    "church",
    "nightclub",
    "cinema",
    "boat",
];

const MENTION_TEMPLATES: &[&str] = &[
    "i need the {domain} {slot} to be {value}",
    "the {domain} {slot} should be {value}",
    "{domain} {slot} {value} please",
];
const UPDATE_TEMPLATE: &str = "actually make the {domain} {slot} {value}";
const SYSTEM_REPLIES: &[&str] = &[
    "ok , anything else ?",
    "sure , what else ?",
    "noted , can i help with anything else ?",
];

fn value_pool(spec: &SlotSpec) -> Vec<&str> {
    if spec.is_categorical {
        return spec.candidate_values.iter().map(String::as_str).collect();
    }
    let pool = match spec.slot_type {
        SlotType::Time => TIMES,
        SlotType::Location => PLACES,
        SlotType::Name => NAMES,
        _ if spec.slot_name == "food" => FOODS,
        _ => ATTRACTION_TYPES,
    };
    pool.to_vec()
}

fn render(template: &str, spec: &SlotSpec, value: &str) -> String {
    template
        .replace("{domain}", spec.domain.as_str())
        .replace("{slot}", &spec.display_name)
        .replace("{value}", value)
}

/// Per-dialogue seeds are derived from `(seed, index)` so generation can be
/// split across workers without changing the output.
fn dialogue_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}

fn generate_one(schema: &Schema, domains: &[Domain], max_turns: usize, seed: u64, index: usize) -> Dialogue {
    let mut rng = ChaCha8Rng::seed_from_u64(dialogue_seed(seed, index));
    let n_domains = if domains.len() > 1 && rng.gen_bool(0.4) { 2 } else { 1 };
    let chosen: Vec<Domain> = domains.choose_multiple(&mut rng, n_domains).copied().collect();

    // Slots to mention, interleaved across the chosen domains.
    let mut per_domain: Vec<Vec<&SlotSpec>> = chosen
        .iter()
        .map(|d| {
            let mut slots: Vec<&SlotSpec> = schema.slots().iter().filter(|s| s.domain == *d).collect();
            slots.shuffle(&mut rng);
            let keep = rng.gen_range(1..=slots.len().min(4));
            slots.truncate(keep);
            slots
        })
        .collect();
    let mut queue: Vec<&SlotSpec> = Vec::new();
    while per_domain.iter().any(|s| !s.is_empty()) {
        for slots in per_domain.iter_mut() {
            if !slots.is_empty() {
                queue.push(slots.remove(0));
            }
        }
    }
    queue.reverse(); // pop from the back

    let mut state = BeliefState::new();
    let mut mentioned: Vec<&SlotSpec> = Vec::new();
    let mut turns = Vec::with_capacity(max_turns);
    let mut previous_reply = String::new();
    for turn_index in 1..=max_turns {
        let mut parts = Vec::new();
        let fresh = if queue.len() >= 2 && rng.gen_bool(0.35) { 2 } else { 1 };
        for _ in 0..fresh {
            if let Some(spec) = queue.pop() {
                let value = *value_pool(spec).choose(&mut rng).expect("non-empty pool");
                let template = MENTION_TEMPLATES.choose(&mut rng).expect("templates");
                parts.push(render(template, spec, value));
                state.insert(spec.id(), value.to_string());
                mentioned.push(spec);
            }
        }
        if parts.is_empty() {
            let spec = *mentioned.choose(&mut rng).expect("at least one mention");
            let current = state[&spec.id()].clone();
            let pool: Vec<&str> = value_pool(spec).into_iter().filter(|v| *v != current).collect();
            let value = pool.choose(&mut rng).copied().unwrap_or(current.as_str()).to_string();
            parts.push(render(UPDATE_TEMPLATE, spec, &value));
            state.insert(spec.id(), value);
        }
        turns.push(Turn {
            index: turn_index,
            system_utterance: std::mem::take(&mut previous_reply),
            user_utterance: parts.join(" and "),
            gold_state: state.clone(),
        });
        previous_reply = SYSTEM_REPLIES.choose(&mut rng).expect("replies").to_string();
    }

    let active_domains: BTreeSet<Domain> = mentioned.iter().map(|s| s.domain).collect();
    Dialogue {
        dialogue_id: format!("syn-{seed}-{index:05}"),
        partition: Partition::Train,
        active_domains,
        turns,
    }
}

/// Generates `n_dialogues` dialogues of `max_turns` turns each over the
/// schema's domains. All dialogues land in the training partition; see
/// [`assign_partitions`].
pub fn generate_synthetic(schema: &Schema, n_dialogues: usize, max_turns: usize, seed: u64) -> Vec<Dialogue> {
    let domains: Vec<Domain> = schema.domains().into_iter().collect();
    if domains.is_empty() || max_turns == 0 {
        return Vec::new();
    }
    (0..n_dialogues)
        .map(|i| generate_one(schema, &domains, max_turns, seed, i))
        .collect()
}

/// Deterministically assigns dev and test partitions by fraction.
pub fn assign_partitions(dialogues: &mut [Dialogue], dev_fraction: f64, test_fraction: f64, seed: u64) {
    let n = dialogues.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_dev = ((dev_fraction * n as f64).round() as usize).min(n - n_test.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        dialogues[i].partition = if rank < n_test {
            Partition::Test
        } else if rank < n_test + n_dev {
            Partition::Dev
        } else {
            Partition::Train
        };
    }
}
