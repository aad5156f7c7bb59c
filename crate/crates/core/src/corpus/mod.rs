//! Dialogue corpora: loading, normalization, protocol splits and synthetic
//! fixtures.

mod normalize;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schema::{Domain, Schema};

pub use normalize::{normalize_value, ValueNormalizer};
pub use synthetic::{assign_partitions, generate_synthetic};

/// Slot id (`domain-slot`) to normalized value. Absent slots are untracked;
/// the literal `none` never appears as a value.
pub type BeliefState = BTreeMap<String, String>;

/// The value that stands for "slot not mentioned".
pub const NONE_VALUE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    #[default]
    Train,
    Dev,
    Test,
}

/// One exchange: the system utterance that preceded the user (empty on the
/// opening turn) and the user utterance itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based.
    pub index: usize,
    #[serde(default)]
    pub system_utterance: String,
    pub user_utterance: String,
    /// Cumulative state after this user utterance.
    pub gold_state: BeliefState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub partition: Partition,
    pub active_domains: BTreeSet<Domain>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn touches(&self, domain: Domain) -> bool {
        self.active_domains.contains(&domain)
    }

    /// Checks the structural invariants against a schema.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let ctx = |msg: String| Error::parse(format!("dialogue {}", self.dialogue_id), msg);
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i + 1 {
                return Err(ctx(format!("turn {} has index {}", i + 1, turn.index)));
            }
            for (slot, value) in &turn.gold_state {
                let spec = schema.get(slot).ok_or_else(|| ctx(format!("unknown slot `{slot}`")))?;
                if !self.active_domains.contains(&spec.domain) {
                    return Err(ctx(format!("slot `{slot}` lies outside the active domains")));
                }
                if value == NONE_VALUE || value.is_empty() {
                    return Err(ctx(format!("slot `{slot}` carries an empty value")));
                }
            }
        }
        Ok(())
    }
}

/// Partitioned corpus for one protocol run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub target_domain: Option<Domain>,
    pub provenance: SplitProvenance,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub seed: u64,
    pub filters: Vec<String>,
    pub warnings: Vec<String>,
    pub dev_carved_from_train: bool,
}

// ---------------------------------------------------------------------------
// Loading

/// Raw record layout of the widely used MultiWOZ preprocessing output
/// (`{train,dev,test}_dials.json`).
#[derive(Debug, Deserialize)]
struct RawDialogue {
    dialogue_idx: String,
    #[serde(default)]
    domains: Vec<String>,
    dialogue: Vec<RawTurn>,
}

#[derive(Debug, Deserialize)]
struct RawTurn {
    #[serde(default)]
    system_transcript: String,
    transcript: String,
    #[serde(default)]
    belief_state: Vec<RawBelief>,
}

#[derive(Debug, Deserialize)]
struct RawBelief {
    slots: Vec<(String, String)>,
}

fn partition_from_name(name: &str) -> Partition {
    let name = name.to_ascii_lowercase();
    if name.contains("test") {
        Partition::Test
    } else if name.contains("dev") || name.contains("val") {
        Partition::Dev
    } else {
        Partition::Train
    }
}

fn domain_of_slot(slot: &str) -> Option<Domain> {
    slot.split_once('-').and_then(|(d, _)| d.parse().ok())
}

fn convert_raw(
    raw: RawDialogue,
    partition: Partition,
    schema: &Schema,
    normalizer: &ValueNormalizer,
) -> Result<Option<Dialogue>> {
    let id = raw.dialogue_idx;
    let mut active: BTreeSet<Domain> = raw.domains.iter().filter_map(|d| d.parse().ok()).collect();
    let mut turns = Vec::with_capacity(raw.dialogue.len());
    for (i, t) in raw.dialogue.into_iter().enumerate() {
        let mut state = BeliefState::new();
        for belief in t.belief_state {
            for (slot, value) in belief.slots {
                let slot = slot.trim().to_lowercase();
                let Some(domain) = domain_of_slot(&slot) else {
                    continue; // outside the five evaluated domains
                };
                if !schema.contains(&slot) {
                    return Err(Error::parse(
                        format!("dialogue {id}"),
                        format!("turn {} references unknown slot `{slot}`", i + 1),
                    ));
                }
                let value = normalizer.normalize(&value);
                if value != NONE_VALUE {
                    active.insert(domain);
                    state.insert(slot, value);
                }
            }
        }
        turns.push(Turn {
            index: i + 1,
            system_utterance: clean_utterance(&t.system_transcript),
            user_utterance: clean_utterance(&t.transcript),
            gold_state: state,
        });
    }
    if active.is_empty() {
        return Ok(None);
    }
    Ok(Some(Dialogue {
        dialogue_id: id,
        partition,
        active_domains: active,
        turns,
    }))
}

fn clean_utterance(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn load_raw_file(
    path: &Path,
    partition: Partition,
    schema: &Schema,
    normalizer: &ValueNormalizer,
) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let raws: Vec<RawDialogue> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for raw in raws {
        if let Some(d) = convert_raw(raw, partition, schema, normalizer)? {
            out.push(d);
        }
    }
    Ok(out)
}

/// Loads dialogues from either
/// * a directory holding `train_dials.json` / `dev_dials.json` / `test_dials.json`,
/// * a single raw `*.json` file (partition inferred from its name), or
/// * a preprocessed `*.jsonl` corpus written by [`write_corpus`].
///
/// Dialogues that touch none of the five evaluated domains are dropped and
/// states are cumulative and normalized.
pub fn load_corpus(path: &Path, schema: &Schema, normalizer: &ValueNormalizer) -> Result<Vec<Dialogue>> {
    if path.is_dir() {
        let mut out = Vec::new();
        let mut found = false;
        for (name, partition) in [
            ("train_dials.json", Partition::Train),
            ("dev_dials.json", Partition::Dev),
            ("test_dials.json", Partition::Test),
        ] {
            let file = path.join(name);
            if file.exists() {
                found = true;
                out.extend(load_raw_file(&file, partition, schema, normalizer)?);
            }
        }
        if !found {
            return Err(Error::load(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "no train_dials.json / dev_dials.json / test_dials.json found",
                ),
            ));
        }
        return Ok(out);
    }
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl {
        read_corpus(path, schema)
    } else {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        load_raw_file(path, partition_from_name(&name), schema, normalizer)
    }
}

/// Writes the preprocessed corpus format: one JSON dialogue per line.
pub fn write_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in dialogues {
        serde_json::to_writer(&mut w, d).map_err(|e| Error::parse(&d.dialogue_id, e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, schema: &Schema) -> Result<Vec<Dialogue>> {
    let file = File::open(path).map_err(|e| Error::load(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 1), e))?;
        d.validate(schema)?;
        out.push(d);
    }
    Ok(out)
}

/// Content hash over the canonical JSON form of the dialogues.
pub fn corpus_fingerprint(dialogues: &[Dialogue]) -> String {
    let mut hasher = Sha256::new();
    for d in dialogues {
        hasher.update(serde_json::to_vec(d).expect("dialogue serializes"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

// ---------------------------------------------------------------------------
// Splits

fn carve_dev(train: &mut Vec<Dialogue>, dev_fraction: f64, seed: u64) -> Result<Vec<Dialogue>> {
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::Config(format!(
            "dev_fraction must lie in [0, 1), got {dev_fraction}"
        )));
    }
    let n_dev = (dev_fraction * train.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let dev_idx: BTreeSet<usize> = order.into_iter().take(n_dev).collect();
    let (mut dev, mut keep) = (Vec::new(), Vec::new());
    for (i, d) in std::mem::take(train).into_iter().enumerate() {
        if dev_idx.contains(&i) {
            dev.push(d);
        } else {
            keep.push(d);
        }
    }
    *train = keep;
    Ok(dev)
}

/// Leave-one-domain-out split. Train/dev keep only dialogues that never touch
/// `target`; test keeps the test-partition dialogues that do. Partition
/// membership comes from the corpus; `dev_fraction` is only used when the
/// corpus carries no dev partition.
pub fn split_zero_shot(dialogues: &[Dialogue], target: Domain, dev_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    let mut provenance = SplitProvenance {
        seed,
        filters: vec![format!("exclude dialogues touching {target} from train/dev")],
        ..Default::default()
    };
    let mut train: Vec<Dialogue> = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let mut has_dev_partition = false;
    for d in dialogues {
        match d.partition {
            Partition::Train if !d.touches(target) => train.push(d.clone()),
            Partition::Dev => {
                has_dev_partition = true;
                if !d.touches(target) {
                    dev.push(d.clone());
                }
            }
            Partition::Test if d.touches(target) => test.push(d.clone()),
            _ => {}
        }
    }
    if !has_dev_partition && dev_fraction > 0.0 {
        dev = carve_dev(&mut train, dev_fraction, seed)?;
        provenance.dev_carved_from_train = true;
    }
    if train.is_empty() {
        let msg = format!("no training dialogues left after removing domain {target}");
        log::warn!("{msg}");
        provenance.warnings.push(msg);
    }
    Ok(CorpusSplit {
        train,
        dev,
        test,
        target_domain: Some(target),
        provenance,
    })
}

/// Split over all five domains following the corpus partitions.
pub fn split_full_shot(dialogues: &[Dialogue], dev_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for d in dialogues {
        match d.partition {
            Partition::Train => train.push(d.clone()),
            Partition::Dev => dev.push(d.clone()),
            Partition::Test => test.push(d.clone()),
        }
    }
    let mut provenance = SplitProvenance {
        seed,
        ..Default::default()
    };
    if dev.is_empty() && dev_fraction > 0.0 {
        dev = carve_dev(&mut train, dev_fraction, seed)?;
        provenance.dev_carved_from_train = true;
    }
    Ok(CorpusSplit {
        train,
        dev,
        test,
        target_domain: None,
        provenance,
    })
}

/// Number of dialogues a few-shot sample draws from a pool of `pool` dialogues.
pub fn few_shot_size(pool: usize, ratio: f64) -> usize {
    // Guard against products such as 0.07 * 100 = 7.000000000000001.
    let raw = ratio * pool as f64;
    let size = (raw - 1e-9).ceil().max(0.0) as usize;
    size.min(pool)
}

/// Uniform dialogue-level sample, without replacement, of the training
/// partition dialogues that touch `target`.
pub fn sample_few_shot(dialogues: &[Dialogue], target: Domain, ratio: f64, seed: u64) -> Result<Vec<Dialogue>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("few-shot ratio must lie in (0, 1], got {ratio}")));
    }
    let pool: Vec<&Dialogue> = dialogues
        .iter()
        .filter(|d| d.partition == Partition::Train && d.touches(target))
        .collect();
    let k = few_shot_size(pool.len(), ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pool.choose_multiple(&mut rng, k).map(|d| (*d).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, partition: Partition, domains: &[Domain]) -> Dialogue {
        Dialogue {
            dialogue_id: id.to_string(),
            partition,
            active_domains: domains.iter().copied().collect(),
            turns: vec![Turn {
                index: 1,
                system_utterance: String::new(),
                user_utterance: "hello".into(),
                gold_state: BeliefState::new(),
            }],
        }
    }

    #[test]
    fn zero_shot_filters_by_domain() {
        use Domain::{Hotel, Taxi};
        use Partition::{Dev, Test, Train};
        let corpus = vec![
            dialogue("a", Train, &[Hotel]),
            dialogue("b", Train, &[Taxi]),
            dialogue("c", Train, &[Hotel, Taxi]),
            dialogue("d", Dev, &[Hotel]),
            dialogue("e", Test, &[Hotel]),
            dialogue("f", Test, &[Taxi]),
            dialogue("g", Test, &[Hotel, Taxi]),
        ];
        let split = split_zero_shot(&corpus, Taxi, 0.1, 0).unwrap();
        let ids = |v: &[Dialogue]| v.iter().map(|d| d.dialogue_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&split.train), ["a"]);
        assert_eq!(ids(&split.dev), ["d"]);
        assert_eq!(ids(&split.test), ["f", "g"]);
        assert!(!split.provenance.dev_carved_from_train);
    }

    #[test]
    fn zero_shot_all_target_warns() {
        let corpus = vec![
            dialogue("a", Partition::Train, &[Domain::Taxi]),
            dialogue("b", Partition::Test, &[Domain::Taxi]),
        ];
        let split = split_zero_shot(&corpus, Domain::Taxi, 0.0, 0).unwrap();
        assert!(split.train.is_empty());
        assert_eq!(split.provenance.warnings.len(), 1);
    }

    #[test]
    fn dev_is_carved_only_without_dev_partition() {
        let corpus: Vec<Dialogue> = (0..20)
            .map(|i| dialogue(&format!("d{i}"), Partition::Train, &[Domain::Hotel]))
            .collect();
        let split = split_zero_shot(&corpus, Domain::Taxi, 0.25, 3).unwrap();
        assert_eq!(split.dev.len(), 5);
        assert_eq!(split.train.len(), 15);
        assert!(split.provenance.dev_carved_from_train);
        let again = split_zero_shot(&corpus, Domain::Taxi, 0.25, 3).unwrap();
        assert_eq!(split.dev, again.dev);
    }

    #[test]
    fn unknown_domain_is_config_error() {
        assert!(matches!("hospital".parse::<Domain>(), Err(Error::Config(_))));
    }

    #[test]
    fn few_shot_sizes() {
        assert_eq!(few_shot_size(200, 0.05), 10);
        assert_eq!(few_shot_size(200, 0.01), 2);
        assert_eq!(few_shot_size(7, 0.01), 1);
        assert_eq!(few_shot_size(100, 0.07), 7);
        assert_eq!(few_shot_size(10, 1.0), 10);
        assert_eq!(few_shot_size(0, 0.1), 0);
    }

    #[test]
    fn few_shot_sampling() {
        let corpus: Vec<Dialogue> = (0..200)
            .map(|i| dialogue(&format!("d{i}"), Partition::Train, &[Domain::Train]))
            .chain((0..5).map(|i| dialogue(&format!("h{i}"), Partition::Train, &[Domain::Hotel])))
            .collect();
        let a = sample_few_shot(&corpus, Domain::Train, 0.05, 9).unwrap();
        let b = sample_few_shot(&corpus, Domain::Train, 0.05, 9).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        let ids: BTreeSet<_> = a.iter().map(|d| &d.dialogue_id).collect();
        assert_eq!(ids.len(), 10);
        assert!(a.iter().all(|d| d.touches(Domain::Train)));
        assert!(sample_few_shot(&corpus, Domain::Train, 0.0, 0).is_err());
        assert!(sample_few_shot(&corpus, Domain::Train, 1.5, 0).is_err());
    }

    #[test]
    fn loads_raw_files() {
        let schema = Schema::canonical();
        let dir = tempfile::tempdir().unwrap();
        let raw = r#"[
          {"dialogue_idx": "PMUL1.json", "domains": ["hotel", "taxi"], "dialogue": [
            {"system_transcript": "", "turn_idx": 0, "transcript": "I need a hotel in the Center",
             "belief_state": [{"slots": [["hotel-area", "center"]], "act": "inform"}]},
            {"system_transcript": "Sure.", "turn_idx": 1, "transcript": "and a taxi at 9:15",
             "belief_state": [{"slots": [["hotel-area", "center"]], "act": "inform"},
                              {"slots": [["taxi-leaveat", "9:15"]], "act": "inform"},
                              {"slots": [["hotel-name", "not mentioned"]], "act": "inform"}]}
          ]},
          {"dialogue_idx": "SNG2.json", "domains": ["hospital"], "dialogue": [
            {"system_transcript": "", "transcript": "where is the hospital",
             "belief_state": [{"slots": [["hospital-department", "cardiology"]], "act": "inform"}]}
          ]}
        ]"#;
        std::fs::write(dir.path().join("test_dials.json"), raw).unwrap();
        std::fs::write(dir.path().join("train_dials.json"), "").unwrap();
        let dialogues = load_corpus(dir.path(), &schema, ValueNormalizer::bundled()).unwrap();
        assert_eq!(dialogues.len(), 1);
        let d = &dialogues[0];
        assert_eq!(d.partition, Partition::Test);
        assert_eq!(d.active_domains, [Domain::Hotel, Domain::Taxi].into_iter().collect());
        assert_eq!(d.turns[1].gold_state["taxi-leaveat"], "09:15");
        assert_eq!(d.turns[1].gold_state["hotel-area"], "centre");
        assert!(!d.turns[1].gold_state.contains_key("hotel-name"));
        d.validate(&schema).unwrap();

        let jsonl = dir.path().join("corpus.jsonl");
        write_corpus(&jsonl, &dialogues).unwrap();
        assert_eq!(
            load_corpus(&jsonl, &schema, ValueNormalizer::bundled()).unwrap(),
            dialogues
        );
    }

    #[test]
    fn load_errors() {
        let schema = Schema::canonical();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path(), &schema, ValueNormalizer::bundled()),
            Err(Error::Load { .. })
        ));
        let bad = dir.path().join("train_dials.json");
        std::fs::write(
            &bad,
            r#"[{"dialogue_idx": "X9.json", "domains": ["hotel"], "dialogue": [
                {"transcript": "hi", "belief_state": [{"slots": [["hotel-colour", "red"]]}]}]}]"#,
        )
        .unwrap();
        let err = load_corpus(dir.path(), &schema, ValueNormalizer::bundled()).unwrap_err();
        assert!(err.to_string().contains("X9.json"), "{err}");
        let empty = dir.path().join("empty.json");
        std::fs::write(&empty, "").unwrap();
        assert!(load_corpus(&empty, &schema, ValueNormalizer::bundled())
            .unwrap()
            .is_empty());
    }
}
