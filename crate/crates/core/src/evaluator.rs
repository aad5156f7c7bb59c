//! Per-turn belief-state prediction and exact-match scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BeliefState, Dialogue, ValueNormalizer, NONE_VALUE};
use crate::error::{Error, Result};
use crate::model::Seq2SeqBackend;
use crate::prompting::{build_fitted_example, TrainingExample};
use crate::schema::{DescriptionVariant, Domain, Schema, SlotSpec};

pub const RESULT_FILE: &str = "result.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Clone, Copy)]
pub struct PredictOptions<'a> {
    /// Seed for description rendering; must match the one used in training.
    pub seed: u64,
    pub max_target_length: usize,
    pub normalizer: &'a ValueNormalizer,
}

fn slot_context(dialogue: &Dialogue, t: usize, spec: &SlotSpec) -> String {
    format!("dialogue {} turn {t} slot {}", dialogue.dialogue_id, spec.id())
}

/// Generated value for one slot; `None` when the model says the slot is absent.
fn predict_slot(
    backend: &dyn Seq2SeqBackend,
    dialogue: &Dialogue,
    t: usize,
    spec: &SlotSpec,
    variant: DescriptionVariant,
    opts: &PredictOptions<'_>,
) -> Result<Option<String>> {
    let wrap = |e: Error| Error::Backend {
        context: slot_context(dialogue, t, spec),
        source: Box::new(e),
    };
    let example = build_fitted_example(
        dialogue,
        t,
        spec,
        variant,
        opts.seed,
        backend.max_source_length(),
        |s| backend.count_source_tokens(s),
    )
    .map_err(wrap)?;
    let raw = backend
        .generate_greedy(&example.source, opts.max_target_length)
        .map_err(wrap)?;
    let value = opts.normalizer.normalize(&raw);
    Ok((value != NONE_VALUE && !value.is_empty()).then_some(value))
}

/// Belief state at turn `t` over the slots of `domains`: one greedy
/// generation per slot, normalized, with `none` dropped.
pub fn predict_state(
    backend: &dyn Seq2SeqBackend,
    dialogue: &Dialogue,
    t: usize,
    schema: &Schema,
    variant: DescriptionVariant,
    domains: &BTreeSet<Domain>,
    opts: &PredictOptions<'_>,
) -> Result<BeliefState> {
    if t == 0 || t > dialogue.turns.len() {
        return Err(Error::Index(format!(
            "turn {t} out of range for dialogue {} with {} turns",
            dialogue.dialogue_id,
            dialogue.turns.len()
        )));
    }
    let mut state = BeliefState::new();
    for spec in schema.slots_in(domains) {
        if let Some(value) = predict_slot(backend, dialogue, t, spec, variant, opts)? {
            state.insert(spec.id(), value);
        }
    }
    Ok(state)
}

/// Restricts a state to `slots`, re-normalizing values and dropping `none`.
pub fn restrict_state(state: &BeliefState, slots: &BTreeSet<String>, normalizer: &ValueNormalizer) -> BeliefState {
    state
        .iter()
        .filter(|(k, _)| slots.contains(k.as_str()))
        .map(|(k, v)| (k.clone(), normalizer.normalize(v)))
        .filter(|(_, v)| v != NONE_VALUE)
        .collect()
}

fn check_aligned(predictions: &[BeliefState], golds: &[BeliefState]) -> Result<()> {
    if predictions.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predicted turns against {} gold turns",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Contract("no turns to score".into()));
    }
    Ok(())
}

/// Fraction of turns whose predicted state equals the gold state exactly.
pub fn joint_goal_accuracy(predictions: &[BeliefState], golds: &[BeliefState]) -> Result<f64> {
    check_aligned(predictions, golds)?;
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Fraction of turns where `slot` has the same value (or is absent) on both sides.
pub fn slot_accuracy(predictions: &[BeliefState], golds: &[BeliefState], slot: &str, schema: &Schema) -> Result<f64> {
    schema.require(slot)?;
    check_aligned(predictions, golds)?;
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.get(slot) == g.get(slot))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// One scored turn; the unit of the prediction dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub active_domains: BTreeSet<Domain>,
    pub gold: BeliefState,
    pub predicted: BeliefState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub joint_goal_accuracy: f64,
    /// JGA over the dialogues touching each domain, restricted to its slots.
    pub per_domain_jga: BTreeMap<Domain, f64>,
    pub slot_accuracy: BTreeMap<String, f64>,
    pub n_turns: usize,
    pub n_dialogues: usize,
}

/// Scores turn predictions over the slots of `domains`.
pub fn score(turns: &[TurnPrediction], schema: &Schema, domains: &BTreeSet<Domain>) -> Result<Scores> {
    let (predictions, golds): (Vec<BeliefState>, Vec<BeliefState>) =
        turns.iter().map(|t| (t.predicted.clone(), t.gold.clone())).unzip();
    let joint = joint_goal_accuracy(&predictions, &golds)?;
    let mut slot_acc = BTreeMap::new();
    for spec in schema.slots_in(domains) {
        let id = spec.id();
        let acc = slot_accuracy(&predictions, &golds, &id, schema)?;
        slot_acc.insert(id, acc);
    }
    let mut per_domain = BTreeMap::new();
    for &domain in domains {
        let keep: BTreeSet<String> = schema.slots_in(&BTreeSet::from([domain])).map(SlotSpec::id).collect();
        let only = |s: &BeliefState| -> BeliefState {
            s.iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let (p, g): (Vec<BeliefState>, Vec<BeliefState>) = turns
            .iter()
            .filter(|t| t.active_domains.contains(&domain))
            .map(|t| (only(&t.predicted), only(&t.gold)))
            .unzip();
        if !g.is_empty() {
            per_domain.insert(domain, joint_goal_accuracy(&p, &g)?);
        }
    }
    let n_dialogues = turns.iter().map(|t| &t.dialogue_id).collect::<BTreeSet<_>>().len();
    Ok(Scores {
        joint_goal_accuracy: joint,
        per_domain_jga: per_domain,
        slot_accuracy: slot_acc,
        n_turns: turns.len(),
        n_dialogues,
    })
}

/// Predicts every turn of every dialogue and scores the result. Generation
/// runs in parallel when the backend allows it; results are keyed and sorted,
/// so the output does not depend on scheduling.
pub fn evaluate(
    backend: &dyn Seq2SeqBackend,
    dialogues: &[Dialogue],
    schema: &Schema,
    variant: DescriptionVariant,
    domains: &BTreeSet<Domain>,
    opts: &PredictOptions<'_>,
) -> Result<(Vec<TurnPrediction>, Scores)> {
    let slots: Vec<&SlotSpec> = schema.slots_in(domains).collect();
    if slots.is_empty() {
        return Err(Error::Config(format!("no schema slots in domains {domains:?}")));
    }
    let slot_ids: BTreeSet<String> = slots.iter().map(|s| s.id()).collect();
    let mut ordered: Vec<&Dialogue> = dialogues.iter().collect();
    ordered.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    let n_slots = slots.len();
    let tasks: Vec<(usize, usize, usize)> = ordered
        .iter()
        .enumerate()
        .flat_map(|(di, d)| (1..=d.turns.len()).flat_map(move |t| (0..n_slots).map(move |si| (di, t, si))))
        .collect();
    let run = |&(di, t, si): &(usize, usize, usize)| {
        predict_slot(backend, ordered[di], t, slots[si], variant, opts).map(|v| ((di, t, si), v))
    };
    let generated: Vec<((usize, usize, usize), Option<String>)> = if backend.concurrent_generation() {
        tasks.par_iter().map(run).collect::<Result<_>>()?
    } else {
        tasks.iter().map(run).collect::<Result<_>>()?
    };
    let mut predicted: BTreeMap<(usize, usize), BeliefState> = BTreeMap::new();
    for ((di, t, si), value) in generated {
        let state = predicted.entry((di, t)).or_default();
        if let Some(v) = value {
            state.insert(slots[si].id(), v);
        }
    }
    let mut turns = Vec::new();
    for (di, d) in ordered.iter().enumerate() {
        for t in 1..=d.turns.len() {
            turns.push(TurnPrediction {
                dialogue_id: d.dialogue_id.clone(),
                turn_index: t,
                active_domains: d.active_domains.clone(),
                gold: restrict_state(&d.turns[t - 1].gold_state, &slot_ids, opts.normalizer),
                predicted: predicted.remove(&(di, t)).unwrap_or_default(),
            });
        }
    }
    let scores = score(&turns, schema, domains)?;
    Ok((turns, scores))
}

pub fn write_predictions(path: &Path, turns: &[TurnPrediction]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in turns {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::parse(path.display().to_string(), e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<TurnPrediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::load(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

/// Scored outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    /// Echo of the experiment configuration.
    pub config: serde_json::Value,
    pub seed: u64,
    pub protocol: String,
    pub target_domain: Option<Domain>,
    pub variant: DescriptionVariant,
    pub backend: String,
    pub checkpoint_hash: String,
    pub evaluated_domains: BTreeSet<Domain>,
    pub scores: Scores,
    /// Prediction dump, relative to the directory holding the record.
    pub predictions: String,
}

impl ResultRecord {
    /// The configuration with run-specific keys removed; records that agree
    /// on it differ only by seed.
    pub fn config_key(&self) -> serde_json::Value {
        let mut key = self.config.clone();
        if let Some(map) = key.as_object_mut() {
            map.remove("seed");
            map.remove("output_dir");
        }
        key
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESULT_FILE);
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// Every `result.json` below `root`, in path order.
pub fn find_records(root: &Path) -> Result<Vec<(PathBuf, ResultRecord)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::load(&dir, e))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == RESULT_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|p| ResultRecord::load(&p).map(|r| (p, r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 when `n == 1`.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Contract("mean of no values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub joint_goal_accuracy: MeanStd,
    pub per_domain_jga: BTreeMap<Domain, MeanStd>,
    pub slot_accuracy: BTreeMap<String, MeanStd>,
}

/// Mean and sample standard deviation of every metric across seeds.
pub fn aggregate_seeds(records: &[ResultRecord]) -> Result<SeedSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("no records to aggregate".into()))?;
    let key = first.config_key();
    if let Some(other) = records.iter().find(|r| r.config_key() != key) {
        return Err(Error::Contract(format!(
            "records {} and {} differ in more than the seed",
            first.run_id, other.run_id
        )));
    }
    // Summation order is fixed so the summary does not depend on record order.
    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.seed, &a.run_id).cmp(&(b.seed, &b.run_id)));
    let jga: Vec<f64> = sorted.iter().map(|r| r.scores.joint_goal_accuracy).collect();
    let collect = |get: &dyn Fn(&ResultRecord) -> Vec<(String, f64)>| -> BTreeMap<String, Vec<f64>> {
        let mut by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &sorted {
            for (k, v) in get(r) {
                by_key.entry(k).or_default().push(v);
            }
        }
        by_key
    };
    let domain_values = collect(&|r| {
        r.scores
            .per_domain_jga
            .iter()
            .map(|(d, v)| (d.as_str().to_string(), *v))
            .collect()
    });
    let slot_values = collect(&|r| r.scores.slot_accuracy.iter().map(|(k, v)| (k.clone(), *v)).collect());
    let mut per_domain = BTreeMap::new();
    for (d, v) in domain_values {
        per_domain.insert(d.parse::<Domain>()?, mean_std(&v)?);
    }
    let mut slot_accuracy = BTreeMap::new();
    for (k, v) in slot_values {
        slot_accuracy.insert(k, mean_std(&v)?);
    }
    Ok(SeedSummary {
        config: key,
        seeds: sorted.iter().map(|r| r.seed).collect(),
        joint_goal_accuracy: mean_std(&jga)?,
        per_domain_jga: per_domain,
        slot_accuracy,
    })
}

/// Backend that answers every source with the gold target recorded for it.
/// Scoring its output must give perfect accuracy.
#[derive(Debug, Clone, Default)]
pub struct EchoGoldBackend {
    answers: HashMap<String, String>,
}

impl EchoGoldBackend {
    pub fn from_examples(examples: impl IntoIterator<Item = TrainingExample>) -> Result<Self> {
        let mut answers: HashMap<String, String> = HashMap::new();
        for ex in examples {
            match answers.get(&ex.source) {
                Some(existing) if *existing != ex.target => {
                    return Err(Error::Contract(format!(
                        "source of {}#{}:{} maps to both `{existing}` and `{}`",
                        ex.dialogue_id, ex.turn_index, ex.slot_id, ex.target
                    )));
                }
                Some(_) => {}
                None => {
                    answers.insert(ex.source, ex.target);
                }
            }
        }
        Ok(EchoGoldBackend { answers })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl Seq2SeqBackend for EchoGoldBackend {
    fn name(&self) -> &str {
        "echo-gold"
    }

    fn concurrent_generation(&self) -> bool {
        true
    }

    fn max_source_length(&self) -> usize {
        usize::MAX
    }

    fn count_source_tokens(&self, source: &str) -> usize {
        source.split_whitespace().count() + 1
    }

    fn loss(&self, _batch: &[TrainingExample]) -> Result<f64> {
        Ok(0.0)
    }

    fn train_step(&mut self, _batch: &[TrainingExample]) -> Result<f64> {
        Err(Error::Capability("the echo-gold backend cannot be trained".into()))
    }

    fn generate_greedy(&self, source: &str, _max_target_length: usize) -> Result<String> {
        self.answers
            .get(source)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no recorded answer for source `{source}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Turn};
    use crate::prompting::expand_corpus;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn state(pairs: &[(&str, &str)]) -> BeliefState {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn jga_examples() {
        let g = vec![
            state(&[("hotel-stars", "4")]),
            state(&[("hotel-stars", "4"), ("hotel-area", "north")]),
        ];
        assert_eq!(joint_goal_accuracy(&g, &g).unwrap(), 1.0);
        let p = vec![g[0].clone(), state(&[("hotel-stars", "4"), ("hotel-area", "south")])];
        assert_eq!(joint_goal_accuracy(&p, &g).unwrap(), 0.5);
        assert!(matches!(joint_goal_accuracy(&p[..1], &g), Err(Error::Contract(_))));
    }

    #[test]
    fn slot_accuracy_examples() {
        let schema = Schema::canonical();
        let empty = vec![BeliefState::new(); 3];
        assert_eq!(slot_accuracy(&empty, &empty, "taxi-leaveat", &schema).unwrap(), 1.0);
        let fours = vec![state(&[("hotel-stars", "4")]); 3];
        assert_eq!(slot_accuracy(&fours, &fours, "hotel-stars", &schema).unwrap(), 1.0);
        assert!(matches!(
            slot_accuracy(&fours, &fours, "hotel-color", &schema),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let s = mean_std(&[30.0, 32.0, 34.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (32.0, 2.0, 3));
        let one = mean_std(&[0.4]).unwrap();
        assert_eq!((one.mean, one.std, one.n), (0.4, 0.0, 1));
    }

    fn record(seed: u64, jga: f64, variant: DescriptionVariant) -> ResultRecord {
        ResultRecord {
            run_id: format!("run-{seed}"),
            config: serde_json::json!({"seed": seed, "variant": variant.as_str(), "output_dir": format!("/tmp/{seed}")}),
            seed,
            protocol: "zero_shot".into(),
            target_domain: Some(Domain::Taxi),
            variant,
            backend: "tiny".into(),
            checkpoint_hash: String::new(),
            evaluated_domains: BTreeSet::from([Domain::Taxi]),
            scores: Scores {
                joint_goal_accuracy: jga,
                per_domain_jga: BTreeMap::from([(Domain::Taxi, jga)]),
                slot_accuracy: BTreeMap::from([("taxi-leaveat".to_string(), jga.sqrt())]),
                n_turns: 10,
                n_dialogues: 2,
            },
            predictions: PREDICTIONS_FILE.into(),
        }
    }

    #[test]
    fn aggregation_ignores_order_and_rejects_mixed_configs() {
        let v = DescriptionVariant::SlotType;
        let recs = vec![record(0, 0.1, v), record(1, 0.7, v), record(2, 0.3, v)];
        let rev: Vec<ResultRecord> = recs.iter().rev().cloned().collect();
        assert_eq!(aggregate_seeds(&recs).unwrap(), aggregate_seeds(&rev).unwrap());
        let mut mixed = recs.clone();
        mixed.push(record(3, 0.2, DescriptionVariant::RawName));
        assert!(matches!(aggregate_seeds(&mixed), Err(Error::Contract(_))));
    }

    struct ConstBackend {
        answer: &'static str,
        calls: AtomicUsize,
    }

    impl Seq2SeqBackend for ConstBackend {
        fn name(&self) -> &str {
            "const"
        }
        fn concurrent_generation(&self) -> bool {
            false
        }
        fn max_source_length(&self) -> usize {
            512
        }
        fn count_source_tokens(&self, source: &str) -> usize {
            source.split_whitespace().count()
        }
        fn loss(&self, _: &[TrainingExample]) -> Result<f64> {
            Ok(0.0)
        }
        fn train_step(&mut self, _: &[TrainingExample]) -> Result<f64> {
            Ok(0.0)
        }
        fn generate_greedy(&self, _: &str, _: usize) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.answer.to_string())
        }
    }

    fn one_turn_dialogue() -> Dialogue {
        Dialogue {
            dialogue_id: "d".into(),
            partition: Default::default(),
            active_domains: BTreeSet::from([Domain::Taxi]),
            turns: vec![Turn {
                index: 1,
                system_utterance: String::new(),
                user_utterance: "i need a taxi".into(),
                gold_state: BeliefState::new(),
            }],
        }
    }

    #[test]
    fn predict_state_queries_each_slot_once() {
        let schema = Schema::canonical();
        let backend = ConstBackend {
            answer: "None",
            calls: AtomicUsize::new(0),
        };
        let opts = PredictOptions {
            seed: 0,
            max_target_length: 8,
            normalizer: ValueNormalizer::bundled(),
        };
        let taxi = BTreeSet::from([Domain::Taxi]);
        let s = predict_state(
            &backend,
            &one_turn_dialogue(),
            1,
            &schema,
            DescriptionVariant::SlotType,
            &taxi,
            &opts,
        )
        .unwrap();
        assert!(s.is_empty());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 4);
        assert!(matches!(
            predict_state(
                &backend,
                &one_turn_dialogue(),
                2,
                &schema,
                DescriptionVariant::SlotType,
                &taxi,
                &opts
            ),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn echo_gold_reproduces_gold_states() {
        let schema = Schema::canonical();
        let corpus = generate_synthetic(&schema, 6, 4, 9);
        let all = schema.domains();
        for variant in DescriptionVariant::ALL {
            let examples = expand_corpus(&corpus, &schema, variant, 3, None)
                .collect::<Result<Vec<_>>>()
                .unwrap();
            let backend = EchoGoldBackend::from_examples(examples).unwrap();
            let opts = PredictOptions {
                seed: 3,
                max_target_length: 8,
                normalizer: ValueNormalizer::bundled(),
            };
            let (turns, scores) = evaluate(&backend, &corpus, &schema, variant, &all, &opts).unwrap();
            assert_eq!(scores.joint_goal_accuracy, 1.0, "{variant:?}");
            assert!(scores.slot_accuracy.values().all(|&a| a == 1.0));
            for t in &turns {
                assert_eq!(t.predicted, t.gold);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(PREDICTIONS_FILE);
        let turns = vec![TurnPrediction {
            dialogue_id: "a".into(),
            turn_index: 1,
            active_domains: BTreeSet::from([Domain::Hotel]),
            gold: state(&[("hotel-stars", "4")]),
            predicted: BeliefState::new(),
        }];
        write_predictions(&path, &turns).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), turns);
    }

    fn arb_state() -> impl Strategy<Value = BeliefState> {
        proptest::collection::btree_map(
            prop_oneof![Just("hotel-stars"), Just("hotel-area"), Just("taxi-leaveat")].prop_map(String::from),
            prop_oneof![Just("1"), Just("2"), Just("north"), Just("dontcare")].prop_map(String::from),
            0..3,
        )
    }

    proptest! {
        #[test]
        fn jga_never_exceeds_slot_accuracy(
            pairs in proptest::collection::vec((arb_state(), arb_state()), 1..12)
        ) {
            let schema = Schema::canonical();
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let jga = joint_goal_accuracy(&p, &g).unwrap();
            for slot in ["hotel-stars", "hotel-area", "taxi-leaveat"] {
                prop_assert!(jga <= slot_accuracy(&p, &g, slot, &schema).unwrap());
            }
        }

        #[test]
        fn renormalizing_changes_nothing(
            pairs in proptest::collection::vec((arb_state(), arb_state()), 1..12)
        ) {
            let n = ValueNormalizer::bundled();
            let slots: BTreeSet<String> = ["hotel-stars", "hotel-area", "taxi-leaveat"].map(String::from).into();
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let p2: Vec<_> = p.iter().map(|s| restrict_state(s, &slots, n)).collect();
            let g2: Vec<_> = g.iter().map(|s| restrict_state(s, &slots, n)).collect();
            prop_assert_eq!(joint_goal_accuracy(&p, &g).unwrap(), joint_goal_accuracy(&p2, &g2).unwrap());
        }
    }
}
