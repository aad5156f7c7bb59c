//! The three experimental protocols: zero-shot (leave one domain out),
//! few-shot fine-tuning on a sample of the held-out domain, and full-shot
//! training with early stopping on dev loss.
//!
//! Every run lives in its own directory under `output_dir`, named after the
//! protocol, target, variant, seed and a hash of the resolved configuration.
//! A finished run holds `manifest.json` and a checkpoint whose file name
//! carries its content hash; running the same configuration again returns the
//! existing result. Tiny-backend runs also leave `resume.json` after every
//! epoch so an interrupted run continues bit-exactly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    assign_partitions, corpus_fingerprint, generate_synthetic, load_corpus, sample_few_shot, split_full_shot,
    split_zero_shot, CorpusSplit, Dialogue, ValueNormalizer,
};
use crate::error::{Error, Result};
use crate::evaluator::{self, PredictOptions, ResultRecord, PREDICTIONS_FILE, RESULT_FILE};
use crate::model::{
    load_pretrained, Checkpoint, OptimizerConfig, PretrainedBackend, PretrainedConfig, RngState, Seq2SeqBackend,
    TinyBackend, TinyConfig, WordTokenizer,
};
use crate::prompting::{build_fitted_example, TrainingExample};
use crate::schema::{describe, DescriptionVariant, Domain, Schema};

/// Relative data paths are resolved against this directory when it is set.
pub const DATA_ROOT_ENV: &str = "DST_DATA_ROOT";

pub const MANIFEST_FILE: &str = "manifest.json";
const RESUME_FILE: &str = "resume.json";
const BEST_FILE: &str = "best.json";
const PRETRAINED_DIR: &str = "model";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    ZeroShot,
    FewShot,
    FullShot,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ZeroShot => "zero_shot",
            Protocol::FewShot => "few_shot",
            Protocol::FullShot => "full_shot",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Tiny,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dialogues: usize,
    pub max_turns: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dialogues: 200,
            max_turns: 4,
            seed: 0,
            dev_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A MultiWOZ-format directory or file, or a preprocessed `.jsonl` corpus.
    Corpus {
        path: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// One experiment. Unset `epochs` / `batch_size` take the protocol defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub target_domain: Option<Domain>,
    pub variant: DescriptionVariant,
    pub seed: u64,
    pub epochs: Option<usize>,
    /// Epochs of the zero-shot base run that few-shot fine-tuning starts from.
    pub base_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub few_shot_ratio: Option<f64>,
    /// Few-shot only: also replay the source-domain training examples.
    pub mix_source: bool,
    /// Full-shot only: epochs without dev-loss improvement before stopping.
    pub patience: usize,
    /// Share of training dialogues held out as dev when the corpus has no dev partition.
    pub dev_fraction: f64,
    pub backend: BackendKind,
    pub tiny: TinyConfig,
    pub pretrained: PretrainedConfig,
    pub max_source_length: usize,
    pub max_target_length: usize,
    /// Restricts the schema (and synthetic data) to these domains.
    pub domains: Option<BTreeSet<Domain>>,
    pub schema: Option<PathBuf>,
    pub alias_table: Option<PathBuf>,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::ZeroShot,
            target_domain: None,
            variant: DescriptionVariant::SlotType,
            seed: 0,
            epochs: None,
            base_epochs: None,
            batch_size: None,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 0,
            few_shot_ratio: None,
            mix_source: false,
            patience: 1,
            dev_fraction: 0.1,
            backend: BackendKind::Tiny,
            tiny: TinyConfig::default(),
            pretrained: PretrainedConfig::default(),
            max_source_length: 512,
            max_target_length: crate::model::DEFAULT_MAX_TARGET_LENGTH,
            domains: None,
            schema: None,
            alias_table: None,
            data: DataSource::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn default_epochs(protocol: Protocol) -> usize {
    match protocol {
        Protocol::ZeroShot => 5,
        Protocol::FewShot | Protocol::FullShot => 10,
    }
}

fn default_batch_size(protocol: Protocol) -> usize {
    match protocol {
        Protocol::ZeroShot | Protocol::FewShot => 128,
        Protocol::FullShot => 64,
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `dotted.key=value` override. The value is read as a TOML
    /// literal and falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        for (i, part) in path.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
            if i + 1 == path.len() {
                table.insert(part.to_string(), parse_override_value(raw.trim()));
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(default_epochs(self.protocol))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(default_batch_size(self.protocol))
    }

    /// Copy with protocol defaults written out; two configs that train the
    /// same way resolve to the same value.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.epochs = Some(self.epochs());
        out.batch_size = Some(self.batch_size());
        if out.protocol == Protocol::FewShot {
            out.base_epochs = Some(self.base_epochs.unwrap_or(default_epochs(Protocol::ZeroShot)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.protocol {
            Protocol::ZeroShot | Protocol::FewShot if self.target_domain.is_none() => {
                return fail(format!("{} needs target_domain", self.protocol));
            }
            Protocol::FullShot if self.target_domain.is_some() => {
                return fail("full_shot trains on every domain; drop target_domain".into());
            }
            _ => {}
        }
        if self.protocol == Protocol::FewShot {
            match self.few_shot_ratio {
                Some(r) if r > 0.0 && r <= 1.0 => {}
                Some(r) => return fail(format!("few_shot_ratio must lie in (0, 1], got {r}")),
                None => return fail("few_shot needs few_shot_ratio".into()),
            }
        }
        if self.epochs() == 0 || self.batch_size() == 0 || self.base_epochs == Some(0) {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.max_source_length < 2 || self.max_target_length == 0 {
            return fail("max_source_length must be >= 2 and max_target_length >= 1".into());
        }
        if let (Some(t), Some(ds)) = (self.target_domain, &self.domains) {
            if !ds.contains(&t) {
                return fail(format!("target_domain {t} is not among the configured domains"));
            }
        }
        self.tiny.validate().map_err(Error::Config)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..Default::default()
        }
    }

    /// Domains whose slots are scored: the target for zero/few-shot, all for full-shot.
    pub fn evaluation_domains(&self, schema: &Schema) -> BTreeSet<Domain> {
        match self.target_domain {
            Some(t) if self.protocol != Protocol::FullShot => BTreeSet::from([t]),
            _ => schema.domains(),
        }
    }

    /// Stable run identifier: readable fields plus a hash of the resolved
    /// configuration without `output_dir`.
    pub fn run_id(&self) -> String {
        let mut resolved = self.resolved();
        resolved.output_dir = PathBuf::new();
        let digest = hex::encode(Sha256::digest(
            serde_json::to_vec(&resolved).expect("config serializes"),
        ));
        let target = self.target_domain.map_or("all", Domain::as_str);
        let ratio = match (self.protocol, self.few_shot_ratio) {
            (Protocol::FewShot, Some(r)) => format!("-r{r}"),
            _ => String::new(),
        };
        format!(
            "{}-{target}-{}{ratio}-s{}-{}",
            self.protocol,
            self.variant,
            self.seed,
            &digest[..12]
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    /// Zero-shot run that a few-shot configuration fine-tunes from.
    pub fn base_config(&self) -> Self {
        let mut base = self.clone();
        base.protocol = Protocol::ZeroShot;
        base.epochs = Some(self.base_epochs.unwrap_or(default_epochs(Protocol::ZeroShot)));
        base.base_epochs = None;
        base.few_shot_ratio = None;
        base.mix_source = false;
        base.resolved()
    }
}

/// Schema, dialogues and normalizer for one configuration.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub schema: Schema,
    pub dialogues: Vec<Dialogue>,
    pub normalizer: ValueNormalizer,
    pub corpus_fingerprint: String,
    pub schema_fingerprint: String,
}

fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let mut schema = match &config.schema {
        Some(p) => Schema::load(&resolve_data_path(p))?,
        None => Schema::canonical(),
    };
    if let Some(domains) = &config.domains {
        schema = schema.restrict_to(domains);
    }
    if let Some(t) = config.target_domain {
        if !schema.domains().contains(&t) {
            return Err(Error::Config(format!("target_domain {t} has no slots in the schema")));
        }
    }
    let normalizer = match &config.alias_table {
        Some(p) => ValueNormalizer::load(&resolve_data_path(p))?,
        None => ValueNormalizer::bundled().clone(),
    };
    let mut dialogues = match &config.data {
        DataSource::Corpus { path } => load_corpus(&resolve_data_path(path), &schema, &normalizer)?,
        DataSource::Synthetic(spec) => {
            let mut d = generate_synthetic(&schema, spec.dialogues, spec.max_turns, spec.seed);
            assign_partitions(&mut d, spec.dev_fraction, spec.test_fraction, spec.seed);
            d
        }
    };
    if config.domains.is_some() {
        let keep = schema.domains();
        dialogues.retain(|d| d.active_domains.is_subset(&keep));
    }
    let schema_fingerprint = hex::encode(Sha256::digest(schema.to_json()));
    Ok(ExperimentData {
        corpus_fingerprint: corpus_fingerprint(&dialogues),
        schema_fingerprint,
        schema,
        dialogues,
        normalizer,
    })
}

/// Every word any description variant can produce for the schema's slots.
pub fn description_texts(schema: &Schema) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for spec in schema.slots() {
        for variant in DescriptionVariant::ALL {
            out.push(describe(spec, variant, &mut rng)?);
        }
    }
    Ok(out)
}

/// Examples for every turn of `dialogues` over the slots chosen by
/// `domains_of`, sorted by (dialogue, turn, slot).
fn expand(
    dialogues: &[Dialogue],
    schema: &Schema,
    variant: DescriptionVariant,
    seed: u64,
    domains_of: impl Fn(&Dialogue) -> BTreeSet<Domain>,
    max_tokens: usize,
    count: &dyn Fn(&str) -> usize,
) -> Result<Vec<TrainingExample>> {
    let mut ordered: Vec<&Dialogue> = dialogues.iter().collect();
    ordered.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    let mut out = Vec::new();
    for d in ordered {
        let domains = domains_of(d);
        let mut slots: Vec<_> = schema.slots_in(&domains).collect();
        slots.sort_by_key(|s| s.id());
        for t in 1..=d.turns.len() {
            for spec in &slots {
                out.push(build_fitted_example(d, t, spec, variant, seed, max_tokens, count)?);
            }
        }
    }
    Ok(out)
}

fn word_count(source: &str) -> usize {
    source.split_whitespace().count() + 1
}

fn examples_fingerprint(examples: &[TrainingExample]) -> String {
    let mut h = Sha256::new();
    for ex in examples {
        h.update(serde_json::to_vec(ex).expect("example serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Fails if any part of a zero-shot training stream belongs to `target`.
pub fn check_no_leakage(train: &[Dialogue], examples: &[TrainingExample], target: Domain) -> Result<()> {
    let prefix = format!("{target}-");
    for d in train {
        let in_state = d
            .turns
            .iter()
            .flat_map(|t| t.gold_state.keys())
            .find(|k| k.starts_with(&prefix));
        if d.touches(target) || in_state.is_some() {
            return Err(Error::Leakage(format!(
                "training dialogue {} carries {target} content",
                d.dialogue_id
            )));
        }
    }
    if let Some(ex) = examples.iter().find(|e| e.slot_id.starts_with(&prefix)) {
        return Err(Error::Leakage(format!(
            "training example {}#{} targets slot {}",
            ex.dialogue_id, ex.turn_index, ex.slot_id
        )));
    }
    Ok(())
}

/// Optimizer steps for `epochs` passes over `n` examples in batches of `b`.
pub fn planned_steps(epochs: usize, n: usize, b: usize) -> u64 {
    (epochs * n.div_ceil(b)) as u64
}

/// Example order for one epoch; depends only on (seed, epoch).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean batch loss of one pass over `examples`.
pub fn run_epoch(
    backend: &mut dyn Seq2SeqBackend,
    examples: &[TrainingExample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<(f64, u64)> {
    let order = epoch_order(seed, epoch, examples.len());
    let mut total = 0.0;
    let mut steps = 0u64;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        total += backend.train_step(&batch)?;
        steps += 1;
    }
    Ok((if steps == 0 { 0.0 } else { total / steps as f64 }, steps))
}

/// Mean batch loss without updates.
pub fn mean_loss(backend: &dyn Seq2SeqBackend, examples: &[TrainingExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("loss over no examples".into()));
    }
    let mut weighted = 0.0;
    for chunk in examples.chunks(batch_size) {
        weighted += backend.loss(chunk)? * chunk.len() as f64;
    }
    Ok(weighted / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower dev loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, dev_loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if dev_loss >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, dev_loss));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// 1-based epoch with the lowest dev loss so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_dialogues: usize,
    pub dev_carved_from_train: bool,
    pub warnings: Vec<String>,
}

impl SplitSummary {
    fn of(split: &CorpusSplit) -> Self {
        SplitSummary {
            train_dialogues: split.train.len(),
            dev_dialogues: split.dev.len(),
            test_dialogues: split.test.len(),
            dev_carved_from_train: split.provenance.dev_carved_from_train,
            warnings: split.provenance.warnings.clone(),
        }
    }
}

/// Everything needed to reproduce a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub corpus_fingerprint: String,
    pub schema_fingerprint: String,
    pub alias_table_version: u32,
    pub train_examples_fingerprint: String,
    pub split: SplitSummary,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub epochs_planned: usize,
    pub epochs_completed: usize,
    pub steps: u64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_dev_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    /// Few-shot only: the sampled target-domain dialogues.
    pub sampled_dialogue_ids: Vec<String>,
    pub base_run: Option<String>,
    pub base_checkpoint_hash: Option<String>,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub checkpoint_hash: String,
}

/// A finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRef {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

impl CheckpointRef {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(CheckpointRef {
            run_dir: run_dir.to_path_buf(),
            manifest,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir.join(&self.manifest.checkpoint)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join(MANIFEST_FILE)
    }

    /// Loads the trained backend for inference.
    pub fn load_backend(&self) -> Result<Box<dyn Seq2SeqBackend>> {
        let config = &self.manifest.config;
        Ok(match config.backend {
            BackendKind::Tiny => Box::new(TinyBackend::from_checkpoint(&Checkpoint::load(
                &self.checkpoint_path(),
            )?)?),
            BackendKind::Pretrained => Box::new(load_pretrained(&pretrained_config(config, self.checkpoint_path()))?),
        })
    }
}

/// How far a run got in this session.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Complete(CheckpointRef),
    /// Stopped early on request; `resume.json` holds the state.
    Paused {
        run_dir: PathBuf,
        epochs_completed: usize,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Pause once this many epochs are done in total (tiny backend only).
    pub pause_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    epochs_completed: usize,
    steps: u64,
    train_losses: Vec<f64>,
    dev_losses: Vec<f64>,
    best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeEcho {
    run_id: String,
    config: ExperimentConfig,
    progress: Progress,
}

enum Backend {
    Tiny(TinyBackend),
    Pretrained(PretrainedBackend),
}

impl Backend {
    fn as_dyn(&self) -> &dyn Seq2SeqBackend {
        match self {
            Backend::Tiny(b) => b,
            Backend::Pretrained(b) => b,
        }
    }

    fn as_dyn_mut(&mut self) -> &mut dyn Seq2SeqBackend {
        match self {
            Backend::Tiny(b) => b,
            Backend::Pretrained(b) => b,
        }
    }
}

fn pretrained_config(config: &ExperimentConfig, model_dir: PathBuf) -> PretrainedConfig {
    PretrainedConfig {
        model_dir,
        max_source_length: config.max_source_length,
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        seed: config.seed,
        ..config.pretrained.clone()
    }
}

enum Init {
    Fresh,
    FromBase(CheckpointRef),
}

struct Plan {
    config: ExperimentConfig,
    data: ExperimentData,
    split: CorpusSplit,
    train: Vec<Dialogue>,
    train_domains: Box<dyn Fn(&Dialogue) -> BTreeSet<Domain>>,
    /// Examples replayed alongside `train` (few-shot `mix_source`).
    extra_examples: Vec<TrainingExample>,
    guard_target: Option<Domain>,
    early_stopping: bool,
    sampled_dialogue_ids: Vec<String>,
    init: Init,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn finished(config: &ExperimentConfig) -> Option<CheckpointRef> {
    let run_dir = config.run_dir();
    let existing = CheckpointRef::open(&run_dir).ok()?;
    (existing.manifest.config == config.resolved() && existing.checkpoint_path().exists()).then_some(existing)
}

fn execute(plan: Plan, opts: &RunOptions) -> Result<RunStatus> {
    let config = plan.config.resolved();
    let run_id = config.run_id();
    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    let seed = config.seed;
    let schema = &plan.data.schema;

    // Backend and examples. Fresh tiny runs fit the vocabulary on the examples,
    // everything else needs the backend first to measure source lengths.
    let resume_path = run_dir.join(RESUME_FILE);
    let resumed: Option<Checkpoint> = match (config.backend, resume_path.exists()) {
        (BackendKind::Tiny, true) => {
            let ckpt = Checkpoint::load(&resume_path)?;
            let echo: ResumeEcho = serde_json::from_value(ckpt.config_echo.clone())
                .map_err(|e| Error::parse(resume_path.display().to_string(), e))?;
            (echo.config == config).then_some(ckpt)
        }
        _ => None,
    };
    let mut progress = Progress::default();
    let mut backend = match (&resumed, &plan.init, config.backend) {
        (Some(ckpt), _, _) => {
            let echo: ResumeEcho = serde_json::from_value(ckpt.config_echo.clone()).expect("checked above");
            progress = echo.progress;
            log::info!("{run_id}: resuming after epoch {}", progress.epochs_completed);
            Some(Backend::Tiny(TinyBackend::from_checkpoint(ckpt)?))
        }
        (None, Init::FromBase(base), BackendKind::Tiny) => {
            let mut b = TinyBackend::from_checkpoint(&Checkpoint::load(&base.checkpoint_path())?)?;
            b.set_optimizer_config(config.optimizer());
            b.reset_optimizer();
            Some(Backend::Tiny(b))
        }
        (None, Init::FromBase(base), BackendKind::Pretrained) => Some(Backend::Pretrained(load_pretrained(
            &pretrained_config(&config, base.checkpoint_path()),
        )?)),
        (None, Init::Fresh, BackendKind::Pretrained) => Some(Backend::Pretrained(load_pretrained(
            &pretrained_config(&config, config.pretrained.model_dir.clone()),
        )?)),
        (None, Init::Fresh, BackendKind::Tiny) => None,
    };
    let (max_len, counter): (usize, Box<dyn Fn(&str) -> usize + '_>) = match &backend {
        Some(b) => (
            b.as_dyn().max_source_length(),
            Box::new(|s: &str| b.as_dyn().count_source_tokens(s)),
        ),
        None => (config.max_source_length, Box::new(word_count)),
    };
    let mut train_examples = expand(
        &plan.train,
        schema,
        config.variant,
        seed,
        &plan.train_domains,
        max_len,
        &*counter,
    )?;
    train_examples.extend(plan.extra_examples.iter().cloned());
    let dev_examples = if plan.early_stopping {
        expand(
            &plan.split.dev,
            schema,
            config.variant,
            seed,
            |_| schema.domains(),
            max_len,
            &*counter,
        )?
    } else {
        Vec::new()
    };
    drop(counter);
    if let Some(target) = plan.guard_target {
        check_no_leakage(&plan.train, &train_examples, target)?;
    }
    if train_examples.is_empty() {
        return Err(Error::Config(format!("{run_id}: no training examples")));
    }
    if plan.early_stopping && dev_examples.is_empty() {
        return Err(Error::Config(format!("{run_id}: early stopping needs dev dialogues")));
    }
    let mut backend = match backend.take() {
        Some(b) => b,
        None => {
            let mut texts: Vec<&str> = Vec::new();
            for ex in &train_examples {
                texts.push(&ex.source);
                texts.push(&ex.target);
            }
            let descriptions = description_texts(schema)?;
            texts.extend(descriptions.iter().map(String::as_str));
            let vocab = WordTokenizer::fit(texts);
            Backend::Tiny(TinyBackend::new(
                vocab,
                config.tiny.clone(),
                config.optimizer(),
                config.max_source_length,
                seed,
            )?)
        }
    };

    let epochs = config.epochs();
    let batch_size = config.batch_size();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut stopped = false;
    for (i, &loss) in progress.dev_losses.iter().enumerate() {
        stopped = stopper.observe(i + 1, loss) == StopDecision::Stop;
    }
    let mut best: Option<TinyBackend> = None;
    if plan.early_stopping && progress.best_epoch.is_some() {
        best = Some(TinyBackend::from_checkpoint(&Checkpoint::load(
            &run_dir.join(BEST_FILE),
        )?)?);
    }

    while progress.epochs_completed < epochs && !stopped {
        if let Some(limit) = opts.pause_after_epochs {
            if progress.epochs_completed >= limit && matches!(backend, Backend::Tiny(_)) {
                return Ok(RunStatus::Paused {
                    run_dir,
                    epochs_completed: progress.epochs_completed,
                });
            }
        }
        let epoch = progress.epochs_completed;
        let (loss, steps) = run_epoch(backend.as_dyn_mut(), &train_examples, batch_size, seed, epoch)?;
        progress.epochs_completed += 1;
        progress.steps += steps;
        progress.train_losses.push(loss);
        log::info!("{run_id}: epoch {} train loss {loss:.6}", progress.epochs_completed);
        if plan.early_stopping {
            let dev = mean_loss(backend.as_dyn(), &dev_examples, batch_size)?;
            progress.dev_losses.push(dev);
            log::info!("{run_id}: epoch {} dev loss {dev:.6}", progress.epochs_completed);
            match stopper.observe(progress.epochs_completed, dev) {
                StopDecision::Improved => {
                    progress.best_epoch = Some(progress.epochs_completed);
                    match &backend {
                        Backend::Tiny(b) => best = Some(b.clone()),
                        Backend::Pretrained(b) => b.save(&run_dir.join(PRETRAINED_DIR))?,
                    }
                }
                StopDecision::Continue => {}
                StopDecision::Stop => stopped = true,
            }
        }
        if let Backend::Tiny(b) = &backend {
            let echo = ResumeEcho {
                run_id: run_id.clone(),
                config: config.clone(),
                progress: progress.clone(),
            };
            let rng = RngState {
                seed,
                epoch: progress.epochs_completed,
                step_in_epoch: 0,
            };
            if let (Some(best), StopDecision::Improved) = (&best, last_decision(&progress)) {
                let best_ckpt = best.to_checkpoint(serde_json::Value::Null, rng);
                std::fs::write(run_dir.join(BEST_FILE), best_ckpt.to_bytes())?;
            }
            let ckpt = b.to_checkpoint(serde_json::to_value(&echo).expect("echo serializes"), rng);
            std::fs::write(&resume_path, ckpt.to_bytes())?;
        }
    }

    // Final artifact: the best dev-loss state under early stopping, else the last.
    let mut echoed = config.clone();
    echoed.output_dir = PathBuf::new();
    let echo = serde_json::json!({ "run_id": run_id, "config": echoed });
    let (checkpoint, checkpoint_hash) = match &backend {
        Backend::Tiny(last) => {
            let (chosen, epoch) = match (&best, progress.best_epoch) {
                (Some(b), Some(e)) if plan.early_stopping => (b, e),
                _ => (last, progress.epochs_completed),
            };
            let rng = RngState {
                seed,
                epoch,
                step_in_epoch: 0,
            };
            let (path, hash) = chosen.to_checkpoint(echo, rng).save(&run_dir)?;
            let name = path.file_name().expect("file name").to_string_lossy().into_owned();
            (name, hash)
        }
        Backend::Pretrained(b) => {
            if !plan.early_stopping {
                b.save(&run_dir.join(PRETRAINED_DIR))?;
            }
            let mut h = Sha256::new();
            h.update(run_id.as_bytes());
            h.update(progress.steps.to_le_bytes());
            (PRETRAINED_DIR.to_string(), hex::encode(h.finalize()))
        }
    };
    let (base_run, base_checkpoint_hash) = match &plan.init {
        Init::FromBase(base) => (
            Some(base.manifest.run_id.clone()),
            Some(base.manifest.checkpoint_hash.clone()),
        ),
        Init::Fresh => (None, None),
    };
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        run_id: run_id.clone(),
        seed,
        corpus_fingerprint: plan.data.corpus_fingerprint.clone(),
        schema_fingerprint: plan.data.schema_fingerprint.clone(),
        alias_table_version: plan.data.normalizer.version(),
        train_examples_fingerprint: examples_fingerprint(&train_examples),
        split: SplitSummary::of(&plan.split),
        train_examples: train_examples.len(),
        dev_examples: dev_examples.len(),
        epochs_planned: epochs,
        epochs_completed: progress.epochs_completed,
        steps: progress.steps,
        epoch_train_loss: progress.train_losses,
        epoch_dev_loss: progress.dev_losses,
        best_epoch: progress.best_epoch,
        sampled_dialogue_ids: plan.sampled_dialogue_ids,
        base_run,
        base_checkpoint_hash,
        checkpoint,
        checkpoint_hash,
        config,
    };
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    for stale in [RESUME_FILE, BEST_FILE] {
        let p = run_dir.join(stale);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    Ok(RunStatus::Complete(CheckpointRef { run_dir, manifest }))
}

fn last_decision(progress: &Progress) -> StopDecision {
    if progress.best_epoch == Some(progress.epochs_completed) {
        StopDecision::Improved
    } else {
        StopDecision::Continue
    }
}

fn into_complete(status: RunStatus) -> Result<CheckpointRef> {
    match status {
        RunStatus::Complete(c) => Ok(c),
        RunStatus::Paused { run_dir, .. } => Err(Error::Contract(format!(
            "run in {} paused before completion",
            run_dir.display()
        ))),
    }
}

fn require_protocol(config: &ExperimentConfig, protocol: Protocol) -> Result<()> {
    config.validate()?;
    if config.protocol != protocol {
        return Err(Error::Config(format!(
            "expected a {protocol} configuration, got {}",
            config.protocol
        )));
    }
    Ok(())
}

fn plan_zero_shot(config: &ExperimentConfig) -> Result<Plan> {
    let data = load_data(config)?;
    let target = config.target_domain.expect("validated");
    let split = split_zero_shot(&data.dialogues, target, config.dev_fraction, config.seed)?;
    let sources: BTreeSet<Domain> = data.schema.domains().into_iter().filter(|&d| d != target).collect();
    Ok(Plan {
        config: config.clone(),
        train: split.train.clone(),
        train_domains: Box::new(move |_| sources.clone()),
        extra_examples: Vec::new(),
        guard_target: Some(target),
        early_stopping: false,
        sampled_dialogue_ids: Vec::new(),
        init: Init::Fresh,
        data,
        split,
    })
}

fn plan_few_shot(config: &ExperimentConfig, init: Init) -> Result<Plan> {
    let data = load_data(config)?;
    let target = config.target_domain.expect("validated");
    let ratio = config.few_shot_ratio.expect("validated");
    let sample = sample_few_shot(&data.dialogues, target, ratio, config.seed)?;
    let split = split_zero_shot(&data.dialogues, target, config.dev_fraction, config.seed)?;
    let extra_examples = if config.mix_source {
        let sources: BTreeSet<Domain> = data.schema.domains().into_iter().filter(|&d| d != target).collect();
        expand(
            &split.train,
            &data.schema,
            config.variant,
            config.seed,
            |_| sources.clone(),
            config.max_source_length,
            &word_count,
        )?
    } else {
        Vec::new()
    };
    let mut ids: Vec<String> = sample.iter().map(|d| d.dialogue_id.clone()).collect();
    ids.sort();
    Ok(Plan {
        config: config.clone(),
        train: sample,
        train_domains: Box::new(|d: &Dialogue| d.active_domains.clone()),
        extra_examples,
        guard_target: None,
        early_stopping: false,
        sampled_dialogue_ids: ids,
        init,
        data,
        split,
    })
}

fn plan_full_shot(config: &ExperimentConfig) -> Result<Plan> {
    let data = load_data(config)?;
    let split = split_full_shot(&data.dialogues, config.dev_fraction, config.seed)?;
    let all = data.schema.domains();
    Ok(Plan {
        config: config.clone(),
        train: split.train.clone(),
        train_domains: Box::new(move |_| all.clone()),
        extra_examples: Vec::new(),
        guard_target: None,
        early_stopping: true,
        sampled_dialogue_ids: Vec::new(),
        init: Init::Fresh,
        data,
        split,
    })
}

/// The examples a tiny-backend run of `config` trains on, in stream order
/// before shuffling. Zero-shot streams pass the leakage guard.
pub fn training_stream(config: &ExperimentConfig) -> Result<Vec<TrainingExample>> {
    config.validate()?;
    let plan = match config.protocol {
        Protocol::ZeroShot => plan_zero_shot(config)?,
        Protocol::FewShot => plan_few_shot(config, Init::Fresh)?,
        Protocol::FullShot => plan_full_shot(config)?,
    };
    let mut examples = expand(
        &plan.train,
        &plan.data.schema,
        config.variant,
        config.seed,
        &plan.train_domains,
        config.max_source_length,
        &word_count,
    )?;
    examples.extend(plan.extra_examples);
    if let Some(target) = plan.guard_target {
        check_no_leakage(&plan.train, &examples, target)?;
    }
    Ok(examples)
}

/// Trains on every domain except the target for the configured epochs and
/// keeps the final-epoch checkpoint.
pub fn run_zero_shot(config: &ExperimentConfig) -> Result<CheckpointRef> {
    run_zero_shot_with(config, &RunOptions::default()).and_then(into_complete)
}

pub fn run_zero_shot_with(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunStatus> {
    require_protocol(config, Protocol::ZeroShot)?;
    if let Some(done) = finished(config) {
        return Ok(RunStatus::Complete(done));
    }
    execute(plan_zero_shot(config)?, opts)
}

/// Fine-tunes a zero-shot base checkpoint on a dialogue-level sample of the
/// target domain's training dialogues.
pub fn run_few_shot(config: &ExperimentConfig, base: &CheckpointRef) -> Result<CheckpointRef> {
    run_few_shot_with(config, base, &RunOptions::default()).and_then(into_complete)
}

pub fn run_few_shot_with(config: &ExperimentConfig, base: &CheckpointRef, opts: &RunOptions) -> Result<RunStatus> {
    require_protocol(config, Protocol::FewShot)?;
    let b = &base.manifest.config;
    if b.protocol != Protocol::ZeroShot
        || b.target_domain != config.target_domain
        || b.variant != config.variant
        || b.backend != config.backend
    {
        return Err(Error::Config(format!(
            "base run {} is not a zero-shot run for the same target, variant and backend",
            base.manifest.run_id
        )));
    }
    if let Some(done) = finished(config) {
        return Ok(RunStatus::Complete(done));
    }
    execute(plan_few_shot(config, Init::FromBase(base.clone()))?, opts)
}

/// Trains on all domains, evaluating dev loss after each epoch; keeps the
/// best dev-loss checkpoint.
pub fn run_full_shot(config: &ExperimentConfig) -> Result<CheckpointRef> {
    run_full_shot_with(config, &RunOptions::default()).and_then(into_complete)
}

pub fn run_full_shot_with(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunStatus> {
    require_protocol(config, Protocol::FullShot)?;
    if let Some(done) = finished(config) {
        return Ok(RunStatus::Complete(done));
    }
    execute(plan_full_shot(config)?, opts)
}

/// Runs whatever the protocol needs, including the zero-shot base of a
/// few-shot run.
pub fn run_protocol(config: &ExperimentConfig) -> Result<CheckpointRef> {
    config.validate()?;
    match config.protocol {
        Protocol::ZeroShot => run_zero_shot(config),
        Protocol::FullShot => run_full_shot(config),
        Protocol::FewShot => {
            let base = run_zero_shot(&config.base_config())?;
            run_few_shot(config, &base)
        }
    }
}

/// Scores a finished run on its test split and writes `result.json` and
/// the prediction dump next to the manifest. Reuses an existing record for
/// the same checkpoint.
pub fn evaluate_run(run: &CheckpointRef) -> Result<ResultRecord> {
    let record_path = run.run_dir.join(RESULT_FILE);
    if let Ok(existing) = ResultRecord::load(&record_path) {
        if existing.checkpoint_hash == run.manifest.checkpoint_hash && run.run_dir.join(&existing.predictions).exists()
        {
            return Ok(existing);
        }
    }
    let config = &run.manifest.config;
    let data = load_data(config)?;
    if data.corpus_fingerprint != run.manifest.corpus_fingerprint {
        return Err(Error::Contract(format!(
            "corpus for {} changed since training",
            run.manifest.run_id
        )));
    }
    let split = match config.protocol {
        Protocol::FullShot => split_full_shot(&data.dialogues, config.dev_fraction, config.seed)?,
        _ => split_zero_shot(
            &data.dialogues,
            config.target_domain.expect("validated"),
            config.dev_fraction,
            config.seed,
        )?,
    };
    if split.test.is_empty() {
        return Err(Error::Config(format!(
            "{}: the test split is empty",
            run.manifest.run_id
        )));
    }
    let backend = run.load_backend()?;
    let domains = config.evaluation_domains(&data.schema);
    let opts = PredictOptions {
        seed: config.seed,
        max_target_length: config.max_target_length,
        normalizer: &data.normalizer,
    };
    let (turns, scores) = evaluator::evaluate(&*backend, &split.test, &data.schema, config.variant, &domains, &opts)?;
    evaluator::write_predictions(&run.run_dir.join(PREDICTIONS_FILE), &turns)?;
    let record = ResultRecord {
        run_id: run.manifest.run_id.clone(),
        config: serde_json::to_value(config).expect("config serializes"),
        seed: config.seed,
        protocol: config.protocol.to_string(),
        target_domain: config.target_domain,
        variant: config.variant,
        backend: backend.name().to_string(),
        checkpoint_hash: run.manifest.checkpoint_hash.clone(),
        evaluated_domains: domains,
        scores,
        predictions: PREDICTIONS_FILE.to_string(),
    };
    record.save(&run.run_dir)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_examples() {
        let mut s = EarlyStopper::new(1);
        let mut epochs = 0;
        for (e, loss) in (1..=10).map(|e| (e, 10.0 - e as f64)) {
            epochs = e;
            if s.observe(e, loss) == StopDecision::Stop {
                break;
            }
        }
        assert_eq!((epochs, s.best_epoch()), (10, Some(10)));

        let mut s = EarlyStopper::new(1);
        let losses = [3.0, 2.0, 1.0, 1.5, 0.5];
        let stop = (1..).zip(losses).find(|&(e, l)| s.observe(e, l) == StopDecision::Stop);
        assert_eq!(stop.map(|(e, _)| e), Some(4));
        assert_eq!(s.best_epoch(), Some(3));
    }

    #[test]
    fn patience_two_tolerates_one_bad_epoch() {
        let mut s = EarlyStopper::new(2);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.0), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.9), StopDecision::Improved);
        assert_eq!(s.observe(4, 2.0), StopDecision::Continue);
        assert_eq!(s.observe(5, 2.0), StopDecision::Stop);
    }

    #[test]
    fn step_accounting() {
        assert_eq!(planned_steps(5, 100, 32), 20);
        assert_eq!(planned_steps(10, 64, 64), 10);
        assert_eq!(planned_steps(1, 1, 128), 1);
    }

    #[test]
    fn epoch_order_depends_on_seed_and_epoch() {
        assert_eq!(epoch_order(1, 0, 50), epoch_order(1, 0, 50));
        assert_ne!(epoch_order(1, 0, 50), epoch_order(1, 1, 50));
        assert_ne!(epoch_order(1, 0, 50), epoch_order(2, 0, 50));
        let mut sorted = epoch_order(3, 2, 50);
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.target_domain = Some(Domain::Taxi);
        c.validate().unwrap();
        c.protocol = Protocol::FewShot;
        assert!(c.validate().is_err());
        c.few_shot_ratio = Some(0.05);
        c.validate().unwrap();
        c.protocol = Protocol::FullShot;
        assert!(c.validate().is_err());
        c.target_domain = None;
        c.validate().unwrap();
        assert_eq!((c.epochs(), c.batch_size()), (10, 64));
    }

    #[test]
    fn protocol_defaults() {
        let mut c = ExperimentConfig {
            target_domain: Some(Domain::Hotel),
            ..Default::default()
        };
        assert_eq!((c.epochs(), c.batch_size(), c.learning_rate), (5, 128, 1e-4));
        c.protocol = Protocol::FewShot;
        assert_eq!(c.epochs(), 10);
        assert_eq!(c.base_config().epochs, Some(5));
        assert_eq!(c.base_config().protocol, Protocol::ZeroShot);
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_override("target_domain=taxi").unwrap();
        c.apply_override("epochs=3").unwrap();
        c.apply_override("tiny.d_model=16").unwrap();
        c.apply_override("variant=raw_name").unwrap();
        c.apply_override("learning_rate=0.001").unwrap();
        c.apply_override("data.dialogues=12").unwrap();
        assert_eq!(c.target_domain, Some(Domain::Taxi));
        assert_eq!(c.epochs, Some(3));
        assert_eq!(c.tiny.d_model, 16);
        assert_eq!(c.variant, DescriptionVariant::RawName);
        assert_eq!(c.learning_rate, 1e-3);
        assert!(matches!(&c.data, DataSource::Synthetic(s) if s.dialogues == 12));
        assert!(c.apply_override("no_such_field=1").is_err());
        assert!(c.apply_override("epochs").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig {
            target_domain: Some(Domain::Train),
            domains: Some(BTreeSet::from([Domain::Train, Domain::Taxi])),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn run_id_ignores_output_dir_and_resolves_defaults() {
        let a = ExperimentConfig {
            target_domain: Some(Domain::Taxi),
            ..Default::default()
        };
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.epochs = Some(5);
        assert_eq!(a.run_id(), b.run_id());
        b.seed = 1;
        assert_ne!(a.run_id(), b.run_id());
    }

    fn poisoned() -> Vec<Dialogue> {
        let schema = Schema::canonical();
        let mut d = generate_synthetic(&schema.restrict_to(&BTreeSet::from([Domain::Hotel])), 1, 2, 0);
        d[0].turns[1].gold_state.insert("taxi-leaveat".into(), "09:15".into());
        d
    }

    #[test]
    fn leakage_guard_catches_poisoned_dialogues() {
        let train = poisoned();
        assert!(matches!(
            check_no_leakage(&train, &[], Domain::Taxi),
            Err(Error::Leakage(_))
        ));
        let clean = generate_synthetic(
            &Schema::canonical().restrict_to(&BTreeSet::from([Domain::Hotel])),
            2,
            2,
            0,
        );
        check_no_leakage(&clean, &[], Domain::Taxi).unwrap();
        let ex = TrainingExample {
            dialogue_id: "x".into(),
            turn_index: 1,
            slot_id: "taxi-leaveat".into(),
            source: "user: hi [sep] taxi-leaveat".into(),
            target: "none".into(),
            variant: DescriptionVariant::RawName,
        };
        assert!(matches!(
            check_no_leakage(&clean, &[ex], Domain::Taxi),
            Err(Error::Leakage(_))
        ));
    }

    #[test]
    fn stray_target_slot_is_rejected_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("poisoned.jsonl");
        let mut dialogues = poisoned();
        dialogues[0].partition = crate::corpus::Partition::Train;
        let text: String = dialogues
            .iter()
            .map(|d| serde_json::to_string(d).unwrap() + "\n")
            .collect();
        std::fs::write(&corpus, text).unwrap();
        let config = ExperimentConfig {
            target_domain: Some(Domain::Taxi),
            epochs: Some(1),
            batch_size: Some(4),
            data: DataSource::Corpus { path: corpus },
            output_dir: dir.path().join("runs"),
            ..Default::default()
        };
        // The taxi slot sits outside the dialogue's active domains, so loading fails.
        let err = run_zero_shot(&config).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }
}
