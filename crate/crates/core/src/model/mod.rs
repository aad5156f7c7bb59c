//! Sequence-to-sequence backends.
//!
//! [`Seq2SeqBackend`] is the contract the trainer and evaluator program
//! against. [`TinyBackend`] is the built-in desk-scale implementation;
//! [`pretrained`] adapts an external pre-trained checkpoint.

pub mod graph;
pub mod optim;
pub mod pretrained;
pub mod tensor;
pub mod tiny;
pub mod tokenizer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompting::TrainingExample;

pub use graph::{log_softmax_at, ParamStore};
pub use optim::{AdamW, OptimizerConfig};
pub use pretrained::{load_pretrained, PretrainedBackend, PretrainedConfig};
pub use tensor::Matrix;
pub use tiny::{TinyConfig, TinySeq2Seq, TokenPair};
pub use tokenizer::WordTokenizer;

/// Maximum decoded value length when a config does not say otherwise.
pub const DEFAULT_MAX_TARGET_LENGTH: usize = 24;

/// Mean over non-pad positions of `-log softmax(logits[r])[targets[r]]`.
pub fn nll_loss(logits: &Matrix, targets: &[usize], is_pad: &[bool]) -> Result<f64> {
    if logits.rows != targets.len() || targets.len() != is_pad.len() {
        return Err(Error::Contract(format!(
            "nll_loss shapes disagree: {} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            is_pad.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, (&t, &pad)) in targets.iter().zip(is_pad).enumerate() {
        if pad {
            continue;
        }
        if t >= logits.cols {
            return Err(Error::Contract(format!(
                "target id {t} outside a vocabulary of {}",
                logits.cols
            )));
        }
        total -= log_softmax_at(logits.row(r), t);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract(
            "nll_loss over a target with no supervised tokens".into(),
        ));
    }
    Ok(total / count as f64)
}

/// What the trainer and evaluator need from a seq2seq model.
pub trait Seq2SeqBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `generate_greedy` may be called from several threads at once.
    fn concurrent_generation(&self) -> bool;

    fn max_source_length(&self) -> usize;

    /// Encoder tokens `source` occupies before clipping.
    fn count_source_tokens(&self, source: &str) -> usize;

    /// Mean token NLL of the batch targets, without updating anything.
    fn loss(&self, batch: &[TrainingExample]) -> Result<f64>;

    /// One optimizer update on the teacher-forced NLL. Returns the loss
    /// measured before the update.
    fn train_step(&mut self, batch: &[TrainingExample]) -> Result<f64>;

    fn generate_greedy(&self, source: &str, max_target_length: usize) -> Result<String>;
}

/// Built-in backend: word tokenizer + [`TinySeq2Seq`] + AdamW state.
#[derive(Debug, Clone)]
pub struct TinyBackend {
    model: TinySeq2Seq,
    tokenizer: WordTokenizer,
    optimizer: AdamW,
    optimizer_config: OptimizerConfig,
    max_source_length: usize,
    init_seed: u64,
}

impl TinyBackend {
    pub fn new(
        tokenizer: WordTokenizer,
        config: TinyConfig,
        optimizer_config: OptimizerConfig,
        max_source_length: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        if max_source_length < 2 {
            return Err(Error::Config("max_source_length must be at least 2".into()));
        }
        let model = TinySeq2Seq::new(config, tokenizer.vocab_size(), seed);
        let optimizer = AdamW::new(&model.params().tensors);
        Ok(TinyBackend {
            model,
            tokenizer,
            optimizer,
            optimizer_config,
            max_source_length,
            init_seed: seed,
        })
    }

    pub fn model(&self) -> &TinySeq2Seq {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TinySeq2Seq {
        &mut self.model
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn optimizer_config(&self) -> &OptimizerConfig {
        &self.optimizer_config
    }

    pub fn set_optimizer_config(&mut self, config: OptimizerConfig) {
        self.optimizer_config = config;
    }

    /// Starts a fresh optimizer state (used before fine-tuning).
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamW::new(&self.model.params().tensors);
    }

    /// Source ids: words, clipped from the left to fit, then end-of-sequence.
    pub fn encode_source(&self, text: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.encode(text);
        let room = self.max_source_length - 1;
        if ids.len() > room {
            ids.drain(..ids.len() - room);
        }
        ids.push(tokenizer::EOS);
        ids
    }

    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.encode(text);
        ids.push(tokenizer::EOS);
        ids
    }

    pub fn token_pairs(&self, batch: &[TrainingExample]) -> Vec<TokenPair> {
        batch
            .iter()
            .map(|ex| TokenPair {
                source: self.encode_source(&ex.source),
                target: self.encode_target(&ex.target),
            })
            .collect()
    }

    fn describe_batch(batch: &[TrainingExample]) -> String {
        let shown: Vec<String> = batch
            .iter()
            .take(4)
            .map(|e| format!("{}#{}:{}", e.dialogue_id, e.turn_index, e.slot_id))
            .collect();
        format!("{} examples, first: {}", batch.len(), shown.join(", "))
    }

    pub fn to_checkpoint(&self, config_echo: serde_json::Value, rng: RngState) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_echo,
            model: self.model.config().clone(),
            init_seed: self.init_seed,
            max_source_length: self.max_source_length,
            optimizer_config: self.optimizer_config.clone(),
            vocab: self.tokenizer.clone(),
            param_names: self.model.params().names.clone(),
            params: self.model.params().tensors.clone(),
            optimizer: self.optimizer.clone(),
            rng,
            step: self.optimizer.step,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut backend = TinyBackend::new(
            ckpt.vocab.clone(),
            ckpt.model.clone(),
            ckpt.optimizer_config.clone(),
            ckpt.max_source_length,
            ckpt.init_seed,
        )?;
        backend
            .model
            .load_params(&ckpt.param_names, ckpt.params.clone())
            .map_err(|e| Error::parse("checkpoint", e))?;
        if ckpt.optimizer.first_moment.len() != ckpt.params.len() {
            return Err(Error::parse("checkpoint", "optimizer state does not match parameters"));
        }
        backend.optimizer = ckpt.optimizer.clone();
        Ok(backend)
    }
}

impl Seq2SeqBackend for TinyBackend {
    fn name(&self) -> &str {
        "tiny"
    }

    fn concurrent_generation(&self) -> bool {
        true
    }

    fn max_source_length(&self) -> usize {
        self.max_source_length
    }

    fn count_source_tokens(&self, source: &str) -> usize {
        source.split_whitespace().count() + 1
    }

    fn loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("loss over an empty batch".into()));
        }
        Ok(self.model.loss(&self.token_pairs(batch)))
    }

    fn train_step(&mut self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step needs a non-empty batch".into()));
        }
        let pairs = self.token_pairs(batch);
        let (loss, grads) = self.model.loss_and_grads(&pairs);
        if !loss.is_finite() || !grads.iter().all(Matrix::is_finite) {
            return Err(Error::NonFinite(format!(
                "loss {loss} at optimizer step {} ({})",
                self.optimizer.step,
                Self::describe_batch(batch)
            )));
        }
        let config = self.optimizer_config.clone();
        self.optimizer
            .update(&config, &mut self.model.params_mut().tensors, &grads);
        Ok(loss)
    }

    fn generate_greedy(&self, source: &str, max_target_length: usize) -> Result<String> {
        let ids = self.model.generate(&self.encode_source(source), max_target_length);
        Ok(self.tokenizer.decode(&ids))
    }
}

pub const CHECKPOINT_FORMAT: &str = "dst-tiny-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the data-order stream stands; batches of epoch `e` are shuffled
/// with a generator derived from `(seed, e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
}

/// Versioned tiny-backend checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_echo: serde_json::Value,
    pub model: TinyConfig,
    pub init_seed: u64,
    pub max_source_length: usize,
    pub optimizer_config: OptimizerConfig,
    pub vocab: WordTokenizer,
    pub param_names: Vec<String>,
    pub params: Vec<Matrix>,
    pub optimizer: AdamW,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes `checkpoint-<hash16>.json` into `dir` and returns its path and full hash.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, String)> {
        std::fs::create_dir_all(dir)?;
        let bytes = self.to_bytes();
        let hash = hex::encode(Sha256::digest(&bytes));
        let path = dir.join(format!("checkpoint-{}.json", &hash[..16]));
        std::fs::write(&path, bytes)?;
        Ok((path, hash))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unexpected checkpoint format `{}`", ckpt.format),
            ));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported checkpoint version {}", ckpt.version),
            ));
        }
        Ok(ckpt)
    }
}
