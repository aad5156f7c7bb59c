//! Adapter for an external pre-trained T5 checkpoint.
//!
//! The weights are served by a Python worker (torch + transformers) that
//! speaks one JSON object per line over stdin/stdout. Nothing here downloads
//! anything: the checkpoint directory must already exist locally.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::prompting::TrainingExample;

use super::Seq2SeqBackend;

const WORKER_SOURCE: &str = include_str!("../../scripts/t5_worker.py");

const WEIGHT_FILES: [&str; 2] = ["model.safetensors", "pytorch_model.bin"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainedConfig {
    /// Local directory in the transformers `save_pretrained` layout.
    pub model_dir: PathBuf,
    pub python: String,
    pub max_source_length: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainedConfig {
    fn default() -> Self {
        PretrainedConfig {
            model_dir: PathBuf::from("t5-small"),
            python: "python3".into(),
            max_source_length: 512,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Worker {
    fn request(&mut self, body: Value) -> Result<Value> {
        let op = body["op"].as_str().unwrap_or("?").to_string();
        let line = serde_json::to_string(&body).expect("request serializes");
        writeln!(self.stdin, "{line}")?;
        self.stdin.flush()?;
        let reply = read_reply(&mut self.stdout)?;
        if reply["ok"].as_bool() == Some(true) {
            Ok(reply)
        } else {
            Err(Error::Backend {
                context: format!("pretrained worker `{op}`"),
                source: Box::new(Error::Contract(
                    reply["error"].as_str().unwrap_or("unknown failure").to_string(),
                )),
            })
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn read_reply(stdout: &mut BufReader<ChildStdout>) -> Result<Value> {
    let mut line = String::new();
    if stdout.read_line(&mut line)? == 0 {
        return Err(Error::Capability("pretrained worker exited without replying".into()));
    }
    serde_json::from_str(&line).map_err(|e| Error::parse("pretrained worker reply", e))
}

/// Pre-trained T5 behind a worker process. Calls are serialized.
pub struct PretrainedBackend {
    worker: Mutex<Worker>,
    max_source_length: usize,
}

impl std::fmt::Debug for PretrainedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PretrainedBackend")
            .field("max_source_length", &self.max_source_length)
            .finish_non_exhaustive()
    }
}

/// Checks the checkpoint directory, then starts the worker. Any missing
/// piece surfaces as `Error::Capability`.
pub fn load_pretrained(config: &PretrainedConfig) -> Result<PretrainedBackend> {
    let dir = &config.model_dir;
    if !dir.is_dir() {
        return Err(Error::Capability(format!(
            "pre-trained weights not found at {}; place a T5 checkpoint there or use the tiny backend",
            dir.display()
        )));
    }
    if !dir.join("config.json").is_file() || !WEIGHT_FILES.iter().any(|f| dir.join(f).is_file()) {
        return Err(Error::Capability(format!(
            "{} lacks config.json or a weight file ({})",
            dir.display(),
            WEIGHT_FILES.join(" / ")
        )));
    }
    let mut child = Command::new(&config.python)
        .arg("-u")
        .arg("-c")
        .arg(WORKER_SOURCE)
        .arg("--model-dir")
        .arg(dir)
        .arg("--max-source-length")
        .arg(config.max_source_length.to_string())
        .arg("--learning-rate")
        .arg(config.learning_rate.to_string())
        .arg("--weight-decay")
        .arg(config.weight_decay.to_string())
        .arg("--seed")
        .arg(config.seed.to_string())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Capability(format!("cannot start `{}`: {e}", config.python)))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    let mut worker = Worker { child, stdin, stdout };
    let hello = read_reply(&mut worker.stdout)?;
    if hello["ok"].as_bool() != Some(true) {
        return Err(Error::Capability(
            hello["error"]
                .as_str()
                .unwrap_or("pretrained worker failed to start")
                .to_string(),
        ));
    }
    log::info!("pretrained worker ready on {}", hello["device"].as_str().unwrap_or("?"));
    Ok(PretrainedBackend {
        worker: Mutex::new(worker),
        max_source_length: config.max_source_length,
    })
}

impl PretrainedBackend {
    fn call(&self, body: Value) -> Result<Value> {
        self.worker.lock().expect("worker lock").request(body)
    }

    fn batch_body(op: &str, batch: &[TrainingExample]) -> Value {
        json!({
            "op": op,
            "sources": batch.iter().map(|e| e.source.as_str()).collect::<Vec<_>>(),
            "targets": batch.iter().map(|e| e.target.as_str()).collect::<Vec<_>>(),
        })
    }

    fn loss_of(reply: &Value) -> Result<f64> {
        let loss = reply["loss"]
            .as_f64()
            .ok_or_else(|| Error::parse("pretrained worker reply", "missing loss"))?;
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFinite(format!("pretrained loss {loss}")))
        }
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        self.call(json!({"op": "save", "path": dir}))?;
        Ok(())
    }
}

impl Seq2SeqBackend for PretrainedBackend {
    fn name(&self) -> &str {
        "pretrained"
    }

    fn concurrent_generation(&self) -> bool {
        false
    }

    fn max_source_length(&self) -> usize {
        self.max_source_length
    }

    fn count_source_tokens(&self, source: &str) -> usize {
        self.call(json!({"op": "count", "text": source}))
            .ok()
            .and_then(|r| r["count"].as_u64())
            .map(|c| c as usize)
            .unwrap_or_else(|| source.split_whitespace().count() + 1)
    }

    fn loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        Self::loss_of(&self.call(Self::batch_body("loss", batch))?)
    }

    fn train_step(&mut self, batch: &[TrainingExample]) -> Result<f64> {
        Self::loss_of(&self.call(Self::batch_body("train_step", batch))?)
    }

    fn generate_greedy(&self, source: &str, max_target_length: usize) -> Result<String> {
        let reply = self.call(json!({"op": "generate", "source": source, "max_length": max_target_length}))?;
        reply["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::parse("pretrained worker reply", "missing text"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_directory_is_a_capability_error() {
        let config = PretrainedConfig {
            model_dir: PathBuf::from("/nonexistent/t5-small"),
            ..Default::default()
        };
        let err = load_pretrained(&config).unwrap_err();
        assert!(matches!(err, Error::Capability(_)), "{err}");
    }

    #[test]
    fn directory_without_weights_is_a_capability_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), "{}").unwrap();
        let config = PretrainedConfig {
            model_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        assert!(matches!(load_pretrained(&config), Err(Error::Capability(_))));
    }

    #[test]
    #[ignore = "needs a local T5 checkpoint in $DST_T5_DIR and torch/transformers"]
    fn real_checkpoint_generates() {
        let dir = std::env::var("DST_T5_DIR").expect("DST_T5_DIR");
        let backend = load_pretrained(&PretrainedConfig {
            model_dir: dir.into(),
            ..Default::default()
        })
        .unwrap();
        let out = backend
            .generate_greedy("user: i need a cheap hotel [sep] price range of the hotel", 8)
            .unwrap();
        assert!(!out.is_empty());
    }
}
