//! A small pre-norm encoder-decoder transformer with learned, clipped
//! relative-position biases on self-attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, ParamStore};
use super::tensor::Matrix;
use super::tokenizer::{DECODER_START, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Relative distances are clipped to `[-k, k]`.
    pub relative_clip: usize,
    pub norm_eps: f64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            relative_clip: 8,
            norm_eps: 1e-6,
        }
    }
}

impl TinyConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err("tiny model sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Head {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: usize,
    attn: Vec<Head>,
    ff_norm: usize,
    ff_in: usize,
    ff_out: usize,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: usize,
    self_attn: Vec<Head>,
    cross_norm: usize,
    cross_attn: Vec<Head>,
    ff_norm: usize,
    ff_in: usize,
    ff_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    encoder_bias: usize,
    decoder_bias: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: usize,
    decoder: Vec<DecoderLayer>,
    decoder_norm: usize,
    lm_head: usize,
}

/// Which attention block a recorded probability map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
    pub probs: Matrix,
    pub logits: Matrix,
}

/// Bucket index of every (query, key) pair: `clip(key - query, -k, k) + k`.
pub fn relative_buckets(query_positions: &[i64], key_positions: &[i64], clip: usize) -> Vec<usize> {
    let k = clip as i64;
    let mut out = Vec::with_capacity(query_positions.len() * key_positions.len());
    for &i in query_positions {
        for &j in key_positions {
            out.push(((j - i).clamp(-k, k) + k) as usize);
        }
    }
    out
}

/// Bias matrix one head adds to its attention logits.
pub fn relative_bias(table_row: &[f64], query_positions: &[i64], key_positions: &[i64], clip: usize) -> Matrix {
    let buckets = relative_buckets(query_positions, key_positions, clip);
    Matrix::from_vec(
        query_positions.len(),
        key_positions.len(),
        buckets.into_iter().map(|b| table_row[b]).collect(),
    )
}

/// Uniform with the variance of N(0, 1/fan_in).
fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = (3.0 / fan_in as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn positions(n: usize) -> Vec<i64> {
    (0..n as i64).collect()
}

fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// One teacher-forced training pair in token ids. `target` ends with EOS and
/// may be right-padded with PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl TokenPair {
    pub fn supervised_tokens(&self) -> usize {
        self.target.iter().filter(|&&t| t != PAD).count()
    }
}

/// Decoder inputs for teacher forcing: start token then the target shifted right.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    let mut input = Vec::with_capacity(target.len());
    input.push(DECODER_START);
    input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    input
}

#[derive(Debug, Clone)]
pub struct TinySeq2Seq {
    config: TinyConfig,
    vocab_size: usize,
    params: ParamStore,
    layout: Layout,
}

struct Trace {
    enabled: bool,
    maps: Vec<(AttentionKind, usize, usize, NodeId, NodeId)>,
}

impl TinySeq2Seq {
    pub fn new(config: TinyConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let dh = config.head_dim();
        let ff = config.d_ff;
        let buckets = 2 * config.relative_clip + 1;
        let ones = |params: &mut ParamStore, name: String| params.push(name, Matrix::filled(1, d, 1.0));
        let heads = |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| -> Vec<Head> {
            (0..config.n_heads)
                .map(|h| Head {
                    q: params.push(format!("{prefix}.h{h}.q"), init_uniform(rng, d, dh, d)),
                    k: params.push(format!("{prefix}.h{h}.k"), init_uniform(rng, d, dh, d)),
                    v: params.push(format!("{prefix}.h{h}.v"), init_uniform(rng, d, dh, d)),
                    o: params.push(format!("{prefix}.h{h}.o"), init_uniform(rng, dh, d, d)),
                })
                .collect()
        };

        let embed = params.push("embed", init_uniform(&mut rng, vocab_size, d, 1));
        let encoder_bias = params.push("encoder.relative_bias", Matrix::zeros(config.n_heads, buckets));
        let decoder_bias = params.push("decoder.relative_bias", Matrix::zeros(config.n_heads, buckets));

        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayer {
                attn_norm: ones(&mut params, format!("encoder.{l}.attn_norm")),
                attn: heads(&mut params, &mut rng, &format!("encoder.{l}.attn")),
                ff_norm: ones(&mut params, format!("encoder.{l}.ff_norm")),
                ff_in: params.push(format!("encoder.{l}.ff_in"), init_uniform(&mut rng, d, ff, d)),
                ff_out: params.push(format!("encoder.{l}.ff_out"), init_uniform(&mut rng, ff, d, ff)),
            })
            .collect();
        let encoder_norm = ones(&mut params, "encoder.final_norm".into());
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayer {
                self_norm: ones(&mut params, format!("decoder.{l}.self_norm")),
                self_attn: heads(&mut params, &mut rng, &format!("decoder.{l}.self_attn")),
                cross_norm: ones(&mut params, format!("decoder.{l}.cross_norm")),
                cross_attn: heads(&mut params, &mut rng, &format!("decoder.{l}.cross_attn")),
                ff_norm: ones(&mut params, format!("decoder.{l}.ff_norm")),
                ff_in: params.push(format!("decoder.{l}.ff_in"), init_uniform(&mut rng, d, ff, d)),
                ff_out: params.push(format!("decoder.{l}.ff_out"), init_uniform(&mut rng, ff, d, ff)),
            })
            .collect();
        let decoder_norm = ones(&mut params, "decoder.final_norm".into());
        let lm_head = params.push("lm_head", init_uniform(&mut rng, d, vocab_size, d));

        TinySeq2Seq {
            config,
            vocab_size,
            params,
            layout: Layout {
                embed,
                encoder_bias,
                decoder_bias,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                lm_head,
            },
        }
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter tensor; names and shapes must match.
    pub fn load_params(&mut self, names: &[String], tensors: Vec<Matrix>) -> Result<(), String> {
        if names != self.params.names.as_slice() {
            return Err("parameter names differ from the model layout".into());
        }
        for (have, new) in self.params.tensors.iter().zip(&tensors) {
            if have.shape() != new.shape() {
                return Err("parameter shapes differ from the model layout".into());
            }
        }
        self.params.tensors = tensors;
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 / (self.config.head_dim() as f64).sqrt()
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<'_>,
        queries: NodeId,
        keys: NodeId,
        heads: &[Head],
        bias: Option<(usize, &[usize])>,
        mask: Option<NodeId>,
        trace: &mut Trace,
        kind: AttentionKind,
        layer: usize,
    ) -> NodeId {
        let mut out: Option<NodeId> = None;
        let (n, m) = (g.value(queries).rows, g.value(keys).rows);
        for (h, head) in heads.iter().enumerate() {
            let wq = g.param(head.q);
            let wk = g.param(head.k);
            let wv = g.param(head.v);
            let wo = g.param(head.o);
            let q = g.matmul(queries, wq);
            let k = g.matmul(keys, wk);
            let v = g.matmul(keys, wv);
            let scores = g.matmul_t(q, k);
            let mut scores = g.scale(scores, self.scale());
            if let Some((table, buckets)) = bias {
                let t = g.param(table);
                let b = g.gather(t, h, buckets, n, m);
                scores = g.add(scores, b);
            }
            if let Some(mask) = mask {
                scores = g.add(scores, mask);
            }
            let probs = g.softmax(scores);
            if trace.enabled {
                trace.maps.push((kind, layer, h, probs, scores));
            }
            let mixed = g.matmul(probs, v);
            let projected = g.matmul(mixed, wo);
            out = Some(match out {
                Some(acc) => g.add(acc, projected),
                None => projected,
            });
        }
        out.expect("at least one head")
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: NodeId, norm: usize, ff_in: usize, ff_out: usize) -> NodeId {
        let eps = self.config.norm_eps;
        let gain = g.param(norm);
        let h = g.rms_norm(x, gain, eps);
        let w_in = g.param(ff_in);
        let h = g.matmul(h, w_in);
        let h = g.relu(h);
        let w_out = g.param(ff_out);
        let h = g.matmul(h, w_out);
        g.add(x, h)
    }

    fn encode(&self, g: &mut Graph<'_>, source: &[usize], trace: &mut Trace) -> NodeId {
        let eps = self.config.norm_eps;
        let table = g.param(self.layout.embed);
        let mut x = g.embed(table, source);
        let pos = positions(source.len());
        let buckets = relative_buckets(&pos, &pos, self.config.relative_clip);
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let gain = g.param(layer.attn_norm);
            let h = g.rms_norm(x, gain, eps);
            let a = self.attention(
                g,
                h,
                h,
                &layer.attn,
                Some((self.layout.encoder_bias, &buckets)),
                None,
                trace,
                AttentionKind::EncoderSelf,
                l,
            );
            x = g.add(x, a);
            x = self.feed_forward(g, x, layer.ff_norm, layer.ff_in, layer.ff_out);
        }
        let gain = g.param(self.layout.encoder_norm);
        g.rms_norm(x, gain, eps)
    }

    fn decode(&self, g: &mut Graph<'_>, memory: NodeId, inputs: &[usize], trace: &mut Trace) -> NodeId {
        let eps = self.config.norm_eps;
        let table = g.param(self.layout.embed);
        let mut y = g.embed(table, inputs);
        let pos = positions(inputs.len());
        let buckets = relative_buckets(&pos, &pos, self.config.relative_clip);
        let mask = g.constant(causal_mask(inputs.len()));
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let gain = g.param(layer.self_norm);
            let h = g.rms_norm(y, gain, eps);
            let a = self.attention(
                g,
                h,
                h,
                &layer.self_attn,
                Some((self.layout.decoder_bias, &buckets)),
                Some(mask),
                trace,
                AttentionKind::DecoderSelf,
                l,
            );
            y = g.add(y, a);
            let gain = g.param(layer.cross_norm);
            let h = g.rms_norm(y, gain, eps);
            let c = self.attention(
                g,
                h,
                memory,
                &layer.cross_attn,
                None,
                None,
                trace,
                AttentionKind::Cross,
                l,
            );
            y = g.add(y, c);
            y = self.feed_forward(g, y, layer.ff_norm, layer.ff_in, layer.ff_out);
        }
        let gain = g.param(self.layout.decoder_norm);
        let y = g.rms_norm(y, gain, eps);
        let head = g.param(self.layout.lm_head);
        g.matmul(y, head)
    }

    fn check_ids(&self, ids: &[usize]) {
        assert!(
            ids.iter().all(|&i| i < self.vocab_size),
            "token id outside the vocabulary"
        );
    }

    /// Summed token NLL of one pair plus its gradient (unscaled).
    fn pair_loss_and_grads(&self, pair: &TokenPair) -> (f64, Vec<Matrix>) {
        let mut g = Graph::new(&self.params);
        let loss = self.pair_loss_node(&mut g, pair);
        let value = g.value(loss).data[0];
        (value, g.backward(loss))
    }

    fn pair_loss_node(&self, g: &mut Graph<'_>, pair: &TokenPair) -> NodeId {
        self.check_ids(&pair.source);
        self.check_ids(&pair.target);
        let mut trace = Trace {
            enabled: false,
            maps: Vec::new(),
        };
        let memory = self.encode(g, &pair.source, &mut trace);
        let inputs = shift_right(&pair.target);
        let logits = self.decode(g, memory, &inputs, &mut trace);
        let mask: Vec<bool> = pair.target.iter().map(|&t| t != PAD).collect();
        g.cross_entropy(logits, &pair.target, &mask)
    }

    /// Mean NLL over the non-pad target tokens of the batch.
    pub fn loss(&self, batch: &[TokenPair]) -> f64 {
        use rayon::prelude::*;
        let tokens: usize = batch.iter().map(TokenPair::supervised_tokens).sum();
        let total: f64 = batch
            .par_iter()
            .map(|pair| {
                let mut g = Graph::new(&self.params);
                let node = self.pair_loss_node(&mut g, pair);
                g.value(node).data[0]
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        total / tokens.max(1) as f64
    }

    /// Mean NLL and its gradient. Per-pair work runs in parallel and is
    /// reduced in batch order, so results do not depend on thread count.
    pub fn loss_and_grads(&self, batch: &[TokenPair]) -> (f64, Vec<Matrix>) {
        use rayon::prelude::*;
        let tokens: usize = batch.iter().map(TokenPair::supervised_tokens).sum();
        let per_pair: Vec<(f64, Vec<Matrix>)> = batch.par_iter().map(|p| self.pair_loss_and_grads(p)).collect();
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for (loss, g) in per_pair {
            total += loss;
            for (acc, d) in grads.iter_mut().zip(&g) {
                acc.add_assign(d);
            }
        }
        let inv = 1.0 / tokens.max(1) as f64;
        for g in &mut grads {
            g.scale_assign(inv);
        }
        (total * inv, grads)
    }

    /// Logits for every decoder input position (teacher forcing).
    pub fn logits(&self, source: &[usize], decoder_inputs: &[usize]) -> Matrix {
        self.check_ids(source);
        self.check_ids(decoder_inputs);
        let mut g = Graph::new(&self.params);
        let mut trace = Trace {
            enabled: false,
            maps: Vec::new(),
        };
        let memory = self.encode(&mut g, source, &mut trace);
        let out = self.decode(&mut g, memory, decoder_inputs, &mut trace);
        g.value(out).clone()
    }

    /// Attention probabilities (and pre-softmax logits) of every head.
    pub fn attention_maps(&self, source: &[usize], decoder_inputs: &[usize]) -> Vec<AttentionMap> {
        let mut g = Graph::new(&self.params);
        let mut trace = Trace {
            enabled: true,
            maps: Vec::new(),
        };
        let memory = self.encode(&mut g, source, &mut trace);
        self.decode(&mut g, memory, decoder_inputs, &mut trace);
        trace
            .maps
            .iter()
            .map(|&(kind, layer, head, probs, logits)| AttentionMap {
                kind,
                layer,
                head,
                probs: g.value(probs).clone(),
                logits: g.value(logits).clone(),
            })
            .collect()
    }

    /// Row `head` of the encoder or decoder relative-bias table.
    pub fn relative_bias_row(&self, decoder: bool, head: usize) -> &[f64] {
        let id = if decoder {
            self.layout.decoder_bias
        } else {
            self.layout.encoder_bias
        };
        self.params.tensors[id].row(head)
    }

    /// Greedy decoding: argmax at every step (lowest id on ties, pad never
    /// emitted) until end-of-sequence or `max_len` tokens.
    pub fn generate(&self, source: &[usize], max_len: usize) -> Vec<usize> {
        self.check_ids(source);
        let mut emitted = Vec::new();
        if max_len == 0 {
            return emitted;
        }
        let mut g = Graph::new(&self.params);
        let mut trace = Trace {
            enabled: false,
            maps: Vec::new(),
        };
        let memory = self.encode(&mut g, source, &mut trace);
        let mut inputs = vec![DECODER_START];
        while emitted.len() < max_len {
            let logits = self.decode(&mut g, memory, &inputs, &mut trace);
            let last = g.value(logits).row(inputs.len() - 1).to_vec();
            let next = argmax_excluding_pad(&last);
            if next == EOS {
                break;
            }
            emitted.push(next);
            inputs.push(next);
        }
        emitted
    }
}

/// Index of the largest entry, skipping PAD; ties go to the lowest index.
pub fn argmax_excluding_pad(row: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_value = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD {
            continue;
        }
        if best == usize::MAX || v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}
