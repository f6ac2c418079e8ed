//! A tiny decoder-only transformer with fixed random weights.
//!
//! It exists so the attention-attribution path can be tested end to end on a
//! real autoregressive model: greedy decoding, per-head attention extraction,
//! and exact reverse-mode gradients of each answer-token probability with
//! respect to the attention weight vectors at a chosen layer. A clamped
//! forward pass (attention row overridden, downstream recomputed) is exposed
//! so tests can check the gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    completion_text, AttributionLayer, BackendError, CompletionBackend, GenerationTrace,
    TraceBackend, TraceStep,
};
use crate::prompts::RenderedPrompt;
use crate::types::{DecodeMode, DecodeParams};

// ---------------------------------------------------------------------------
// Scalar reverse-mode autodiff tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Var(u32);

#[derive(Debug, Clone, Copy)]
struct Node {
    p0: u32,
    g0: f64,
    p1: u32,
    g1: f64,
}

/// Wengert-list tape over f64 scalars. Enough ops for a transformer forward
/// pass: affine arithmetic, exp, and tanh.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, val: f64, p0: u32, g0: f64, p1: u32, g1: f64) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { p0, g0, p1, g1 });
        self.vals.push(val);
        Var(idx)
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.push(v, 0, 0.0, 0, 0.0)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, a.0, 1.0, b.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, a.0, 1.0, b.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, a.0, vb, b.0, va)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, a.0, 1.0 / vb, b.0, -va / (vb * vb))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, a.0, c, a.0, 0.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, a.0, 1.0, a.0, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, a.0, v, a.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(v, a.0, 1.0 - v * v, a.0, 0.0)
    }

    /// Reverse sweep: adjoints of every node with respect to `output`.
    pub fn gradients(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[output.0 as usize] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            if n.g0 != 0.0 {
                adj[n.p0 as usize] += a * n.g0;
            }
            if n.g1 != 0.0 {
                adj[n.p1 as usize] += a * n.g1;
            }
        }
        adj
    }

    pub fn adjoint(grads: &[f64], v: Var) -> f64 {
        grads[v.0 as usize]
    }
}

// ---------------------------------------------------------------------------
// Character tokenizer
// ---------------------------------------------------------------------------

const UNK: u32 = 0;

fn vocab_table() -> Vec<char> {
    let mut v = vec!['\u{0}']; // UNK placeholder
    v.extend("\n .,?!:;'\"-()/".chars());
    v.extend('0'..='9');
    v.extend('a'..='z');
    v
}

/// Character-level tokenizer over a ≤64-symbol vocabulary. Uppercase folds to
/// lowercase; unknown characters map to a reserved UNK id. One token per
/// character keeps the token-to-character map trivial.
#[derive(Debug, Clone)]
pub struct CharTokenizer {
    vocab: Vec<char>,
}

impl Default for CharTokenizer {
    fn default() -> Self {
        let vocab = vocab_table();
        debug_assert!(vocab.len() <= 64);
        CharTokenizer { vocab }
    }
}

impl CharTokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> (Vec<u32>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for (start, c) in text.char_indices() {
            let folded = c.to_ascii_lowercase();
            let id = self
                .vocab
                .iter()
                .position(|&v| v == folded)
                .map(|p| p as u32)
                .unwrap_or(UNK);
            ids.push(id);
            spans.push((start, start + c.len_utf8()));
        }
        (ids, spans)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| {
                let c = self.vocab[id as usize];
                if c == '\u{0}' {
                    '?'
                } else {
                    c
                }
            })
            .collect()
    }

    pub fn newline_id(&self) -> u32 {
        self.vocab.iter().position(|&c| c == '\n').unwrap() as u32
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TinyTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub attribution_layer: AttributionLayer,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        TinyTransformerConfig {
            layers: 2,
            heads: 4,
            d_model: 16,
            d_ff: 32,
            max_seq: 256,
            seed: 17,
            attribution_layer: AttributionLayer::Last,
        }
    }
}

type Matrix = Vec<Vec<f64>>;

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

/// Overrides the attention probabilities of one head at one query position of
/// one layer. The row is used as-is (no re-normalization) and everything
/// downstream is recomputed.
#[derive(Debug, Clone)]
pub struct AttnOverride {
    pub layer: usize,
    pub query_pos: usize,
    pub head: usize,
    pub row: Vec<f64>,
}

pub struct TinyTransformer {
    cfg: TinyTransformerConfig,
    tokenizer: CharTokenizer,
    embed: Matrix,
    pos: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
    model_id: String,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

impl TinyTransformer {
    pub fn new(cfg: TinyTransformerConfig) -> Self {
        let tokenizer = CharTokenizer::default();
        let vocab = tokenizer.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let scale = 0.6 / (d as f64).sqrt();
        let embed = random_matrix(&mut rng, vocab, d, scale * 2.0);
        let pos = random_matrix(&mut rng, cfg.max_seq, d, scale);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: random_matrix(&mut rng, d, d, scale),
                wk: random_matrix(&mut rng, d, d, scale),
                wv: random_matrix(&mut rng, d, d, scale),
                wo: random_matrix(&mut rng, d, d, scale),
                w1: random_matrix(&mut rng, d, cfg.d_ff, scale),
                b1: (0..cfg.d_ff).map(|_| rng.gen_range(-scale..scale)).collect(),
                w2: random_matrix(&mut rng, cfg.d_ff, d, scale),
                b2: (0..d).map(|_| rng.gen_range(-scale..scale)).collect(),
            })
            .collect();
        let unembed = random_matrix(&mut rng, d, vocab, scale * 2.0);
        let model_id = format!("tiny-transformer-seed{}", cfg.seed);
        TinyTransformer {
            cfg,
            tokenizer,
            embed,
            pos,
            layers,
            unembed,
            model_id,
        }
    }

    pub fn tokenizer(&self) -> &CharTokenizer {
        &self.tokenizer
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.cfg
    }

    pub fn attribution_layer_index(&self) -> usize {
        match self.cfg.attribution_layer {
            AttributionLayer::Last => self.cfg.layers - 1,
            AttributionLayer::Index(i) => i,
        }
    }

    fn d_head(&self) -> usize {
        self.cfg.d_model / self.cfg.heads
    }

    // -- plain f64 forward ---------------------------------------------------

    /// Hidden states after all layers, with optional attention override.
    fn forward_plain(&self, tokens: &[u32], ovr: Option<&AttnOverride>) -> Matrix {
        let t = tokens.len();
        let d = self.cfg.d_model;
        let dh = self.d_head();
        let att_scale = 1.0 / (dh as f64).sqrt();
        let mut x: Matrix = (0..t)
            .map(|i| {
                (0..d)
                    .map(|j| self.embed[tokens[i] as usize][j] + self.pos[i][j])
                    .collect()
            })
            .collect();

        for (li, lw) in self.layers.iter().enumerate() {
            let q = matmul(&x, &lw.wq);
            let k = matmul(&x, &lw.wk);
            let v = matmul(&x, &lw.wv);
            // attention output per position
            let mut attn_out: Matrix = vec![vec![0.0; d]; t];
            for qi in 0..t {
                for h in 0..self.cfg.heads {
                    let hs = h * dh;
                    let row: Vec<f64> = match ovr {
                        Some(o) if o.layer == li && o.query_pos == qi && o.head == h => {
                            o.row.clone()
                        }
                        _ => {
                            let scores: Vec<f64> = (0..=qi)
                                .map(|ki| {
                                    dot(&q[qi][hs..hs + dh], &k[ki][hs..hs + dh]) * att_scale
                                })
                                .collect();
                            softmax(&scores)
                        }
                    };
                    for (ki, &w) in row.iter().enumerate() {
                        for j in 0..dh {
                            attn_out[qi][hs + j] += w * v[ki][hs + j];
                        }
                    }
                }
            }
            let proj = matmul(&attn_out, &lw.wo);
            for qi in 0..t {
                for j in 0..d {
                    x[qi][j] += proj[qi][j];
                }
            }
            // feed-forward with tanh
            for qi in 0..t {
                let mut hidden = lw.b1.clone();
                for (j, hj) in hidden.iter_mut().enumerate() {
                    for i in 0..d {
                        *hj += x[qi][i] * lw.w1[i][j];
                    }
                    *hj = hj.tanh();
                }
                for j in 0..d {
                    let mut acc = lw.b2[j];
                    for (i, hi) in hidden.iter().enumerate() {
                        acc += hi * lw.w2[i][j];
                    }
                    x[qi][j] += acc;
                }
            }
        }
        x
    }

    /// Next-token distribution at the last position.
    pub fn next_token_probs(&self, tokens: &[u32], ovr: Option<&AttnOverride>) -> Vec<f64> {
        let x = self.forward_plain(tokens, ovr);
        let last = x.last().expect("non-empty sequence");
        let logits: Vec<f64> = (0..self.tokenizer.vocab_size())
            .map(|v| (0..self.cfg.d_model).map(|j| last[j] * self.unembed[j][v]).sum())
            .collect();
        softmax(&logits)
    }

    /// Probability of `target` as the next token, under an optional clamped
    /// attention row. This is the forward pass the finite-difference oracle
    /// perturbs.
    pub fn token_prob_with_override(
        &self,
        tokens: &[u32],
        target: u32,
        ovr: Option<&AttnOverride>,
    ) -> f64 {
        self.next_token_probs(tokens, ovr)[target as usize]
    }

    /// Raw attention row (plain forward, no override) for one layer, query
    /// position, and head.
    pub fn attention_row(&self, tokens: &[u32], layer: usize, query_pos: usize, head: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let dh = self.d_head();
        let att_scale = 1.0 / (dh as f64).sqrt();
        // re-run the layers up to `layer` to get its input
        let mut x: Matrix = (0..tokens.len())
            .map(|i| {
                (0..d)
                    .map(|j| self.embed[tokens[i] as usize][j] + self.pos[i][j])
                    .collect()
            })
            .collect();
        for (li, lw) in self.layers.iter().enumerate() {
            let q = matmul(&x, &lw.wq);
            let k = matmul(&x, &lw.wk);
            if li == layer {
                let hs = head * dh;
                let scores: Vec<f64> = (0..=query_pos)
                    .map(|ki| dot(&q[query_pos][hs..hs + dh], &k[ki][hs..hs + dh]) * att_scale)
                    .collect();
                return softmax(&scores);
            }
            let v = matmul(&x, &lw.wv);
            let mut attn_out: Matrix = vec![vec![0.0; d]; tokens.len()];
            for qi in 0..tokens.len() {
                for h in 0..self.cfg.heads {
                    let hs = h * dh;
                    let scores: Vec<f64> = (0..=qi)
                        .map(|ki| dot(&q[qi][hs..hs + dh], &k[ki][hs..hs + dh]) * att_scale)
                        .collect();
                    let row = softmax(&scores);
                    for (ki, &w) in row.iter().enumerate() {
                        for j in 0..dh {
                            attn_out[qi][hs + j] += w * v[ki][hs + j];
                        }
                    }
                }
            }
            let proj = matmul(&attn_out, &lw.wo);
            for qi in 0..tokens.len() {
                for j in 0..d {
                    x[qi][j] += proj[qi][j];
                }
            }
            for row in x.iter_mut() {
                let mut hidden = lw.b1.clone();
                for (j, hj) in hidden.iter_mut().enumerate() {
                    for i in 0..d {
                        *hj += row[i] * lw.w1[i][j];
                    }
                    *hj = hj.tanh();
                }
                for j in 0..d {
                    let mut acc = lw.b2[j];
                    for (i, hi) in hidden.iter().enumerate() {
                        acc += hi * lw.w2[i][j];
                    }
                    row[j] += acc;
                }
            }
        }
        unreachable!("layer index out of range");
    }

    /// Greedy continuation token ids; stops at newline or `max_new` tokens.
    pub fn generate_greedy(&self, prompt_tokens: &[u32], max_new: usize) -> Result<Vec<u32>, BackendError> {
        let newline = self.tokenizer.newline_id();
        let mut seq = prompt_tokens.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.cfg.max_seq {
                return Err(BackendError::ContextOverflow {
                    measured: seq.len(),
                    limit: self.cfg.max_seq,
                });
            }
            let probs = self.next_token_probs(&seq, None);
            let next = argmax(&probs) as u32;
            if next == newline {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    // -- taped forward for gradients ------------------------------------------

    /// Teacher-forced step: probability of `target` at the end of `tokens`,
    /// with attention-probability variables captured at the attribution layer
    /// for the last query position. Returns (p, per-head attention values,
    /// per-head gradients).
    #[allow(clippy::type_complexity)]
    fn traced_step(
        &self,
        tokens: &[u32],
        target: u32,
    ) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let t = tokens.len();
        let d = self.cfg.d_model;
        let dh = self.d_head();
        let att_scale = 1.0 / (dh as f64).sqrt();
        let attrib_layer = self.attribution_layer_index();
        let last = t - 1;

        let mut tape = Tape::new();
        let mut x: Vec<Vec<Var>> = (0..t)
            .map(|i| {
                (0..d)
                    .map(|j| tape.constant(self.embed[tokens[i] as usize][j] + self.pos[i][j]))
                    .collect()
            })
            .collect();

        let mut captured: Vec<Vec<Var>> = Vec::new();

        for (li, lw) in self.layers.iter().enumerate() {
            let q = matmul_tape(&mut tape, &x, &lw.wq);
            let k = matmul_tape(&mut tape, &x, &lw.wk);
            let v = matmul_tape(&mut tape, &x, &lw.wv);
            let mut attn_out: Vec<Vec<Var>> = (0..t)
                .map(|_| (0..d).map(|_| tape.constant(0.0)).collect())
                .collect();
            for qi in 0..t {
                for h in 0..self.cfg.heads {
                    let hs = h * dh;
                    // scaled dot-product scores over visible positions
                    let mut scores = Vec::with_capacity(qi + 1);
                    for ki in 0..=qi {
                        let mut acc = tape.constant(0.0);
                        for j in 0..dh {
                            let prod = tape.mul(q[qi][hs + j], k[ki][hs + j]);
                            acc = tape.add(acc, prod);
                        }
                        scores.push(tape.scale(acc, att_scale));
                    }
                    let probs = softmax_tape(&mut tape, &scores);
                    if li == attrib_layer && qi == last {
                        captured.push(probs.clone());
                    }
                    for (ki, &w) in probs.iter().enumerate() {
                        for j in 0..dh {
                            let term = tape.mul(w, v[ki][hs + j]);
                            attn_out[qi][hs + j] = tape.add(attn_out[qi][hs + j], term);
                        }
                    }
                }
            }
            let proj = matmul_tape(&mut tape, &attn_out, &lw.wo);
            for qi in 0..t {
                for j in 0..d {
                    x[qi][j] = tape.add(x[qi][j], proj[qi][j]);
                }
            }
            for qi in 0..t {
                let mut hidden: Vec<Var> = Vec::with_capacity(self.cfg.d_ff);
                for j in 0..self.cfg.d_ff {
                    let mut acc = tape.constant(lw.b1[j]);
                    for i in 0..d {
                        let w = tape.scale(x[qi][i], lw.w1[i][j]);
                        acc = tape.add(acc, w);
                    }
                    hidden.push(tape.tanh(acc));
                }
                for j in 0..d {
                    let mut acc = tape.constant(lw.b2[j]);
                    for (i, &hi) in hidden.iter().enumerate() {
                        let w = tape.scale(hi, lw.w2[i][j]);
                        acc = tape.add(acc, w);
                    }
                    x[qi][j] = tape.add(x[qi][j], acc);
                }
            }
        }

        // logits only needed at the last position
        let vocab = self.tokenizer.vocab_size();
        let mut logits = Vec::with_capacity(vocab);
        for vi in 0..vocab {
            let mut acc = tape.constant(0.0);
            for j in 0..d {
                let w = tape.scale(x[last][j], self.unembed[j][vi]);
                acc = tape.add(acc, w);
            }
            logits.push(acc);
        }
        let probs = softmax_tape(&mut tape, &logits);
        let p = probs[target as usize];
        let p_val = tape.value(p);

        let grads = tape.gradients(p);
        let attn_vals: Vec<Vec<f64>> = captured
            .iter()
            .map(|row| row.iter().map(|&v| tape.value(v)).collect())
            .collect();
        let attn_grads: Vec<Vec<f64>> = captured
            .iter()
            .map(|row| row.iter().map(|&v| Tape::adjoint(&grads, v)).collect())
            .collect();
        (p_val, attn_vals, attn_grads)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul(x: &Matrix, w: &Matrix) -> Matrix {
    let (t, d_in) = (x.len(), w.len());
    let d_out = w[0].len();
    let mut out = vec![vec![0.0; d_out]; t];
    for i in 0..t {
        for k in 0..d_in {
            let xv = x[i][k];
            for j in 0..d_out {
                out[i][j] += xv * w[k][j];
            }
        }
    }
    out
}

fn matmul_tape(tape: &mut Tape, x: &[Vec<Var>], w: &Matrix) -> Vec<Vec<Var>> {
    let d_in = w.len();
    let d_out = w[0].len();
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|j| {
                    let mut acc = tape.constant(0.0);
                    for k in 0..d_in {
                        let term = tape.scale(row[k], w[k][j]);
                        acc = tape.add(acc, term);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn softmax_tape(tape: &mut Tape, scores: &[Var]) -> Vec<Var> {
    // max shift as a detached constant keeps values stable without altering
    // the derivative
    let max = scores
        .iter()
        .map(|&v| tape.value(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Var> = scores
        .iter()
        .map(|&s| {
            let shifted = tape.add_const(s, -max);
            tape.exp(shifted)
        })
        .collect();
    let mut sum = tape.constant(0.0);
    for &e in &exps {
        sum = tape.add(sum, e);
    }
    exps.iter().map(|&e| tape.div(e, sum)).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl CompletionBackend for TinyTransformer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<String, BackendError> {
        let text = completion_text(prompt)?;
        let (tokens, _) = self.tokenizer.encode(text);
        if tokens.len() >= self.cfg.max_seq {
            return Err(BackendError::ContextOverflow {
                measured: tokens.len(),
                limit: self.cfg.max_seq,
            });
        }
        match params.mode {
            DecodeMode::Greedy => {
                let out = self.generate_greedy(&tokens, params.max_new_tokens as usize)?;
                Ok(self.tokenizer.decode(&out))
            }
            DecodeMode::TopK => {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed.unwrap_or(0));
                let newline = self.tokenizer.newline_id();
                let mut seq = tokens;
                let mut out = Vec::new();
                for _ in 0..params.max_new_tokens {
                    if seq.len() >= self.cfg.max_seq {
                        return Err(BackendError::ContextOverflow {
                            measured: seq.len(),
                            limit: self.cfg.max_seq,
                        });
                    }
                    let probs = self.next_token_probs(&seq, None);
                    let mut idx: Vec<usize> = (0..probs.len()).collect();
                    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
                    idx.truncate(params.k.max(1) as usize);
                    let mass: f64 = idx.iter().map(|&i| probs[i]).sum();
                    let mut draw = rng.gen_range(0.0..mass);
                    let mut next = idx[0];
                    for &i in &idx {
                        if draw < probs[i] {
                            next = i;
                            break;
                        }
                        draw -= probs[i];
                    }
                    if next as u32 == newline {
                        break;
                    }
                    out.push(next as u32);
                    seq.push(next as u32);
                }
                Ok(self.tokenizer.decode(&out))
            }
        }
    }
}

impl TraceBackend for TinyTransformer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate_with_trace(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<(String, GenerationTrace), BackendError> {
        if params.mode != DecodeMode::Greedy {
            return Err(BackendError::Capability(
                "attribution requires greedy decoding".into(),
            ));
        }
        let text = completion_text(prompt)?;
        let (prompt_tokens, spans) = self.tokenizer.encode(text);
        if prompt_tokens.is_empty() {
            return Err(BackendError::Input("empty prompt".into()));
        }
        let answer = self.generate_greedy(&prompt_tokens, params.max_new_tokens as usize)?;
        let answer_text = self.tokenizer.decode(&answer);

        let mut steps = Vec::with_capacity(answer.len());
        for (i, &target) in answer.iter().enumerate() {
            // teacher forcing: sequence is prompt plus the first k-1 answer tokens
            let mut seq = prompt_tokens.clone();
            seq.extend_from_slice(&answer[..i]);
            let (p, attention, gradient) = self.traced_step(&seq, target);
            if !p.is_finite() {
                return Err(BackendError::Gradient {
                    step: i + 1,
                    reason: "non-finite token probability".into(),
                });
            }
            steps.push(TraceStep {
                attention,
                gradient,
                token_prob: p,
            });
        }

        let trace = GenerationTrace {
            prompt_token_count: prompt_tokens.len(),
            answer_token_count: answer.len(),
            head_count: self.cfg.heads,
            steps,
            prompt_token_spans: spans,
        };
        Ok((answer_text, trace))
    }
}
