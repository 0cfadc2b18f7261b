//! A tiny autoregressive transformer language model.
//!
//! Two pre-norm-free blocks (causal multi-head attention + tanh feed-forward,
//! both residual, no layer normalization), learned token and positional
//! embeddings, and a linear output head. The model is pretrained once on the
//! synthetic caption corpus and then frozen; afterwards it is steered only
//! through soft prompt rows prepended to the input sequence.
//!
//! Forward passes are built on a [`Graph`](crate::graph::Graph) so that
//! prompts (and, during pretraining, the weights themselves) receive exact
//! gradients. Weights are installed onto a graph once via [`TinyLM::install`]
//! and shared by every forward pass built on that graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{adamw_step, AdamWState};
use crate::rng::SeededRng;
use crate::tensor::{xavier_uniform, Tensor};

/// Additive attention-mask value for future positions. Large enough that
/// after the softmax's max-subtraction the exponential underflows to exactly
/// zero, giving bit-exact causality rather than merely approximate masking.
const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    /// Maximum total sequence length (prompt rows + token rows).
    pub t_max: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config(
                "vocab_size must cover the four specials plus at least one word".into(),
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.blocks == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.t_max < 2 {
            return Err(Error::Config("t_max must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLM {
    pub cfg: LmConfig,
    /// [vocab_size × d_model]
    pub token_embeddings: Tensor,
    /// [t_max × d_model]; prompt rows occupy positions too.
    pub positional: Tensor,
    pub blocks: Vec<LmBlock>,
    /// [d_model × vocab_size], no bias.
    pub out_proj: Tensor,
    /// When frozen, [`TinyLM::install`] emits constants and no weight ever
    /// receives a gradient.
    pub frozen: bool,
}

/// Graph handles for one installed copy of the weights.
pub struct LmVars {
    pub token_embeddings: Var,
    pub positional: Var,
    pub blocks: Vec<LmBlockVars>,
    pub out_proj: Var,
}

pub struct LmBlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

impl LmVars {
    /// All handles in the same fixed order as [`TinyLM::param_tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut vars = vec![self.token_embeddings, self.positional];
        for b in &self.blocks {
            vars.extend([
                b.w_q, b.w_k, b.w_v, b.w_o, b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2,
            ]);
        }
        vars.push(self.out_proj);
        vars
    }
}

impl TinyLM {
    /// Fresh weights: Xavier-uniform matrices, zero biases, and small
    /// Gaussian embeddings (embeddings are lookup tables, so fan-based
    /// scaling does not apply to them).
    pub fn init(cfg: LmConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let token_embeddings = Tensor::gaussian(vec![cfg.vocab_size, d], 0.1, rng);
        let positional = Tensor::gaussian(vec![cfg.t_max, d], 0.1, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(LmBlock {
                w_q: xavier_uniform(&[d, d], rng)?,
                w_k: xavier_uniform(&[d, d], rng)?,
                w_v: xavier_uniform(&[d, d], rng)?,
                w_o: xavier_uniform(&[d, d], rng)?,
                ffn_w1: xavier_uniform(&[d, cfg.ffn_hidden], rng)?,
                ffn_b1: Tensor::zeros(vec![1, cfg.ffn_hidden]),
                ffn_w2: xavier_uniform(&[cfg.ffn_hidden, d], rng)?,
                ffn_b2: Tensor::zeros(vec![1, d]),
            });
        }
        let out_proj = xavier_uniform(&[d, cfg.vocab_size], rng)?;
        Ok(TinyLM {
            cfg,
            token_embeddings,
            positional,
            blocks,
            out_proj,
            frozen: false,
        })
    }

    /// Named weight tensors in a fixed order (matching [`LmVars::ordered`]).
    pub fn param_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embeddings".into(), &self.token_embeddings),
            ("positional".into(), &self.positional),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.w_q"), &b.w_q));
            out.push((format!("block{i}.w_k"), &b.w_k));
            out.push((format!("block{i}.w_v"), &b.w_v));
            out.push((format!("block{i}.w_o"), &b.w_o));
            out.push((format!("block{i}.ffn_w1"), &b.ffn_w1));
            out.push((format!("block{i}.ffn_b1"), &b.ffn_b1));
            out.push((format!("block{i}.ffn_w2"), &b.ffn_w2));
            out.push((format!("block{i}.ffn_b2"), &b.ffn_b2));
        }
        out.push(("out_proj".into(), &self.out_proj));
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.token_embeddings, &mut self.positional];
        for b in &mut self.blocks {
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            out.push(&mut b.w_o);
            out.push(&mut b.ffn_w1);
            out.push(&mut b.ffn_b1);
            out.push(&mut b.ffn_w2);
            out.push(&mut b.ffn_b2);
        }
        out.push(&mut self.out_proj);
        out
    }

    /// Install the weights onto a graph: constants when frozen, trainable
    /// parameters otherwise. Call once per graph and reuse the returned
    /// handles for every forward pass built on it.
    pub fn install(&self, g: &Graph) -> LmVars {
        let put = |t: &Tensor| {
            if self.frozen {
                g.constant(t.clone())
            } else {
                g.param(t.clone())
            }
        };
        LmVars {
            token_embeddings: put(&self.token_embeddings),
            positional: put(&self.positional),
            blocks: self
                .blocks
                .iter()
                .map(|b| LmBlockVars {
                    w_q: put(&b.w_q),
                    w_k: put(&b.w_k),
                    w_v: put(&b.w_v),
                    w_o: put(&b.w_o),
                    ffn_w1: put(&b.ffn_w1),
                    ffn_b1: put(&b.ffn_b1),
                    ffn_w2: put(&b.ffn_w2),
                    ffn_b2: put(&b.ffn_b2),
                })
                .collect(),
            out_proj: put(&self.out_proj),
        }
    }

    /// Logits for the token positions of `[prompts…, tokens]`.
    ///
    /// Each prompt is a `[len × d_model]` graph node whose rows act as soft
    /// tokens: they occupy positions (receiving positional embeddings) and
    /// attend causally like any other position. The returned node is
    /// `[tokens.len() × vocab_size]` — prompt positions are dropped before
    /// the output head.
    pub fn forward_on(
        &self,
        g: &Graph,
        vars: &LmVars,
        prompts: &[Var],
        tokens: &[usize],
    ) -> Result<Var> {
        self.forward_at_offset(g, vars, prompts, tokens, 0)
    }

    /// [`forward_on`] with the positional table read from `offset` instead of
    /// row zero. Pretraining uses random offsets so that prepending prompts —
    /// which shifts every token's absolute position — does not push the
    /// frozen model off-distribution.
    pub fn forward_at_offset(
        &self,
        g: &Graph,
        vars: &LmVars,
        prompts: &[Var],
        tokens: &[usize],
        offset: usize,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(Error::Index(format!(
                    "token id {t} out of vocabulary (size {})",
                    self.cfg.vocab_size
                )));
            }
        }
        let mut prompt_len = 0;
        for &p in prompts {
            let shape = g.shape_of(p);
            if shape.len() != 2 || shape[1] != self.cfg.d_model {
                return Err(Error::Dimension(format!(
                    "prompt shape {shape:?} incompatible with d_model {}",
                    self.cfg.d_model
                )));
            }
            prompt_len += shape[0];
        }
        let total = prompt_len + tokens.len();
        if offset + total > self.cfg.t_max {
            return Err(Error::Capacity(format!(
                "sequence of {total} positions at offset {offset} exceeds t_max {}",
                self.cfg.t_max
            )));
        }

        let tok_rows = g.gather_rows(vars.token_embeddings, tokens)?;
        let embedded = if prompts.is_empty() {
            tok_rows
        } else {
            let mut parts = prompts.to_vec();
            parts.push(tok_rows);
            g.concat_rows(&parts)?
        };
        let pos = g.slice_rows(vars.positional, offset, total)?;
        let mut x = g.add(embedded, pos)?;

        let mask = g.constant(causal_mask(total));
        for b in &vars.blocks {
            let attended = self.attention(g, x, b, mask)?;
            x = g.add(x, attended)?;
            let fed = ffn(g, x, b)?;
            x = g.add(x, fed)?;
        }

        let token_states = g.slice_rows(x, prompt_len, tokens.len())?;
        g.matmul(token_states, vars.out_proj)
    }

    fn attention(&self, g: &Graph, x: Var, b: &LmBlockVars, mask: Var) -> Result<Var> {
        let d_k = self.cfg.d_model / self.cfg.heads;
        let q = g.matmul(x, b.w_q)?;
        let k = g.matmul(x, b.w_k)?;
        let v = g.matmul(x, b.w_v)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * d_k, d_k)?;
            let kh = g.slice_cols(k, h * d_k, d_k)?;
            let vh = g.slice_cols(v, h * d_k, d_k)?;
            let scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, 1.0 / (d_k as f64).sqrt())?;
            let weights = g.softmax_rows(g.add(scores, mask)?)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        g.matmul(merged, b.w_o)
    }
}

fn ffn(g: &Graph, x: Var, b: &LmBlockVars) -> Result<Var> {
    let h = g.tanh(g.add_row_bias(g.matmul(x, b.ffn_w1)?, b.ffn_b1)?)?;
    g.add_row_bias(g.matmul(h, b.ffn_w2)?, b.ffn_b2)
}

/// `[t × t]` additive mask: zero on and below the diagonal, a huge negative
/// constant above it.
fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for r in 0..t {
        for c in (r + 1)..t {
            data[r * t + c] = MASK_VALUE;
        }
    }
    Tensor::new(vec![t, t], data).expect("mask construction cannot fail")
}

/// Index of the row maximum; ties resolve to the lowest index so decoding is
/// reproducible across runs.
pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: repeatedly run the full forward pass and append the
/// argmax next token. Stops after `max_new` tokens or when `stop_token`
/// (typically EOS) is produced; the stop token itself is not returned.
/// Returns only the newly generated suffix, not `prefix`.
pub fn greedy_decode(
    lm: &TinyLM,
    prompts: &[Tensor],
    prefix: &[usize],
    max_new: usize,
    stop_token: Option<usize>,
) -> Result<Vec<usize>> {
    if prefix.is_empty() {
        return Err(Error::Contract("decoding needs a non-empty prefix".into()));
    }
    let mut tokens = prefix.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        let g = Graph::new();
        let vars = lm.install_frozen(&g);
        let prompt_vars: Vec<Var> = prompts.iter().map(|p| g.constant(p.clone())).collect();
        let logits = lm.forward_on(&g, &vars, &prompt_vars, &tokens)?;
        let values = g.value(logits);
        let (rows, cols) = values.dims2()?;
        let last = &values.data()[(rows - 1) * cols..];
        let next = argmax_lowest(last);
        if stop_token == Some(next) {
            break;
        }
        tokens.push(next);
        generated.push(next);
    }
    Ok(generated)
}

impl TinyLM {
    /// Install as constants regardless of the `frozen` flag — used wherever
    /// the weights are treated as fixed values (decoding, evaluation).
    pub fn install_frozen(&self, g: &Graph) -> LmVars {
        let mut copy = self.clone();
        copy.frozen = true;
        copy.install(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Largest random positional offset applied to training sequences.
    ///
    /// Downstream, soft prompts are prepended to text, shifting every token's
    /// absolute position by the total prompt budget. Training each sequence
    /// at a random offset in `0..=max_offset` makes the frozen model robust
    /// to that shift; the default covers the default prompt budget (1+1+4)
    /// with slack.
    pub max_offset: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            max_offset: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub train_sequences: usize,
    pub holdout_sequences: usize,
    /// Mean per-batch loss over the final epoch.
    pub final_train_loss: f64,
    /// Mean next-token negative log-likelihood over all held-out positions.
    pub holdout_loss: f64,
    /// Same positions scored by an add-one-smoothed unigram model fitted on
    /// the training split; a sanity floor the LM must beat.
    pub unigram_holdout_loss: f64,
}

/// Next-token pretraining with AdamW on minibatches of whole sequences.
///
/// Every tenth sequence is held out; the report compares the trained model
/// against a smoothed unigram baseline on those held-out positions. The
/// returned model is frozen.
pub fn lm_pretrain(
    mut lm: TinyLM,
    corpus: &[Vec<usize>],
    opts: &PretrainOptions,
    rng: &mut SeededRng,
) -> Result<(TinyLM, PretrainReport)> {
    use rand::Rng;
    if corpus.len() < 2 {
        return Err(Error::Data(
            "pretraining needs at least two sequences (one is held out)".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for (i, seq) in corpus.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::Data(format!(
                "sequence {i} has fewer than two tokens; nothing to predict"
            )));
        }
        if seq.len() > lm.cfg.t_max {
            return Err(Error::Capacity(format!(
                "sequence {i} of length {} exceeds t_max {}",
                seq.len(),
                lm.cfg.t_max
            )));
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= lm.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "sequence {i} contains token {t} outside the vocabulary"
            )));
        }
    }

    let mut train_idx: Vec<usize> = Vec::new();
    let mut holdout_idx: Vec<usize> = Vec::new();
    for i in 0..corpus.len() {
        if i % 10 == 9 {
            holdout_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if holdout_idx.is_empty() {
        // Small corpora still get a holdout: take the last sequence.
        holdout_idx.push(train_idx.pop().expect("len >= 2 checked above"));
    }

    lm.frozen = false;
    let mut opt_states: Vec<AdamWState> = lm
        .param_tensors()
        .iter()
        .map(|(_, t)| AdamWState::new(t.shape()))
        .collect();

    let mut final_train_loss = f64::NAN;
    for _epoch in 0..opts.epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(opts.batch_size) {
            let g = Graph::new();
            let vars = lm.install(&g);
            let mut seq_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let seq = &corpus[i];
                let slack = lm.cfg.t_max - (seq.len() - 1);
                let offset = rng.random_range(0..=opts.max_offset.min(slack));
                let logits =
                    lm.forward_at_offset(&g, &vars, &[], &seq[..seq.len() - 1], offset)?;
                seq_losses.push(g.cross_entropy(logits, &seq[1..])?);
            }
            let mut total = seq_losses[0];
            for &l in &seq_losses[1..] {
                total = g.add(total, l)?;
            }
            let loss = g.scale(total, 1.0 / seq_losses.len() as f64)?;
            epoch_losses.push(g.value(loss).scalar_value()?);

            let grads = g.backward(loss)?;
            let ordered = vars.ordered();
            let params = lm.param_tensors_mut();
            for ((var, tensor), state) in
                ordered.into_iter().zip(params).zip(opt_states.iter_mut())
            {
                let grad = grads.tensor(&g, var).ok_or_else(|| {
                    Error::Contract("trainable weight received no gradient".into())
                })?;
                let (updated, next_state) =
                    adamw_step(tensor, &grad, state.clone(), opts.learning_rate)?;
                *tensor = updated;
                *state = next_state;
            }
        }
        final_train_loss =
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
    }

    lm.frozen = true;
    let holdout_loss = pooled_nll(&lm, corpus, &holdout_idx)?;
    let unigram_holdout_loss = unigram_nll(&lm.cfg, corpus, &train_idx, &holdout_idx);
    Ok((
        lm,
        PretrainReport {
            epochs: opts.epochs,
            train_sequences: train_idx.len(),
            holdout_sequences: holdout_idx.len(),
            final_train_loss,
            holdout_loss,
            unigram_holdout_loss,
        },
    ))
}

/// Mean next-token NLL pooled over every predicted position of the chosen
/// sequences.
fn pooled_nll(lm: &TinyLM, corpus: &[Vec<usize>], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in idx {
        let seq = &corpus[i];
        let g = Graph::new();
        let vars = lm.install_frozen(&g);
        let logits = lm.forward_on(&g, &vars, &[], &seq[..seq.len() - 1])?;
        let loss = g.cross_entropy(logits, &seq[1..])?;
        let n = seq.len() - 1;
        total += g.value(loss).scalar_value()? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn unigram_nll(
    cfg: &LmConfig,
    corpus: &[Vec<usize>],
    train_idx: &[usize],
    holdout_idx: &[usize],
) -> f64 {
    let mut counts = vec![0usize; cfg.vocab_size];
    let mut total = 0usize;
    for &i in train_idx {
        for &t in &corpus[i][1..] {
            counts[t] += 1;
            total += 1;
        }
    }
    let denom = (total + cfg.vocab_size) as f64;
    let mut nll = 0.0;
    let mut positions = 0usize;
    for &i in holdout_idx {
        for &t in &corpus[i][1..] {
            nll -= ((counts[t] + 1) as f64 / denom).ln();
            positions += 1;
        }
    }
    nll / positions as f64
}

/// Fisher–Yates shuffle driven by the crate's seeded generator.
fn shuffle(items: &mut [usize], rng: &mut SeededRng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

pub fn write_lm(path: &std::path::Path, lm: &TinyLM) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(lm)?)?;
    Ok(())
}

pub fn read_lm(path: &std::path::Path) -> Result<TinyLM> {
    let lm: TinyLM = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    lm.cfg.validate()?;
    Ok(lm)
}
