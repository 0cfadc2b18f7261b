//! Per-step meta-adaptors and the three-step caption chain.
//!
//! Each step owns a small attention block that turns the frozen image
//! feature into a handful of soft prompt rows for the frozen LM. Captioning
//! is decomposed into subject → object → caption: every step sees the
//! prompts of all earlier (enabled) steps plus their text, teacher-forced
//! during training and greedily decoded at inference. The caption step is
//! mandatory; the subject and object steps can be disabled for ablations,
//! which removes their prompts, their text segments, and their loss terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::lm::{greedy_decode, LmVars, TinyLM};
use crate::models::tokenizer::{BOS, EOS, SEP};
use crate::rng::SeededRng;
use crate::tensor::{xavier_uniform, Tensor};

/// Prompt rows per step: one for the subject, one for the object, four for
/// the caption.
pub const DEFAULT_PROMPT_LENGTHS: [usize; 3] = [1, 1, 4];

/// One step's trainable tensors as plain values (checkpoints, inference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptorStepParams {
    /// [c_k × d_m] learnable prompt tokens, the attention queries.
    pub prompt: Tensor,
    /// [d_v × d_m]: lifts the image feature into LM width.
    pub in_proj: Tensor,
    /// Optional [d_m × d_m] query/key/value maps; the default attention is
    /// the bare form without them.
    pub qkv: Option<[Tensor; 3]>,
    /// [d_m × d_m]
    pub out_proj: Tensor,
}

impl AdaptorStepParams {
    pub fn init(
        prompt_len: usize,
        d_v: usize,
        d_m: usize,
        with_qkv: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let qkv = if with_qkv {
            Some([
                xavier_uniform(&[d_m, d_m], rng)?,
                xavier_uniform(&[d_m, d_m], rng)?,
                xavier_uniform(&[d_m, d_m], rng)?,
            ])
        } else {
            None
        };
        Ok(AdaptorStepParams {
            prompt: xavier_uniform(&[prompt_len, d_m], rng)?,
            in_proj: xavier_uniform(&[d_v, d_m], rng)?,
            qkv,
            out_proj: xavier_uniform(&[d_m, d_m], rng)?,
        })
    }

    /// Install onto a graph, trainable or frozen.
    pub fn install(&self, g: &Graph, trainable: bool) -> AdaptorStepVars {
        let put = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        AdaptorStepVars {
            prompt: put(&self.prompt),
            in_proj: put(&self.in_proj),
            qkv: self
                .qkv
                .as_ref()
                .map(|[q, k, v]| [put(q), put(k), put(v)]),
            out_proj: put(&self.out_proj),
        }
    }

    /// The tensors in a fixed order (prompt, in_proj, [q, k, v], out_proj).
    pub fn tensor_list(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.prompt, &self.in_proj];
        if let Some([q, k, v]) = &self.qkv {
            out.extend([q, k, v]);
        }
        out.push(&self.out_proj);
        out
    }
}

/// One step's tensors as graph nodes (training, gradient flow).
#[derive(Debug, Clone, Copy)]
pub struct AdaptorStepVars {
    pub prompt: Var,
    pub in_proj: Var,
    pub qkv: Option<[Var; 3]>,
    pub out_proj: Var,
}

impl AdaptorStepVars {
    /// Handles in the same order as [`AdaptorStepParams::tensor_list`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.prompt, self.in_proj];
        if let Some([q, k, v]) = self.qkv {
            out.extend([q, k, v]);
        }
        out.push(self.out_proj);
        out
    }
}

/// Attention shape knobs. The default is the bare single-head form with no
/// temperature: weights = softmax(Z Zᵀ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnOptions {
    /// Divide scores by √d_head before the softmax.
    pub scaled: bool,
    pub heads: usize,
}

impl Default for AttnOptions {
    fn default() -> Self {
        AttnOptions {
            scaled: false,
            heads: 1,
        }
    }
}

/// Chain-level knobs shared by loss and generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CotOptions {
    pub attn: AttnOptions,
    /// Feed earlier steps' text tokens (not just their prompts) into later
    /// contexts.
    pub condition_on_text: bool,
}

impl Default for CotOptions {
    fn default() -> Self {
        CotOptions {
            attn: AttnOptions::default(),
            condition_on_text: true,
        }
    }
}

/// Per-step payload for the chain. `sub`/`obj` are `None` when ablated away;
/// the caption step always exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotSteps<T> {
    pub sub: Option<T>,
    pub obj: Option<T>,
    pub caption: T,
}

impl<T> CotSteps<T> {
    pub fn full(sub: T, obj: T, caption: T) -> Self {
        CotSteps {
            sub: Some(sub),
            obj: Some(obj),
            caption,
        }
    }

    pub fn as_ref(&self) -> CotSteps<&T> {
        CotSteps {
            sub: self.sub.as_ref(),
            obj: self.obj.as_ref(),
            caption: &self.caption,
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<CotSteps<U>> {
        Ok(CotSteps {
            sub: self.sub.as_ref().map(&mut f).transpose()?,
            obj: self.obj.as_ref().map(&mut f).transpose()?,
            caption: f(&self.caption)?,
        })
    }

    /// Enabled entries in chain order (sub, obj, caption).
    pub fn enabled(&self) -> Vec<&T> {
        let mut out = Vec::with_capacity(3);
        if let Some(s) = &self.sub {
            out.push(s);
        }
        if let Some(o) = &self.obj {
            out.push(o);
        }
        out.push(&self.caption);
        out
    }
}

/// Ground-truth token targets for one sample's three steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTargets {
    pub sub_tokens: Vec<usize>,
    pub obj_tokens: Vec<usize>,
    pub caption_tokens: Vec<usize>,
}

impl CotTargets {
    pub fn new(
        sub_tokens: Vec<usize>,
        obj_tokens: Vec<usize>,
        caption_tokens: Vec<usize>,
    ) -> Result<Self> {
        if sub_tokens.is_empty() || obj_tokens.is_empty() || caption_tokens.is_empty() {
            return Err(Error::Contract("chain targets must be non-empty".into()));
        }
        if *caption_tokens.last().unwrap() != EOS {
            return Err(Error::Contract(
                "caption target must end with the end-of-sequence token".into(),
            ));
        }
        Ok(CotTargets {
            sub_tokens,
            obj_tokens,
            caption_tokens,
        })
    }
}

/// Decoded outputs of a full generation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotOutput {
    pub sub: Vec<usize>,
    pub obj: Vec<usize>,
    pub caption: Vec<usize>,
}

/// One step's adapted prompts: attend the learnable prompt rows over the
/// projected image feature and keep the prompt rows.
///
/// The sequence is `Z = [prompt; feature·in_proj]`. Attention weights are
/// `softmax(Q Kᵀ)` with `Q = K = V = Z` unless q/k/v projections are
/// present, and without score scaling unless requested. The first `c_k` rows
/// of the attended sequence, mapped through `out_proj`, are the prompts.
pub fn adaptor_forward(
    g: &Graph,
    step: &AdaptorStepVars,
    feature: Var,
    opts: &AttnOptions,
) -> Result<Var> {
    let d_m = g.shape_of(step.prompt)[1];
    let c_k = g.shape_of(step.prompt)[0];
    if opts.heads == 0 || d_m % opts.heads != 0 {
        return Err(Error::Config(format!(
            "head count {} must divide width {d_m}",
            opts.heads
        )));
    }
    let lifted = g.matmul(feature, step.in_proj)?;
    let z = g.concat_rows(&[step.prompt, lifted])?;
    let (q, k, v) = match step.qkv {
        Some([wq, wk, wv]) => (g.matmul(z, wq)?, g.matmul(z, wk)?, g.matmul(z, wv)?),
        None => (z, z, z),
    };
    let d_head = d_m / opts.heads;
    let mut heads = Vec::with_capacity(opts.heads);
    for h in 0..opts.heads {
        let (qh, kh, vh) = if opts.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * d_head, d_head)?,
                g.slice_cols(k, h * d_head, d_head)?,
                g.slice_cols(v, h * d_head, d_head)?,
            )
        };
        let mut scores = g.matmul(qh, g.transpose(kh)?)?;
        if opts.scaled {
            scores = g.scale(scores, 1.0 / (d_head as f64).sqrt())?;
        }
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let attended = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let kept = g.slice_rows(attended, 0, c_k)?;
    g.matmul(kept, step.out_proj)
}

/// Adapted prompts for every enabled step. Each step's prompts depend only
/// on that step's parameters and the image feature.
pub fn prompt_chain(
    g: &Graph,
    steps: &CotSteps<AdaptorStepVars>,
    feature: Var,
    opts: &AttnOptions,
) -> Result<CotSteps<Var>> {
    steps.try_map(|s| adaptor_forward(g, s, feature, opts))
}

/// Token prefix for a step's context: `[BOS]`, then each earlier enabled
/// step's non-empty text followed by a separator. Text is omitted entirely
/// when `condition_on_text` is off.
pub(crate) fn assemble_prefix(
    sub_text: Option<&[usize]>,
    obj_text: Option<&[usize]>,
    condition_on_text: bool,
) -> Vec<usize> {
    let mut prefix = vec![BOS];
    if condition_on_text {
        for text in [sub_text, obj_text].into_iter().flatten() {
            if !text.is_empty() {
                prefix.extend_from_slice(text);
                prefix.push(SEP);
            }
        }
    }
    prefix
}

/// Cross-entropy of `targets` under the LM given prompts and a token prefix.
/// Only the target positions are scored; the prefix is conditioning.
fn segment_loss(
    g: &Graph,
    lm: &TinyLM,
    lm_vars: &LmVars,
    prompts: &[Var],
    prefix: &[usize],
    targets: &[usize],
) -> Result<Var> {
    let mut input = prefix.to_vec();
    input.extend_from_slice(&targets[..targets.len() - 1]);
    let logits = lm.forward_on(g, lm_vars, prompts, &input)?;
    let rows = g.slice_rows(logits, prefix.len() - 1, targets.len())?;
    g.cross_entropy(rows, targets)
}

/// The chain loss: mean cross-entropy per enabled step, summed with equal
/// weights. Earlier steps' text is teacher-forced from the targets.
pub fn cot_loss(
    g: &Graph,
    lm: &TinyLM,
    lm_vars: &LmVars,
    steps: &CotSteps<AdaptorStepVars>,
    feature: Var,
    targets: &CotTargets,
    opts: &CotOptions,
) -> Result<Var> {
    let chain = prompt_chain(g, steps, feature, &opts.attn)?;
    let mut terms = Vec::with_capacity(3);
    if let Some(p_sub) = chain.sub {
        let prefix = assemble_prefix(None, None, opts.condition_on_text);
        terms.push(segment_loss(g, lm, lm_vars, &[p_sub], &prefix, &targets.sub_tokens)?);
    }
    if let Some(p_obj) = chain.obj {
        let mut prompts: Vec<Var> = chain.sub.into_iter().collect();
        prompts.push(p_obj);
        let sub_text = chain.sub.map(|_| targets.sub_tokens.as_slice());
        let prefix = assemble_prefix(sub_text, None, opts.condition_on_text);
        terms.push(segment_loss(g, lm, lm_vars, &prompts, &prefix, &targets.obj_tokens)?);
    }
    {
        let prompts: Vec<Var> = chain.enabled().into_iter().copied().collect();
        let sub_text = chain.sub.map(|_| targets.sub_tokens.as_slice());
        let obj_text = chain.obj.map(|_| targets.obj_tokens.as_slice());
        let prefix = assemble_prefix(sub_text, obj_text, opts.condition_on_text);
        terms.push(segment_loss(
            g,
            lm,
            lm_vars,
            &prompts,
            &prefix,
            &targets.caption_tokens,
        )?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Run the chain at inference: greedily decode the subject (one token), then
/// the object (one token) conditioned on the decoded subject, then the
/// caption conditioned on both. Budgets are per step; decoding stops early
/// at EOS, which is never included in the output.
pub fn cot_generate(
    lm: &TinyLM,
    steps: &CotSteps<AdaptorStepParams>,
    feature: &Tensor,
    max_lens: &[usize; 3],
    opts: &CotOptions,
) -> Result<CotOutput> {
    let g = Graph::new();
    let feature_var = g.constant(feature.clone());
    let vars = steps.try_map(|p| Ok(p.install(&g, false)))?;
    let chain = prompt_chain(&g, &vars, feature_var, &opts.attn)?;
    let values = chain.try_map(|&v| Ok(g.value(v)))?;

    let sub = match &values.sub {
        Some(p) => greedy_decode(lm, &[p.clone()], &[BOS], max_lens[0], Some(EOS))?,
        None => Vec::new(),
    };
    let obj = match &values.obj {
        Some(p_obj) => {
            let mut prompts: Vec<Tensor> = values.sub.iter().cloned().collect();
            prompts.push(p_obj.clone());
            let sub_text = values.sub.as_ref().map(|_| sub.as_slice());
            let prefix = assemble_prefix(sub_text, None, opts.condition_on_text);
            greedy_decode(lm, &prompts, &prefix, max_lens[1], Some(EOS))?
        }
        None => Vec::new(),
    };
    let caption = {
        let prompts: Vec<Tensor> = values.enabled().into_iter().cloned().collect();
        let sub_text = values.sub.as_ref().map(|_| sub.as_slice());
        let obj_text = values.obj.as_ref().map(|_| obj.as_slice());
        let prefix = assemble_prefix(sub_text, obj_text, opts.condition_on_text);
        greedy_decode(lm, &prompts, &prefix, max_lens[2], Some(EOS))?
    };
    Ok(CotOutput { sub, obj, caption })
}
