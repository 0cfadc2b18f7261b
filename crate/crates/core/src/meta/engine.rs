//! The bilevel optimization core: inner adaptation and outer meta-updates.
//!
//! Everything runs on one tape per episode. The inner loop takes gradient
//! steps on the adaptable handles (subspace coefficients, or whole weights in
//! direct mode) against the support loss; by default those gradients are
//! detached before the update, which truncates the meta-gradient to first
//! order. With the second-order toggle the gradients stay on the tape, so
//! backpropagating the query loss differentiates through the inner update
//! itself. The outer step aggregates per-episode gradients in episode-index
//! order — results are identical for any worker count — and applies one
//! optimizer update per meta parameter.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::adaptor::{cot_loss, AdaptorStepVars, CotOptions, CotSteps};
use crate::config::OuterOptimizer;
use crate::error::{Error, Result};
use crate::graph::{kernels, Graph, Var};
use crate::meta::episode::{sample_episode, sample_targets, Episode, EpisodeSample};
use crate::meta::state::{MetaState, SlotFactor, SlotName, StepFactors, StepId};
use crate::models::lm::LmVars;
use crate::models::{TinyLM, Tokenizer};
use crate::optim::{adamw_step, sgd_step, AdamWState};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::world::CaptionedSample;

/// Which side of an episode a loss closure should evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Support,
    Query,
}

/// Inner-loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    /// Inner learning rate α; must be positive.
    pub lr: f64,
    /// Gradient steps on the support loss; 0 evaluates without adapting.
    pub steps: usize,
    /// Keep inner gradients on the tape so the outer gradient is exact.
    pub second_order: bool,
}

/// What [`adapt_and_eval`] returns: loss handles still on the caller's tape.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// Support loss at the initial parameters (before any inner step).
    pub support_loss: Var,
    /// Query loss at the adapted parameters.
    pub query_loss: Var,
    /// Adapted handles, parallel to the `adaptable` argument.
    pub adapted: Vec<Var>,
}

/// Runs the inner loop only: returns the adapted handles and the support
/// loss at the initial parameters (`None` when no step was taken).
fn adapt_handles(
    g: &Graph,
    adaptable: &[Var],
    settings: &InnerSettings,
    mut support_loss: impl FnMut(&Graph, &[Var]) -> Result<Var>,
) -> Result<(Vec<Var>, Option<Var>)> {
    if !(settings.lr > 0.0) || !settings.lr.is_finite() {
        return Err(Error::Config(format!(
            "inner learning rate must be positive and finite, got {}",
            settings.lr
        )));
    }
    let mut current: Vec<Var> = adaptable.to_vec();
    let mut first_loss = None;
    for _ in 0..settings.steps {
        let loss = support_loss(g, &current)?;
        if first_loss.is_none() {
            first_loss = Some(loss);
        }
        let grads = g.backward(loss)?;
        let mut next = Vec::with_capacity(current.len());
        for &handle in &current {
            let stepped = match grads.var(handle) {
                // A handle the support loss never touched keeps its value.
                None => handle,
                Some(grad) => {
                    let grad = if settings.second_order {
                        grad
                    } else {
                        g.detach(grad)
                    };
                    g.sub(handle, g.scale(grad, settings.lr)?)?
                }
            };
            next.push(stepped);
        }
        current = next;
    }
    Ok((current, first_loss))
}

/// The generic bilevel core: adapt on the support pass, evaluate the query
/// pass at the adapted parameters, all on the caller's tape.
///
/// `loss_at` must build the requested pass's loss from the given parameter
/// handles. The returned query loss depends on the initial handles through
/// the inner updates, so backpropagating it yields the meta-gradient
/// (truncated to first order unless `second_order` is set).
pub fn adapt_and_eval(
    g: &Graph,
    adaptable: &[Var],
    settings: &InnerSettings,
    mut loss_at: impl FnMut(&Graph, &[Var], Pass) -> Result<Var>,
) -> Result<AdaptOutcome> {
    let (adapted, first_loss) = adapt_handles(g, adaptable, settings, |g, cur| {
        loss_at(g, cur, Pass::Support)
    })?;
    let support_loss = match first_loss {
        Some(v) => v,
        // Zero inner steps: still report the (unadapted) support loss.
        None => loss_at(g, &adapted, Pass::Support)?,
    };
    let query_loss = loss_at(g, &adapted, Pass::Query)?;
    Ok(AdaptOutcome {
        support_loss,
        query_loss,
        adapted,
    })
}

/// Graph handles for one installed meta state.
pub(crate) struct InstalledState {
    plan: Vec<SlotInstall>,
    /// Inner-loop handles (coefficients / direct weights), in plan order.
    pub(crate) adaptable: Vec<Var>,
    /// Outer-trainable handles keyed `"{step}.{slot}.{part}"`, in the same
    /// order the outer update visits parts.
    pub(crate) meta_params: Vec<(String, Var)>,
}

struct SlotInstall {
    step: StepId,
    name: SlotName,
    /// Present for subspace slots; the weight is `basis · adaptable`.
    basis: Option<Var>,
    adaptable_idx: usize,
}

/// Installs every slot of the state on a tape. Bases become parameters
/// when `trainable_bases` (meta-training without `freeze_bases`), otherwise
/// constants; coefficients and direct weights are always parameters.
pub(crate) fn install_state(
    g: &Graph,
    state: &MetaState,
    trainable_bases: bool,
) -> Result<InstalledState> {
    let mut installed = InstalledState {
        plan: Vec::new(),
        adaptable: Vec::new(),
        meta_params: Vec::new(),
    };
    let mut put_step = |id: StepId, factors: &StepFactors| {
        for (name, factor) in &factors.slots {
            let prefix = format!("{}.{}", id.key(), name.key());
            let (basis, handle) = match factor {
                SlotFactor::Subspace { basis, coef } => {
                    let b = if trainable_bases {
                        let b = g.param(basis.clone());
                        installed.meta_params.push((format!("{prefix}.basis"), b));
                        b
                    } else {
                        g.constant(basis.clone())
                    };
                    let c = g.param(coef.clone());
                    installed.meta_params.push((format!("{prefix}.coef"), c));
                    (Some(b), c)
                }
                SlotFactor::Direct { weight } => {
                    let w = g.param(weight.clone());
                    installed.meta_params.push((format!("{prefix}.weight"), w));
                    (None, w)
                }
            };
            installed.plan.push(SlotInstall {
                step: id,
                name: *name,
                basis,
                adaptable_idx: installed.adaptable.len(),
            });
            installed.adaptable.push(handle);
        }
    };
    if let Some(s) = &state.steps.sub {
        put_step(StepId::Sub, s);
    }
    if let Some(s) = &state.steps.obj {
        put_step(StepId::Obj, s);
    }
    put_step(StepId::Caption, &state.steps.caption);
    Ok(installed)
}

impl InstalledState {
    /// Rebuilds concrete adaptor parameters from the current adaptable
    /// handles: `w = S·c` per subspace slot (prompt transposed back to rows).
    pub(crate) fn rebuild(
        &self,
        g: &Graph,
        current: &[Var],
    ) -> Result<CotSteps<AdaptorStepVars>> {
        if current.len() != self.adaptable.len() {
            return Err(Error::Contract(format!(
                "expected {} adaptable handles, got {}",
                self.adaptable.len(),
                current.len()
            )));
        }
        let mut maps: BTreeMap<StepId, BTreeMap<SlotName, Var>> = BTreeMap::new();
        for slot in &self.plan {
            let raw = match slot.basis {
                Some(basis) => g.matmul(basis, current[slot.adaptable_idx])?,
                None => current[slot.adaptable_idx],
            };
            let weight = if slot.name == SlotName::Prompt {
                g.transpose(raw)?
            } else {
                raw
            };
            maps.entry(slot.step).or_default().insert(slot.name, weight);
        }
        let build = |map: &BTreeMap<SlotName, Var>| -> Result<AdaptorStepVars> {
            let get = |n: SlotName| {
                map.get(&n)
                    .copied()
                    .ok_or_else(|| Error::Lookup(format!("installed step lacks {}", n.key())))
            };
            let qkv = match (
                map.get(&SlotName::QProj),
                map.get(&SlotName::KProj),
                map.get(&SlotName::VProj),
            ) {
                (Some(&q), Some(&k), Some(&v)) => Some([q, k, v]),
                (None, None, None) => None,
                _ => {
                    return Err(Error::Contract(
                        "attention projections must be all present or all absent".into(),
                    ))
                }
            };
            Ok(AdaptorStepVars {
                prompt: get(SlotName::Prompt)?,
                in_proj: get(SlotName::InProj)?,
                qkv,
                out_proj: get(SlotName::OutProj)?,
            })
        };
        let caption = maps
            .get(&StepId::Caption)
            .ok_or_else(|| Error::Contract("caption step missing from plan".into()))?;
        Ok(CotSteps {
            sub: maps.get(&StepId::Sub).map(&build).transpose()?,
            obj: maps.get(&StepId::Obj).map(&build).transpose()?,
            caption: build(caption)?,
        })
    }

    /// Copies adapted handle values back into a factor structure, leaving
    /// bases untouched.
    pub(crate) fn adapted_factors(
        &self,
        g: &Graph,
        adapted: &[Var],
        base: &CotSteps<StepFactors>,
    ) -> Result<CotSteps<StepFactors>> {
        if adapted.len() != self.adaptable.len() {
            return Err(Error::Contract(format!(
                "expected {} adapted handles, got {}",
                self.adaptable.len(),
                adapted.len()
            )));
        }
        let mut next = base.clone();
        for (slot, &handle) in self.plan.iter().zip(adapted) {
            let factors = match slot.step {
                StepId::Sub => next.sub.as_mut(),
                StepId::Obj => next.obj.as_mut(),
                StepId::Caption => Some(&mut next.caption),
            }
            .ok_or_else(|| {
                Error::Contract(format!("plan names disabled step {}", slot.step.key()))
            })?;
            let factor = factors.slots.get_mut(&slot.name).ok_or_else(|| {
                Error::Lookup(format!("factors lack slot {}", slot.name.key()))
            })?;
            *factor = factor.with_adaptable(g.value(handle))?;
        }
        Ok(next)
    }
}

/// Summed chain loss over a set of drawn samples, at the given handles.
pub(crate) fn samples_loss(
    g: &Graph,
    lm: &TinyLM,
    lm_vars: &LmVars,
    tokenizer: &Tokenizer,
    installed: &InstalledState,
    current: &[Var],
    samples: &[EpisodeSample],
    opts: &CotOptions,
) -> Result<Var> {
    let step_vars = installed.rebuild(g, current)?;
    let mut total: Option<Var> = None;
    for drawn in samples {
        let feature = g.constant(drawn.sample.feature.clone());
        let targets = sample_targets(drawn, tokenizer)?;
        let loss = cot_loss(g, lm, lm_vars, &step_vars, feature, &targets, opts)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Contract("loss over an empty sample set".into()))
}

/// One episode's contribution to the outer update.
pub(crate) struct EpisodeEval {
    pub(crate) support_loss: f64,
    pub(crate) query_loss: f64,
    /// Query-loss gradients keyed like `meta_params`; parameters the loss
    /// never touched are absent.
    pub(crate) grads: BTreeMap<String, Tensor>,
}

/// Adapts to one episode's support set and backpropagates its query loss
/// into every meta parameter.
pub(crate) fn evaluate_episode(
    state: &MetaState,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    episode: &Episode,
) -> Result<EpisodeEval> {
    let cfg = &state.config;
    let g = Graph::new();
    let lm_vars = lm.install_frozen(&g);
    let installed = install_state(&g, state, !cfg.freeze_bases)?;
    let opts = cfg.cot_options();
    let settings = InnerSettings {
        lr: cfg.inner_lr,
        steps: cfg.inner_steps,
        second_order: cfg.toggles.second_order,
    };
    let outcome = adapt_and_eval(&g, &installed.adaptable, &settings, |g, cur, pass| {
        let samples = match pass {
            Pass::Support => &episode.support,
            Pass::Query => &episode.query,
        };
        samples_loss(g, lm, &lm_vars, tokenizer, &installed, cur, samples, &opts)
    })?;
    let grads = g.backward(outcome.query_loss)?;
    let mut out = BTreeMap::new();
    for (key, var) in &installed.meta_params {
        if let Some(t) = grads.tensor(&g, *var) {
            out.insert(key.clone(), t);
        }
    }
    Ok(EpisodeEval {
        support_loss: g.value(outcome.support_loss).scalar_value()?,
        query_loss: g.value(outcome.query_loss).scalar_value()?,
        grads: out,
    })
}

/// Batch means reported by one outer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean (over episodes) summed support loss before adaptation.
    pub mean_support_loss: f64,
    /// Mean (over episodes) summed query loss after adaptation.
    pub mean_query_loss: f64,
}

/// Visits every outer-trainable part of the factors in canonical order —
/// the same order [`install_state`] lists `meta_params` — passing its key
/// and a mutable reference to its tensor.
fn for_each_part(
    steps: &mut CotSteps<StepFactors>,
    trainable_bases: bool,
    mut f: impl FnMut(String, &mut Tensor) -> Result<()>,
) -> Result<()> {
    let mut visit = |id: StepId, factors: &mut StepFactors| -> Result<()> {
        for (name, factor) in factors.slots.iter_mut() {
            let prefix = format!("{}.{}", id.key(), name.key());
            match factor {
                SlotFactor::Subspace { basis, coef } => {
                    if trainable_bases {
                        f(format!("{prefix}.basis"), basis)?;
                    }
                    f(format!("{prefix}.coef"), coef)?;
                }
                SlotFactor::Direct { weight } => f(format!("{prefix}.weight"), weight)?,
            }
        }
        Ok(())
    };
    if let Some(s) = steps.sub.as_mut() {
        visit(StepId::Sub, s)?;
    }
    if let Some(s) = steps.obj.as_mut() {
        visit(StepId::Obj, s)?;
    }
    visit(StepId::Caption, &mut steps.caption)
}

/// One outer update over a batch of episodes.
///
/// Functional: returns the updated state. Episode gradients reduce in
/// episode-index order regardless of `workers`, then average over the batch
/// (or sum, when `episode_mean` is off). A meta parameter whose aggregated
/// gradient is absent or exactly zero is skipped entirely — its tensor and
/// optimizer moments stay untouched.
pub fn outer_step(
    state: &MetaState,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    episodes: &[Episode],
) -> Result<(MetaState, StepStats)> {
    if episodes.is_empty() {
        return Err(Error::Contract("outer step needs at least one episode".into()));
    }
    let evals: Vec<EpisodeEval> = if state.config.workers > 1 {
        episodes
            .par_iter()
            .map(|e| evaluate_episode(state, lm, tokenizer, e))
            .collect::<Result<_>>()?
    } else {
        episodes
            .iter()
            .map(|e| evaluate_episode(state, lm, tokenizer, e))
            .collect::<Result<_>>()?
    };

    let n = episodes.len() as f64;
    let stats = StepStats {
        mean_support_loss: evals.iter().map(|e| e.support_loss).sum::<f64>() / n,
        mean_query_loss: evals.iter().map(|e| e.query_loss).sum::<f64>() / n,
    };

    let mut agg: BTreeMap<String, Tensor> = BTreeMap::new();
    for eval in &evals {
        for (key, grad) in &eval.grads {
            match agg.get_mut(key) {
                Some(total) => {
                    *total = kernels::zip(total, grad, "gradient accumulation", |a, b| a + b)?
                }
                None => {
                    agg.insert(key.clone(), grad.clone());
                }
            }
        }
    }
    if state.config.episode_mean {
        for grad in agg.values_mut() {
            *grad = kernels::map(grad, |v| v / n)?;
        }
    }

    let mut next = state.clone();
    next.iteration += 1;
    let lr = next.config.outer_lr;
    let optimizer_kind = next.config.outer_optimizer;
    let trainable_bases = !next.config.freeze_bases;
    apply_updates(
        &mut next.steps,
        &mut next.optimizer,
        &agg,
        optimizer_kind,
        lr,
        trainable_bases,
    )?;
    Ok((next, stats))
}

/// Applies one optimizer update per part from an aggregated gradient map.
///
/// A part whose gradient is absent or exactly zero is skipped — tensor and
/// moments untouched — so parameters outside the batch's compute stay put.
pub(crate) fn apply_updates(
    steps: &mut CotSteps<StepFactors>,
    optimizer: &mut BTreeMap<String, AdamWState>,
    grads: &BTreeMap<String, Tensor>,
    optimizer_kind: OuterOptimizer,
    lr: f64,
    trainable_bases: bool,
) -> Result<()> {
    for_each_part(steps, trainable_bases, |key, tensor| {
        let Some(grad) = grads.get(&key) else {
            return Ok(());
        };
        if grad.data().iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        match optimizer_kind {
            OuterOptimizer::Sgd => {
                *tensor = sgd_step(tensor, grad, lr)?;
            }
            OuterOptimizer::AdamW => {
                let moments = optimizer
                    .entry(key)
                    .or_insert_with(|| AdamWState::new(tensor.shape()));
                let (updated, new_moments) = adamw_step(tensor, grad, moments.clone(), lr)?;
                *tensor = updated;
                *moments = new_moments;
            }
        }
        Ok(())
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLogRow {
    /// Outer iteration this row describes (1-based, after the update).
    pub iteration: usize,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
    /// Milliseconds since training started; excluded from reproducibility
    /// comparisons.
    pub wallclock_ms: u128,
}

/// Meta-trains for `iterations` outer steps.
///
/// Episodes draw from `rng` up front each iteration, so episode randomness
/// is identical for any worker count. `on_checkpoint` fires every
/// `checkpoint_every` iterations when that cadence is non-zero.
pub fn meta_train(
    state: MetaState,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    dataset: &[CaptionedSample],
    iterations: usize,
    rng: &mut SeededRng,
    mut on_checkpoint: impl FnMut(&MetaState) -> Result<()>,
) -> Result<(MetaState, Vec<TrainLogRow>)> {
    let start = Instant::now();
    let cfg = state.config.clone();
    let mut state = state;
    let mut log = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let episodes: Vec<Episode> = (0..cfg.episode_batch)
            .map(|_| {
                sample_episode(
                    dataset,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.effective_query_size(),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let (next, stats) = outer_step(&state, lm, tokenizer, &episodes)?;
        state = next;
        log.push(TrainLogRow {
            iteration: state.iteration,
            mean_support_loss: stats.mean_support_loss,
            mean_query_loss: stats.mean_query_loss,
            wallclock_ms: start.elapsed().as_millis(),
        });
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            on_checkpoint(&state)?;
        }
    }
    Ok((state, log))
}

/// Test-time adaptation: gradient steps on the support loss, coefficients
/// only (bases are fixed values here regardless of training-time settings).
///
/// Functional — returns adapted factors, never touches the state. A
/// non-positive learning rate is a configuration error.
pub fn inner_adapt(
    state: &MetaState,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    support: &[EpisodeSample],
    lr: f64,
    steps: usize,
) -> Result<CotSteps<StepFactors>> {
    if support.is_empty() {
        return Err(Error::Contract("adaptation needs at least one support sample".into()));
    }
    let g = Graph::new();
    let lm_vars = lm.install_frozen(&g);
    let installed = install_state(&g, state, false)?;
    let opts = state.config.cot_options();
    let settings = InnerSettings {
        lr,
        steps,
        // Adaptation here produces values, not a differentiable trajectory.
        second_order: false,
    };
    let (adapted, _) = adapt_handles(&g, &installed.adaptable, &settings, |g, cur| {
        samples_loss(g, lm, &lm_vars, tokenizer, &installed, cur, support, &opts)
    })?;
    installed.adapted_factors(&g, &adapted, &state.steps)
}
