//! The three-phase training pipeline.
//!
//! 1. **Pretraining** — the mixture-of-experts classifier learns from the
//!    pooled source data behind a zero prompt (Adam), fixing the sequence
//!    geometry that prompts will later occupy.
//! 2. **Prompt tuning** — with the backbone frozen, a Reptile-style loop
//!    trains the common prompt `P` and one conditional generator per source
//!    domain against the combined objective `G = ℓ_R + λ₁·ℓ_D + λ₂·ℓ_F`.
//!    Each step samples one domain, takes a local gradient step on its
//!    generator, and interpolates `P` toward its post-step value.
//! 3. **Target transfer** — a fresh generator for the target domain is fit
//!    by gradient descent on a handful of labeled shots, with `P` and the
//!    backbone frozen.
//!
//! Adaptation then selects the source whose domain prompt is nearest (by
//! cosine) to the target's and predicts with that source's generator.
//! Everything is deterministic given [`Seeds`]: each stage derives its own
//! ChaCha stream, so stages can be re-run independently without
//! perturbing one another.

use std::collections::HashMap;

use numgrad::Tensor;
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, LabeledInstance, SeriesTensor, SplitTag};
use crate::error::PondError;
use crate::model::{
    load_checkpoint, moe_forward, restore_params, save_checkpoint, Checkpoint, ModelConfig,
    MoEModel,
};
use crate::nets::{self, NetCtx};
use crate::objective::{
    batch_ce_net, loss_d_net, weighted_total_net, LossBreakdown, LossWeights,
};
use crate::prompt::{
    aggregate_domain_prompt, generate_instance_prompt, prepend, DomainPromptBuffer,
    GeneratorParams, Prompt, GENERATOR_HIDDEN,
};
use crate::Result;

/// Momentum of the per-domain prompt buffers that stand in for the other
/// domains' expectations inside the discrimination loss.
pub const PROMPT_BUFFER_BETA: f64 = 0.9;

/// Per-stage RNG streams, so re-running one stage never shifts another.
const STREAM_PRETRAIN: u64 = 0;
const STREAM_TUNE: u64 = 1;
const STREAM_TRANSFER: u64 = 2;

/// Component switches for ablation runs. All on = the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Off → a single expert (no mixture routing).
    pub use_moe: bool,
    /// Off → the common prompt is clamped to zero and never updated.
    pub use_common_prompt: bool,
    /// Off → conditional generators are clamped to zero output.
    pub use_generator: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_moe: true,
            use_common_prompt: true,
            use_generator: true,
        }
    }
}

/// Seeds for the independent random stages of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Model and generator initialization.
    pub model: u64,
    /// Batch shuffling and domain sampling across all training stages.
    pub train: u64,
    /// Target shot selection.
    pub shots: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 1,
            train: 2,
            shots: 3,
        }
    }
}

/// Hyperparameters of the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Passes over the data in pretraining and in target transfer.
    pub epochs: usize,
    /// Minibatch size.
    pub batch: usize,
    /// Global prompt-tuning steps N.
    pub steps: usize,
    /// Global interpolation rate δ of the prompt-tuning outer update.
    pub delta: f64,
    /// Local gradient rate η of generator and prompt steps.
    pub eta: f64,
    /// Prompt length m.
    pub prompt_len: usize,
    /// Objective trade-off weights.
    pub weights: LossWeights,
    /// Labeled target shots drawn for transfer.
    pub shots: usize,
    pub seeds: Seeds,
    pub ablation: AblationFlags,
    /// Condition the fidelity loss on `[P+ΔP, x]` instead of `[ΔP, x]`.
    /// Off by default: the fidelity term judges the conditional prompt on
    /// its own.
    pub fidelity_uses_common_prompt: bool,
    /// Drive the common-prompt update with ∇P of the full objective G
    /// (default) rather than of ℓ_R alone.
    pub prompt_update_full_objective: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 50,
            batch: 16,
            steps: 50,
            delta: 0.01,
            eta: 0.001,
            prompt_len: 5,
            weights: LossWeights::default(),
            shots: 10,
            seeds: Seeds::default(),
            ablation: AblationFlags::default(),
            fidelity_uses_common_prompt: false,
            prompt_update_full_objective: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(PondError::config(format!(
                "global rate δ must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PondError::config(format!(
                "local rate η must be positive, got {}",
                self.eta
            )));
        }
        if self.steps < 1 {
            return Err(PondError::config("prompt tuning needs N ≥ 1 steps"));
        }
        if self.batch < 1 {
            return Err(PondError::config("batch size must be ≥ 1"));
        }
        if self.prompt_len < 1 {
            return Err(PondError::config("prompt length m must be ≥ 1"));
        }
        if self.shots < 1 {
            return Err(PondError::config("target transfer needs ≥ 1 shot"));
        }
        self.weights.validate()
    }
}

/// Everything the pipeline has learned so far. Produced by
/// [`reptile_tune`], extended by [`target_transfer`], consumed by
/// [`select_source`] and [`predict_target`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    /// The frozen backbone classifier.
    pub model: MoEModel,
    /// The run that produced this state (ablation flags matter at
    /// prediction time).
    pub run: RunConfig,
    /// The common prompt P.
    pub common: Prompt,
    /// Dataset ids of the source domains, parallel to `generators`.
    pub source_ids: Vec<String>,
    /// One conditional prompt generator per source domain.
    pub generators: Vec<GeneratorParams>,
    /// EMA buffers of each source's domain prompt, as used inside the
    /// discrimination loss during tuning.
    pub buffers: Vec<DomainPromptBuffer>,
    /// Exact domain prompts: full tuning-split means under the final
    /// generators.
    pub source_prompts: Vec<Prompt>,
    /// The target generator, present after transfer.
    pub target_generator: Option<GeneratorParams>,
    /// Exact target domain prompt (mean over the shots), after transfer.
    pub target_prompt: Option<Prompt>,
    /// Objective breakdown per tuning step.
    pub tune_history: Vec<LossBreakdown>,
    /// Mean shot loss per transfer epoch.
    pub transfer_history: Vec<f64>,
    /// True when tuning ran with exactly two domains, where the
    /// discrimination loss degrades to raw pairwise similarity.
    pub d_fallback: bool,
}

/// The result of pretraining: the trained backbone plus its loss record.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MoEModel,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Total optimizer steps taken.
    pub steps: usize,
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Index of the largest value, ties broken toward the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn series_tensor(x: &SeriesTensor) -> Result<Tensor> {
    Ok(Tensor::new(
        &[x.channels(), x.len()],
        x.values().to_vec(),
    )?)
}

fn flat_series_tensor(x: &SeriesTensor) -> Result<Tensor> {
    Ok(Tensor::new(
        &[1, x.channels() * x.len()],
        x.values().to_vec(),
    )?)
}

/// One plain gradient-descent step, in place.
fn gd_step(value: &mut Tensor, grad: &Tensor, rate: f64) {
    for (v, g) in value.values_mut().iter_mut().zip(grad.values()) {
        *v -= rate * g;
    }
}

/// Adam with per-parameter state keyed by name. The timestep advances once
/// per optimizer step, shared by every parameter.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, value: &mut Tensor, grad: &Tensor) {
        debug_assert!(self.t > 0, "begin_step before update");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.numel()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.numel()]);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((slot, g), (mi, vi)) in value
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *slot -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn check_run_matches_model(run: &RunConfig, config: &ModelConfig) -> Result<()> {
    if run.prompt_len != config.prompt_len {
        return Err(PondError::incompatible(format!(
            "run prompt length m={} does not match the model's m={}",
            run.prompt_len, config.prompt_len
        )));
    }
    Ok(())
}

fn check_instance_geometry(config: &ModelConfig, inst: &LabeledInstance) -> Result<()> {
    if inst.series.channels() != config.channels || inst.series.len() != config.series_len {
        return Err(PondError::incompatible(format!(
            "instance geometry {}×{} does not match the model's {}×{}",
            inst.series.channels(),
            inst.series.len(),
            config.channels,
            config.series_len
        )));
    }
    if inst.label >= config.classes {
        return Err(PondError::incompatible(format!(
            "label {} out of range for K = {}",
            inst.label, config.classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the model on `[0-prompt, x]` over a pool — the
/// pretraining objective as a plain value.
pub fn mean_zero_prompt_loss(model: &MoEModel, pool: &[&LabeledInstance]) -> Result<f64> {
    if pool.is_empty() {
        return Err(PondError::config("loss over an empty pool"));
    }
    let zero = Prompt::zeros(model.config.channels, model.config.prompt_len);
    let mut sum = 0.0;
    for inst in pool {
        check_instance_geometry(&model.config, inst)?;
        let prompted = prepend(&zero, &zero, &inst.series)?;
        let probs = moe_forward(model, &prompted)?;
        sum += -probs.values()[inst.label].ln();
    }
    Ok(sum / pool.len() as f64)
}

/// Phase one: train experts and router jointly by minibatch Adam on
/// cross-entropy behind a zero prompt of length m. The prompt region is
/// all zeros but present, so later prompt tuning never changes the
/// sequence geometry the backbone saw.
pub fn pretrain(
    mut model: MoEModel,
    pool: &[&LabeledInstance],
    run: &RunConfig,
) -> Result<PretrainOutcome> {
    run.validate()?;
    check_run_matches_model(run, &model.config)?;
    if pool.is_empty() {
        return Err(PondError::config("pretraining needs a non-empty pool"));
    }
    for inst in pool {
        check_instance_geometry(&model.config, inst)?;
    }
    let config = model.config.clone();
    let zero_prompt = Tensor::zeros(&[config.channels, config.prompt_len]);
    let mut rng = stage_rng(run.seeds.train, STREAM_PRETRAIN);
    let mut adam = Adam::new(1e-3);
    let mut epoch_losses = Vec::with_capacity(run.epochs);
    let mut steps = 0usize;

    for _ in 0..run.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(run.batch) {
            let mut ctx = NetCtx::new();
            let prompt_node = ctx.frozen(&zero_prompt);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = ctx.frozen(&series_tensor(&pool[i].series)?);
                let prompted = ctx.g.concat(1, &[prompt_node, x])?;
                rows.push(nets::moe_net(&mut ctx, &model, "", prompted, true)?);
                labels.push(pool[i].label);
            }
            let loss = batch_ce_net(&mut ctx, &rows, &labels, config.classes)?;
            let eval = ctx.g.forward(&ctx.binds)?;
            batch_losses.push(eval.value(loss).item());
            let mut grads = eval.backward(loss)?;
            let by_name = ctx.grads_by_name(&mut grads);
            adam.begin_step();
            model.visit_mut(&mut |name, slot| {
                if let Some(g) = by_name.get(name) {
                    adam.update(name, slot, g);
                }
            });
            steps += 1;
        }
        epoch_losses.push(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64);
    }
    Ok(PretrainOutcome {
        model,
        epoch_losses,
        steps,
    })
}

/// Exact domain prompt of one generator: the mean instance prompt over a
/// full set of instances.
fn exact_domain_prompt(
    gen: &GeneratorParams,
    instances: &[&LabeledInstance],
) -> Result<Prompt> {
    let prompts = instances
        .iter()
        .map(|inst| generate_instance_prompt(gen, &inst.series))
        .collect::<Result<Vec<_>>>()?;
    aggregate_domain_prompt(&prompts)
}

/// Phase two: Reptile-style prompt tuning over the sources' tuning splits.
///
/// Per global step: sample one domain uniformly, draw a batch, build the
/// combined objective G (the current domain's prompt enters as the
/// differentiable batch mean, the others as frozen EMA buffers), take a
/// local gradient step on that domain's generator, and interpolate the
/// common prompt toward its locally descended value:
/// `Q = P − η·∇P`, then `P ← P + δ·(Q − P)`.
///
/// The backbone stays bit-identical throughout. After the last step, the
/// exact domain prompts are recomputed as full tuning-split means so that
/// later source selection uses fully converged aggregates rather than the
/// running buffers.
pub fn reptile_tune(
    model: &MoEModel,
    sources: &[&DomainDataset],
    run: &RunConfig,
) -> Result<TrainedState> {
    run.validate()?;
    check_run_matches_model(run, &model.config)?;
    if sources.is_empty() {
        return Err(PondError::config(
            "prompt tuning needs at least one source domain",
        ));
    }
    let config = &model.config;
    let domains = sources.len();
    let mut tune_sets: Vec<Vec<&LabeledInstance>> = Vec::with_capacity(domains);
    for source in sources {
        if source.classes() != config.classes {
            return Err(PondError::incompatible(format!(
                "source '{}' has K={} classes, the model expects {}",
                source.domain_id(),
                source.classes(),
                config.classes
            )));
        }
        let set = source.with_tag(SplitTag::Tune);
        if set.is_empty() {
            return Err(PondError::config(format!(
                "source '{}' has no tuning split",
                source.domain_id()
            )));
        }
        for inst in &set {
            check_instance_geometry(config, inst)?;
        }
        tune_sets.push(set);
    }

    let (n, l, m) = (config.channels, config.series_len, config.prompt_len);
    // Every generator starts from the same seeded initialization: domain
    // prompts then differ only through what tuning taught each generator,
    // which is what nearest-neighbor selection relies on.
    let mut generators = (0..domains)
        .map(|_| GeneratorParams::init(n, l, m, GENERATOR_HIDDEN, run.seeds.model))
        .collect::<Result<Vec<_>>>()?;
    let mut common = Prompt::zeros(n, m);
    let zero_delta = Tensor::zeros(&[n, m]);

    // Buffers start at each domain's initial exact prompt so the
    // discrimination loss is defined from the very first step.
    let mut buffers = Vec::with_capacity(domains);
    for (gen, set) in generators.iter().zip(&tune_sets) {
        let mut buffer = DomainPromptBuffer::new(PROMPT_BUFFER_BETA)?;
        let seed_prompt = if run.ablation.use_generator {
            exact_domain_prompt(gen, set)?
        } else {
            Prompt::zeros(n, m)
        };
        buffer.update(&[seed_prompt])?;
        buffers.push(buffer);
    }

    let mut rng = stage_rng(run.seeds.train, STREAM_TUNE);
    let mut tune_history = Vec::with_capacity(run.steps);
    let mut d_fallback = false;

    for _ in 0..run.steps {
        let tau = rng.random_range(0..domains);
        let mut idx: Vec<usize> = (0..tune_sets[tau].len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(run.batch.min(tune_sets[tau].len()));
        let batch: Vec<&LabeledInstance> = idx.iter().map(|&i| tune_sets[tau][i]).collect();

        let mut ctx = NetCtx::new();
        let p_node = if run.ablation.use_common_prompt {
            ctx.leaf("P", &common.to_tensor()?)?
        } else {
            ctx.frozen(&zero_delta)
        };
        let mut rows_r = Vec::with_capacity(batch.len());
        let mut rows_f = Vec::with_capacity(batch.len());
        let mut deltas = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for inst in &batch {
            let delta = if run.ablation.use_generator {
                let flat = ctx.frozen(&flat_series_tensor(&inst.series)?);
                nets::generator_net(&mut ctx, &generators[tau], "gen", flat, true)?
            } else {
                ctx.frozen(&zero_delta)
            };
            let x = ctx.frozen(&series_tensor(&inst.series)?);
            let full = ctx.g.add(p_node, delta)?;
            let prompted_r = ctx.g.concat(1, &[full, x])?;
            rows_r.push(nets::moe_net(&mut ctx, model, "", prompted_r, false)?);
            let f_region = if run.fidelity_uses_common_prompt {
                full
            } else {
                delta
            };
            let prompted_f = ctx.g.concat(1, &[f_region, x])?;
            rows_f.push(nets::moe_net(&mut ctx, model, "", prompted_f, false)?);
            deltas.push(delta);
            labels.push(inst.label);
        }
        let l_r = batch_ce_net(&mut ctx, &rows_r, &labels, config.classes)?;
        let l_f = batch_ce_net(&mut ctx, &rows_f, &labels, config.classes)?;

        // Current domain's prompt as the differentiable batch mean; the
        // other domains enter as constants from their EMA buffers.
        let mut mean_delta = deltas[0];
        for d in &deltas[1..] {
            mean_delta = ctx.g.add(mean_delta, *d)?;
        }
        let mean_delta = ctx.g.scale(mean_delta, 1.0 / deltas.len() as f64)?;
        let l_d = if domains >= 2 {
            // The loss needs each prompt's current value alongside its
            // node, to anchor the numerically shifted log-sum-exp.
            let tau_value = if run.ablation.use_generator {
                exact_domain_prompt(&generators[tau], &batch)?
            } else {
                Prompt::zeros(n, m)
            };
            let mut prompt_nodes = Vec::with_capacity(domains);
            let mut prompt_values = Vec::with_capacity(domains);
            for i in 0..domains {
                if i == tau {
                    prompt_nodes.push(mean_delta);
                    prompt_values.push(tau_value.clone());
                } else {
                    let held = buffers[i].value().expect("buffers are pre-seeded");
                    prompt_nodes.push(ctx.frozen(&held.to_tensor()?));
                    prompt_values.push(held.clone());
                }
            }
            let (node, fallback) = loss_d_net(&mut ctx, &prompt_nodes, &prompt_values)?;
            d_fallback |= fallback;
            Some(node)
        } else {
            None
        };
        let g_node = weighted_total_net(&mut ctx, l_r, l_d, Some(l_f), &run.weights)?;

        let eval = ctx.g.forward(&ctx.binds)?;
        let mut grads = eval.backward(g_node)?;
        let by_name = ctx.grads_by_name(&mut grads);

        if run.ablation.use_generator {
            generators[tau].visit_mut(&mut |name, slot| {
                if let Some(g) = by_name.get(&format!("gen.{name}")) {
                    gd_step(slot, g, run.eta);
                }
            });
        }
        if run.ablation.use_common_prompt {
            let p_grad = if run.prompt_update_full_objective {
                by_name.get("P").cloned()
            } else {
                let mut r_grads = eval.backward(l_r)?;
                ctx.grads_by_name(&mut r_grads).remove("P")
            };
            if let Some(gp) = p_grad {
                let values = common
                    .values()
                    .iter()
                    .zip(gp.values())
                    .map(|(p, g)| {
                        let q = p - run.eta * g;
                        p + run.delta * (q - p)
                    })
                    .collect();
                common = Prompt::new(n, m, values)?;
            }
        }

        tune_history.push(LossBreakdown {
            loss_r: eval.value(l_r).item(),
            loss_f: eval.value(l_f).item(),
            loss_d: l_d.map_or(0.0, |d| eval.value(d).item()),
            total: eval.value(g_node).item(),
        });

        let batch_mean = if run.ablation.use_generator {
            Prompt::from_tensor(eval.value(mean_delta))?
        } else {
            Prompt::zeros(n, m)
        };
        buffers[tau].update(&[batch_mean])?;
    }

    let mut source_prompts = Vec::with_capacity(domains);
    for (gen, set) in generators.iter().zip(&tune_sets) {
        source_prompts.push(if run.ablation.use_generator {
            exact_domain_prompt(gen, set)?
        } else {
            Prompt::zeros(n, m)
        });
    }

    Ok(TrainedState {
        model: model.clone(),
        run: run.clone(),
        common,
        source_ids: sources.iter().map(|s| s.domain_id().to_string()).collect(),
        generators,
        buffers,
        source_prompts,
        target_generator: None,
        target_prompt: None,
        tune_history,
        transfer_history: Vec::new(),
        d_fallback,
    })
}

/// Phase three: fit the target generator on the labeled shots by plain
/// gradient descent at rate η for `epochs` passes. The backbone and the
/// common prompt stay frozen; only the target generator learns.
pub fn target_transfer(
    state: &TrainedState,
    shots: &[LabeledInstance],
    run: &RunConfig,
) -> Result<TrainedState> {
    run.validate()?;
    let config = &state.model.config;
    check_run_matches_model(run, config)?;
    if shots.is_empty() {
        return Err(PondError::config("target transfer needs at least one shot"));
    }
    for inst in shots {
        check_instance_geometry(config, inst)?;
    }
    let (n, l, m) = (config.channels, config.series_len, config.prompt_len);
    let mut state = state.clone();
    let mut gen = GeneratorParams::init(n, l, m, GENERATOR_HIDDEN, run.seeds.model)?;
    let mut history = Vec::with_capacity(run.epochs);

    if run.ablation.use_generator {
        let p_tensor = state.common.to_tensor()?;
        let mut rng = stage_rng(run.seeds.train, STREAM_TRANSFER);
        for _ in 0..run.epochs {
            let mut order: Vec<usize> = (0..shots.len()).collect();
            if shots.len() > run.batch {
                order.shuffle(&mut rng);
            }
            let mut batch_losses = Vec::new();
            for chunk in order.chunks(run.batch) {
                let mut ctx = NetCtx::new();
                let p_node = ctx.frozen(&p_tensor);
                let mut rows = Vec::with_capacity(chunk.len());
                let mut labels = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let flat = ctx.frozen(&flat_series_tensor(&shots[i].series)?);
                    let delta = nets::generator_net(&mut ctx, &gen, "gen", flat, true)?;
                    let x = ctx.frozen(&series_tensor(&shots[i].series)?);
                    let full = ctx.g.add(p_node, delta)?;
                    let prompted = ctx.g.concat(1, &[full, x])?;
                    rows.push(nets::moe_net(&mut ctx, &state.model, "", prompted, false)?);
                    labels.push(shots[i].label);
                }
                let loss = batch_ce_net(&mut ctx, &rows, &labels, config.classes)?;
                let eval = ctx.g.forward(&ctx.binds)?;
                batch_losses.push(eval.value(loss).item());
                let mut grads = eval.backward(loss)?;
                let by_name = ctx.grads_by_name(&mut grads);
                gen.visit_mut(&mut |name, slot| {
                    if let Some(g) = by_name.get(&format!("gen.{name}")) {
                        gd_step(slot, g, run.eta);
                    }
                });
            }
            history.push(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64);
        }
    }

    let shot_refs: Vec<&LabeledInstance> = shots.iter().collect();
    state.target_prompt = Some(if run.ablation.use_generator {
        exact_domain_prompt(&gen, &shot_refs)?
    } else {
        Prompt::zeros(n, m)
    });
    state.target_generator = Some(gen);
    state.transfer_history = history;
    Ok(state)
}

/// Mean cross-entropy of the full prompted model `f([P+g(x), x])` on a
/// labeled set — the transfer objective as a plain value.
pub fn mean_prompted_loss(
    model: &MoEModel,
    common: &Prompt,
    gen: &GeneratorParams,
    set: &[LabeledInstance],
) -> Result<f64> {
    crate::objective::loss_r(model, common, gen, set)
}

/// Prompt adaptation: pick the source whose exact domain prompt is most
/// cosine-similar to the target's. Zero-norm prompts count as similarity
/// −1; ties go to the lowest domain index. Returns the source's position
/// in `state.source_ids`.
pub fn select_source(state: &TrainedState) -> Result<usize> {
    let target = state
        .target_prompt
        .as_ref()
        .ok_or_else(|| PondError::config("source selection needs a transferred target prompt"))?;
    if state.source_prompts.is_empty() {
        return Err(PondError::config("source selection needs source domains"));
    }
    let sims = source_similarities(state, target);
    Ok(argmax(&sims))
}

/// Cosine similarity of each source's exact domain prompt to `target`,
/// with zero-norm (or mismatched) prompts scored −1.
pub fn source_similarities(state: &TrainedState, target: &Prompt) -> Vec<f64> {
    state
        .source_prompts
        .iter()
        .map(|p| p.cosine(target).unwrap_or(-1.0))
        .collect()
}

/// Predict a target instance with the selected source's generator:
/// argmax of `f([P + g(x), x])`, ties to the lowest class. With generators
/// ablated the prompt region is `P` alone.
pub fn predict_target(
    state: &TrainedState,
    source: usize,
    x: &SeriesTensor,
) -> Result<(usize, Vec<f64>)> {
    let config = &state.model.config;
    if source >= state.generators.len() {
        return Err(PondError::config(format!(
            "selected source {source} out of range for {} sources",
            state.generators.len()
        )));
    }
    let delta = if state.run.ablation.use_generator {
        generate_instance_prompt(&state.generators[source], x)?
    } else {
        Prompt::zeros(config.channels, config.prompt_len)
    };
    let prompted = prepend(&state.common, &delta, x)?;
    let probs = moe_forward(&state.model, &prompted)?;
    let values = probs.values().to_vec();
    Ok((argmax(&values), values))
}

// ---------------------------------------------------------------------
// Flexibility demonstration
// ---------------------------------------------------------------------

/// Setup of the two-instance flexibility experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlexConfig {
    pub seeds: Vec<u64>,
    /// Gradient steps each variant may spend per seed.
    pub step_budget: usize,
    pub learning_rate: f64,
}

impl Default for FlexConfig {
    fn default() -> Self {
        FlexConfig {
            seeds: (0..10).collect(),
            step_budget: 2000,
            learning_rate: 0.05,
        }
    }
}

/// Per-seed outcome of the flexibility experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlexOutcome {
    pub seed: u64,
    /// Best training accuracy the single shared prompt reached.
    pub prompt_best_accuracy: f64,
    /// Step at which prompt-only tuning fit both instances, if it did.
    pub prompt_fit_step: Option<usize>,
    /// Step at which the per-domain generators fit both instances.
    pub generator_fit_step: Option<usize>,
}

/// Aggregate report of the flexibility experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlexReport {
    pub step_budget: usize,
    pub outcomes: Vec<FlexOutcome>,
    /// Seeds on which the generator variant fit both instances.
    pub generator_hits: usize,
    /// Control with non-conflicting labels: did prompt-only tuning fit?
    pub control_prompt_fit: bool,
    /// Control with non-conflicting labels: did the generator variant fit?
    pub control_generator_fit: bool,
}

fn flex_model_config() -> ModelConfig {
    ModelConfig {
        channels: 1,
        series_len: 16,
        prompt_len: 8,
        classes: 2,
        d_model: 8,
        heads: 2,
        blocks: 1,
        d_ff: 16,
        experts: 1,
        patch: crate::model::PatchConfig {
            patch_len: 8,
            stride: 4,
        },
        router_hidden: 4,
    }
}

/// Pretrain a small backbone on unrelated random data, then freeze it.
fn flex_backbone(seed: u64) -> Result<MoEModel> {
    let config = flex_model_config();
    let mut rng = stage_rng(seed, 7);
    let pool: Vec<LabeledInstance> = (0..16)
        .map(|i| {
            let values = (0..config.series_len)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Ok(LabeledInstance {
                series: SeriesTensor::new(1, config.series_len, values)?,
                label: i % 2,
            })
        })
        .collect::<Result<_>>()?;
    let run = RunConfig {
        epochs: 20,
        batch: 16,
        prompt_len: config.prompt_len,
        seeds: Seeds {
            model: seed,
            train: seed,
            shots: seed,
        },
        ..RunConfig::default()
    };
    let refs: Vec<&LabeledInstance> = pool.iter().collect();
    Ok(pretrain(MoEModel::init(&config, seed)?, &refs, &run)?.model)
}

/// The two instances: a shared suffix behind opposite-sign prefixes.
fn flex_pair(seed: u64, conflicting: bool) -> Result<[LabeledInstance; 2]> {
    let config = flex_model_config();
    let mut rng = stage_rng(seed, 8);
    let half = config.series_len / 2;
    let suffix: Vec<f64> = (0..half).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = |prefix_sign: f64, label: usize| -> Result<LabeledInstance> {
        let mut values = vec![prefix_sign * 2.0; half];
        values.extend_from_slice(&suffix);
        Ok(LabeledInstance {
            series: SeriesTensor::new(1, config.series_len, values)?,
            label,
        })
    };
    Ok([
        build(1.0, 0)?,
        build(-1.0, if conflicting { 1 } else { 0 })?,
    ])
}

/// Run one variant until it fits both instances or the budget runs out.
/// Returns (fit step, best accuracy seen).
fn flex_run_variant(
    model: &MoEModel,
    pair: &[LabeledInstance; 2],
    use_generators: bool,
    seed: u64,
    budget: usize,
    lr: f64,
) -> Result<(Option<usize>, f64)> {
    let config = &model.config;
    let (n, l, m) = (config.channels, config.series_len, config.prompt_len);
    let mut gens = vec![
        GeneratorParams::init(n, l, m, 16, seed)?,
        GeneratorParams::init(n, l, m, 16, seed)?,
    ];
    let mut p = Prompt::zeros(n, m);
    let labels: Vec<usize> = pair.iter().map(|i| i.label).collect();
    let mut best = 0.0f64;
    for step in 0..=budget {
        let mut ctx = NetCtx::new();
        let mut rows = Vec::with_capacity(2);
        for (i, inst) in pair.iter().enumerate() {
            let x = ctx.frozen(&series_tensor(&inst.series)?);
            let prompt_node = if use_generators {
                let flat = ctx.frozen(&flat_series_tensor(&inst.series)?);
                nets::generator_net(&mut ctx, &gens[i], &format!("g{i}"), flat, true)?
            } else {
                ctx.leaf("P", &p.to_tensor()?)?
            };
            let prompted = ctx.g.concat(1, &[prompt_node, x])?;
            rows.push(nets::moe_net(&mut ctx, model, "", prompted, false)?);
        }
        let loss = batch_ce_net(&mut ctx, &rows, &labels, config.classes)?;
        let eval = ctx.g.forward(&ctx.binds)?;
        let correct = rows
            .iter()
            .zip(&labels)
            .filter(|(row, label)| argmax(eval.value(**row).values()) == **label)
            .count();
        best = best.max(correct as f64 / 2.0);
        if correct == 2 {
            return Ok((Some(step), best));
        }
        if step == budget {
            break;
        }
        let mut grads = eval.backward(loss)?;
        let by_name = ctx.grads_by_name(&mut grads);
        if use_generators {
            for (i, gen) in gens.iter_mut().enumerate() {
                gen.visit_mut(&mut |name, slot| {
                    if let Some(g) = by_name.get(&format!("g{i}.{name}")) {
                        gd_step(slot, g, lr);
                    }
                });
            }
        } else if let Some(gp) = by_name.get("P") {
            let values = p
                .values()
                .iter()
                .zip(gp.values())
                .map(|(v, g)| v - lr * g)
                .collect();
            p = Prompt::new(n, m, values)?;
        }
    }
    Ok((None, best))
}

/// The flexibility experiment: can a single shared prompt make a frozen
/// backbone give different labels to two instances that differ only in
/// their prefix — and can per-domain conditional generators?
///
/// The generator variant's success is the demonstrable half; the
/// prompt-only variant's best accuracy is recorded per seed without any
/// claim, since whether some prompt works depends on the frozen backbone.
pub fn flexibility_demo(flex: &FlexConfig) -> Result<FlexReport> {
    if flex.seeds.is_empty() || flex.step_budget == 0 || flex.learning_rate <= 0.0 {
        return Err(PondError::config(
            "flexibility demo needs seeds, a positive step budget, and a positive rate",
        ));
    }
    let mut outcomes = Vec::with_capacity(flex.seeds.len());
    let mut generator_hits = 0usize;
    for &seed in &flex.seeds {
        let model = flex_backbone(seed)?;
        let pair = flex_pair(seed, true)?;
        let (p_fit, p_best) = flex_run_variant(
            &model,
            &pair,
            false,
            seed,
            flex.step_budget,
            flex.learning_rate,
        )?;
        let (g_fit, _) = flex_run_variant(
            &model,
            &pair,
            true,
            seed,
            flex.step_budget,
            flex.learning_rate,
        )?;
        if g_fit.is_some() {
            generator_hits += 1;
        }
        outcomes.push(FlexOutcome {
            seed,
            prompt_best_accuracy: p_best,
            prompt_fit_step: p_fit,
            generator_fit_step: g_fit,
        });
    }
    // Non-conflicting control on the first seed: both variants must fit.
    let control_seed = flex.seeds[0];
    let model = flex_backbone(control_seed)?;
    let pair = flex_pair(control_seed, false)?;
    let (control_p, _) = flex_run_variant(
        &model,
        &pair,
        false,
        control_seed,
        flex.step_budget,
        flex.learning_rate,
    )?;
    let (control_g, _) = flex_run_variant(
        &model,
        &pair,
        true,
        control_seed,
        flex.step_budget,
        flex.learning_rate,
    )?;
    Ok(FlexReport {
        step_budget: flex.step_budget,
        outcomes,
        generator_hits,
        control_prompt_fit: control_p.is_some(),
        control_generator_fit: control_g.is_some(),
    })
}

// ---------------------------------------------------------------------
// State checkpointing
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BufferMeta {
    beta: f64,
    updates: usize,
    has_value: bool,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    model: ModelConfig,
    run: RunConfig,
    source_ids: Vec<String>,
    generator_hidden: usize,
    buffers: Vec<BufferMeta>,
    tune_history: Vec<LossBreakdown>,
    transfer_history: Vec<f64>,
    d_fallback: bool,
    has_target: bool,
}

fn push_generator(tensors: &mut Vec<(String, Tensor)>, prefix: &str, gen: &GeneratorParams) {
    gen.visit(&mut |name, t| tensors.push((format!("{prefix}.{name}"), t.clone())));
}

fn take_tensor<'a>(
    tensors: &'a [(String, Tensor)],
    cursor: &mut usize,
    want: &str,
) -> Result<&'a Tensor> {
    match tensors.get(*cursor) {
        Some((name, t)) if name == want => {
            *cursor += 1;
            Ok(t)
        }
        Some((name, _)) => Err(PondError::incompatible(format!(
            "state checkpoint has tensor '{name}' where '{want}' was expected"
        ))),
        None => Err(PondError::incompatible(format!(
            "state checkpoint ends before tensor '{want}'"
        ))),
    }
}

fn read_generator(
    tensors: &[(String, Tensor)],
    cursor: &mut usize,
    prefix: &str,
    n: usize,
    l: usize,
    m: usize,
    hidden: usize,
) -> Result<GeneratorParams> {
    let mut renamed = Vec::with_capacity(4);
    for name in ["w1", "b1", "w2", "b2"] {
        let t = take_tensor(tensors, cursor, &format!("{prefix}.{name}"))?;
        renamed.push((name.to_string(), t.clone()));
    }
    let mut gen = GeneratorParams::zeros(n, l, m, hidden)?;
    restore_params(&renamed, |f| gen.visit_mut(f))?;
    Ok(gen)
}

impl TrainedState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            model: self.model.config.clone(),
            run: self.run.clone(),
            source_ids: self.source_ids.clone(),
            generator_hidden: self
                .generators
                .first()
                .map_or(GENERATOR_HIDDEN, |g| g.hidden()),
            buffers: self
                .buffers
                .iter()
                .map(|b| BufferMeta {
                    beta: b.beta(),
                    updates: b.updates(),
                    has_value: b.value().is_some(),
                })
                .collect(),
            tune_history: self.tune_history.clone(),
            transfer_history: self.transfer_history.clone(),
            d_fallback: self.d_fallback,
            has_target: self.target_generator.is_some(),
        };
        let mut tensors = Vec::new();
        self.model
            .visit(&mut |name, t| tensors.push((name.to_string(), t.clone())));
        tensors.push(("common".to_string(), self.common.to_tensor()?));
        for (i, gen) in self.generators.iter().enumerate() {
            push_generator(&mut tensors, &format!("src{i}"), gen);
        }
        for (i, buffer) in self.buffers.iter().enumerate() {
            if let Some(value) = buffer.value() {
                tensors.push((format!("buf{i}"), value.to_tensor()?));
            }
        }
        for (i, prompt) in self.source_prompts.iter().enumerate() {
            tensors.push((format!("srcprompt{i}"), prompt.to_tensor()?));
        }
        if let Some(gen) = &self.target_generator {
            push_generator(&mut tensors, "tgt", gen);
            let prompt = self
                .target_prompt
                .as_ref()
                .ok_or_else(|| PondError::config("adapted state is missing its target prompt"))?;
            tensors.push(("tgtprompt".to_string(), prompt.to_tensor()?));
        }
        Ok(Checkpoint {
            kind: if meta.has_target { "adapted" } else { "tuned" }.to_string(),
            config: serde_json::to_value(&meta)
                .map_err(|e| PondError::config(format!("state metadata does not serialize: {e}")))?,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "tuned" && ck.kind != "adapted" {
            return Err(PondError::incompatible(format!(
                "checkpoint kind '{}' is not a trained state",
                ck.kind
            )));
        }
        let meta: StateMeta = serde_json::from_value(ck.config.clone()).map_err(|e| {
            PondError::incompatible(format!("state checkpoint metadata does not parse: {e}"))
        })?;
        if (ck.kind == "adapted") != meta.has_target {
            return Err(PondError::incompatible(
                "state checkpoint kind disagrees with its target metadata",
            ));
        }
        let mut model = MoEModel::zeros(&meta.model)?;
        let mut model_count = 0usize;
        model.visit(&mut |_, _| model_count += 1);
        if ck.tensors.len() < model_count {
            return Err(PondError::incompatible(
                "state checkpoint ends inside the backbone parameters",
            ));
        }
        restore_params(&ck.tensors[..model_count], |f| model.visit_mut(f))?;

        let (n, l, m) = (
            meta.model.channels,
            meta.model.series_len,
            meta.model.prompt_len,
        );
        let mut cursor = model_count;
        let common = Prompt::from_tensor(take_tensor(&ck.tensors, &mut cursor, "common")?)?;
        let mut generators = Vec::with_capacity(meta.source_ids.len());
        for i in 0..meta.source_ids.len() {
            generators.push(read_generator(
                &ck.tensors,
                &mut cursor,
                &format!("src{i}"),
                n,
                l,
                m,
                meta.generator_hidden,
            )?);
        }
        if meta.buffers.len() != meta.source_ids.len() {
            return Err(PondError::incompatible(
                "state checkpoint buffer metadata does not match its source count",
            ));
        }
        let mut buffers = Vec::with_capacity(meta.buffers.len());
        for (i, bm) in meta.buffers.iter().enumerate() {
            let value = if bm.has_value {
                Some(Prompt::from_tensor(take_tensor(
                    &ck.tensors,
                    &mut cursor,
                    &format!("buf{i}"),
                )?)?)
            } else {
                None
            };
            buffers.push(DomainPromptBuffer::restore(bm.beta, value, bm.updates)?);
        }
        let mut source_prompts = Vec::with_capacity(meta.source_ids.len());
        for i in 0..meta.source_ids.len() {
            source_prompts.push(Prompt::from_tensor(take_tensor(
                &ck.tensors,
                &mut cursor,
                &format!("srcprompt{i}"),
            )?)?);
        }
        let (target_generator, target_prompt) = if meta.has_target {
            let gen = read_generator(
                &ck.tensors,
                &mut cursor,
                "tgt",
                n,
                l,
                m,
                meta.generator_hidden,
            )?;
            let prompt =
                Prompt::from_tensor(take_tensor(&ck.tensors, &mut cursor, "tgtprompt")?)?;
            (Some(gen), Some(prompt))
        } else {
            (None, None)
        };
        if cursor != ck.tensors.len() {
            return Err(PondError::incompatible(format!(
                "state checkpoint carries {} unexpected trailing tensors",
                ck.tensors.len() - cursor
            )));
        }
        Ok(TrainedState {
            model,
            run: meta.run,
            common,
            source_ids: meta.source_ids,
            generators,
            buffers,
            source_prompts,
            target_generator,
            target_prompt,
            tune_history: meta.tune_history,
            transfer_history: meta.transfer_history,
            d_fallback: meta.d_fallback,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}
