//! The training objective and its parts, plus information-theoretic
//! diagnostics.
//!
//! Prompt tuning minimizes `G = ℓ_R + λ₁·ℓ_D + λ₂·ℓ_F`:
//!
//! * `ℓ_R` — batch-mean cross-entropy of the model on `[P+ΔP_j, X_j]`, the
//!   series behind its full prompt;
//! * `ℓ_F` — cross-entropy of the model on `[ΔP_j, X_j]`, the series behind
//!   the conditional prompt alone, pushing generators to carry label
//!   information by themselves (a fidelity surrogate);
//! * `ℓ_D` — a leave-one-out contrast over domain prompts that pushes
//!   different domains' prompts apart, written over ordered domain pairs
//!   with Frobenius inner-product similarity.
//!
//! Every loss exists twice: as a plain value for reporting and tests, and
//! as a graph recipe for training. The MI oracles at the bottom are
//! diagnostics only; they never enter a gradient.

use numgrad::{NodeId, Tensor};

use crate::data::LabeledInstance;
use crate::error::PondError;
use crate::model::{moe_forward, MoEModel};
use crate::nets::NetCtx;
use crate::prompt::{generate_instance_prompt, prepend, GeneratorParams, Prompt};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Trade-off weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Discrimination weight λ₁.
    pub lambda1: f64,
    /// Fidelity weight λ₂.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0)
            || !(self.lambda2.is_finite() && self.lambda2 >= 0.0)
        {
            return Err(PondError::config(format!(
                "loss weights must be finite and ≥ 0, got λ₁={}, λ₂={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// One evaluation of the combined objective, component by component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_r: f64,
    pub loss_f: f64,
    pub loss_d: f64,
    pub total: f64,
}

/// Combine components into the objective: `G = ℓ_R + λ₁·ℓ_D + λ₂·ℓ_F`.
pub fn total_g(loss_r: f64, loss_f: f64, loss_d: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        loss_r,
        loss_f,
        loss_d,
        total: loss_r + weights.lambda1 * loss_d + weights.lambda2 * loss_f,
    }
}

/// Result of the discrimination loss: the value plus a flag marking the
/// two-domain fallback (where the leave-one-out denominator is empty and
/// the loss degrades to raw pairwise similarity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminationLoss {
    pub value: f64,
    pub fallback: bool,
}

/// Frobenius inner product `trace(AᵀB)` — the similarity between two
/// domain prompts.
pub fn frobenius_sim(a: &Prompt, b: &Prompt) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// Training loss ℓ_R: mean cross-entropy of `f([P+g(x), x])` over a batch.
pub fn loss_r(
    model: &MoEModel,
    common: &Prompt,
    gen: &GeneratorParams,
    batch: &[LabeledInstance],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(PondError::config("ℓ_R needs a non-empty batch"));
    }
    let mut sum = 0.0;
    for inst in batch {
        let delta = generate_instance_prompt(gen, &inst.series)?;
        let prompted = prepend(common, &delta, &inst.series)?;
        let probs = moe_forward(model, &prompted)?;
        sum += -probs.values()[inst.label].ln();
    }
    Ok(sum / batch.len() as f64)
}

/// Fidelity loss ℓ_F: cross-entropy of `f([ΔP_j, X_j])` — the conditional
/// prompt alone, without the common prompt — averaged within each domain's
/// batch and summed over domains.
pub fn loss_f(
    model: &MoEModel,
    generators: &[GeneratorParams],
    batches: &[&[LabeledInstance]],
) -> Result<f64> {
    if generators.is_empty() || generators.len() != batches.len() {
        return Err(PondError::config(
            "ℓ_F needs one non-empty batch per generator",
        ));
    }
    let mut total = 0.0;
    for (gen, batch) in generators.iter().zip(batches) {
        if batch.is_empty() {
            return Err(PondError::config("ℓ_F needs a non-empty batch"));
        }
        let zero = Prompt::zeros(gen.channels(), gen.prompt_len());
        let mut sum = 0.0;
        for inst in *batch {
            let delta = generate_instance_prompt(gen, &inst.series)?;
            let prompted = prepend(&zero, &delta, &inst.series)?;
            let probs = moe_forward(model, &prompted)?;
            sum += -probs.values()[inst.label].ln();
        }
        total += sum / batch.len() as f64;
    }
    Ok(total)
}

/// Discrimination loss ℓ_D over domain prompts.
///
/// For M ≥ 3 domains this is the sum over ordered pairs (i₁ ≠ i₂) of
/// `s(i₁,i₂) − logΣ_{i∉{i₁,i₂}} exp(s(i₁,i))` with Frobenius similarity
/// `s`; the log-sum-exp is max-shifted, so a singleton denominator reduces
/// to the bare similarity and three equal (or mutually orthogonal) prompts
/// give exactly zero. For M = 2 the denominator set is empty, so the loss
/// falls back to the raw pairwise similarity and reports the fallback flag.
pub fn loss_d(prompts: &[Prompt]) -> Result<DiscriminationLoss> {
    match prompts.len() {
        0 | 1 => Err(PondError::config(
            "ℓ_D needs at least two domain prompts",
        )),
        2 => Ok(DiscriminationLoss {
            value: frobenius_sim(&prompts[0], &prompts[1]),
            fallback: true,
        }),
        m => {
            let mut sims = vec![vec![0.0f64; m]; m];
            for i in 0..m {
                for j in (i + 1)..m {
                    let s = frobenius_sim(&prompts[i], &prompts[j]);
                    sims[i][j] = s;
                    sims[j][i] = s;
                }
            }
            let mut total = 0.0;
            for i1 in 0..m {
                for i2 in 0..m {
                    if i1 == i2 {
                        continue;
                    }
                    let others: Vec<f64> = (0..m)
                        .filter(|i| *i != i1 && *i != i2)
                        .map(|i| sims[i1][i])
                        .collect();
                    total += sims[i1][i2] - log_sum_exp(&others);
                }
            }
            Ok(DiscriminationLoss {
                value: total,
                fallback: false,
            })
        }
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.len() == 1 {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stack per-instance probability rows `[1, K]` into a batch and take the
/// mean cross-entropy against the labels.
pub(crate) fn batch_ce_net(
    ctx: &mut NetCtx,
    prob_rows: &[NodeId],
    labels: &[usize],
    classes: usize,
) -> Result<NodeId> {
    if prob_rows.is_empty() || prob_rows.len() != labels.len() {
        return Err(PondError::config(
            "batch cross-entropy needs one label per probability row",
        ));
    }
    let probs = if prob_rows.len() == 1 {
        prob_rows[0]
    } else {
        ctx.g.concat(0, prob_rows)?
    };
    let target = ctx.frozen(&one_hot(labels, classes)?);
    let ce = ctx.g.cross_entropy_one_hot(probs, target)?;
    Ok(ctx.g.scale(ce, 1.0 / labels.len() as f64)?)
}

/// One-hot encode labels as a `[B, K]` tensor.
pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut values = vec![0.0f64; labels.len() * classes];
    for (i, label) in labels.iter().enumerate() {
        if *label >= classes {
            return Err(PondError::config(format!(
                "label {label} out of range for K = {classes}"
            )));
        }
        values[i * classes + label] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), classes], values)?)
}

/// Graph form of [`loss_d`] over prompt-valued nodes (each `[n, m]`).
/// Returns the loss node and the two-domain fallback flag.
///
/// `hints` are the prompts' current values, used only to pick a constant
/// shift for each log-sum-exp. Subtracting any constant inside the
/// exponentials and adding it back outside leaves both the value and the
/// gradient of the loss unchanged, but keeps the exponentials bounded
/// even when prompt similarities grow large during training.
pub(crate) fn loss_d_net(
    ctx: &mut NetCtx,
    prompts: &[NodeId],
    hints: &[Prompt],
) -> Result<(NodeId, bool)> {
    let m = prompts.len();
    if m <= 1 {
        return Err(PondError::config(
            "ℓ_D needs at least two domain prompts",
        ));
    }
    if hints.len() != m {
        return Err(PondError::config(
            "ℓ_D needs one value hint per prompt node",
        ));
    }
    // Frobenius similarities, each a rank-0 node; symmetric, built once.
    // `hint_sims` mirrors them numerically for the shift constants.
    let mut sims = vec![vec![None::<NodeId>; m]; m];
    let mut hint_sims = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let prod = ctx.g.mul(prompts[i], prompts[j])?;
            let s = ctx.g.sum_all(prod)?;
            sims[i][j] = Some(s);
            sims[j][i] = Some(s);
            let h = frobenius_sim(&hints[i], &hints[j]);
            hint_sims[i][j] = h;
            hint_sims[j][i] = h;
        }
    }
    let sim = |i: usize, j: usize| sims[i][j].expect("off-diagonal sims exist");

    if m == 2 {
        return Ok((sim(0, 1), true));
    }
    let mut total: Option<NodeId> = None;
    for i1 in 0..m {
        for i2 in 0..m {
            if i1 == i2 {
                continue;
            }
            let others: Vec<usize> = (0..m).filter(|i| *i != i1 && *i != i2).collect();
            let shift = others
                .iter()
                .map(|i| hint_sims[i1][*i])
                .fold(f64::NEG_INFINITY, f64::max);
            let neg_shift = ctx.frozen(&Tensor::scalar(-shift));
            let mut denom: Option<NodeId> = None;
            for i in others {
                let centered = ctx.g.add(sim(i1, i), neg_shift)?;
                let e = ctx.g.exp(centered);
                denom = Some(match denom {
                    None => e,
                    Some(d) => ctx.g.add(d, e)?,
                });
            }
            let log_denom = ctx.g.log(denom.expect("m ≥ 3 leaves a denominator"));
            // lse = shift + log Σ exp(s − shift); the term is s(i1,i2) − lse.
            let neg_lse = ctx.g.scale(log_denom, -1.0)?;
            let term = ctx.g.add(sim(i1, i2), neg_lse)?;
            let term = ctx.g.add(term, neg_shift)?;
            total = Some(match total {
                None => term,
                Some(t) => ctx.g.add(t, term)?,
            });
        }
    }
    Ok((total.expect("m ≥ 3 has terms"), false))
}

/// Graph form of the combined objective:
/// `G = ℓ_R + λ₁·ℓ_D + λ₂·ℓ_F` (missing components contribute nothing).
pub(crate) fn weighted_total_net(
    ctx: &mut NetCtx,
    l_r: NodeId,
    l_d: Option<NodeId>,
    l_f: Option<NodeId>,
    weights: &LossWeights,
) -> Result<NodeId> {
    let mut g = l_r;
    if let Some(d) = l_d {
        let scaled = ctx.g.scale(d, weights.lambda1)?;
        g = ctx.g.add(g, scaled)?;
    }
    if let Some(f) = l_f {
        let scaled = ctx.g.scale(f, weights.lambda2)?;
        g = ctx.g.add(g, scaled)?;
    }
    Ok(g)
}

/// Plug-in Shannon entropy, in bits, of a discrete sample.
pub fn brute_force_entropy(xs: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Err(PondError::config("entropy of an empty sample"));
    }
    let mut counts = std::collections::HashMap::new();
    for x in xs {
        *counts.entry(*x).or_insert(0usize) += 1;
    }
    let n = xs.len() as f64;
    Ok(counts
        .values()
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Plug-in conditional entropy H(Y|X), in bits, from paired samples.
pub fn brute_force_conditional_entropy(ys: &[usize], xs: &[usize]) -> Result<f64> {
    check_paired(xs, ys)?;
    let mut by_x: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for (x, y) in xs.iter().zip(ys) {
        by_x.entry(*x).or_default().push(*y);
    }
    let n = xs.len() as f64;
    let mut h = 0.0;
    for group in by_x.values() {
        h += group.len() as f64 / n * brute_force_entropy(group)?;
    }
    Ok(h)
}

/// Plug-in mutual information I(X;Y), in bits, from paired samples:
/// the empirical joint against the product of empirical marginals.
pub fn brute_force_mi(xs: &[usize], ys: &[usize]) -> Result<f64> {
    check_paired(xs, ys)?;
    let n = xs.len() as f64;
    let mut joint = std::collections::HashMap::new();
    let mut px = std::collections::HashMap::new();
    let mut py = std::collections::HashMap::new();
    for (x, y) in xs.iter().zip(ys) {
        *joint.entry((*x, *y)).or_insert(0usize) += 1;
        *px.entry(*x).or_insert(0usize) += 1;
        *py.entry(*y).or_insert(0usize) += 1;
    }
    let mut mi = 0.0;
    for ((x, y), c) in &joint {
        let pxy = *c as f64 / n;
        let marg = (px[x] as f64 / n) * (py[y] as f64 / n);
        mi += pxy * (pxy / marg).log2();
    }
    Ok(mi)
}

fn check_paired(xs: &[usize], ys: &[usize]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(PondError::config(
            "mutual information needs non-empty paired samples of equal length",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PatchConfig};
    use crate::nets;
    use rand::RngExt;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A classifier whose output is input-independent: all weights zero, so
    /// every activation vanishes and the head bias alone decides the
    /// (exact) softmax output.
    fn bias_model(classes: usize, probs: &[f64]) -> MoEModel {
        let config = ModelConfig {
            channels: 1,
            series_len: 8,
            prompt_len: 2,
            classes,
            d_model: 4,
            heads: 2,
            blocks: 1,
            d_ff: 4,
            experts: 1,
            patch: PatchConfig {
                patch_len: 4,
                stride: 2,
            },
            router_hidden: 2,
        };
        let mut model = MoEModel::zeros(&config).unwrap();
        model.experts[0].head_b =
            Tensor::new(&[classes], probs.iter().map(|p| p.ln()).collect()).unwrap();
        model
    }

    fn batch_for(model: &MoEModel, labels: &[usize]) -> Vec<LabeledInstance> {
        let l = model.config.series_len;
        labels
            .iter()
            .enumerate()
            .map(|(i, label)| LabeledInstance {
                series: crate::data::SeriesTensor::new(
                    1,
                    l,
                    (0..l).map(|t| ((t + i) as f64 * 0.3).sin()).collect(),
                )
                .unwrap(),
                label: *label,
            })
            .collect()
    }

    fn zero_gen(model: &MoEModel) -> GeneratorParams {
        GeneratorParams::zeros(
            model.config.channels,
            model.config.series_len,
            model.config.prompt_len,
            4,
        )
        .unwrap()
    }

    #[test]
    fn loss_r_is_zero_on_exact_one_hot_output() {
        // A +800 logit gap underflows the wrong classes to exactly zero.
        let config = ModelConfig {
            channels: 1,
            series_len: 8,
            prompt_len: 2,
            classes: 2,
            d_model: 4,
            heads: 2,
            blocks: 1,
            d_ff: 4,
            experts: 1,
            patch: PatchConfig {
                patch_len: 4,
                stride: 2,
            },
            router_hidden: 2,
        };
        let mut model = MoEModel::zeros(&config).unwrap();
        model.experts[0].head_b = Tensor::new(&[2], vec![800.0, 0.0]).unwrap();
        let batch = batch_for(&model, &[0]);
        let common = Prompt::zeros(1, 2);
        let loss = loss_r(&model, &common, &zero_gen(&model), &batch).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_r_uniform_six_classes_is_ln_six() {
        let model = bias_model(6, &[1.0 / 6.0; 6]);
        let batch = batch_for(&model, &[3]);
        let common = Prompt::zeros(1, 2);
        let loss = loss_r(&model, &common, &zero_gen(&model), &batch).unwrap();
        assert!((loss - 6.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_r_two_instance_hand_case() {
        // Outputs [.5, .25, .25]; true classes 0 and 1 → (−ln.5 −ln.25)/2.
        let model = bias_model(3, &[0.5, 0.25, 0.25]);
        let batch = batch_for(&model, &[0, 1]);
        let common = Prompt::zeros(1, 2);
        let loss = loss_r(&model, &common, &zero_gen(&model), &batch).unwrap();
        assert!((loss - 1.5 * 2.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_r_rejects_empty_batch() {
        let model = bias_model(2, &[0.5, 0.5]);
        let common = Prompt::zeros(1, 2);
        assert!(loss_r(&model, &common, &zero_gen(&model), &[]).is_err());
    }

    #[test]
    fn loss_f_single_instance_hand_case() {
        let model = bias_model(2, &[0.8, 0.2]);
        let batch = batch_for(&model, &[0]);
        let gens = [zero_gen(&model)];
        let loss = loss_f(&model, &gens, &[&batch]).unwrap();
        assert!((loss + 0.8f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_f_perfect_prediction_is_zero() {
        let config = bias_model(2, &[0.5, 0.5]).config.clone();
        let mut model = MoEModel::zeros(&config).unwrap();
        model.experts[0].head_b = Tensor::new(&[2], vec![0.0, 800.0]).unwrap();
        let batch = batch_for(&model, &[1, 1]);
        let gens = [zero_gen(&model)];
        assert_eq!(loss_f(&model, &gens, &[&batch]).unwrap(), 0.0);
    }

    #[test]
    fn loss_d_equal_prompts_is_exactly_zero() {
        let p = Prompt::new(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let out = loss_d(&[p.clone(), p.clone(), p]).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(!out.fallback);
    }

    #[test]
    fn loss_d_orthogonal_unit_prompts_is_exactly_zero() {
        let a = Prompt::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let b = Prompt::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let c = Prompt::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let out = loss_d(&[a, b, c]).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn loss_d_zero_prompts_match_equal_case() {
        let z = Prompt::zeros(2, 3);
        let out = loss_d(&[z.clone(), z.clone(), z]).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn self_similarity_is_squared_frobenius_norm() {
        let a = Prompt::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(frobenius_sim(&a, &a), 30.0);
    }

    #[test]
    fn two_domain_fallback_returns_similarity_and_flag() {
        let a = Prompt::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Prompt::new(1, 2, vec![-3.0, 0.5]).unwrap();
        let out = loss_d(&[a.clone(), b.clone()]).unwrap();
        assert!(out.fallback);
        assert_eq!(out.value, frobenius_sim(&a, &b));
    }

    #[test]
    fn loss_d_rejects_fewer_than_two_domains() {
        assert!(loss_d(&[]).is_err());
        assert!(loss_d(&[Prompt::zeros(1, 2)]).is_err());
    }

    #[test]
    fn loss_d_is_invariant_under_domain_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prompts: Vec<Prompt> = (0..4)
            .map(|_| {
                Prompt::new(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let base = loss_d(&prompts).unwrap().value;
        let permuted = [
            prompts[2].clone(),
            prompts[0].clone(),
            prompts[3].clone(),
            prompts[1].clone(),
        ];
        let other = loss_d(&permuted).unwrap().value;
        assert!((base - other).abs() < 1e-12, "{base} vs {other}");
    }

    #[test]
    fn total_g_arithmetic() {
        let w = LossWeights::default();
        let b = total_g(1.0, 3.0, 2.0, &w);
        assert_eq!(b.total, 6.0);
        assert_eq!(b.loss_r, 1.0);
        assert_eq!(b.loss_d, 2.0);
        assert_eq!(b.loss_f, 3.0);

        let off = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        };
        assert_eq!(total_g(1.25, 9.0, 7.0, &off).total, 1.25);

        let bottleneck = LossWeights {
            lambda1: 0.0,
            lambda2: 2.0,
        };
        assert_eq!(total_g(1.0, 3.0, 9.0, &bottleneck).total, 7.0);
    }

    /// Build a tiny two-domain G graph and return (leaf names, gradients)
    /// for a configurable inclusion of the component losses.
    fn g_gradients(
        weights: &LossWeights,
        include_f: bool,
        include_d: bool,
    ) -> std::collections::HashMap<String, Tensor> {
        let model = bias_model(2, &[0.6, 0.4]);
        let cfg = &model.config;
        let gen0 = GeneratorParams::init(cfg.channels, cfg.series_len, cfg.prompt_len, 3, 1).unwrap();
        let gen1 = GeneratorParams::init(cfg.channels, cfg.series_len, cfg.prompt_len, 3, 2).unwrap();
        let batch = batch_for(&model, &[0, 1]);
        let common = Prompt::zeros(cfg.channels, cfg.prompt_len);

        let mut ctx = NetCtx::new();
        let common_node = ctx
            .leaf("common", &common.to_tensor().unwrap())
            .unwrap();

        // ℓ_R branch: full prompt (common + generator) per instance.
        let mut rows_r = Vec::new();
        let mut rows_f = Vec::new();
        let mut deltas = Vec::new();
        for inst in &batch {
            let flat = Tensor::new(
                &[1, cfg.channels * cfg.series_len],
                inst.series.values().to_vec(),
            )
            .unwrap();
            let flat_node = ctx.frozen(&flat);
            let delta = nets::generator_net(&mut ctx, &gen0, "gen0", flat_node, true).unwrap();
            deltas.push(delta);
            let x_node = ctx.frozen(
                &Tensor::new(&[cfg.channels, cfg.series_len], inst.series.values().to_vec())
                    .unwrap(),
            );
            let summed = ctx.g.add(common_node, delta).unwrap();
            let prompted = ctx.g.concat(1, &[summed, x_node]).unwrap();
            rows_r.push(nets::moe_net(&mut ctx, &model, "", prompted, false).unwrap());
            let f_prompted = ctx.g.concat(1, &[delta, x_node]).unwrap();
            rows_f.push(nets::moe_net(&mut ctx, &model, "", f_prompted, false).unwrap());
        }
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let l_r = batch_ce_net(&mut ctx, &rows_r, &labels, cfg.classes).unwrap();
        let l_f = if include_f {
            Some(batch_ce_net(&mut ctx, &rows_f, &labels, cfg.classes).unwrap())
        } else {
            None
        };
        let l_d = if include_d {
            // Second domain prompt from another generator on the same data,
            // plus a frozen third prompt so the denominator is non-empty.
            let flat = Tensor::new(
                &[1, cfg.channels * cfg.series_len],
                batch[0].series.values().to_vec(),
            )
            .unwrap();
            let flat_node = ctx.frozen(&flat);
            let other = nets::generator_net(&mut ctx, &gen1, "gen1", flat_node, true).unwrap();
            let third_prompt =
                Prompt::new(cfg.channels, cfg.prompt_len, vec![0.2, -0.1]).unwrap();
            let third = ctx.frozen(&third_prompt.to_tensor().unwrap());
            let mine = deltas[0];
            let hints = [
                generate_instance_prompt(&gen0, &batch[0].series).unwrap(),
                generate_instance_prompt(&gen1, &batch[0].series).unwrap(),
                third_prompt,
            ];
            Some(loss_d_net(&mut ctx, &[mine, other, third], &hints).unwrap().0)
        } else {
            None
        };
        let g = weighted_total_net(&mut ctx, l_r, l_d, l_f, weights).unwrap();
        let eval = ctx.g.forward(&ctx.binds).unwrap();
        let mut grads = eval.backward(g).unwrap();
        ctx.grads_by_name(&mut grads)
    }

    #[test]
    fn zero_fidelity_weight_excludes_it_from_gradients_bitwise() {
        let with = g_gradients(
            &LossWeights {
                lambda1: 0.5,
                lambda2: 0.0,
            },
            true,
            true,
        );
        let without = g_gradients(
            &LossWeights {
                lambda1: 0.5,
                lambda2: 0.0,
            },
            false,
            true,
        );
        assert_eq!(with.len(), without.len());
        for (name, g) in &with {
            let h = &without[name];
            assert_eq!(g.values(), h.values(), "gradient differs for {name}");
        }
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_component_gradients() {
        let weights = LossWeights {
            lambda1: 0.7,
            lambda2: 1.3,
        };
        let combined = g_gradients(&weights, true, true);
        let only_r = g_gradients(
            &LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
            },
            false,
            false,
        );
        let r_plus_d = g_gradients(
            &LossWeights {
                lambda1: 0.7,
                lambda2: 0.0,
            },
            false,
            true,
        );
        let r_plus_f = g_gradients(
            &LossWeights {
                lambda1: 0.0,
                lambda2: 1.3,
            },
            true,
            false,
        );
        for (name, g) in &combined {
            let base = only_r.get(name);
            let d_part = r_plus_d.get(name);
            let f_part = r_plus_f.get(name);
            for i in 0..g.numel() {
                let r = base.map_or(0.0, |t| t.values()[i]);
                let d = d_part.map_or(0.0, |t| t.values()[i]) - r;
                let f = f_part.map_or(0.0, |t| t.values()[i]) - r;
                let want = r + d + f;
                let got = g.values()[i];
                assert!(
                    (got - want).abs() < 1e-12,
                    "{name}[{i}]: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn graph_loss_d_matches_value_loss_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prompts: Vec<Prompt> = (0..5)
            .map(|_| {
                Prompt::new(2, 3, (0..6).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap()
            })
            .collect();
        let by_value = loss_d(&prompts).unwrap();

        let mut ctx = NetCtx::new();
        let nodes: Vec<NodeId> = prompts
            .iter()
            .map(|p| ctx.frozen(&p.to_tensor().unwrap()))
            .collect();
        let (node, fallback) = loss_d_net(&mut ctx, &nodes, &prompts).unwrap();
        assert_eq!(fallback, by_value.fallback);
        let eval = ctx.g.forward(&ctx.binds).unwrap();
        let by_graph = eval.value(node).item();
        assert!(
            (by_graph - by_value.value).abs() < 1e-10,
            "{by_graph} vs {}",
            by_value.value
        );
    }

    /// The graph loss must survive similarities far beyond exp's overflow
    /// threshold, thanks to its shifted log-sum-exp.
    #[test]
    fn graph_loss_d_is_stable_at_large_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prompts: Vec<Prompt> = (0..4)
            .map(|_| {
                Prompt::new(
                    2,
                    3,
                    (0..6).map(|_| rng.random_range(-40.0..40.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let by_value = loss_d(&prompts).unwrap();
        assert!(by_value.value.is_finite());

        let mut ctx = NetCtx::new();
        let nodes: Vec<NodeId> = prompts
            .iter()
            .map(|p| ctx.frozen(&p.to_tensor().unwrap()))
            .collect();
        let (node, _) = loss_d_net(&mut ctx, &nodes, &prompts).unwrap();
        let eval = ctx.g.forward(&ctx.binds).unwrap();
        let by_graph = eval.value(node).item();
        let scale = by_value.value.abs().max(1.0);
        assert!(
            ((by_graph - by_value.value) / scale).abs() < 1e-12,
            "{by_graph} vs {}",
            by_value.value
        );
    }

    #[test]
    fn mi_examples() {
        // Independent: joint is the product of fair marginals.
        let xs = [0, 0, 1, 1];
        let ys = [0, 1, 0, 1];
        assert!(brute_force_mi(&xs, &ys).unwrap().abs() < 1e-12);

        // Identity over four uniform symbols → 2 bits.
        let xs: Vec<usize> = (0..4).collect();
        let mi = brute_force_mi(&xs, &xs).unwrap();
        assert!((mi - 2.0).abs() < 1e-12, "{mi}");

        // Hand-built 2×2 joint [[.4,.1],[.1,.4]] via 10 samples.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y, c) in [(0, 0, 4), (0, 1, 1), (1, 0, 1), (1, 1, 4)] {
            for _ in 0..c {
                xs.push(x);
                ys.push(y);
            }
        }
        let mi = brute_force_mi(&xs, &ys).unwrap();
        let want = 0.8 * 1.6f64.log2() + 0.2 * 0.4f64.log2();
        assert!((mi - want).abs() < 1e-12, "{mi} vs {want}");
        assert!((mi - 0.278072).abs() < 1e-6, "{mi}");
    }

    #[test]
    fn mi_equals_entropy_minus_conditional_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(5..60);
            let kx = rng.random_range(2..5usize);
            let ky = rng.random_range(2..5usize);
            let xs: Vec<usize> = (0..n).map(|_| rng.random_range(0..kx)).collect();
            let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..ky)).collect();
            let mi = brute_force_mi(&xs, &ys).unwrap();
            let hy = brute_force_entropy(&ys).unwrap();
            let hyx = brute_force_conditional_entropy(&ys, &xs).unwrap();
            assert!((mi - (hy - hyx)).abs() < 1e-12, "{mi} vs {}", hy - hyx);
        }
    }

    #[test]
    fn mi_of_product_joints_is_zero() {
        // Counts chosen so the empirical joint factorizes exactly.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, count_x) in [(0usize, 2usize), (1, 6)] {
            for (y, count_y) in [(0usize, 1usize), (1, 3)] {
                for _ in 0..count_x * count_y {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        let mi = brute_force_mi(&xs, &ys).unwrap();
        assert!(mi.abs() < 1e-12, "{mi}");
    }

    #[test]
    fn mi_rejects_bad_input() {
        assert!(brute_force_mi(&[], &[]).is_err());
        assert!(brute_force_mi(&[1], &[1, 2]).is_err());
        assert!(brute_force_entropy(&[]).is_err());
    }
}
