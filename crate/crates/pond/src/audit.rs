//! Finite-difference audits of the reverse-mode gradients.
//!
//! Two levels: every differentiable graph primitive in isolation, and the
//! full training objective `G = ℓ_R + λ₁·ℓ_D + λ₂·ℓ_F` assembled over a
//! small but real mixture model. Each audit compares analytic gradients
//! against central differences and reports the worst relative error. The
//! `pond gradcheck` command and the acceptance suite both run these.

use numgrad::{grad_check, Graph, NodeId, Tensor};

use crate::error::PondError;
use crate::model::{ModelConfig, MoEModel, PatchConfig};
use crate::nets::{self, NetCtx};
use crate::objective::{batch_ce_net, loss_d_net, weighted_total_net, LossWeights};
use crate::prompt::{generate_instance_prompt, GeneratorParams, Prompt};
use crate::Result;

/// Default central-difference step.
pub const AUDIT_STEP: f64 = 1e-5;
/// Default pass tolerance on the relative error.
pub const AUDIT_TOL: f64 = 1e-4;

/// One audited graph: its name and the finite-difference verdict.
#[derive(Debug, Clone)]
pub struct AuditLine {
    /// What was differentiated.
    pub name: String,
    /// Worst relative error over all checked parameter entries.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// `max_rel_err ≤ tol`.
    pub passed: bool,
}

/// Deterministic filler: smooth, sign-varying, bounded away from the
/// kinks and poles of the primitives (0 for relu and sqrt, ≤0 for log).
fn filler(shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let count: usize = shape.iter().product();
    let values: Vec<f64> = (0..count)
        .map(|i| {
            let t = (i as f64 * 0.73 + 0.41).sin(); // in (-1, 1)
            lo + (t + 1.0) / 2.0 * (hi - lo)
        })
        .collect();
    Tensor::new(shape, values).expect("filler shape is consistent")
}

/// Reduce `x` to a scalar through a fixed weighting so that every entry
/// of every parameter influences the root with a distinct coefficient.
fn pinned_sum(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape_of(x).to_vec();
    let w = g.constant(filler(&shape, -1.3, 1.7));
    let prod = g.mul(x, w)?;
    Ok(g.sum_all(prod)?)
}

fn run_case(
    name: &str,
    step: f64,
    tol: f64,
    build: impl FnOnce(&mut Graph) -> Result<numgrad::Bindings>,
) -> Result<AuditLine> {
    let mut g = Graph::new();
    let binds = build(&mut g)?;
    let report = grad_check(&g, &binds, step, tol)?;
    Ok(AuditLine {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        passed: report.passed,
    })
}

/// Bind a fresh parameter leaf with filler values in `[lo, hi]`.
fn param(
    g: &mut Graph,
    binds: &mut numgrad::Bindings,
    name: &str,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<NodeId> {
    let id = g.param(name, shape)?;
    binds.set(id, filler(shape, lo, hi));
    Ok(id)
}

/// Audit every differentiable primitive in isolation.
pub fn audit_primitives(step: f64, tol: f64) -> Result<Vec<AuditLine>> {
    let mut lines = Vec::new();
    let mut case = |name: &str,
                    build: &mut dyn FnMut(&mut Graph) -> Result<numgrad::Bindings>|
     -> Result<()> {
        lines.push(run_case(name, step, tol, build)?);
        Ok(())
    };

    case("matmul", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 3], -1.0, 1.0)?;
        let x = param(g, &mut b, "x", &[3, 2], -1.0, 1.0)?;
        let y = g.matmul(a, x)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("add-broadcast", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 3], -1.0, 1.0)?;
        let v = param(g, &mut b, "v", &[3], -1.0, 1.0)?;
        let y = g.add(a, v)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("mul", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 3], -1.0, 1.0)?;
        let c = param(g, &mut b, "c", &[2, 3], -1.0, 1.0)?;
        let y = g.mul(a, c)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("relu", &mut |g| {
        let mut b = numgrad::Bindings::new();
        // Kept away from the kink at zero, where central differences lie.
        let a = param(g, &mut b, "a", &[2, 4], 0.3, 1.5)?;
        let shifted = g.constant(Tensor::new(&[2, 4], vec![-0.9; 8])?);
        let mixed = g.add(a, shifted)?; // entries in [-0.6, 0.6] \ (-0.05, 0.05)
        let y = g.relu(mixed);
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("tanh", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 4], -1.5, 1.5)?;
        let y = g.tanh(a);
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("exp", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 4], -1.0, 1.0)?;
        let y = g.exp(a);
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("log", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 4], 0.2, 2.0)?;
        let y = g.log(a);
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("sqrt", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 4], 0.2, 2.0)?;
        let y = g.sqrt(a);
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("softmax", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 4], -1.5, 1.5)?;
        let y = g.softmax(a)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("layer-norm", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let x = param(g, &mut b, "x", &[2, 5], -1.2, 1.4)?;
        let scale = param(g, &mut b, "scale", &[5], 0.5, 1.5)?;
        let shift = param(g, &mut b, "shift", &[5], -0.5, 0.5)?;
        let y = g.layer_norm(x, scale, shift)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("concat", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 2], -1.0, 1.0)?;
        let c = param(g, &mut b, "c", &[2, 3], -1.0, 1.0)?;
        let y = g.concat(1, &[a, c])?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("mean", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[3, 4], -1.0, 1.0)?;
        let y = g.mean(a, 0)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("reshape", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 6], -1.0, 1.0)?;
        let y = g.reshape(a, &[3, 4])?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("transpose", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 5], -1.0, 1.0)?;
        let y = g.transpose(a)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("slice", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[3, 5], -1.0, 1.0)?;
        let y = g.slice(a, 1, 1, 3)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("scale", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 4], -1.0, 1.0)?;
        let y = g.scale(a, -1.7)?;
        pinned_sum(g, y)?;
        Ok(b)
    })?;
    case("cross-entropy", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[1, 4], -1.5, 1.5)?;
        let probs = g.softmax(a)?;
        let target = g.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0])?);
        g.cross_entropy_one_hot(probs, target)?;
        Ok(b)
    })?;
    case("sum-all", &mut |g| {
        let mut b = numgrad::Bindings::new();
        let a = param(g, &mut b, "a", &[2, 3], -1.0, 1.0)?;
        g.sum_all(a)?;
        Ok(b)
    })?;

    Ok(lines)
}

/// The small-but-real configuration the objective audit runs on.
fn audit_model_config() -> ModelConfig {
    ModelConfig {
        channels: 2,
        series_len: 12,
        prompt_len: 3,
        classes: 3,
        d_model: 8,
        heads: 2,
        blocks: 1,
        d_ff: 16,
        experts: 2,
        patch: PatchConfig {
            patch_len: 5,
            stride: 5,
        },
        router_hidden: 8,
    }
}

/// A generator whose layers are all non-trivial, so no gradient path is
/// vacuously zero (a freshly initialized generator has a silent output
/// layer).
fn lively_generator(cfg: &ModelConfig, phase: f64) -> Result<GeneratorParams> {
    let mut gen = GeneratorParams::zeros(cfg.channels, cfg.series_len, cfg.prompt_len, 4)?;
    let mut i = 0usize;
    gen.visit_mut(&mut |_, t| {
        for v in t.values_mut() {
            *v = 0.4 * (i as f64 * 0.61 + phase).sin();
            i += 1;
        }
    });
    Ok(gen)
}

fn audit_instance(cfg: &ModelConfig, phase: f64) -> Result<crate::data::SeriesTensor> {
    let count = cfg.channels * cfg.series_len;
    let values: Vec<f64> = (0..count)
        .map(|i| (i as f64 * 0.37 + phase).sin())
        .collect();
    crate::data::SeriesTensor::new(cfg.channels, cfg.series_len, values)
}

/// Audit the full objective `G` on a two-instance batch: gradients flow
/// to the common prompt and to two generators through the prediction,
/// discrimination, and fidelity branches at once, while the backbone
/// stays frozen, exactly as during prompt tuning.
pub fn audit_objective(step: f64, tol: f64) -> Result<AuditLine> {
    let cfg = audit_model_config();
    let model = MoEModel::init(&cfg, 7)?;
    let gen0 = lively_generator(&cfg, 0.3)?;
    let gen1 = lively_generator(&cfg, 1.1)?;
    let weights = LossWeights {
        lambda1: 0.7,
        lambda2: 1.3,
    };
    let instances = [audit_instance(&cfg, 0.0)?, audit_instance(&cfg, 2.2)?];
    let labels = [0usize, 1];
    let common = Prompt::new(
        cfg.channels,
        cfg.prompt_len,
        filler(&[cfg.channels, cfg.prompt_len], -0.3, 0.3)
            .values()
            .to_vec(),
    )?;

    let mut ctx = NetCtx::new();
    let common_node = ctx.leaf("common", &common.to_tensor()?)?;
    let mut rows_r = Vec::new();
    let mut rows_f = Vec::new();
    let mut first_delta = None;
    for inst in &instances {
        let flat = Tensor::new(&[1, cfg.channels * cfg.series_len], inst.values().to_vec())?;
        let flat_node = ctx.frozen(&flat);
        let delta = nets::generator_net(&mut ctx, &gen0, "gen0", flat_node, true)?;
        first_delta.get_or_insert(delta);
        let x_node = ctx.frozen(&Tensor::new(
            &[cfg.channels, cfg.series_len],
            inst.values().to_vec(),
        )?);
        let summed = ctx.g.add(common_node, delta)?;
        let prompted = ctx.g.concat(1, &[summed, x_node])?;
        rows_r.push(nets::moe_net(&mut ctx, &model, "", prompted, false)?);
        let f_prompted = ctx.g.concat(1, &[delta, x_node])?;
        rows_f.push(nets::moe_net(&mut ctx, &model, "", f_prompted, false)?);
    }
    let l_r = batch_ce_net(&mut ctx, &rows_r, &labels, cfg.classes)?;
    let l_f = batch_ce_net(&mut ctx, &rows_f, &labels, cfg.classes)?;

    // Discrimination over three domain prompts: both generators on the
    // first instance plus a frozen third so the denominator is non-empty.
    let flat = Tensor::new(
        &[1, cfg.channels * cfg.series_len],
        instances[0].values().to_vec(),
    )?;
    let flat_node = ctx.frozen(&flat);
    let other = nets::generator_net(&mut ctx, &gen1, "gen1", flat_node, true)?;
    let third_prompt = Prompt::new(
        cfg.channels,
        cfg.prompt_len,
        filler(&[cfg.channels, cfg.prompt_len], -0.6, 0.6)
            .values()
            .to_vec(),
    )?;
    let third = ctx.frozen(&third_prompt.to_tensor()?);
    let hints = [
        generate_instance_prompt(&gen0, &instances[0])?,
        generate_instance_prompt(&gen1, &instances[0])?,
        third_prompt,
    ];
    let mine = first_delta.ok_or_else(|| PondError::config("audit batch was empty"))?;
    let (l_d, _fallback) = loss_d_net(&mut ctx, &[mine, other, third], &hints)?;

    weighted_total_net(&mut ctx, l_r, Some(l_d), Some(l_f), &weights)?;
    let report = grad_check(&ctx.g, &ctx.binds, step, tol)?;
    Ok(AuditLine {
        name: "objective-G".to_string(),
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        passed: report.passed,
    })
}

/// Every primitive audit followed by the full-objective audit.
pub fn gradient_audit(step: f64, tol: f64) -> Result<Vec<AuditLine>> {
    let mut lines = audit_primitives(step, tol)?;
    lines.push(audit_objective(step, tol)?);
    Ok(lines)
}
