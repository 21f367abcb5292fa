//! Graph builders shared by inference, training, and the objectives.
//!
//! Every forward pass in the crate — expert, router, mixture, prompt
//! generator — is expressed exactly once here as a computation-graph
//! recipe. Callers choose whether a parameter enters the graph as a
//! trainable leaf (gradients flow, optimizers can step it) or as a frozen
//! constant (backbone during prompt tuning), so the same recipe serves
//! pretraining, tuning, transfer, and plain evaluation.

use std::collections::HashMap;

use numgrad::{Bindings, Graph, NodeId, Tensor};

use crate::error::PondError;
use crate::model::{BlockParams, ExpertParams, ModelConfig, MoEModel, PatchConfig, RouterParams};
use crate::prompt::GeneratorParams;
use crate::Result;

/// A graph under construction together with its leaf bindings and the
/// registry of trainable leaves (name → node) the optimizer will visit.
pub(crate) struct NetCtx {
    pub g: Graph,
    pub binds: Bindings,
    pub leaves: Vec<(String, NodeId)>,
    seen: HashMap<String, NodeId>,
}

impl NetCtx {
    pub fn new() -> Self {
        NetCtx {
            g: Graph::new(),
            binds: Bindings::new(),
            leaves: Vec::new(),
            seen: HashMap::new(),
        }
    }

    /// A non-trainable input leaf bound to `value` now.
    pub fn input(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        let id = self.g.input(name, value.shape())?;
        self.binds.set(id, value.clone());
        Ok(id)
    }

    /// A trainable leaf bound to `value`; registered once per name, so a
    /// parameter shared by several branches enters the graph exactly once.
    pub fn leaf(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        if let Some(id) = self.seen.get(name) {
            return Ok(*id);
        }
        let id = self.g.param(name, value.shape())?;
        self.binds.set(id, value.clone());
        self.leaves.push((name.to_string(), id));
        self.seen.insert(name.to_string(), id);
        Ok(id)
    }

    /// A constant folded into the graph; no gradient is ever computed.
    pub fn frozen(&mut self, value: &Tensor) -> NodeId {
        self.g.constant(value.clone())
    }

    /// Trainable leaf or frozen constant, per the caller's phase.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Result<NodeId> {
        if trainable {
            self.leaf(name, value)
        } else {
            Ok(self.frozen(value))
        }
    }

    /// Gradient tensors keyed by parameter name after a backward pass.
    pub fn grads_by_name(&self, grads: &mut numgrad::Gradients) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, id) in &self.leaves {
            if let Some(g) = grads.take(*id) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Cut an `n×T` node into flattened patch rows `[P, n·patch_len]`,
/// right-padding by replicating the final time step when the last window
/// would overrun.
pub(crate) fn patchify_net(ctx: &mut NetCtx, x: NodeId, patch: &PatchConfig) -> Result<NodeId> {
    let shape = ctx.g.shape_of(x).to_vec();
    let (n, total) = (shape[0], shape[1]);
    if patch.patch_len > total {
        return Err(PondError::config(format!(
            "series length {total} is shorter than patch_len {}",
            patch.patch_len
        )));
    }
    let padded = crate::model::padded_len(total, patch);
    let xp = if padded > total {
        let last = ctx.g.slice(x, 1, total - 1, 1)?;
        let mut parts = vec![x];
        parts.extend(std::iter::repeat(last).take(padded - total));
        ctx.g.concat(1, &parts)?
    } else {
        x
    };
    let count = (padded - patch.patch_len) / patch.stride + 1;
    let mut rows = Vec::with_capacity(count);
    for p in 0..count {
        let window = ctx.g.slice(xp, 1, p * patch.stride, patch.patch_len)?;
        rows.push(ctx.g.reshape(window, &[1, n * patch.patch_len])?);
    }
    Ok(ctx.g.concat(0, &rows)?)
}

/// `y = x·w + b` with a trainable-or-frozen weight pair.
fn linear(
    ctx: &mut NetCtx,
    x: NodeId,
    w: (&str, &Tensor),
    b: (&str, &Tensor),
    trainable: bool,
) -> Result<NodeId> {
    let wn = ctx.param(w.0, w.1, trainable)?;
    let bn = ctx.param(b.0, b.1, trainable)?;
    let y = ctx.g.matmul(x, wn)?;
    Ok(ctx.g.add(y, bn)?)
}

/// Multi-head scaled-dot-product attention of `queries` against `keys`.
/// Both are `[·, d_model]`; per-head projections live in the param lists.
#[allow(clippy::too_many_arguments)]
fn attention(
    ctx: &mut NetCtx,
    prefix: &str,
    queries: NodeId,
    keys: NodeId,
    w_q: &[Tensor],
    w_k: &[Tensor],
    w_v: &[Tensor],
    w_o: &Tensor,
    trainable: bool,
) -> Result<NodeId> {
    let heads = w_q.len();
    let d_head = w_q[0].shape()[1];
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = ctx.param(&format!("{prefix}.h{h}.wq"), &w_q[h], trainable)?;
        let wk = ctx.param(&format!("{prefix}.h{h}.wk"), &w_k[h], trainable)?;
        let wv = ctx.param(&format!("{prefix}.h{h}.wv"), &w_v[h], trainable)?;
        let q = ctx.g.matmul(queries, wq)?;
        let k = ctx.g.matmul(keys, wk)?;
        let v = ctx.g.matmul(keys, wv)?;
        let kt = ctx.g.transpose(k)?;
        let scores = ctx.g.matmul(q, kt)?;
        let scaled = ctx.g.scale(scores, inv_sqrt)?;
        let attn = ctx.g.softmax(scaled)?;
        outs.push(ctx.g.matmul(attn, v)?);
    }
    let cat = ctx.g.concat(1, &outs)?;
    let wo = ctx.param(&format!("{prefix}.wo"), w_o, trainable)?;
    Ok(ctx.g.matmul(cat, wo)?)
}

fn layer_norm(
    ctx: &mut NetCtx,
    x: NodeId,
    prefix: &str,
    scale: &Tensor,
    shift: &Tensor,
    trainable: bool,
) -> Result<NodeId> {
    let s = ctx.param(&format!("{prefix}.scale"), scale, trainable)?;
    let b = ctx.param(&format!("{prefix}.shift"), shift, trainable)?;
    Ok(ctx.g.layer_norm(x, s, b)?)
}

fn encoder_block(
    ctx: &mut NetCtx,
    blk: &BlockParams,
    prefix: &str,
    x: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let attn = attention(
        ctx, prefix, x, x, &blk.w_q, &blk.w_k, &blk.w_v, &blk.w_o, trainable,
    )?;
    let res1 = ctx.g.add(x, attn)?;
    let n1 = layer_norm(ctx, res1, &format!("{prefix}.ln1"), &blk.ln1_scale, &blk.ln1_shift, trainable)?;
    let h = linear(
        ctx,
        n1,
        (&format!("{prefix}.ff.w1"), &blk.ff_w1),
        (&format!("{prefix}.ff.b1"), &blk.ff_b1),
        trainable,
    )?;
    let h = ctx.g.relu(h);
    let ff = linear(
        ctx,
        h,
        (&format!("{prefix}.ff.w2"), &blk.ff_w2),
        (&format!("{prefix}.ff.b2"), &blk.ff_b2),
        trainable,
    )?;
    let res2 = ctx.g.add(n1, ff)?;
    layer_norm(ctx, res2, &format!("{prefix}.ln2"), &blk.ln2_scale, &blk.ln2_shift, trainable)
}

/// One expert's class distribution `[1, K]` for a prompted input node.
pub(crate) fn expert_net(
    ctx: &mut NetCtx,
    config: &ModelConfig,
    expert: &ExpertParams,
    prefix: &str,
    x: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let patches = patchify_net(ctx, x, &config.patch)?;
    let p_count = ctx.g.shape_of(patches)[0];
    if expert.pos.shape()[0] != p_count {
        return Err(PondError::incompatible(format!(
            "input yields {p_count} patches but position table holds {}",
            expert.pos.shape()[0]
        )));
    }
    let mut h = linear(
        ctx,
        patches,
        (&format!("{prefix}.proj.w"), &expert.proj_w),
        (&format!("{prefix}.proj.b"), &expert.proj_b),
        trainable,
    )?;
    let pos = ctx.param(&format!("{prefix}.pos"), &expert.pos, trainable)?;
    h = ctx.g.add(h, pos)?;
    for (b, blk) in expert.blocks.iter().enumerate() {
        h = encoder_block(ctx, blk, &format!("{prefix}.blk{b}"), h, trainable)?;
    }

    let query = ctx.param(&format!("{prefix}.pool.query"), &expert.pool.query, trainable)?;
    let pooled_attn = attention(
        ctx,
        &format!("{prefix}.pool"),
        query,
        h,
        &expert.pool.w_q,
        &expert.pool.w_k,
        &expert.pool.w_v,
        &expert.pool.w_o,
        trainable,
    )?;
    let res = ctx.g.add(query, pooled_attn)?;
    let pooled = layer_norm(
        ctx,
        res,
        &format!("{prefix}.pool.ln"),
        &expert.pool.ln_scale,
        &expert.pool.ln_shift,
        trainable,
    )?;

    let logits = linear(
        ctx,
        pooled,
        (&format!("{prefix}.head.w"), &expert.head_w),
        (&format!("{prefix}.head.b"), &expert.head_b),
        trainable,
    )?;
    Ok(ctx.g.softmax(logits)?)
}

/// The router's distribution over experts `[1, E]`: a perceptron on the
/// per-channel mean and standard deviation of the (prompted) input.
pub(crate) fn router_net(
    ctx: &mut NetCtx,
    _config: &ModelConfig,
    router: &RouterParams,
    prefix: &str,
    x: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let n = ctx.g.shape_of(x)[0];
    let mean = ctx.g.mean(x, 1)?; // [n]
    let xt = ctx.g.transpose(x)?; // [T, n]
    let neg_mean = ctx.g.scale(mean, -1.0)?;
    let centered = ctx.g.add(xt, neg_mean)?;
    let sq = ctx.g.mul(centered, centered)?;
    let var = ctx.g.mean(sq, 0)?; // [n]
    let eps = ctx.frozen(&Tensor::scalar(1e-8));
    let var_eps = ctx.g.add(var, eps)?;
    let std = ctx.g.sqrt(var_eps);
    let stats = ctx.g.concat(0, &[mean, std])?;
    let stats = ctx.g.reshape(stats, &[1, 2 * n])?;
    let h = linear(
        ctx,
        stats,
        (&format!("{prefix}.w1"), &router.w1),
        (&format!("{prefix}.b1"), &router.b1),
        trainable,
    )?;
    let h = ctx.g.relu(h);
    let logits = linear(
        ctx,
        h,
        (&format!("{prefix}.w2"), &router.w2),
        (&format!("{prefix}.b2"), &router.b2),
        trainable,
    )?;
    Ok(ctx.g.softmax(logits)?)
}

/// The full mixture `f`: router-weighted combination of expert outputs,
/// `[1, K]`. `prefix` namespaces the parameters (empty for the lone model).
pub(crate) fn moe_net(
    ctx: &mut NetCtx,
    model: &MoEModel,
    prefix: &str,
    x: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let gates = router_net(
        ctx,
        &model.config,
        &model.router,
        &format!("{prefix}router"),
        x,
        trainable,
    )?;
    let mut expert_rows = Vec::with_capacity(model.experts.len());
    for (e, expert) in model.experts.iter().enumerate() {
        expert_rows.push(expert_net(
            ctx,
            &model.config,
            expert,
            &format!("{prefix}expert{e}"),
            x,
            trainable,
        )?);
    }
    let stacked = ctx.g.concat(0, &expert_rows)?; // [E, K]
    Ok(ctx.g.matmul(gates, stacked)?)
}

/// A conditional prompt generator: flattened series → tanh hidden layer →
/// prompt entries, reshaped to `[n, m]`.
pub(crate) fn generator_net(
    ctx: &mut NetCtx,
    gen: &GeneratorParams,
    prefix: &str,
    x_flat: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let h = linear(
        ctx,
        x_flat,
        (&format!("{prefix}.w1"), &gen.w1),
        (&format!("{prefix}.b1"), &gen.b1),
        trainable,
    )?;
    let h = ctx.g.tanh(h);
    let o = linear(
        ctx,
        h,
        (&format!("{prefix}.w2"), &gen.w2),
        (&format!("{prefix}.b2"), &gen.b2),
        trainable,
    )?;
    Ok(ctx.g.reshape(o, &[gen.channels(), gen.prompt_len()])?)
}
