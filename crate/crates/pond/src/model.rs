//! The classifier `f`: a mixture of experts over patch transformers.
//!
//! Each expert patches the (prompted) series, projects patches to
//! `d_model`, adds learned position embeddings, runs post-norm transformer
//! blocks, pools with a learned query, and classifies with a linear head.
//! A router — a small perceptron over per-channel mean/std of the input —
//! produces a softmax over experts, and the model output is the convex
//! combination of expert outputs under those weights.

use numgrad::Tensor;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container;
use crate::error::PondError;
use crate::nets::{self, NetCtx};
use crate::Result;

/// How a series is cut into overlapping windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_len: 16,
            stride: 8,
        }
    }
}

/// Architecture hyperparameters plus the problem geometry they serve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels n of the raw series.
    pub channels: usize,
    /// Raw series length L.
    pub series_len: usize,
    /// Prompt length m; the model always sees n×(m+L) inputs.
    pub prompt_len: usize,
    /// Classes K.
    pub classes: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Transformer encoder blocks per expert.
    pub blocks: usize,
    /// Feed-forward width inside each block.
    pub d_ff: usize,
    /// Expert count E.
    pub experts: usize,
    pub patch: PatchConfig,
    /// Hidden width of the router perceptron.
    pub router_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 2,
            series_len: 64,
            prompt_len: 5,
            classes: 3,
            d_model: 16,
            heads: 4,
            blocks: 2,
            d_ff: 128,
            experts: 3,
            patch: PatchConfig::default(),
            router_hidden: 16,
        }
    }
}

impl ModelConfig {
    /// Total input length the model consumes: prompt + series.
    pub fn total_len(&self) -> usize {
        self.prompt_len + self.series_len
    }

    /// Patches produced by a full prompted input.
    pub fn patch_count(&self) -> usize {
        patch_count(self.total_len(), &self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.series_len < 2 {
            return Err(PondError::config(format!(
                "model needs n ≥ 1 and L ≥ 2, got n={}, L={}",
                self.channels, self.series_len
            )));
        }
        if self.classes < 2 {
            return Err(PondError::config("model needs K ≥ 2 classes"));
        }
        if self.d_model < 1 || self.heads < 1 || self.d_model % self.heads != 0 {
            return Err(PondError::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks < 1 {
            return Err(PondError::config("model needs at least one encoder block"));
        }
        if self.d_ff < 1 || self.router_hidden < 1 {
            return Err(PondError::config(
                "feed-forward and router widths must be ≥ 1",
            ));
        }
        if self.experts < 1 {
            return Err(PondError::config("model needs E ≥ 1 experts"));
        }
        if self.patch.patch_len < 1 || self.patch.patch_len > self.total_len() {
            return Err(PondError::config(format!(
                "patch_len {} must lie in 1..={}",
                self.patch.patch_len,
                self.total_len()
            )));
        }
        if self.patch.stride < 1 || self.patch.stride > self.patch.patch_len {
            return Err(PondError::config(format!(
                "stride {} must lie in 1..={}",
                self.patch.stride, self.patch.patch_len
            )));
        }
        Ok(())
    }
}

/// One post-norm transformer block: multi-head self-attention then a
/// two-layer feed-forward, each with residual + layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
}

/// Attention pooling: a learned query cross-attends the encoded patches,
/// with residual back to the query and a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    pub query: Tensor,
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
    pub ln_scale: Tensor,
    pub ln_shift: Tensor,
}

/// One expert: patch projection, position embedding, transformer blocks,
/// attention pooling, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub pool: PoolParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// The router perceptron: per-channel mean/std (2n inputs) → E logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// The full mixture-of-experts classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub experts: Vec<ExpertParams>,
    pub router: RouterParams,
}

impl MoEModel {
    /// Initialize with uniform(−a, a), a = √(6/(fan_in+fan_out)) per weight
    /// matrix; biases zero; layer-norm scale 1 and shift 0. Deterministic
    /// given the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, &mut |shape| xavier(&mut rng, shape)))
    }

    /// All weights zero (layer norms still identity); used for hand-built
    /// fixtures and as a shell when loading checkpoints.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, &mut |shape| Tensor::zeros(shape)))
    }

    fn build(config: &ModelConfig, weight: &mut dyn FnMut(&[usize]) -> Tensor) -> Self {
        let d = config.d_model;
        let dh = d / config.heads;
        let patches = config.patch_count();
        let in_dim = config.channels * config.patch.patch_len;

        let mut experts = Vec::with_capacity(config.experts);
        for _ in 0..config.experts {
            let mut blocks = Vec::with_capacity(config.blocks);
            for _ in 0..config.blocks {
                blocks.push(BlockParams {
                    w_q: (0..config.heads).map(|_| weight(&[d, dh])).collect(),
                    w_k: (0..config.heads).map(|_| weight(&[d, dh])).collect(),
                    w_v: (0..config.heads).map(|_| weight(&[d, dh])).collect(),
                    w_o: weight(&[d, d]),
                    ln1_scale: Tensor::filled(&[d], 1.0),
                    ln1_shift: Tensor::zeros(&[d]),
                    ff_w1: weight(&[d, config.d_ff]),
                    ff_b1: Tensor::zeros(&[config.d_ff]),
                    ff_w2: weight(&[config.d_ff, d]),
                    ff_b2: Tensor::zeros(&[d]),
                    ln2_scale: Tensor::filled(&[d], 1.0),
                    ln2_shift: Tensor::zeros(&[d]),
                });
            }
            experts.push(ExpertParams {
                proj_w: weight(&[in_dim, d]),
                proj_b: Tensor::zeros(&[d]),
                pos: weight(&[patches, d]),
                blocks,
                pool: PoolParams {
                    query: weight(&[1, d]),
                    w_q: (0..config.heads).map(|_| weight(&[d, dh])).collect(),
                    w_k: (0..config.heads).map(|_| weight(&[d, dh])).collect(),
                    w_v: (0..config.heads).map(|_| weight(&[d, dh])).collect(),
                    w_o: weight(&[d, d]),
                    ln_scale: Tensor::filled(&[d], 1.0),
                    ln_shift: Tensor::zeros(&[d]),
                },
                head_w: weight(&[d, config.classes]),
                head_b: Tensor::zeros(&[config.classes]),
            });
        }
        let router = RouterParams {
            w1: weight(&[2 * config.channels, config.router_hidden]),
            b1: Tensor::zeros(&[config.router_hidden]),
            w2: weight(&[config.router_hidden, config.experts]),
            b2: Tensor::zeros(&[config.experts]),
        };
        MoEModel {
            config: config.clone(),
            experts,
            router,
        }
    }

    /// Visit every parameter as `(name, tensor)` in the fixed declaration
    /// order that checkpoints, optimizers, and training graphs all share.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (e, ex) in self.experts.iter().enumerate() {
            let p = format!("expert{e}");
            f(&format!("{p}.proj.w"), &ex.proj_w);
            f(&format!("{p}.proj.b"), &ex.proj_b);
            f(&format!("{p}.pos"), &ex.pos);
            for (b, blk) in ex.blocks.iter().enumerate() {
                let q = format!("{p}.blk{b}");
                for h in 0..blk.w_q.len() {
                    f(&format!("{q}.h{h}.wq"), &blk.w_q[h]);
                    f(&format!("{q}.h{h}.wk"), &blk.w_k[h]);
                    f(&format!("{q}.h{h}.wv"), &blk.w_v[h]);
                }
                f(&format!("{q}.wo"), &blk.w_o);
                f(&format!("{q}.ln1.scale"), &blk.ln1_scale);
                f(&format!("{q}.ln1.shift"), &blk.ln1_shift);
                f(&format!("{q}.ff.w1"), &blk.ff_w1);
                f(&format!("{q}.ff.b1"), &blk.ff_b1);
                f(&format!("{q}.ff.w2"), &blk.ff_w2);
                f(&format!("{q}.ff.b2"), &blk.ff_b2);
                f(&format!("{q}.ln2.scale"), &blk.ln2_scale);
                f(&format!("{q}.ln2.shift"), &blk.ln2_shift);
            }
            f(&format!("{p}.pool.query"), &ex.pool.query);
            for h in 0..ex.pool.w_q.len() {
                f(&format!("{p}.pool.h{h}.wq"), &ex.pool.w_q[h]);
                f(&format!("{p}.pool.h{h}.wk"), &ex.pool.w_k[h]);
                f(&format!("{p}.pool.h{h}.wv"), &ex.pool.w_v[h]);
            }
            f(&format!("{p}.pool.wo"), &ex.pool.w_o);
            f(&format!("{p}.pool.ln.scale"), &ex.pool.ln_scale);
            f(&format!("{p}.pool.ln.shift"), &ex.pool.ln_shift);
            f(&format!("{p}.head.w"), &ex.head_w);
            f(&format!("{p}.head.b"), &ex.head_b);
        }
        f("router.w1", &self.router.w1);
        f("router.b1", &self.router.b1);
        f("router.w2", &self.router.w2);
        f("router.b2", &self.router.b2);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (e, ex) in self.experts.iter_mut().enumerate() {
            let p = format!("expert{e}");
            f(&format!("{p}.proj.w"), &mut ex.proj_w);
            f(&format!("{p}.proj.b"), &mut ex.proj_b);
            f(&format!("{p}.pos"), &mut ex.pos);
            for (b, blk) in ex.blocks.iter_mut().enumerate() {
                let q = format!("{p}.blk{b}");
                let heads = blk.w_q.len();
                for h in 0..heads {
                    f(&format!("{q}.h{h}.wq"), &mut blk.w_q[h]);
                    f(&format!("{q}.h{h}.wk"), &mut blk.w_k[h]);
                    f(&format!("{q}.h{h}.wv"), &mut blk.w_v[h]);
                }
                f(&format!("{q}.wo"), &mut blk.w_o);
                f(&format!("{q}.ln1.scale"), &mut blk.ln1_scale);
                f(&format!("{q}.ln1.shift"), &mut blk.ln1_shift);
                f(&format!("{q}.ff.w1"), &mut blk.ff_w1);
                f(&format!("{q}.ff.b1"), &mut blk.ff_b1);
                f(&format!("{q}.ff.w2"), &mut blk.ff_w2);
                f(&format!("{q}.ff.b2"), &mut blk.ff_b2);
                f(&format!("{q}.ln2.scale"), &mut blk.ln2_scale);
                f(&format!("{q}.ln2.shift"), &mut blk.ln2_shift);
            }
            f(&format!("{p}.pool.query"), &mut ex.pool.query);
            let pool_heads = ex.pool.w_q.len();
            for h in 0..pool_heads {
                f(&format!("{p}.pool.h{h}.wq"), &mut ex.pool.w_q[h]);
                f(&format!("{p}.pool.h{h}.wk"), &mut ex.pool.w_k[h]);
                f(&format!("{p}.pool.h{h}.wv"), &mut ex.pool.w_v[h]);
            }
            f(&format!("{p}.pool.wo"), &mut ex.pool.w_o);
            f(&format!("{p}.pool.ln.scale"), &mut ex.pool.ln_scale);
            f(&format!("{p}.pool.ln.shift"), &mut ex.pool.ln_shift);
            f(&format!("{p}.head.w"), &mut ex.head_w);
            f(&format!("{p}.head.b"), &mut ex.head_b);
        }
        f("router.w1", &mut self.router.w1);
        f("router.b1", &mut self.router.b1);
        f("router.w2", &mut self.router.w2);
        f("router.b2", &mut self.router.b2);
    }

    /// Snapshot all parameters as an owned `(name, tensor)` list.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Package the model as a checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "model".to_string(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: self.named_params(),
        }
    }

    /// Rebuild a model from a `kind = "model"` checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "model" {
            return Err(PondError::incompatible(format!(
                "expected a model checkpoint, found kind '{}'",
                ck.kind
            )));
        }
        let config: ModelConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| PondError::incompatible(format!("model config rejected: {e}")))?;
        let mut model = MoEModel::zeros(&config)?;
        restore_params(&ck.tensors, |f| model.visit_mut(f))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Fill a parameter struct from a checkpoint's `(name, tensor)` sequence,
/// insisting on exactly the declared order and shapes.
pub(crate) fn restore_params(
    tensors: &[(String, Tensor)],
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut idx = 0usize;
    let mut failure: Option<String> = None;
    visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match tensors.get(idx) {
            None => failure = Some(format!("checkpoint ends before parameter '{name}'")),
            Some((ck_name, value)) => {
                if ck_name != name {
                    failure = Some(format!(
                        "checkpoint parameter '{ck_name}' where '{name}' was expected"
                    ));
                } else if value.shape() != slot.shape() {
                    failure = Some(format!(
                        "parameter '{name}' has shape {:?} in the checkpoint, expected {:?}",
                        value.shape(),
                        slot.shape()
                    ));
                } else {
                    *slot = value.clone();
                }
            }
        }
        idx += 1;
    });
    if let Some(detail) = failure {
        return Err(PondError::incompatible(detail));
    }
    if idx != tensors.len() {
        return Err(PondError::incompatible(format!(
            "checkpoint carries {} parameters, model declares {idx}",
            tensors.len()
        )));
    }
    Ok(())
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    debug_assert_eq!(shape.len(), 2);
    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let values = (0..shape[0] * shape[1])
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(shape, values).expect("xavier shape is valid")
}

/// How long the series becomes after right-replication padding.
pub fn padded_len(total_len: usize, patch: &PatchConfig) -> usize {
    let overhang = (total_len - patch.patch_len) % patch.stride;
    if overhang == 0 {
        total_len
    } else {
        total_len + (patch.stride - overhang)
    }
}

/// Number of patches a series of `total_len` steps produces.
pub fn patch_count(total_len: usize, patch: &PatchConfig) -> usize {
    (padded_len(total_len, patch) - patch.patch_len) / patch.stride + 1
}

/// Cut an `n×T` series into flattened patches, one per row.
///
/// Windows start at offsets 0, stride, 2·stride, …; if the final window
/// overruns, the series is first right-padded by replicating its last time
/// step. Output row `p` is the window at offset `p·stride`, channels
/// concatenated.
pub fn patchify(series: &Tensor, patch: &PatchConfig) -> Result<Tensor> {
    if series.rank() != 2 {
        return Err(PondError::config(format!(
            "patchify expects an n×T series, got rank {}",
            series.rank()
        )));
    }
    let (n, total) = (series.shape()[0], series.shape()[1]);
    if patch.patch_len > total {
        return Err(PondError::config(format!(
            "series length {total} is shorter than patch_len {}",
            patch.patch_len
        )));
    }
    let padded = padded_len(total, patch);
    let count = (padded - patch.patch_len) / patch.stride + 1;
    let row = |ch: usize, t: usize| series.values()[ch * total + t.min(total - 1)];
    let mut values = Vec::with_capacity(count * n * patch.patch_len);
    for p in 0..count {
        for ch in 0..n {
            for off in 0..patch.patch_len {
                values.push(row(ch, p * patch.stride + off));
            }
        }
    }
    Ok(Tensor::new(&[count, n * patch.patch_len], values)?)
}

/// Run one expert on a prompted `n×(m+L)` input; returns `[1, K]` class
/// probabilities.
pub fn expert_forward(config: &ModelConfig, expert: &ExpertParams, prompted: &Tensor) -> Result<Tensor> {
    check_prompted_shape(config, prompted)?;
    let mut ctx = NetCtx::new();
    let x = ctx.input("x", prompted)?;
    let probs = nets::expert_net(&mut ctx, config, expert, "expert", x, false)?;
    let eval = ctx.g.forward(&ctx.binds)?;
    Ok(eval.value(probs).clone())
}

/// Router distribution over experts for a prompted input; returns `[1, E]`.
pub fn router_forward(model: &MoEModel, prompted: &Tensor) -> Result<Tensor> {
    check_prompted_shape(&model.config, prompted)?;
    let mut ctx = NetCtx::new();
    let x = ctx.input("x", prompted)?;
    let probs = nets::router_net(&mut ctx, &model.config, &model.router, "router", x, false)?;
    let eval = ctx.g.forward(&ctx.binds)?;
    Ok(eval.value(probs).clone())
}

/// The full model `f` on a prompted `n×(m+L)` input; returns `[1, K]` class
/// probabilities — the router-weighted combination of expert outputs.
pub fn moe_forward(model: &MoEModel, prompted: &Tensor) -> Result<Tensor> {
    check_prompted_shape(&model.config, prompted)?;
    let mut ctx = NetCtx::new();
    let x = ctx.input("x", prompted)?;
    let probs = nets::moe_net(&mut ctx, model, "", x, false)?;
    let eval = ctx.g.forward(&ctx.binds)?;
    Ok(eval.value(probs).clone())
}

fn check_prompted_shape(config: &ModelConfig, prompted: &Tensor) -> Result<()> {
    let want = [config.channels, config.total_len()];
    if prompted.shape() != want {
        return Err(PondError::incompatible(format!(
            "input shape {:?} does not match the model's prompted geometry {:?}",
            prompted.shape(),
            want
        )));
    }
    Ok(())
}

/// A named bundle of tensors with a JSON-typed config, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write a checkpoint: JSON header (kind, config, parameter names/shapes)
/// followed by every tensor's values in declaration order.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: ck.kind.clone(),
        config: ck.config.clone(),
        params: ck
            .tensors
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for (_, t) in &ck.tensors {
        payload.extend_from_slice(t.values());
    }
    container::write(path, container::CHECKPOINT_MAGIC, &header, &payload)
}

/// Read a checkpoint back; bit-exact inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = container::read_raw(path, container::CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = container::parse_header(path, &raw.header)?;
    let mut expected = 0usize;
    for p in &header.params {
        expected += p.shape.iter().product::<usize>();
    }
    let values = container::decode_payload(path, &raw, expected)?;
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut offset = 0usize;
    for p in &header.params {
        let count: usize = p.shape.iter().product();
        let tensor = Tensor::new(&p.shape, values[offset..offset + count].to_vec()).map_err(
            |e| PondError::Header {
                path: path.to_path_buf(),
                detail: format!("parameter '{}' rejected: {e}", p.name),
            },
        )?;
        tensors.push((p.name.clone(), tensor));
        offset += count;
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 1,
            series_len: 13,
            prompt_len: 3,
            classes: 2,
            d_model: 8,
            heads: 2,
            blocks: 1,
            d_ff: 16,
            experts: 2,
            patch: PatchConfig {
                patch_len: 8,
                stride: 4,
            },
            router_hidden: 4,
        }
    }

    fn rand_input(config: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [config.channels, config.total_len()];
        let values = (0..shape[0] * shape[1])
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        Tensor::new(&shape, values).unwrap()
    }

    #[test]
    fn patch_count_examples() {
        let p = PatchConfig {
            patch_len: 16,
            stride: 8,
        };
        assert_eq!(patch_count(128, &p), 15);
        assert_eq!(patch_count(16, &p), 1);
        assert_eq!(padded_len(130, &p), 136);
        assert_eq!(patch_count(130, &p), 16);
    }

    #[test]
    fn patchify_windows_and_padding_by_hand() {
        let p = PatchConfig {
            patch_len: 3,
            stride: 2,
        };
        let x = Tensor::new(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let patches = patchify(&x, &p).unwrap();
        assert_eq!(patches.shape(), &[2, 3]);
        assert_eq!(patches.values(), &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0]);

        // 4 steps with patch 3 / stride 2 needs one replicated column.
        let x = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let patches = patchify(&x, &p).unwrap();
        assert_eq!(patches.shape(), &[2, 6]);
        assert_eq!(
            patches.values(),
            &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 3.0, 4.0, 4.0, 7.0, 8.0, 8.0]
        );
    }

    #[test]
    fn patchify_rejects_short_series() {
        let p = PatchConfig {
            patch_len: 8,
            stride: 4,
        };
        let x = Tensor::new(&[1, 5], vec![0.0; 5]).unwrap();
        assert!(matches!(
            patchify(&x, &p).unwrap_err(),
            PondError::Config { .. }
        ));
    }

    #[test]
    fn zeroed_head_yields_uniform_output() {
        let config = tiny_config();
        let mut model = MoEModel::init(&config, 0).unwrap();
        model.visit_mut(&mut |name, t| {
            if name == "expert0.head.w" || name == "expert0.head.b" {
                *t = Tensor::zeros(t.shape());
            }
        });
        let out = expert_forward(&config, &model.experts[0], &rand_input(&config, 1)).unwrap();
        for v in out.values() {
            assert!((v - 0.5).abs() < 1e-15, "expected uniform, got {v}");
        }
    }

    #[test]
    fn hand_set_router_and_experts_give_convex_combination() {
        let config = ModelConfig {
            experts: 3,
            classes: 3,
            ..tiny_config()
        };
        let mut model = MoEModel::zeros(&config).unwrap();
        // Bias-only experts: every activation is zero until the head bias,
        // so expert e outputs softmax(bias_e) exactly.
        let expert_probs = [
            [0.5f64, 0.25, 0.25],
            [0.1, 0.6, 0.3],
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ];
        for (e, probs) in expert_probs.iter().enumerate() {
            model.experts[e].head_b =
                Tensor::new(&[3], probs.iter().map(|p| p.ln()).collect()).unwrap();
        }
        let router = [0.2f64, 0.3, 0.5];
        model.router.b2 = Tensor::new(&[3], router.iter().map(|p| p.ln()).collect()).unwrap();

        let out = moe_forward(&model, &rand_input(&config, 2)).unwrap();
        for k in 0..3 {
            let want: f64 = (0..3).map(|e| router[e] * expert_probs[e][k]).sum();
            assert!(
                (out.values()[k] - want).abs() < 1e-12,
                "class {k}: {} vs {want}",
                out.values()[k]
            );
        }
    }

    #[test]
    fn one_hot_router_selects_single_expert() {
        let config = ModelConfig {
            experts: 3,
            ..tiny_config()
        };
        let mut model = MoEModel::init(&config, 3).unwrap();
        // A +800 logit underflows the other experts' softmax terms to zero,
        // making the routing weights exactly one-hot.
        model.router.w2 = Tensor::zeros(model.router.w2.shape());
        model.router.b2 = Tensor::new(&[3], vec![0.0, 0.0, 800.0]).unwrap();
        let x = rand_input(&config, 4);
        let gates = router_forward(&model, &x).unwrap();
        assert_eq!(gates.values(), &[0.0, 0.0, 1.0]);
        let moe = moe_forward(&model, &x).unwrap();
        let solo = expert_forward(&config, &model.experts[2], &x).unwrap();
        assert_eq!(moe.values(), solo.values());
    }

    #[test]
    fn single_expert_mixture_is_identity() {
        let config = ModelConfig {
            experts: 1,
            ..tiny_config()
        };
        let model = MoEModel::init(&config, 5).unwrap();
        let x = rand_input(&config, 6);
        let moe = moe_forward(&model, &x).unwrap();
        let solo = expert_forward(&config, &model.experts[0], &x).unwrap();
        assert_eq!(moe.values(), solo.values());
    }

    #[test]
    fn expert_output_ignores_expert_ordering() {
        let config = ModelConfig {
            experts: 2,
            ..tiny_config()
        };
        let mut model = MoEModel::init(&config, 7).unwrap();
        let x = rand_input(&config, 8);
        let before = expert_forward(&config, &model.experts[1], &x).unwrap();
        model.experts.swap(0, 1);
        let after = expert_forward(&config, &model.experts[0], &x).unwrap();
        assert_eq!(before.values(), after.values());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let config = tiny_config();
        let m1 = MoEModel::init(&config, 0).unwrap();
        let m2 = MoEModel::init(&config, 0).unwrap();
        assert_eq!(m1, m2);
        let x = rand_input(&config, 9);
        let a = moe_forward(&m1, &x).unwrap();
        let b = moe_forward(&m2, &x).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn moe_gradients_pass_numeric_check() {
        let config = tiny_config();
        let model = MoEModel::init(&config, 11).unwrap();
        let x = rand_input(&config, 12);
        let mut ctx = NetCtx::new();
        let xn = ctx.input("x", &x).unwrap();
        let probs = nets::moe_net(&mut ctx, &model, "", xn, true).unwrap();
        let target = ctx.frozen(&Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        ctx.g.cross_entropy_one_hot(probs, target).unwrap();
        let report = numgrad::grad_check(&ctx.g, &ctx.binds, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed,
            "worst deviation {:?} (max rel err {})",
            report.worst, report.max_rel_err
        );
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let model = MoEModel::init(&config, 13).unwrap();
        let path = dir.path().join("model.ck");
        model.save(&path).unwrap();
        let loaded = MoEModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        // Second save is byte-identical.
        let path2 = dir.path().join("model2.ck");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_wrong_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let model = MoEModel::init(&tiny_config(), 0).unwrap();
        let path = dir.path().join("model.ck");
        model.save(&path).unwrap();
        let mut ck = load_checkpoint(&path).unwrap();
        ck.config["d_model"] = serde_json::json!(16);
        let err = MoEModel::from_checkpoint(&ck).unwrap_err();
        assert!(matches!(err, PondError::Incompatible { .. }), "{err}");
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let model = MoEModel::init(&tiny_config(), 0).unwrap();
        let path = dir.path().join("model.ck");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            PondError::Checksum { .. } | PondError::Header { .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn moe_output_is_convex_combination_of_experts(seed in 0u64..1000) {
            let config = ModelConfig { experts: 3, ..tiny_config() };
            let model = MoEModel::init(&config, seed).unwrap();
            let x = rand_input(&config, seed ^ 0xdead);
            let out = moe_forward(&model, &x).unwrap();
            let experts: Vec<Tensor> = model
                .experts
                .iter()
                .map(|e| expert_forward(&config, e, &x).unwrap())
                .collect();
            let mut sum = 0.0;
            for k in 0..config.classes {
                let v = out.values()[k];
                let lo = experts.iter().map(|p| p.values()[k]).fold(f64::INFINITY, f64::min);
                let hi = experts.iter().map(|p| p.values()[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                prop_assert!(v >= 0.0);
                sum += v;
            }
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
