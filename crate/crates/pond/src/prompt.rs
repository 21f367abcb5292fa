//! Prompts and conditional prompt generators.
//!
//! A prompt is an `n×m` matrix prepended to a series in raw signal space.
//! The model is steered by the sum of a *common* prompt shared by all
//! domains and an *instance* prompt emitted by a per-domain generator — a
//! two-layer tanh perceptron reading the flattened series. Averaging a
//! domain's instance prompts yields its *domain prompt*, the object that
//! cross-domain similarity and source selection operate on.

use numgrad::Tensor;
use rand_distr::Distribution;

use crate::data::SeriesTensor;
use crate::error::PondError;
use crate::nets::{self, NetCtx};
use crate::Result;

/// Default hidden width of the generator perceptron.
pub const GENERATOR_HIDDEN: usize = 64;

/// An `n×m` prompt matrix. `m = 0` (an empty prompt) is representable so
/// that pretraining-compat call sites can express "no prompt", but ordinary
/// operations insist on m ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl Prompt {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if n < 1 {
            return Err(PondError::config("prompt needs n ≥ 1 channels"));
        }
        if values.len() != n * m {
            return Err(PondError::config(format!(
                "prompt {n}×{m} needs {} values, got {}",
                n * m,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(PondError::config("prompt contains non-finite values"));
        }
        Ok(Prompt { n, m, values })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Prompt {
            n,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(PondError::config(format!(
                "prompt tensor must be rank 2, got rank {}",
                t.rank()
            )));
        }
        Prompt::new(t.shape()[0], t.shape()[1], t.values().to_vec())
    }

    /// The prompt as a graph-ready tensor; empty prompts have no tensor
    /// representation and are rejected.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.m == 0 {
            return Err(PondError::config(
                "an empty (m = 0) prompt cannot become a tensor",
            ));
        }
        Ok(Tensor::new(&[self.n, self.m], self.values.clone())?)
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entrywise sum; shapes must agree.
    pub fn add(&self, other: &Prompt) -> Result<Prompt> {
        self.check_same_shape(other)?;
        Prompt::new(
            self.n,
            self.m,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Entrywise scaling.
    pub fn scale(&self, factor: f64) -> Prompt {
        Prompt {
            n: self.n,
            m: self.m,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Cosine similarity of the flattened matrices; `None` when either
    /// prompt has zero norm.
    pub fn cosine(&self, other: &Prompt) -> Option<f64> {
        if self.n != other.n || self.m != other.m {
            return None;
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        let na: f64 = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            None
        } else {
            Some(dot / (na * nb))
        }
    }

    fn check_same_shape(&self, other: &Prompt) -> Result<()> {
        if self.n != other.n || self.m != other.m {
            return Err(PondError::incompatible(format!(
                "prompt shapes {}×{} and {}×{} disagree",
                self.n, self.m, other.n, other.m
            )));
        }
        Ok(())
    }
}

/// Parameters of one conditional prompt generator: flattened `n·L` series →
/// `hidden` tanh units → `n·m` prompt entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    n: usize,
    l: usize,
    m: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GeneratorParams {
    fn check_dims(n: usize, l: usize, m: usize, hidden: usize) -> Result<()> {
        if n < 1 || l < 2 || m < 1 || hidden < 1 {
            return Err(PondError::config(format!(
                "generator needs n ≥ 1, L ≥ 2, m ≥ 1, hidden ≥ 1; got n={n}, L={l}, m={m}, hidden={hidden}"
            )));
        }
        Ok(())
    }

    /// Seeded init: uniform(−a, a) with a = √(6/(fan_in+fan_out)) for the
    /// weights, zero biases — a freshly initialized generator emits
    /// near-zero prompts but is not degenerate.
    /// Seeded initialization. The input layer is Xavier-random; the
    /// output layer starts at zero so a fresh generator emits the zero
    /// prompt and leaves the backbone's behaviour untouched until
    /// training deliberately moves it. (The output layer still learns:
    /// its gradient goes through the non-zero hidden activations.)
    pub fn init(n: usize, l: usize, m: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::check_dims(n, l, m, hidden)?;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(GeneratorParams {
            n,
            l,
            m,
            w1: crate::model::xavier(&mut rng, &[n * l, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, n * m]),
            b2: Tensor::zeros(&[n * m]),
        })
    }

    /// All-zero generator: emits the zero prompt for every input.
    pub fn zeros(n: usize, l: usize, m: usize, hidden: usize) -> Result<Self> {
        Self::check_dims(n, l, m, hidden)?;
        Ok(GeneratorParams {
            n,
            l,
            m,
            w1: Tensor::zeros(&[n * l, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, n * m]),
            b2: Tensor::zeros(&[n * m]),
        })
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn series_len(&self) -> usize {
        self.l
    }

    pub fn prompt_len(&self) -> usize {
        self.m
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Visit parameters in the fixed order shared with checkpoints.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// Run a generator on one series: `ΔP = reshape(W₂·tanh(W₁·vec(x)+b₁)+b₂)`.
/// Deterministic — the stochastic input the original formulation allows is
/// dropped; see [`generate_instance_prompt_noisy`] for the gated hook.
pub fn generate_instance_prompt(gen: &GeneratorParams, x: &SeriesTensor) -> Result<Prompt> {
    if x.channels() != gen.n || x.len() != gen.l {
        return Err(PondError::incompatible(format!(
            "series is {}×{} but the generator expects {}×{}",
            x.channels(),
            x.len(),
            gen.n,
            gen.l
        )));
    }
    let mut ctx = NetCtx::new();
    let flat = Tensor::new(&[1, gen.n * gen.l], x.values().to_vec())?;
    let xn = ctx.input("x", &flat)?;
    let out = nets::generator_net(&mut ctx, gen, "g", xn, false)?;
    let eval = ctx.g.forward(&ctx.binds)?;
    Prompt::from_tensor(eval.value(out))
}

/// The configuration-gated noisy variant: adds Gaussian perturbation of the
/// given sigma to every prompt entry. Off (sigma = 0) in all defaults.
pub fn generate_instance_prompt_noisy(
    gen: &GeneratorParams,
    x: &SeriesTensor,
    sigma: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Prompt> {
    let base = generate_instance_prompt(gen, x)?;
    if sigma == 0.0 {
        return Ok(base);
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(PondError::config(format!(
            "prompt noise sigma must be ≥ 0 and finite, got {sigma}"
        )));
    }
    let dist = rand_distr::Normal::new(0.0, sigma).expect("validated sigma");
    let values = base.values().iter().map(|v| v + dist.sample(rng)).collect();
    Prompt::new(base.channels(), base.len(), values)
}

/// Entrywise mean of instance prompts — the domain prompt.
pub fn aggregate_domain_prompt(prompts: &[Prompt]) -> Result<Prompt> {
    let first = prompts
        .first()
        .ok_or_else(|| PondError::config("cannot aggregate an empty prompt list"))?;
    let mut acc = vec![0.0f64; first.values().len()];
    for p in prompts {
        if p.channels() != first.channels() || p.len() != first.len() {
            return Err(PondError::incompatible(
                "prompts in one aggregation must share a shape",
            ));
        }
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / prompts.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Prompt::new(first.channels(), first.len(), acc)
}

/// Running estimate of a domain prompt, updated one batch at a time.
///
/// The first update copies the batch mean; afterwards the buffer blends
/// `β·old + (1−β)·batch_mean`. With β = 0 the buffer always equals the
/// latest batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPromptBuffer {
    beta: f64,
    value: Option<Prompt>,
    updates: usize,
}

impl DomainPromptBuffer {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(PondError::config(format!(
                "buffer momentum must lie in [0, 1), got {beta}"
            )));
        }
        Ok(DomainPromptBuffer {
            beta,
            value: None,
            updates: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Current estimate; `None` until the first update.
    pub fn value(&self) -> Option<&Prompt> {
        self.value.as_ref()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Fold one batch of instance prompts into the estimate.
    pub fn update(&mut self, batch: &[Prompt]) -> Result<()> {
        let mean = aggregate_domain_prompt(batch)?;
        self.value = Some(match self.value.take() {
            None => mean,
            Some(old) => old.scale(self.beta).add(&mean.scale(1.0 - self.beta))?,
        });
        self.updates += 1;
        Ok(())
    }

    /// Restore a persisted estimate (checkpoint plumbing).
    pub fn restore(beta: f64, value: Option<Prompt>, updates: usize) -> Result<Self> {
        let mut buf = Self::new(beta)?;
        buf.value = value;
        buf.updates = updates;
        Ok(buf)
    }
}

/// Concatenate `common + instance` with the series:
/// columns `0..m` hold the summed prompt, columns `m..m+L` hold `x`.
/// Requires m ≥ 1; see [`prepend_compat`] for the pretraining-compat form.
pub fn prepend(common: &Prompt, instance: &Prompt, x: &SeriesTensor) -> Result<Tensor> {
    if common.is_empty() {
        return Err(PondError::config(
            "prepend requires a prompt length m ≥ 1 (empty prompts are only \
             admissible through the pretraining-compat path)",
        ));
    }
    prepend_compat(common, instance, x)
}

/// Like [`prepend`], but an empty (m = 0) prompt pair is allowed and yields
/// the series unchanged.
pub fn prepend_compat(common: &Prompt, instance: &Prompt, x: &SeriesTensor) -> Result<Tensor> {
    let summed = common.add(instance)?;
    if summed.channels() != x.channels() {
        return Err(PondError::incompatible(format!(
            "prompt has {} channels but the series has {}",
            summed.channels(),
            x.channels()
        )));
    }
    let (n, m, l) = (x.channels(), summed.len(), x.len());
    let mut values = Vec::with_capacity(n * (m + l));
    for ch in 0..n {
        values.extend_from_slice(&summed.values()[ch * m..(ch + 1) * m]);
        values.extend_from_slice(&x.values()[ch * l..(ch + 1) * l]);
    }
    Ok(Tensor::new(&[n, m + l], values)?)
}
