//! Metrics and experiment harnesses: classification reports, the
//! component-ablation grid, the source-count sensitivity sweep, and the
//! pairwise prompt-discrimination heatmap.
//!
//! [`run_pipeline`] wires the full method end to end — synthesize domains,
//! pretrain, prompt-tune, transfer to the target's shots, select a source,
//! predict the held-out target instances — and everything here reduces to
//! repeated pipeline runs with varied flags, source counts, or seeds.

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, split, take_target_shot_indices, DomainDataset, LabeledInstance,
    SplitRatios, SyntheticSpec,
};
use crate::error::PondError;
use crate::model::{ModelConfig, MoEModel};
use crate::objective::{frobenius_sim, LossBreakdown};
use crate::prompt::Prompt;
use crate::train::{
    pretrain, reptile_tune, select_source, target_transfer, AblationFlags, RunConfig, Seeds,
    TrainedState,
};
use crate::Result;

/// Per-class precision/recall/F1, each with the 0/0 → 0 convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One evaluation: overall and per-class quality plus the confusion
/// matrix (rows = truth, columns = prediction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    /// Final objective breakdown of the tuning phase, when available.
    pub losses: Option<LossBreakdown>,
}

fn check_paired(predictions: &[usize], truths: &[usize], classes: usize) -> Result<()> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(PondError::config(
            "metrics need non-empty prediction and truth lists of equal length",
        ));
    }
    if let Some(bad) = predictions.iter().chain(truths).find(|l| **l >= classes) {
        return Err(PondError::config(format!(
            "label {bad} out of range for K = {classes}"
        )));
    }
    Ok(())
}

/// The K×K confusion matrix: entry `[t][p]` counts instances of true
/// class `t` predicted as `p`.
pub fn confusion_matrix(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check_paired(predictions, truths, classes)?;
    let mut matrix = vec![vec![0usize; classes]; classes];
    for (p, t) in predictions.iter().zip(truths) {
        matrix[*t][*p] += 1;
    }
    Ok(matrix)
}

/// Fraction of correct predictions.
pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(PondError::config(
            "accuracy needs non-empty lists of equal length",
        ));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision/recall/F1 from a confusion matrix, 0/0 → 0.
pub fn per_class_metrics(confusion: &[Vec<usize>]) -> Vec<ClassMetrics> {
    let classes = confusion.len();
    (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let fp: f64 = (0..classes)
                .filter(|t| *t != c)
                .map(|t| confusion[t][c] as f64)
                .sum();
            let fn_: f64 = (0..classes)
                .filter(|p| *p != c)
                .map(|p| confusion[c][p] as f64)
                .sum();
            let precision = ratio_or_zero(tp, tp + fp);
            let recall = ratio_or_zero(tp, tp + fn_);
            let f1 = ratio_or_zero(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all K classes, including classes
/// absent from both lists (which contribute 0 under the 0/0 convention).
pub fn macro_f1(predictions: &[usize], truths: &[usize], classes: usize) -> Result<f64> {
    let confusion = confusion_matrix(predictions, truths, classes)?;
    let per_class = per_class_metrics(&confusion);
    Ok(per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64)
}

/// Assemble the full report for one prediction run.
pub fn metrics_from_predictions(
    scenario: &str,
    seed: u64,
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
    losses: Option<LossBreakdown>,
) -> Result<MetricsReport> {
    let confusion = confusion_matrix(predictions, truths, classes)?;
    let per_class = per_class_metrics(&confusion);
    Ok(MetricsReport {
        scenario: scenario.to_string(),
        seed,
        accuracy: accuracy(predictions, truths)?,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64,
        per_class,
        confusion,
        losses,
    })
}

/// Spearman rank correlation, with tied values receiving averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PondError::config(
            "rank correlation needs two paired samples of equal length ≥ 2",
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(PondError::config(
            "rank correlation is undefined for a constant sample",
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

// ---------------------------------------------------------------------
// Pipeline runner
// ---------------------------------------------------------------------

/// A full experiment definition: the synthetic benchmark, the backbone
/// architecture, and the training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub run: RunConfig,
    /// How each source domain divides into pretraining/tuning/validation.
    pub ratios: SplitRatios,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            spec: SyntheticSpec::default(),
            model: ModelConfig::default(),
            run: RunConfig::default(),
            ratios: SplitRatios::default(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale experiment on the default synthetic benchmark: a small
    /// backbone and enough pretraining to saturate it, so a full pipeline
    /// run finishes in about a second. Good for demos, format checks, and
    /// the component ablation.
    pub fn compact() -> PipelineConfig {
        let spec = SyntheticSpec::default();
        PipelineConfig {
            model: ModelConfig {
                channels: spec.channels,
                series_len: spec.length,
                prompt_len: 8,
                classes: spec.classes,
                d_model: 8,
                heads: 2,
                blocks: 1,
                d_ff: 16,
                experts: 2,
                patch: crate::model::PatchConfig {
                    patch_len: 8,
                    stride: 8,
                },
                router_hidden: 8,
            },
            run: RunConfig {
                epochs: 12,
                batch: 8,
                steps: 40,
                prompt_len: 8,
                shots: 9,
                ..RunConfig::default()
            },
            spec,
            ratios: SplitRatios::default(),
        }
    }

    /// A benchmark tuned so that prompt adaptation has measurable value.
    ///
    /// Class frequencies sit half a cycle apart while the two groups are
    /// in phase opposition, so telling classes apart requires
    /// phase-coherent templates that differ per group; heavier noise and
    /// deliberately short pretraining leave the shared backbone below its
    /// ceiling. Domain-conditional prompts recover a measurable part of
    /// that headroom, which the plain backbone cannot.
    pub fn adaptation_benchmark() -> PipelineConfig {
        PipelineConfig {
            spec: SyntheticSpec {
                domains: 6,
                length: 32,
                class_frequencies: vec![2.0, 2.5, 3.0],
                group_phases: vec![0.0, std::f64::consts::PI],
                noise_sigma: 0.25,
                instances_per_domain: 90,
                ..SyntheticSpec::default()
            },
            model: ModelConfig {
                channels: 2,
                series_len: 32,
                prompt_len: 8,
                classes: 3,
                d_model: 8,
                heads: 2,
                blocks: 1,
                d_ff: 16,
                experts: 2,
                patch: crate::model::PatchConfig {
                    patch_len: 8,
                    stride: 8,
                },
                router_hidden: 8,
            },
            run: RunConfig {
                epochs: 4,
                batch: 8,
                steps: 400,
                eta: 0.01,
                prompt_len: 8,
                weights: crate::objective::LossWeights {
                    lambda1: 0.1,
                    lambda2: 3.0,
                },
                shots: 15,
                ..RunConfig::default()
            },
            ratios: SplitRatios {
                pretrain: 0.3,
                tune: 0.5,
                validation: 0.2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.model.validate()?;
        self.run.validate()?;
        if self.model.channels != self.spec.channels
            || self.model.series_len != self.spec.length
            || self.model.classes != self.spec.classes
        {
            return Err(PondError::incompatible(format!(
                "model geometry {}×{} with K={} does not match the data spec {}×{} with K={}",
                self.model.channels,
                self.model.series_len,
                self.model.classes,
                self.spec.channels,
                self.spec.length,
                self.spec.classes
            )));
        }
        if self.model.prompt_len != self.run.prompt_len {
            return Err(PondError::incompatible(format!(
                "model prompt length m={} does not match the run's m={}",
                self.model.prompt_len, self.run.prompt_len
            )));
        }
        Ok(())
    }

    /// Derive a variation of this experiment for one seed of a sweep:
    /// fresh data, initialization, and training randomness, all
    /// deterministic functions of `seed`.
    pub fn reseeded(&self, seed: u64) -> PipelineConfig {
        let mut p = self.clone();
        p.spec.seed = self.spec.seed.wrapping_add(seed);
        p.run.seeds = Seeds {
            model: seed.wrapping_add(11),
            train: seed.wrapping_add(22),
            shots: seed.wrapping_add(33),
        };
        p
    }
}

/// The backbone architecture a flag row actually instantiates: ablating
/// the mixture collapses it to a single expert.
pub fn effective_model_config(model: &ModelConfig, flags: &AblationFlags) -> ModelConfig {
    let mut config = model.clone();
    if !flags.use_moe {
        config.experts = 1;
    }
    config
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub metrics: MetricsReport,
    pub state: TrainedState,
    /// Index of the selected source within the state's source list.
    pub selected_source: usize,
    /// Mean pretraining loss per epoch.
    pub pretrain_losses: Vec<f64>,
}

/// Run the full method end to end on the synthetic benchmark and report
/// metrics over the target instances not spent as shots.
pub fn run_pipeline(p: &PipelineConfig, scenario: &str) -> Result<PipelineOutput> {
    run_pipeline_with(p, scenario, None)
}

/// As [`run_pipeline`], but optionally restricted to the first
/// `source_limit` source domains of the generated pool.
pub fn run_pipeline_with(
    p: &PipelineConfig,
    scenario: &str,
    source_limit: Option<usize>,
) -> Result<PipelineOutput> {
    p.validate()?;
    let (sources, target) = generate_synthetic(&p.spec)?;
    let keep = source_limit.unwrap_or(sources.len());
    if keep == 0 || keep > sources.len() {
        return Err(PondError::config(format!(
            "cannot keep {keep} of {} sources",
            sources.len()
        )));
    }
    let sources: Vec<DomainDataset> = sources
        .into_iter()
        .take(keep)
        .map(|s| split(&s, &p.ratios, p.spec.seed))
        .collect::<Result<_>>()?;

    let config = effective_model_config(&p.model, &p.run.ablation);
    let model = MoEModel::init(&config, p.run.seeds.model)?;
    let pool: Vec<&LabeledInstance> = sources
        .iter()
        .flat_map(|s| s.with_tag(crate::data::SplitTag::Pretrain))
        .collect();
    let pretrained = pretrain(model, &pool, &p.run)?;

    let refs: Vec<&DomainDataset> = sources.iter().collect();
    let state = reptile_tune(&pretrained.model, &refs, &p.run)?;

    let shot_indices = take_target_shot_indices(&target, p.run.shots, p.run.seeds.shots)?;
    let shots: Vec<LabeledInstance> = shot_indices
        .iter()
        .map(|&i| target.instance(i).clone())
        .collect();
    let state = target_transfer(&state, &shots, &p.run)?;
    let selected = select_source(&state)?;

    let in_shots: std::collections::HashSet<usize> = shot_indices.into_iter().collect();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for i in 0..target.len() {
        if in_shots.contains(&i) {
            continue;
        }
        let inst = target.instance(i);
        let (class, _) = crate::train::predict_target(&state, selected, &inst.series)?;
        predictions.push(class);
        truths.push(inst.label);
    }
    if predictions.is_empty() {
        return Err(PondError::config(
            "no target instances left to evaluate after removing the shots",
        ));
    }
    let metrics = metrics_from_predictions(
        scenario,
        p.run.seeds.model,
        &predictions,
        &truths,
        config.classes,
        state.tune_history.last().copied(),
    )?;
    Ok(PipelineOutput {
        metrics,
        state,
        selected_source: selected,
        pretrain_losses: pretrained.epoch_losses,
    })
}

// ---------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------

/// The six flag rows of the component ablation. Rows with neither prompt
/// component (nothing tunable) are excluded.
pub fn ablation_rows() -> [AblationFlags; 6] {
    let f = |use_moe, use_common_prompt, use_generator| AblationFlags {
        use_moe,
        use_common_prompt,
        use_generator,
    };
    [
        f(true, true, true),
        f(true, true, false),
        f(true, false, true),
        f(false, true, true),
        f(false, true, false),
        f(false, false, true),
    ]
}

/// A short human-readable label for a flag row.
pub fn flags_label(flags: &AblationFlags) -> String {
    if *flags == AblationFlags::default() {
        return "full".to_string();
    }
    let mut missing = Vec::new();
    if !flags.use_moe {
        missing.push("moe");
    }
    if !flags.use_common_prompt {
        missing.push("common");
    }
    if !flags.use_generator {
        missing.push("generator");
    }
    format!("no-{}", missing.join("-"))
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub flags: AblationFlags,
    pub label: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// One full pipeline run per flag row per seed.
pub fn ablation_grid(p: &PipelineConfig, seeds: &[u64]) -> Result<Vec<AblationCell>> {
    if seeds.is_empty() {
        return Err(PondError::config("the ablation grid needs at least one seed"));
    }
    let mut cells = Vec::with_capacity(ablation_rows().len() * seeds.len());
    for flags in ablation_rows() {
        let label = flags_label(&flags);
        for &seed in seeds {
            let mut variant = p.reseeded(seed);
            variant.run.ablation = flags;
            let scenario = format!("ablation/{label}");
            let out = run_pipeline(&variant, &scenario)?;
            cells.push(AblationCell {
                flags,
                label: label.clone(),
                seed,
                metrics: out.metrics,
            });
        }
    }
    Ok(cells)
}

// ---------------------------------------------------------------------
// Source-count sweep
// ---------------------------------------------------------------------

/// Mean ± std of the target metrics at one source count.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub sources: usize,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_seed_macro_f1: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Run the pipeline on growing prefixes of the same source pool: one row
/// per count, each aggregated over the seeds.
pub fn source_count_sweep(
    p: &PipelineConfig,
    counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() || seeds.is_empty() {
        return Err(PondError::config("the sweep needs counts and seeds"));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PondError::config("sweep counts must be strictly ascending"));
    }
    if *counts.last().expect("non-empty") > p.spec.domains {
        return Err(PondError::config(format!(
            "sweep asks for {} sources but the spec generates {}",
            counts.last().expect("non-empty"),
            p.spec.domains
        )));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut f1s = Vec::with_capacity(seeds.len());
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let variant = p.reseeded(seed);
            let scenario = format!("sweep/{count}-sources");
            let out = run_pipeline_with(&variant, &scenario, Some(count))?;
            f1s.push(out.metrics.macro_f1);
            accs.push(out.metrics.accuracy);
        }
        let (mean_f1, std_f1) = mean_std(&f1s);
        let (mean_acc, std_acc) = mean_std(&accs);
        rows.push(SweepRow {
            sources: count,
            mean_macro_f1: mean_f1,
            std_macro_f1: std_f1,
            mean_accuracy: mean_acc,
            std_accuracy: std_acc,
            per_seed_macro_f1: f1s,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------
// Discrimination heatmap
// ---------------------------------------------------------------------

/// Pairwise prompt-discrimination heatmap: entry (a, b) is the exponent
/// of the symmetrized pairwise discrimination term between domains a and
/// b. The diagonal is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub domain_ids: Vec<String>,
    /// Row-major M×M entries; `None` exactly on the diagonal.
    pub entries: Vec<Vec<Option<f64>>>,
    /// True when fewer than three domains forced the raw-similarity
    /// fallback.
    pub fallback: bool,
}

/// Build the heatmap from a tuned state's exact domain prompts.
pub fn discrimination_heatmap(state: &TrainedState) -> Result<HeatmapMatrix> {
    heatmap_from_prompts(&state.source_prompts, &state.source_ids)
}

pub(crate) fn heatmap_from_prompts(
    prompts: &[Prompt],
    ids: &[String],
) -> Result<HeatmapMatrix> {
    let m = prompts.len();
    if m < 2 || ids.len() != m {
        return Err(PondError::config(
            "a discrimination heatmap needs at least two domains with ids",
        ));
    }
    let mut sims = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let s = frobenius_sim(&prompts[i], &prompts[j]);
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }
    // Directed pairwise discrimination term; with two domains it falls
    // back to the raw similarity.
    let term = |i1: usize, i2: usize| -> f64 {
        if m == 2 {
            return sims[i1][i2];
        }
        let others: Vec<f64> = (0..m)
            .filter(|i| *i != i1 && *i != i2)
            .map(|i| sims[i1][i])
            .collect();
        let max = others.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = if others.len() == 1 {
            max
        } else {
            max + others.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        };
        sims[i1][i2] - lse
    };
    let mut entries = vec![vec![None; m]; m];
    for a in 0..m {
        for b in (a + 1)..m {
            let sym = (term(a, b) + term(b, a)) / 2.0;
            let value = sym.exp();
            entries[a][b] = Some(value);
            entries[b][a] = Some(value);
        }
    }
    Ok(HeatmapMatrix {
        domain_ids: ids.to_vec(),
        entries,
        fallback: m == 2,
    })
}

/// Render the heatmap as CSV: a header row of domain ids, one row per
/// domain with its id first, diagonal cells left empty. Values print in
/// shortest round-trip form, so parsing them back is exact.
pub fn heatmap_to_csv(h: &HeatmapMatrix) -> String {
    let mut out = String::from("domain");
    for id in &h.domain_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (i, row) in h.entries.iter().enumerate() {
        out.push_str(&h.domain_ids[i]);
        for cell in row {
            out.push(',');
            if let Some(v) = cell {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Parse a heatmap CSV written by [`heatmap_to_csv`]. The fallback flag
/// is not part of the CSV; it is restored from the domain count.
pub fn heatmap_from_csv(text: &str) -> Result<HeatmapMatrix> {
    let bad = |detail: &str| PondError::config(format!("heatmap CSV: {detail}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("domain") {
        return Err(bad("header must start with 'domain'"));
    }
    let domain_ids: Vec<String> = cols.map(str::to_string).collect();
    let m = domain_ids.len();
    if m < 2 {
        return Err(bad("needs at least two domains"));
    }
    let mut entries = Vec::with_capacity(m);
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let row_id = cells.next().ok_or_else(|| bad("missing row id"))?;
        if i >= m || row_id != domain_ids[i] {
            return Err(bad("row ids must repeat the header order"));
        }
        let mut row = Vec::with_capacity(m);
        for (j, cell) in cells.enumerate() {
            if cell.is_empty() {
                if i != j {
                    return Err(bad("only diagonal cells may be empty"));
                }
                row.push(None);
            } else {
                let value: f64 = cell
                    .parse()
                    .map_err(|_| bad(&format!("cell '{cell}' is not a number")))?;
                row.push(Some(value));
            }
        }
        if row.len() != m {
            return Err(bad("row width must match the header"));
        }
        entries.push(row);
    }
    if entries.len() != m {
        return Err(bad("row count must match the header"));
    }
    Ok(HeatmapMatrix {
        domain_ids,
        entries,
        fallback: m == 2,
    })
}
