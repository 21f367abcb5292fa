//! Implementations of the subcommands: each one loads its inputs, calls
//! the library, and writes artifacts. All JSON artifacts are emitted
//! through strict serde types, so they re-parse with unknown keys
//! rejected, and identical configs with identical seeds produce
//! byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pond::audit::{gradient_audit, AUDIT_STEP, AUDIT_TOL};
use pond::data::{
    generate_synthetic, load_dataset, save_dataset, split, take_target_shot_indices,
    DomainDataset, SplitRatios, SplitTag, SyntheticSpec,
};
use pond::error::PondError;
use pond::eval::{
    ablation_grid, discrimination_heatmap, heatmap_to_csv, metrics_from_predictions,
    source_count_sweep,
};
use pond::model::MoEModel;
use pond::objective::LossBreakdown;
use pond::train::{
    flexibility_demo, predict_target, pretrain, reptile_tune, select_source, source_similarities,
    target_transfer, FlexConfig, RunConfig, TrainedState,
};
use pond::Result;

use crate::config::CliConfig;

/// Names the generated files so later commands can find them.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub ratios: SplitRatios,
    /// Source dataset files, relative to the manifest, in domain order.
    pub sources: Vec<String>,
    /// Target dataset file, relative to the manifest.
    pub target: String,
}

/// Loss record emitted next to a pretraining checkpoint.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainHistory {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Total optimizer steps taken.
    pub steps: usize,
}

/// Loss record emitted next to a tuned state checkpoint.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneHistory {
    /// Objective breakdown per Reptile step.
    pub steps: Vec<LossBreakdown>,
}

/// One source's similarity to the target prompt.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityRow {
    pub domain_id: String,
    pub cosine: f64,
}

/// Output of `pond adapt`: the nearest source and the full table.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptReport {
    pub selected_source: String,
    pub selected_index: usize,
    pub similarities: Vec<SimilarityRow>,
}

/// JSON sidecar written next to the heatmap CSV.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapMeta {
    pub domain_ids: Vec<String>,
    /// True when only two domains exist and the discrimination loss
    /// degrades to raw pairwise similarity.
    pub fallback: bool,
}

/// Serialize pretty JSON with a trailing newline and write it out.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PondError::config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PondError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PondError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| PondError::incompatible(format!("{}: {e}", path.display())))
}

/// Sibling path carrying a derived artifact: `model.ckpt` →
/// `model.ckpt.history.json`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Load every source dataset a manifest names.
fn load_sources(data_dir: &Path) -> Result<(Manifest, Vec<DomainDataset>)> {
    let manifest: Manifest = read_json(&data_dir.join("manifest.json"))?;
    let sources = manifest
        .sources
        .iter()
        .map(|f| load_dataset(&data_dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, sources))
}

/// Reject datasets whose geometry disagrees with the model's.
fn check_dataset_geometry(model: &MoEModel, ds: &DomainDataset) -> Result<()> {
    let cfg = &model.config;
    if ds.channels() != cfg.channels
        || ds.series_len() != cfg.series_len
        || ds.classes() != cfg.classes
    {
        return Err(PondError::incompatible(format!(
            "dataset '{}' is {}×{} with {} classes, model expects {}×{} with {}",
            ds.domain_id(),
            ds.channels(),
            ds.series_len(),
            ds.classes(),
            cfg.channels,
            cfg.series_len,
            cfg.classes,
        )));
    }
    Ok(())
}

/// `pond gen-data`: one split dataset file per source domain, the target
/// domain unsplit, and a manifest naming them all.
pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    let (sources, target) = generate_synthetic(&cfg.spec)?;
    std::fs::create_dir_all(out).map_err(|e| PondError::io(out, e))?;

    let mut source_files = Vec::with_capacity(sources.len());
    for ds in &sources {
        let ds = split(ds, &cfg.ratios, cfg.spec.seed)?;
        let file = format!("{}.pond", ds.domain_id());
        save_dataset(&ds, &out.join(&file))?;
        source_files.push(file);
    }
    let target_file = format!("{}.pond", target.domain_id());
    save_dataset(&target, &out.join(&target_file))?;

    let manifest = Manifest {
        spec: cfg.spec.clone(),
        ratios: cfg.ratios,
        sources: source_files,
        target: target_file,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} source datasets + target to {}",
        sources.len(),
        out.display()
    );
    Ok(())
}

/// `pond pretrain`: fit the backbone on the pooled pretraining splits.
pub fn cmd_pretrain(
    config: &Path,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = CliConfig::load(config)?;
    if let Some(e) = epochs {
        cfg.run.epochs = e;
    }
    let (_manifest, sources) = load_sources(data)?;
    let model = MoEModel::init(&cfg.model, cfg.run.seeds.model)?;
    for ds in &sources {
        check_dataset_geometry(&model, ds)?;
    }
    let pool: Vec<_> = sources
        .iter()
        .flat_map(|s| s.with_tag(SplitTag::Pretrain))
        .collect();
    let outcome = pretrain(model, &pool, &cfg.run)?;
    outcome.model.save(out)?;
    write_json(
        &sibling(out, ".history.json"),
        &PretrainHistory {
            epoch_losses: outcome.epoch_losses,
            steps: outcome.steps,
        },
    )?;
    println!(
        "pretrained {} epochs ({} steps) -> {}",
        cfg.run.epochs,
        outcome.steps,
        out.display()
    );
    Ok(())
}

/// `pond tune`: Reptile prompt tuning on top of a pretrained checkpoint.
pub fn cmd_tune(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
) -> Result<()> {
    let mut cfg = CliConfig::load(config)?;
    if let Some(l1) = lambda1 {
        cfg.run.weights.lambda1 = l1;
    }
    if let Some(l2) = lambda2 {
        cfg.run.weights.lambda2 = l2;
    }
    let model = MoEModel::load(checkpoint)?;
    if model.config != cfg.model {
        return Err(PondError::incompatible(format!(
            "checkpoint {} was built for a different model geometry than the config",
            checkpoint.display()
        )));
    }
    let (_manifest, sources) = load_sources(data)?;
    for ds in &sources {
        check_dataset_geometry(&model, ds)?;
    }
    let refs: Vec<&DomainDataset> = sources.iter().collect();
    let state = reptile_tune(&model, &refs, &cfg.run)?;
    state.save(out)?;
    write_json(
        &sibling(out, ".history.json"),
        &TuneHistory {
            steps: state.tune_history.clone(),
        },
    )?;
    println!(
        "tuned {} steps over {} sources -> {}",
        cfg.run.steps,
        sources.len(),
        out.display()
    );
    Ok(())
}

/// Shared prefix of `adapt` and `eval`: fit the target generator on the
/// shots and pick the nearest source. Returns the shot indices so the
/// caller can score the complement.
fn transfer_and_select(
    state: &TrainedState,
    target: &DomainDataset,
    run: &RunConfig,
) -> Result<(TrainedState, usize, Vec<usize>)> {
    check_dataset_geometry(&state.model, target)?;
    let shot_indices = take_target_shot_indices(target, run.shots, run.seeds.shots)?;
    let shots: Vec<_> = shot_indices
        .iter()
        .map(|&i| target.instance(i).clone())
        .collect();
    let adapted = target_transfer(state, &shots, run)?;
    let selected = select_source(&adapted)?;
    Ok((adapted, selected, shot_indices))
}

/// `pond adapt`: transfer to the target shots and report the nearest
/// source with the full similarity table.
pub fn cmd_adapt(config: &Path, state: &Path, target: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    let state = TrainedState::load(state)?;
    let target = load_dataset(target)?;
    let (adapted, selected, _shots) = transfer_and_select(&state, &target, &cfg.run)?;

    let target_prompt = adapted
        .target_prompt
        .clone()
        .ok_or_else(|| PondError::config("transfer produced no target prompt"))?;
    let sims = source_similarities(&adapted, &target_prompt);
    let report = AdaptReport {
        selected_source: adapted.source_ids[selected].clone(),
        selected_index: selected,
        similarities: adapted
            .source_ids
            .iter()
            .zip(&sims)
            .map(|(id, &cosine)| SimilarityRow {
                domain_id: id.clone(),
                cosine,
            })
            .collect(),
    };
    write_json(out, &report)?;
    println!(
        "selected {} (cosine {:.4}) -> {}",
        report.selected_source,
        sims[selected],
        out.display()
    );
    Ok(())
}

/// `pond eval`: metrics on the target instances outside the shot set,
/// using the run configuration stored in the state checkpoint.
pub fn cmd_eval(state: &Path, target: &Path, out: &Path) -> Result<()> {
    let state = TrainedState::load(state)?;
    let target = load_dataset(target)?;
    let run = state.run.clone();
    let (adapted, selected, shot_indices) = transfer_and_select(&state, &target, &run)?;

    let in_shots: std::collections::HashSet<usize> = shot_indices.into_iter().collect();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for i in 0..target.len() {
        if in_shots.contains(&i) {
            continue;
        }
        let inst = target.instance(i);
        let (class, _probs) = predict_target(&adapted, selected, &inst.series)?;
        predictions.push(class);
        truths.push(inst.label);
    }
    if predictions.is_empty() {
        return Err(PondError::config(
            "no target instances left to evaluate after removing the shots",
        ));
    }
    let metrics = metrics_from_predictions(
        target.domain_id(),
        run.seeds.model,
        &predictions,
        &truths,
        state.model.config.classes,
        adapted.tune_history.last().copied(),
    )?;
    write_json(out, &metrics)?;
    println!(
        "macro-F1 {:.4}, accuracy {:.4}, source {} -> {}",
        metrics.macro_f1,
        metrics.accuracy,
        state.source_ids[selected],
        out.display()
    );
    Ok(())
}

/// `pond ablate`: the component-ablation grid over the configured seeds.
pub fn cmd_ablate(config: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    if cfg.seeds.is_empty() {
        return Err(PondError::config("ablate needs at least one seed"));
    }
    let grid = ablation_grid(&cfg.pipeline(), &cfg.seeds)?;
    write_json(out, &grid)?;
    println!("{} ablation runs -> {}", grid.len(), out.display());
    Ok(())
}

/// `pond sweep-sources`: mean metrics per source-domain count.
pub fn cmd_sweep_sources(config: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    if cfg.seeds.is_empty() {
        return Err(PondError::config("sweep-sources needs at least one seed"));
    }
    let rows = source_count_sweep(&cfg.pipeline(), &cfg.counts, &cfg.seeds)?;
    write_json(out, &rows)?;
    println!("{} sweep rows -> {}", rows.len(), out.display());
    Ok(())
}

/// `pond heatmap`: pairwise discrimination heatmap of a tuned state as
/// CSV, with a JSON sidecar naming the domains.
pub fn cmd_heatmap(state: &Path, out: &Path) -> Result<()> {
    let state = TrainedState::load(state)?;
    let heat = discrimination_heatmap(&state)?;
    let csv = heatmap_to_csv(&heat);
    std::fs::write(out, csv).map_err(|e| PondError::io(out, e))?;
    write_json(
        &sibling(out, ".meta.json"),
        &HeatmapMeta {
            domain_ids: heat.domain_ids.clone(),
            fallback: heat.fallback,
        },
    )?;
    println!(
        "{}×{} heatmap -> {}",
        heat.domain_ids.len(),
        heat.domain_ids.len(),
        out.display()
    );
    Ok(())
}

/// `pond flexdemo`: the conflicting-instance experiment report.
pub fn cmd_flexdemo(out: &Path, budget: Option<usize>) -> Result<()> {
    let mut fc = FlexConfig::default();
    if let Some(b) = budget {
        fc.step_budget = b;
    }
    let report = flexibility_demo(&fc)?;
    write_json(out, &report)?;
    println!(
        "generator fit {}/{} seeds -> {}",
        report.generator_hits,
        report.outcomes.len(),
        out.display()
    );
    Ok(())
}

/// `pond gradcheck`: finite-difference audit of every primitive and of
/// the full objective. Returns whether everything passed.
pub fn cmd_gradcheck() -> Result<bool> {
    let lines = gradient_audit(AUDIT_STEP, AUDIT_TOL)?;
    let mut all = true;
    println!("{:<14} {:>12} {:>8}  verdict", "graph", "max rel err", "entries");
    for line in &lines {
        println!(
            "{:<14} {:>12.3e} {:>8}  {}",
            line.name,
            line.max_rel_err,
            line.checked,
            if line.passed { "pass" } else { "FAIL" }
        );
        all &= line.passed;
    }
    Ok(all)
}
