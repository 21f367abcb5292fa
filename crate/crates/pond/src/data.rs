//! Dataset model, synthetic multi-domain generation, split management, and
//! the on-disk dataset container.
//!
//! The synthetic benchmark plants a known domain structure: domains are
//! partitioned into groups, each group has its own phase offset and
//! per-channel gain, and classes are sine waves at distinct frequencies.
//! Domains in the same group therefore look alike, which gives adaptation a
//! ground-truth answer for "which source is most similar to the target".

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::PondError;
use crate::Result;

/// Which phase of the pipeline an instance is reserved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Pretrain,
    Tune,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Pretrain => "pretrain",
            SplitTag::Tune => "tune",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }
}

/// A multivariate series: `n` channels observed at `l` time steps, stored
/// row-major as `[channel][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTensor {
    n: usize,
    l: usize,
    values: Vec<f64>,
}

impl SeriesTensor {
    /// Build a series, checking the geometry (n ≥ 1, L ≥ 2) and that every
    /// value is finite.
    pub fn new(n: usize, l: usize, values: Vec<f64>) -> Result<Self> {
        if n < 1 || l < 2 {
            return Err(PondError::config(format!(
                "series needs n ≥ 1 channels and L ≥ 2 steps, got n={n}, L={l}"
            )));
        }
        if values.len() != n * l {
            return Err(PondError::config(format!(
                "series with n={n}, L={l} needs {} values, got {}",
                n * l,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(PondError::config("series contains non-finite values"));
        }
        Ok(SeriesTensor { n, l, values })
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        false // n ≥ 1 and L ≥ 2 are construction invariants
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, channel: usize, t: usize) -> f64 {
        self.values[channel * self.l + t]
    }

    /// Euclidean distance between two series of identical geometry.
    pub fn distance(&self, other: &SeriesTensor) -> f64 {
        debug_assert_eq!(self.n, other.n);
        debug_assert_eq!(self.l, other.l);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A series paired with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub series: SeriesTensor,
    pub label: usize,
}

/// All instances of one domain, each carrying a split tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain_id: String,
    k: usize,
    n: usize,
    l: usize,
    instances: Vec<LabeledInstance>,
    split: Vec<SplitTag>,
}

impl DomainDataset {
    /// Build a dataset, validating that every instance matches the declared
    /// geometry and that every label is below `k`.
    ///
    /// The geometry (`n`, `l`) is explicit rather than inferred so that an
    /// empty dataset still knows its shape.
    pub fn new(
        domain_id: impl Into<String>,
        k: usize,
        n: usize,
        l: usize,
        instances: Vec<LabeledInstance>,
        split: Vec<SplitTag>,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        if k < 1 {
            return Err(PondError::config("dataset needs at least one class"));
        }
        if n < 1 || l < 2 {
            return Err(PondError::config(format!(
                "dataset needs n ≥ 1 channels and L ≥ 2 steps, got n={n}, L={l}"
            )));
        }
        if instances.len() != split.len() {
            return Err(PondError::config(format!(
                "dataset '{domain_id}' has {} instances but {} split tags",
                instances.len(),
                split.len()
            )));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.series.channels() != n || inst.series.len() != l {
                return Err(PondError::config(format!(
                    "instance {i} of '{domain_id}' has geometry {}×{}, dataset declares {n}×{l}",
                    inst.series.channels(),
                    inst.series.len()
                )));
            }
            if inst.label >= k {
                return Err(PondError::config(format!(
                    "instance {i} of '{domain_id}' has label {} but K = {k}",
                    inst.label
                )));
            }
        }
        Ok(DomainDataset {
            domain_id,
            k,
            n,
            l,
            instances,
            split,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn series_len(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn split_tags(&self) -> &[SplitTag] {
        &self.split
    }

    pub fn instance(&self, i: usize) -> &LabeledInstance {
        &self.instances[i]
    }

    /// Indices of instances carrying the given split tag, in dataset order.
    pub fn indices_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Instances carrying the given split tag, in dataset order.
    pub fn with_tag(&self, tag: SplitTag) -> Vec<&LabeledInstance> {
        self.indices_with_tag(tag)
            .into_iter()
            .map(|i| &self.instances[i])
            .collect()
    }

    /// Instance count per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }
}

/// Recipe for the synthetic multi-domain benchmark.
///
/// `domains` source domains are assigned round-robin to `groups` groups
/// (domain `i` belongs to group `i % groups`). Class `c` of group `g` on
/// channel `ch` is
///
/// ```text
/// gain[g][ch] · sin(2π · freq_c · t / L + phase[g]) + Normal(0, sigma)
/// ```
///
/// The target domain is generated from `target_group`, with one extra phase
/// offset drawn uniformly from `(-target_phase_jitter, target_phase_jitter)`
/// so it matches no source exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of source domains M.
    pub domains: usize,
    /// Number of domain groups G (≤ M).
    pub groups: usize,
    /// Number of classes K.
    pub classes: usize,
    /// Channels per series.
    pub channels: usize,
    /// Time steps per series.
    pub length: usize,
    /// Cycles per window for each class; must be distinct.
    pub class_frequencies: Vec<f64>,
    /// Phase offset per group, radians.
    pub group_phases: Vec<f64>,
    /// Per-channel gain per group, `groups × channels`.
    pub group_gains: Vec<Vec<f64>>,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Instances generated per domain (sources and target alike).
    pub instances_per_domain: usize,
    /// Group the target domain is drawn from.
    pub target_group: usize,
    /// Half-width of the target's uniform phase jitter, radians.
    pub target_phase_jitter: f64,
    /// Master seed; every domain derives its own independent stream.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The desk-scale benchmark: six sources in two groups, three sine
    /// classes on two channels.
    fn default() -> Self {
        SyntheticSpec {
            domains: 6,
            groups: 2,
            classes: 3,
            channels: 2,
            length: 64,
            class_frequencies: vec![2.0, 5.0, 9.0],
            group_phases: vec![0.0, std::f64::consts::FRAC_PI_2],
            group_gains: vec![vec![1.0, 0.8], vec![0.65, 1.25]],
            noise_sigma: 0.1,
            instances_per_domain: 48,
            target_group: 0,
            target_phase_jitter: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(PondError::config("need at least M = 2 source domains"));
        }
        if self.groups < 1 || self.groups > self.domains {
            return Err(PondError::config(format!(
                "groups must satisfy 1 ≤ G ≤ M, got G={}, M={}",
                self.groups, self.domains
            )));
        }
        if self.classes < 2 {
            return Err(PondError::config("need at least K = 2 classes"));
        }
        if self.channels < 1 || self.length < 2 {
            return Err(PondError::config(format!(
                "need n ≥ 1 channels and L ≥ 2 steps, got n={}, L={}",
                self.channels, self.length
            )));
        }
        if self.class_frequencies.len() != self.classes {
            return Err(PondError::config(format!(
                "{} class frequencies for K={} classes",
                self.class_frequencies.len(),
                self.classes
            )));
        }
        for (i, f) in self.class_frequencies.iter().enumerate() {
            if !f.is_finite() || *f <= 0.0 {
                return Err(PondError::config(format!(
                    "class frequency {i} must be positive and finite, got {f}"
                )));
            }
            for g in &self.class_frequencies[..i] {
                if g == f {
                    return Err(PondError::config(format!(
                        "class frequencies must be distinct, {f} appears twice"
                    )));
                }
            }
        }
        if self.group_phases.len() != self.groups {
            return Err(PondError::config(format!(
                "{} group phases for G={} groups",
                self.group_phases.len(),
                self.groups
            )));
        }
        if self.group_gains.len() != self.groups
            || self.group_gains.iter().any(|g| g.len() != self.channels)
        {
            return Err(PondError::config(format!(
                "group gains must be G×n = {}×{}",
                self.groups, self.channels
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(PondError::config(format!(
                "noise sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        if self.instances_per_domain < 1 {
            return Err(PondError::config("need at least one instance per domain"));
        }
        if self.target_group >= self.groups {
            return Err(PondError::config(format!(
                "target group {} out of range for G={}",
                self.target_group, self.groups
            )));
        }
        if !self.target_phase_jitter.is_finite() || self.target_phase_jitter < 0.0 {
            return Err(PondError::config(format!(
                "target phase jitter must be ≥ 0, got {}",
                self.target_phase_jitter
            )));
        }
        Ok(())
    }

    /// Group that source domain `i` belongs to.
    pub fn group_of(&self, domain: usize) -> usize {
        domain % self.groups
    }
}

/// Generate every source domain plus the target domain.
///
/// Each domain draws from its own counter-offset stream of the master seed,
/// so adding or reordering domains never perturbs another domain's data.
/// Source instances are tagged [`SplitTag::Pretrain`] (retagged later by
/// [`split`]); target instances are tagged [`SplitTag::Test`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    spec.validate()?;
    let mut sources = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        sources.push(generate_domain(
            spec,
            format!("source-{d}"),
            spec.group_of(d),
            d as u64,
            0.0,
            SplitTag::Pretrain,
        )?);
    }
    let mut target_rng = domain_rng(spec.seed, spec.domains as u64);
    let jitter = if spec.target_phase_jitter > 0.0 {
        target_rng.random_range(-spec.target_phase_jitter..spec.target_phase_jitter)
    } else {
        0.0
    };
    let target = generate_domain_with_rng(
        spec,
        "target".to_string(),
        spec.target_group,
        &mut target_rng,
        jitter,
        SplitTag::Test,
    )?;
    Ok((sources, target))
}

fn domain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_domain(
    spec: &SyntheticSpec,
    domain_id: String,
    group: usize,
    stream: u64,
    extra_phase: f64,
    tag: SplitTag,
) -> Result<DomainDataset> {
    let mut rng = domain_rng(spec.seed, stream);
    generate_domain_with_rng(spec, domain_id, group, &mut rng, extra_phase, tag)
}

fn generate_domain_with_rng(
    spec: &SyntheticSpec,
    domain_id: String,
    group: usize,
    rng: &mut ChaCha8Rng,
    extra_phase: f64,
    tag: SplitTag,
) -> Result<DomainDataset> {
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let phase = spec.group_phases[group] + extra_phase;
    let gains = &spec.group_gains[group];
    let (n, l) = (spec.channels, spec.length);
    let mut instances = Vec::with_capacity(spec.instances_per_domain);
    for j in 0..spec.instances_per_domain {
        let label = j % spec.classes;
        let freq = spec.class_frequencies[label];
        let mut values = Vec::with_capacity(n * l);
        for ch in 0..n {
            for t in 0..l {
                let angle = 2.0 * std::f64::consts::PI * freq * t as f64 / l as f64 + phase;
                let mut v = gains[ch] * angle.sin();
                if let Some(dist) = &noise {
                    v += dist.sample(rng);
                }
                values.push(v);
            }
        }
        instances.push(LabeledInstance {
            series: SeriesTensor::new(n, l, values)?,
            label,
        });
    }
    let tags = vec![tag; instances.len()];
    DomainDataset::new(domain_id, spec.classes, n, l, instances, tags)
}

/// Fractions of each class reserved for the three training-side splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub pretrain: f64,
    pub tune: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            pretrain: 0.6,
            tune: 0.2,
            validation: 0.2,
        }
    }
}

/// Largest-remainder allocation of `total` items to the three ratios.
/// Remainder ties go to the earlier split (pretrain, then tune).
fn allocate(total: usize, ratios: &SplitRatios) -> [usize; 3] {
    let parts = [ratios.pretrain, ratios.tune, ratios.validation];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        let exact = parts[i] * total as f64;
        counts[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    // Stable descending sort on remainder keeps ties in split order.
    order.sort_by(|a, b| remainders[*b].partial_cmp(&remainders[*a]).unwrap());
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % 3]] += 1;
    }
    counts
}

/// Re-tag a dataset into pretrain / tune / validation splits, stratified by
/// class with largest-remainder rounding.
///
/// Instance order is untouched; only the tags change. Which instances land
/// in which split is decided by a seeded shuffle within each class.
pub fn split(dataset: &DomainDataset, ratios: &SplitRatios, seed: u64) -> Result<DomainDataset> {
    let sum = ratios.pretrain + ratios.tune + ratios.validation;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(PondError::config(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    if ratios.pretrain < 0.0 || ratios.tune < 0.0 || ratios.validation < 0.0 {
        return Err(PondError::config("split ratios must be non-negative"));
    }
    let counts = dataset.class_counts();
    for (c, cnt) in counts.iter().enumerate() {
        if *cnt < 5 {
            return Err(PondError::config(format!(
                "class {c} has {cnt} instances in '{}'; splitting needs at least 5 per class",
                dataset.domain_id()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![SplitTag::Pretrain; dataset.len()];
    for c in 0..dataset.classes() {
        let mut members: Vec<usize> = dataset
            .instances()
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label == c)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let [n_pre, n_tune, _] = allocate(members.len(), ratios);
        for (rank, idx) in members.into_iter().enumerate() {
            tags[idx] = if rank < n_pre {
                SplitTag::Pretrain
            } else if rank < n_pre + n_tune {
                SplitTag::Tune
            } else {
                SplitTag::Validation
            };
        }
    }
    DomainDataset::new(
        dataset.domain_id().to_string(),
        dataset.classes(),
        dataset.channels(),
        dataset.series_len(),
        dataset.instances().to_vec(),
        tags,
    )
}

/// Indices of the labeled shots drawn from the target domain.
///
/// Selection is class-stratified: each class's members are shuffled with the
/// seed, then classes are drained round-robin in label order until `count`
/// shots are collected. Classes that run dry (or are absent) drop out of the
/// rotation and the remaining classes absorb the deficit.
pub fn take_target_shot_indices(
    target: &DomainDataset,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if count > target.len() {
        return Err(PondError::config(format!(
            "requested {count} shots but target '{}' has only {} instances",
            target.domain_id(),
            target.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); target.classes()];
    for (i, inst) in target.instances().iter().enumerate() {
        per_class[inst.label].push(i);
    }
    for members in &mut per_class {
        members.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; target.classes()];
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let mut advanced = false;
        for c in 0..target.classes() {
            if picked.len() == count {
                break;
            }
            if cursors[c] < per_class[c].len() {
                picked.push(per_class[c][cursors[c]]);
                cursors[c] += 1;
                advanced = true;
            }
        }
        debug_assert!(advanced, "count ≤ len guarantees progress");
        if !advanced {
            break;
        }
    }
    Ok(picked)
}

/// The labeled shots themselves; see [`take_target_shot_indices`].
pub fn take_target_shots(
    target: &DomainDataset,
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledInstance>> {
    Ok(take_target_shot_indices(target, count, seed)?
        .into_iter()
        .map(|i| target.instance(i).clone())
        .collect())
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    domain_id: String,
    n: usize,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "K")]
    k: usize,
    count: usize,
    split: Vec<SplitTag>,
    labels: Vec<usize>,
}

/// Write a dataset to its binary container.
pub fn save_dataset(dataset: &DomainDataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        domain_id: dataset.domain_id().to_string(),
        n: dataset.channels(),
        l: dataset.series_len(),
        k: dataset.classes(),
        count: dataset.len(),
        split: dataset.split_tags().to_vec(),
        labels: dataset.instances().iter().map(|i| i.label).collect(),
    };
    let mut payload = Vec::with_capacity(dataset.len() * dataset.channels() * dataset.series_len());
    for inst in dataset.instances() {
        payload.extend_from_slice(inst.series.values());
    }
    container::write(path, container::DATASET_MAGIC, &header, &payload)
}

/// Read a dataset back from its binary container.
pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let raw = container::read_raw(path, container::DATASET_MAGIC)?;
    let header: DatasetHeader = container::parse_header(path, &raw.header)?;
    if header.split.len() != header.count || header.labels.len() != header.count {
        return Err(PondError::Header {
            path: path.to_path_buf(),
            detail: format!(
                "header declares {} instances but carries {} split tags and {} labels",
                header.count,
                header.split.len(),
                header.labels.len()
            ),
        });
    }
    let per_instance = header.n * header.l;
    let values = container::decode_payload(path, &raw, header.count * per_instance)?;
    let mut instances = Vec::with_capacity(header.count);
    for (i, chunk) in values.chunks_exact(per_instance).enumerate() {
        let series =
            SeriesTensor::new(header.n, header.l, chunk.to_vec()).map_err(|e| PondError::Header {
                path: path.to_path_buf(),
                detail: format!("instance {i} rejected: {e}"),
            })?;
        instances.push(LabeledInstance {
            series,
            label: header.labels[i],
        });
    }
    DomainDataset::new(
        header.domain_id,
        header.k,
        header.n,
        header.l,
        instances,
        header.split,
    )
    .map_err(|e| PondError::Header {
        path: path.to_path_buf(),
        detail: format!("dataset invariants violated: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            domains: 4,
            groups: 2,
            classes: 3,
            channels: 2,
            length: 32,
            instances_per_domain: 12,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_same_group_instances_are_bit_identical() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            target_phase_jitter: 0.0,
            ..small_spec()
        };
        let (sources, target) = generate_synthetic(&spec).unwrap();
        // Domains 0 and 2 share group 0; instances 0 and 3 share class 0.
        let a = &sources[0].instance(0).series;
        let b = &sources[2].instance(3).series;
        assert_eq!(a.values(), b.values());
        // The zero-jitter target in group 0 matches too.
        let t = &target.instance(0).series;
        assert_eq!(a.values(), t.values());
        // Different classes within a domain differ.
        assert_ne!(
            sources[0].instance(0).series.values(),
            sources[0].instance(1).series.values()
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (s1, t1) = generate_synthetic(&spec).unwrap();
        let (s2, t2) = generate_synthetic(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = small_spec();
        let other = SyntheticSpec {
            seed: spec.seed + 1,
            ..spec.clone()
        };
        let (s1, _) = generate_synthetic(&spec).unwrap();
        let (s2, _) = generate_synthetic(&other).unwrap();
        assert_ne!(s1[0].instance(0).series.values(), s2[0].instance(0).series.values());
    }

    #[test]
    fn nearest_centroid_oracle_scores_high() {
        // With well-separated frequencies and light noise, matching against
        // per-domain class templates should be nearly perfect.
        let spec = SyntheticSpec {
            classes: 3,
            class_frequencies: vec![2.0, 5.0, 9.0],
            noise_sigma: 0.05,
            instances_per_domain: 30,
            ..SyntheticSpec::default()
        };
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for ds in &sources {
            let dim = ds.channels() * ds.series_len();
            let mut centroids = vec![vec![0.0f64; dim]; ds.classes()];
            let counts = ds.class_counts();
            for inst in ds.instances() {
                for (acc, v) in centroids[inst.label].iter_mut().zip(inst.series.values()) {
                    *acc += v;
                }
            }
            for (c, centroid) in centroids.iter_mut().enumerate() {
                for v in centroid.iter_mut() {
                    *v /= counts[c] as f64;
                }
            }
            for inst in ds.instances() {
                let best = (0..ds.classes())
                    .min_by(|a, b| {
                        let da: f64 = centroids[*a]
                            .iter()
                            .zip(inst.series.values())
                            .map(|(c, v)| (c - v) * (c - v))
                            .sum();
                        let db: f64 = centroids[*b]
                            .iter()
                            .zip(inst.series.values())
                            .map(|(c, v)| (c - v) * (c - v))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if best == inst.label {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn within_group_distance_is_smaller_than_between() {
        for seed in 0..10 {
            let spec = SyntheticSpec {
                seed,
                noise_sigma: 0.3,
                ..SyntheticSpec::default()
            };
            let (sources, _) = generate_synthetic(&spec).unwrap();
            let mut within = (0.0f64, 0usize);
            let mut between = (0.0f64, 0usize);
            for a in 0..sources.len() {
                for b in (a + 1)..sources.len() {
                    let same_group = spec.group_of(a) == spec.group_of(b);
                    for ia in sources[a].instances() {
                        for ib in sources[b].instances() {
                            let d = ia.series.distance(&ib.series);
                            if same_group {
                                within.0 += d;
                                within.1 += 1;
                            } else {
                                between.0 += d;
                                between.1 += 1;
                            }
                        }
                    }
                }
            }
            let w = within.0 / within.1 as f64;
            let b = between.0 / between.1 as f64;
            assert!(w < b, "seed {seed}: within {w} ≥ between {b}");
        }
    }

    #[test]
    fn allocate_matches_largest_remainder_examples() {
        let r = SplitRatios::default();
        assert_eq!(allocate(100, &r), [60, 20, 20]);
        assert_eq!(allocate(10, &r), [6, 2, 2]);
        assert_eq!(allocate(11, &r), [7, 2, 2]);
    }

    #[test]
    fn split_is_stratified_and_partitions() {
        let spec = SyntheticSpec {
            instances_per_domain: 30, // 10 per class
            ..small_spec()
        };
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let ds = split(&sources[0], &SplitRatios::default(), 11).unwrap();
        assert_eq!(ds.len(), sources[0].len());
        assert_eq!(ds.instances(), sources[0].instances());
        // Per class: 10 → 6/2/2.
        for c in 0..ds.classes() {
            let mut counts = [0usize; 3];
            for (inst, tag) in ds.instances().iter().zip(ds.split_tags()) {
                if inst.label == c {
                    match tag {
                        SplitTag::Pretrain => counts[0] += 1,
                        SplitTag::Tune => counts[1] += 1,
                        SplitTag::Validation => counts[2] += 1,
                        SplitTag::Test => panic!("split never assigns test"),
                    }
                }
            }
            assert_eq!(counts, [6, 2, 2], "class {c}");
        }
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let spec = SyntheticSpec {
            instances_per_domain: 30,
            ..small_spec()
        };
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let a = split(&sources[0], &SplitRatios::default(), 5).unwrap();
        let b = split(&sources[0], &SplitRatios::default(), 5).unwrap();
        assert_eq!(a.split_tags(), b.split_tags());
        let c = split(&sources[0], &SplitRatios::default(), 6).unwrap();
        assert_ne!(a.split_tags(), c.split_tags());
    }

    #[test]
    fn split_rejects_thin_classes() {
        let spec = SyntheticSpec {
            instances_per_domain: 12, // 4 per class with K = 3
            ..small_spec()
        };
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let err = split(&sources[0], &SplitRatios::default(), 0).unwrap_err();
        assert!(matches!(err, PondError::Config { .. }), "{err}");
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let spec = SyntheticSpec {
            instances_per_domain: 30,
            ..small_spec()
        };
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let bad = SplitRatios {
            pretrain: 0.6,
            tune: 0.3,
            validation: 0.2,
        };
        assert!(split(&sources[0], &bad, 0).is_err());
    }

    #[test]
    fn shots_are_class_stratified() {
        let spec = SyntheticSpec {
            classes: 5,
            class_frequencies: vec![2.0, 4.0, 6.0, 8.0, 11.0],
            instances_per_domain: 40,
            ..SyntheticSpec::default()
        };
        let (_, target) = generate_synthetic(&spec).unwrap();
        let shots = take_target_shots(&target, 10, 3).unwrap();
        let mut counts = vec![0usize; 5];
        for s in &shots {
            counts[s.label] += 1;
        }
        assert_eq!(counts, vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn single_shot_is_deterministic() {
        let spec = small_spec();
        let (_, target) = generate_synthetic(&spec).unwrap();
        let a = take_target_shot_indices(&target, 1, 9).unwrap();
        let b = take_target_shot_indices(&target, 1, 9).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn absent_class_deficit_fills_round_robin() {
        // Hand-built target: classes 0 and 1 present, class 2 absent, K = 3.
        let series = |x: f64| SeriesTensor::new(1, 2, vec![x, -x]).unwrap();
        let mut instances = Vec::new();
        for i in 0..8 {
            instances.push(LabeledInstance {
                series: series(i as f64),
                label: i % 2,
            });
        }
        let tags = vec![SplitTag::Test; instances.len()];
        let target = DomainDataset::new("target", 3, 1, 2, instances, tags).unwrap();
        let shots = take_target_shots(&target, 6, 0).unwrap();
        let mut counts = vec![0usize; 3];
        for s in &shots {
            counts[s.label] += 1;
        }
        assert_eq!(counts, vec![3, 3, 0]);
    }

    #[test]
    fn shots_exceeding_size_error() {
        let spec = small_spec();
        let (_, target) = generate_synthetic(&spec).unwrap();
        let err = take_target_shots(&target, target.len() + 1, 0).unwrap_err();
        assert!(matches!(err, PondError::Config { .. }));
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let path = dir.path().join("d0.pond");
        save_dataset(&sources[0], &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, sources[0]);
        // Re-saving yields byte-identical files.
        let path2 = dir.path().join("d0-again.pond");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let empty = DomainDataset::new("empty", 3, 2, 16, Vec::new(), Vec::new()).unwrap();
        let path = dir.path().join("empty.pond");
        save_dataset(&empty, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, empty);
        assert!(loaded.is_empty());
        assert_eq!(loaded.channels(), 2);
        assert_eq!(loaded.series_len(), 16);
    }

    #[test]
    fn corrupted_files_raise_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let (sources, _) = generate_synthetic(&spec).unwrap();
        let path = dir.path().join("d0.pond");
        save_dataset(&sources[0], &path).unwrap();
        let pristine = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bytes = pristine.clone();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            PondError::BadMagic { .. }
        ));

        // Truncated payload.
        std::fs::write(&path, &pristine[..pristine.len() - 16]).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            PondError::Truncated { .. }
        ));

        // Flipped payload byte.
        let mut bytes = pristine.clone();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            PondError::Checksum { .. }
        ));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let series = SeriesTensor::new(1, 2, vec![0.0, 1.0]).unwrap();
        let err = DomainDataset::new(
            "bad",
            2,
            1,
            2,
            vec![LabeledInstance { series, label: 2 }],
            vec![SplitTag::Test],
        )
        .unwrap_err();
        assert!(matches!(err, PondError::Config { .. }));
    }

    #[test]
    fn series_rejects_non_finite_and_bad_geometry() {
        assert!(SeriesTensor::new(1, 2, vec![f64::NAN, 0.0]).is_err());
        assert!(SeriesTensor::new(0, 2, vec![]).is_err());
        assert!(SeriesTensor::new(1, 1, vec![0.0]).is_err());
        assert!(SeriesTensor::new(1, 2, vec![0.0]).is_err());
    }
}
