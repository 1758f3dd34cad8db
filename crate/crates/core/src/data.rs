//! Synthetic datasets with controllable attribute structure, train/test
//! splitting, and the on-disk dataset format.
//!
//! On disk a dataset is three files:
//!
//! * `schema.json` — the attribute schema;
//! * `samples.jsonl` — one `{"id", "attributes": {group: attribute}, "features": [..]}`
//!   record per line;
//! * `splits.json` — `{sample_id: "train" | "test_seen" | "test_unseen"}`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeSchema, Attributes, PersonCategory};

pub const SCHEMA_FILE: &str = "schema.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImagesPerCategory {
    Fixed(usize),
    /// Inclusive `[min, max]`, drawn uniformly per category.
    Range([usize; 2]),
}

/// Column scale of the mixing matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Saliency {
    Uniform(f64),
    /// One value per attribute bit, or one per group.
    PerAttribute(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub group_sizes: Vec<usize>,
    pub n_categories: usize,
    pub images_per_category: ImagesPerCategory,
    pub feature_dim: usize,
    pub saliency: Saliency,
    pub noise_std: f64,
    pub label_flip_rate: f64,
    /// Fraction of categories held out of training entirely.
    pub unseen_fraction: f64,
    /// Per-sample test share of the categories that stay in training.
    pub seen_test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::standard(1)
    }
}

impl SynthConfig {
    /// The reference benchmark: 3 groups, 60 categories, 30 images each,
    /// 64-dimensional features, 30% of categories unseen.
    pub fn standard(seed: u64) -> Self {
        Self {
            group_sizes: vec![3, 5, 4],
            n_categories: 60,
            images_per_category: ImagesPerCategory::Fixed(30),
            feature_dim: 64,
            saliency: Saliency::Uniform(1.0),
            noise_std: 0.5,
            label_flip_rate: 0.0,
            unseen_fraction: 0.3,
            seen_test_fraction: 0.2,
            seed,
        }
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::from_group_sizes(&self.group_sizes)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.schema().map_err(|e| Error::Config(e.to_string()))?;
        if self.n_categories == 0 {
            return Err(Error::Config("n_categories must be positive".into()));
        }
        if self.n_categories as u128 > schema.n_combinations() {
            return Err(Error::Config(format!(
                "{} categories requested but the schema admits only {}",
                self.n_categories,
                schema.n_combinations()
            )));
        }
        match self.images_per_category {
            ImagesPerCategory::Fixed(n) if n < 2 => {
                return Err(Error::Config("images_per_category must be >= 2".into()))
            }
            ImagesPerCategory::Range([lo, hi]) if lo < 2 || hi < lo => {
                return Err(Error::Config(format!(
                    "images_per_category range [{lo}, {hi}] invalid (need 2 <= min <= max)"
                )))
            }
            _ => {}
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return Err(Error::Config("label_flip_rate must lie in [0, 1)".into()));
        }
        check_fractions(self.unseen_fraction, self.seen_test_fraction)?;
        self.column_scales(&schema)?;
        Ok(())
    }

    fn column_scales(&self, schema: &AttributeSchema) -> Result<Vec<f64>> {
        let scales = match &self.saliency {
            Saliency::Uniform(s) => vec![*s; schema.dim()],
            Saliency::PerAttribute(v) if v.len() == schema.dim() => v.clone(),
            Saliency::PerAttribute(v) if v.len() == schema.n_groups() => schema
                .group_sizes()
                .iter()
                .zip(v)
                .flat_map(|(&n, &s)| std::iter::repeat_n(s, n))
                .collect(),
            Saliency::PerAttribute(v) => {
                return Err(Error::Config(format!(
                    "saliency has {} entries; expected {} (per bit) or {} (per group)",
                    v.len(),
                    schema.dim(),
                    schema.n_groups()
                )))
            }
        };
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("saliency must be finite".into()));
        }
        Ok(scales)
    }
}

fn check_fractions(unseen: f64, seen_test: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&unseen) {
        return Err(Error::Config(format!("unseen_fraction {unseen} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&seen_test) {
        return Err(Error::Config(format!(
            "seen_test_fraction {seen_test} outside [0, 1)"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub category: PersonCategory,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub samples: Vec<Sample>,
}

/// Counts in the layout of a benchmark statistics table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub train_categories: usize,
    pub train_images: usize,
    pub test_categories: usize,
    pub seen_test_categories: usize,
    pub unseen_test_categories: usize,
    pub test_images: usize,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Sorted unique categories of the samples in `splits`.
    pub fn categories_in(&self, splits: &[Split]) -> Vec<PersonCategory> {
        self.samples
            .iter()
            .filter(|s| splits.contains(&s.split))
            .map(|s| s.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn all_categories(&self) -> Vec<PersonCategory> {
        self.categories_in(&[Split::Train, Split::TestSeen, Split::TestUnseen])
    }

    /// Feature matrix of the given samples, one row each.
    pub fn feature_matrix<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Array2<f64> {
        let rows: Vec<&Sample> = samples.into_iter().collect();
        let dim = self.feature_dim();
        let mut out = Array2::zeros((rows.len(), dim));
        for (mut row, s) in out.rows_mut().into_iter().zip(rows) {
            row.assign(&ndarray::ArrayView1::from(&s.features));
        }
        out
    }

    /// Verifies that no test-unseen category occurs in training.
    pub fn check_no_leakage(&self) -> Result<()> {
        let train: BTreeSet<_> = self.samples_in(Split::Train).map(|s| &s.category).collect();
        if let Some(s) = self
            .samples_in(Split::TestUnseen)
            .find(|s| train.contains(&s.category))
        {
            return Err(Error::Data(format!(
                "sample '{}' is tagged unseen but its category occurs in training",
                s.id
            )));
        }
        Ok(())
    }

    pub fn stats(&self) -> DatasetStats {
        let count = |split| self.samples_in(split).count();
        let seen = self.categories_in(&[Split::TestSeen]).len();
        let unseen = self.categories_in(&[Split::TestUnseen]).len();
        DatasetStats {
            train_categories: self.categories_in(&[Split::Train]).len(),
            train_images: count(Split::Train),
            test_categories: seen + unseen,
            seen_test_categories: seen,
            unseen_test_categories: unseen,
            test_images: count(Split::TestSeen) + count(Split::TestUnseen),
        }
    }

    /// Categories with exactly one sample.
    pub fn singleton_categories(&self) -> Vec<PersonCategory> {
        let mut counts: BTreeMap<&PersonCategory, usize> = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(&s.category).or_default() += 1;
        }
        counts
            .into_iter()
            .filter(|(_, n)| *n == 1)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn drop_singletons(&mut self) -> usize {
        let singles: BTreeSet<_> = self.singleton_categories().into_iter().collect();
        let before = self.samples.len();
        self.samples.retain(|s| !singles.contains(&s.category));
        before - self.samples.len()
    }
}

/// Ground truth a generator knows but a dataset does not record.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// `feature_dim × d_pc`; category `p` has feature centroid `M·p`.
    pub mixing: Array2<f64>,
    /// Generating category of each sample (before label flips).
    pub true_categories: Vec<PersonCategory>,
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(generate_with_truth(cfg)?.0)
}

/// Generates samples `M·p + η` with `η ~ N(0, noise_std²·I)`. Every sample
/// is tagged `Train`; use [`split`] to hold out categories.
pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let sizes = schema.group_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let chosen: Vec<Vec<usize>> = if schema.n_combinations() <= 1_000_000 {
        let mut all = Vec::new();
        let mut idx = vec![0usize; sizes.len()];
        loop {
            all.push(idx.clone());
            let mut g = sizes.len();
            loop {
                if g == 0 {
                    break;
                }
                g -= 1;
                idx[g] += 1;
                if idx[g] < sizes[g] {
                    break;
                }
                idx[g] = 0;
            }
            if idx.iter().all(|&v| v == 0) {
                break;
            }
        }
        all.shuffle(&mut rng);
        all.truncate(cfg.n_categories);
        all
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(cfg.n_categories);
        while out.len() < cfg.n_categories {
            let idx: Vec<usize> = sizes.iter().map(|&n| rng.random_range(0..n)).collect();
            if seen.insert(idx.clone()) {
                out.push(idx);
            }
        }
        out
    };

    rng.set_stream(1);
    rng.set_word_pos(0);
    let scales = cfg.column_scales(&schema)?;
    let mut mixing = Array2::<f64>::zeros((cfg.feature_dim, schema.dim()));
    for r in 0..cfg.feature_dim {
        for (c, &scale) in scales.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            mixing[[r, c]] = z * scale;
        }
    }

    rng.set_stream(2);
    rng.set_word_pos(0);
    let mut samples = Vec::new();
    let mut truths = Vec::new();
    for indices in &chosen {
        let truth = schema.category_from_indices(indices)?;
        let centroid = mixing.dot(&ndarray::Array1::from(truth.to_f64()));
        let count = match cfg.images_per_category {
            ImagesPerCategory::Fixed(n) => n,
            ImagesPerCategory::Range([lo, hi]) => rng.random_range(lo..=hi),
        };
        for _ in 0..count {
            let features: Vec<f64> = centroid
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + cfg.noise_std * z
                })
                .collect();
            let flip: f64 = rng.random();
            let recorded = if flip < cfg.label_flip_rate {
                let g = rng.random_range(0..sizes.len());
                let mut flipped = indices.clone();
                let shift = rng.random_range(1..sizes[g]);
                flipped[g] = (indices[g] + shift) % sizes[g];
                schema.category_from_indices(&flipped)?
            } else {
                truth.clone()
            };
            samples.push(Sample {
                id: format!("s{:06}", samples.len()),
                features,
                category: recorded,
                split: Split::Train,
            });
            truths.push(truth.clone());
        }
    }
    Ok((
        Dataset { schema, samples },
        SynthTruth {
            mixing,
            true_categories: truths,
        },
    ))
}

/// Category-level holdout: `round(unseen_fraction · n_categories)`
/// categories go entirely to `TestUnseen`; every other category keeps at
/// least one training sample and sends `round(seen_test_fraction · count)`
/// samples to `TestSeen`.
pub fn split(dataset: &Dataset, unseen_fraction: f64, seen_test_fraction: f64, seed: u64) -> Result<Dataset> {
    check_fractions(unseen_fraction, seen_test_fraction)?;
    let categories = dataset.all_categories();
    if categories.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut order = categories.clone();
    order.shuffle(&mut rng);
    let n_unseen = (unseen_fraction * categories.len() as f64).round() as usize;
    let unseen: BTreeSet<_> = order[..n_unseen].iter().cloned().collect();

    let mut by_category: BTreeMap<&PersonCategory, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_category.entry(&s.category).or_default().push(i);
    }
    let mut tags = vec![Split::Train; dataset.samples.len()];
    for (category, mut members) in by_category {
        if unseen.contains(category) {
            for i in members {
                tags[i] = Split::TestUnseen;
            }
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = ((seen_test_fraction * n as f64).round() as usize).min(n - 1);
        for &i in &members[..n_test] {
            tags[i] = Split::TestSeen;
        }
    }
    let mut out = dataset.clone();
    for (s, tag) in out.samples.iter_mut().zip(tags) {
        s.split = tag;
    }
    out.check_no_leakage()?;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    attributes: Attributes,
    features: Vec<f64>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `schema.json`, `samples.jsonl` and `splits.json` into `dir`.
pub fn save(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(SCHEMA_FILE), dataset.schema.to_json().as_bytes())?;

    let mut lines = Vec::new();
    for s in &dataset.samples {
        let record = SampleRecord {
            id: s.id.clone(),
            attributes: dataset.schema.decode(s.category.bits())?,
            features: s.features.clone(),
        };
        serde_json::to_writer(&mut lines, &record)?;
        lines.push(b'\n');
    }
    write_file(&dir.join(SAMPLES_FILE), &lines)?;
    write_file(&dir.join(SPLITS_FILE), split_manifest(dataset).as_bytes())
}

pub fn split_manifest(dataset: &Dataset) -> String {
    let manifest: BTreeMap<&str, Split> = dataset
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.split))
        .collect();
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

/// Reads a schema and a samples file; every sample is tagged `Train`.
///
/// All problems in the samples file are collected and reported together.
pub fn load(schema_path: impl AsRef<Path>, samples_path: impl AsRef<Path>) -> Result<Dataset> {
    let schema = AttributeSchema::load(schema_path)?;
    let path = samples_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let where_ = path.display();

    let mut problems = Vec::new();
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    let mut feature_dim = None;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{where_}:{line_no}: {e}"));
                continue;
            }
        };
        if !ids.insert(record.id.clone()) {
            problems.push(format!("{where_}:{line_no}: duplicate sample id '{}'", record.id));
        }
        let dim = *feature_dim.get_or_insert(record.features.len());
        if record.features.len() != dim {
            problems.push(format!(
                "{where_}:{line_no}: sample '{}' has {} features, expected {dim}",
                record.id,
                record.features.len()
            ));
            continue;
        }
        if record.features.iter().any(|v| !v.is_finite()) {
            problems.push(format!(
                "{where_}:{line_no}: sample '{}' has non-finite features",
                record.id
            ));
            continue;
        }
        match schema.encode_map(&record.attributes) {
            Ok(category) => samples.push(Sample {
                id: record.id,
                features: record.features,
                category,
                split: Split::Train,
            }),
            Err(e) => problems.push(format!("{where_}:{line_no}: sample '{}': {e}", record.id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "{} problem(s) in {where_}:\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{where_}: no samples")));
    }
    let dataset = Dataset { schema, samples };
    let singles = dataset.singleton_categories().len();
    if singles > 0 {
        log::warn!("{singles} categor(ies) in {where_} have a single sample");
    }
    Ok(dataset)
}

/// Applies a `splits.json` manifest; every sample must be listed.
pub fn apply_split_manifest(dataset: &mut Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: BTreeMap<String, Split> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut missing = Vec::new();
    for s in &mut dataset.samples {
        match manifest.get(&s.id) {
            Some(&tag) => s.split = tag,
            None => missing.push(s.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} sample(s) missing from manifest, first '{}'",
            path.display(),
            missing.len(),
            missing[0]
        )));
    }
    dataset.check_no_leakage()
}

/// Loads a directory written by [`save`].
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut dataset = load(dir.join(SCHEMA_FILE), dir.join(SAMPLES_FILE))?;
    let manifest = dir.join(SPLITS_FILE);
    if manifest.exists() {
        apply_split_manifest(&mut dataset, manifest)?;
    }
    Ok(dataset)
}

/// Human-readable statistics table.
pub fn write_stats_table(stats: &DatasetStats, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<26}{:>8}", "# Train person category", stats.train_categories)?;
    writeln!(out, "{:<26}{:>8}", "# Train image", stats.train_images)?;
    writeln!(out, "{:<26}{:>8}", "# Test person category", stats.test_categories)?;
    writeln!(out, "{:<26}{:>8}", "# Seen", stats.seen_test_categories)?;
    writeln!(out, "{:<26}{:>8}", "# Unseen", stats.unseen_test_categories)?;
    writeln!(out, "{:<26}{:>8}", "# Test image", stats.test_images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> SynthConfig {
        SynthConfig {
            group_sizes: vec![2, 3, 2],
            n_categories: 12,
            images_per_category: ImagesPerCategory::Fixed(4),
            feature_dim: 8,
            saliency: Saliency::Uniform(1.0),
            noise_std: 0.0,
            label_flip_rate: 0.0,
            unseen_fraction: 0.25,
            seen_test_fraction: 0.25,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_generator_repeats_centroids() {
        let (data, truth) = generate_with_truth(&toy_config()).unwrap();
        assert_eq!(data.samples.len(), 48);
        let mut by_cat: BTreeMap<&PersonCategory, &Vec<f64>> = BTreeMap::new();
        for s in &data.samples {
            let first = by_cat.entry(&s.category).or_insert(&s.features);
            assert_eq!(*first, &s.features);
        }
        assert_eq!(by_cat.len(), 12);
        for (s, t) in data.samples.iter().zip(&truth.true_categories) {
            assert_eq!(&s.category, t);
            let centroid = truth.mixing.dot(&ndarray::Array1::from(t.to_f64()));
            assert_eq!(centroid.to_vec(), s.features);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let mut cfg = toy_config();
        cfg.noise_std = 0.3;
        cfg.label_flip_rate = 0.2;
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        cfg.seed = 4;
        let other = generate(&cfg).unwrap();
        cfg.seed = 3;
        assert_ne!(generate(&cfg).unwrap(), other);
    }

    #[test]
    fn label_flips_change_exactly_one_group() {
        let mut cfg = toy_config();
        cfg.label_flip_rate = 0.5;
        let (data, truth) = generate_with_truth(&cfg).unwrap();
        let mut flipped = 0;
        for (s, t) in data.samples.iter().zip(&truth.true_categories) {
            let profile = crate::schema::hamming_profile(&s.category, t).unwrap();
            let bits: usize = profile.iter().map(|&b| b as usize).sum();
            assert!(bits == 0 || bits == 2);
            if bits == 2 {
                flipped += 1;
                // features still come from the generating category
                let centroid = truth.mixing.dot(&ndarray::Array1::from(t.to_f64()));
                assert_eq!(centroid.to_vec(), s.features);
            }
        }
        assert!(flipped > 5 && flipped < 43, "flipped {flipped}");
    }

    #[test]
    fn infeasible_configs_rejected() {
        let mut cfg = toy_config();
        cfg.n_categories = 13;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = toy_config();
        cfg.feature_dim = 0;
        assert!(generate(&cfg).is_err());
        let mut cfg = toy_config();
        cfg.images_per_category = ImagesPerCategory::Fixed(1);
        assert!(generate(&cfg).is_err());
        let mut cfg = toy_config();
        cfg.saliency = Saliency::PerAttribute(vec![1.0; 5]);
        assert!(generate(&cfg).is_err());
        let mut cfg = toy_config();
        cfg.label_flip_rate = 1.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn per_group_saliency_expands_to_bits() {
        let mut cfg = toy_config();
        cfg.saliency = Saliency::PerAttribute(vec![10.0, 1.0, 1.0]);
        let schema = cfg.schema().unwrap();
        assert_eq!(
            cfg.column_scales(&schema).unwrap(),
            vec![10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn range_counts_stay_in_bounds() {
        let mut cfg = toy_config();
        cfg.images_per_category = ImagesPerCategory::Range([2, 5]);
        let data = generate(&cfg).unwrap();
        let mut counts: BTreeMap<&PersonCategory, usize> = BTreeMap::new();
        for s in &data.samples {
            *counts.entry(&s.category).or_default() += 1;
        }
        assert!(counts.values().all(|&n| (2..=5).contains(&n)));
    }

    #[test]
    fn split_counts() {
        let data = generate(&toy_config()).unwrap();
        let tagged = split(&data, 0.25, 0.25, 9).unwrap();
        let stats = tagged.stats();
        assert_eq!(stats.unseen_test_categories, 3);
        assert_eq!(stats.train_categories, 9);
        assert_eq!(stats.seen_test_categories, 9);
        assert_eq!(stats.train_images, 27);
        tagged.check_no_leakage().unwrap();

        let none = split(&data, 0.0, 0.25, 9).unwrap();
        assert_eq!(none.samples_in(Split::TestUnseen).count(), 0);

        let all = split(&data, 1.0, 0.0, 9).unwrap();
        assert_eq!(all.stats().seen_test_categories, 0);
        assert_eq!(all.stats().unseen_test_categories, 12);

        assert!(split(&data, 1.5, 0.0, 9).is_err());
        assert!(split(&data, 0.5, 1.0, 9).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let data = generate(&toy_config()).unwrap();
        assert_eq!(split(&data, 0.25, 0.25, 1).unwrap(), split(&data, 0.25, 0.25, 1).unwrap());
    }

    #[test]
    fn singletons_can_be_dropped() {
        let mut data = generate(&toy_config()).unwrap();
        let victim = data.samples[0].category.clone();
        data.samples.retain(|s| s.category != victim || s.id == "s000000");
        assert_eq!(data.singleton_categories(), vec![victim]);
        assert_eq!(data.drop_singletons(), 1);
        assert!(data.singleton_categories().is_empty());
    }
}
