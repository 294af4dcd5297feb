//! Open-world split construction, synthetic Gaussian benchmarks, CIFAR-10
//! binary ingestion, weak/strong augmentation and batch sampling.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

/// A dataset with ground-truth labels. Labels are only readable through the
/// split's sealed evaluation view once an open-world split is built.
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub input: InputShape,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        input: InputShape,
    ) -> Self {
        assert_eq!(features.len(), labels.len());
        assert!(labels.iter().all(|&l| l < num_classes));
        Dataset { features, labels, num_classes, input }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub(crate) fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Dense feature matrix for a list of sample indices (no augmentation).
    pub fn features_matrix(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.input.dim();
        let mut m = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            for (c, &v) in self.features[i].iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// One row per sample: class id followed by the coordinates.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (f, &l) in self.features.iter().zip(&self.labels) {
            out.push_str(&l.to_string());
            for v in f {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Open-world split

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub total_classes: usize,
    pub known_classes: usize,
    pub novel_classes: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn classes_in_play(&self) -> usize {
        self.known_classes + self.novel_classes
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.known_classes < 1 {
            return Err(DataError::Config("need at least one known class".into()));
        }
        if self.classes_in_play() > self.total_classes {
            return Err(DataError::Config(format!(
                "known + novel = {} exceeds total classes {}",
                self.classes_in_play(),
                self.total_classes
            )));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(DataError::Config(format!(
                "labeled_fraction {} not in (0, 1]",
                self.labeled_fraction
            )));
        }
        Ok(())
    }
}

/// Ground-truth labels locked away from the training path. Only the
/// evaluation protocol reads them.
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    pub fn hidden_label(&self, dataset_index: usize) -> usize {
        self.0[dataset_index]
    }
}

pub struct OpenWorldSplit {
    pub labeled: Vec<(usize, usize)>, // (dataset index, label < c_l)
    pub unlabeled: Vec<usize>,
    pub spec: SplitSpec,
    sealed: SealedLabels,
}

impl OpenWorldSplit {
    pub fn sealed(&self) -> &SealedLabels {
        &self.sealed
    }
}

/// Splits a dataset into labeled/unlabeled sets. The first `known_classes`
/// class ids are known; a seeded per-class fraction of their samples is
/// labeled, everything else (plus all novel-class samples) is unlabeled.
pub fn make_split(dataset: &Dataset, spec: &SplitSpec) -> Result<OpenWorldSplit, DataError> {
    spec.validate()?;
    if dataset.num_classes != spec.total_classes {
        return Err(DataError::Config(format!(
            "dataset has {} classes but spec declares {}",
            dataset.num_classes, spec.total_classes
        )));
    }
    let c_l = spec.known_classes;
    let c_u = spec.classes_in_play();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for class in 0..c_l {
        let mut idxs: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        idxs.shuffle(&mut rng);
        let n_lab = (spec.labeled_fraction * idxs.len() as f64).round() as usize;
        for (k, &i) in idxs.iter().enumerate() {
            if k < n_lab {
                labeled.push((i, class));
            } else {
                unlabeled.push(i);
            }
        }
    }
    for i in 0..dataset.len() {
        let l = dataset.label(i);
        if l >= c_l && l < c_u {
            unlabeled.push(i);
        }
    }
    labeled.sort_by_key(|&(i, _)| i);
    unlabeled.sort_unstable();

    Ok(OpenWorldSplit {
        labeled,
        unlabeled,
        spec: *spec,
        sealed: SealedLabels(dataset.labels.clone()),
    })
}

/// Serializable split manifest (index lists + spec + seed).
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
}

impl SplitManifest {
    pub fn from_split(split: &OpenWorldSplit) -> Self {
        SplitManifest {
            spec: split.spec,
            labeled: split.labeled.clone(),
            unlabeled: split.unlabeled.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian benchmark

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
    pub seed: u64,
}

/// Shared cluster centers so train and eval sets come from one mixture.
pub struct GaussianMixture {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    pub dim: usize,
}

impl GaussianMixture {
    pub fn sample(&self, samples_per_class: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.spread.max(f64::MIN_POSITIVE)).unwrap();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (class, center) in self.centers.iter().enumerate() {
            for _ in 0..samples_per_class {
                let x: Vec<f64> = center
                    .iter()
                    .map(|&c| {
                        if self.spread == 0.0 {
                            c
                        } else {
                            c + noise.sample(&mut rng)
                        }
                    })
                    .collect();
                features.push(x);
                labels.push(class);
            }
        }
        Dataset::new(
            features,
            labels,
            self.centers.len(),
            InputShape::Vector { dim: self.dim },
        )
    }
}

/// Isotropic Gaussian clusters at seeded random centers with pairwise
/// center distance at least `cluster_separation`.
pub fn synth_gaussians(spec: &SynthSpec) -> Result<(Dataset, GaussianMixture), DataError> {
    if spec.cluster_separation <= 0.0 || spec.cluster_spread < 0.0 {
        return Err(DataError::Config(
            "cluster separation must be > 0 and spread >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half_width = 2.0 * spec.cluster_separation * (spec.classes as f64).powf(1.0 / spec.dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let mut placed = false;
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..spec.dim)
                .map(|_| rng.gen_range(-half_width..half_width))
                .collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= spec.cluster_separation
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::Generation(format!(
                "could not place center for class {class} after 1000 attempts"
            )));
        }
    }
    let mixture = GaussianMixture {
        centers,
        spread: spec.cluster_spread,
        dim: spec.dim,
    };
    let dataset = mixture.sample(spec.samples_per_class, spec.seed.wrapping_add(1));
    Ok((dataset, mixture))
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixel bytes

/// Reads one or more CIFAR-10 binary shards (3073-byte records, label byte
/// followed by channel-major pixels) and scales pixels to [0, 1].
pub fn load_cifar10_binary(paths: &[std::path::PathBuf]) -> Result<Dataset, DataError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            return Err(DataError::Format {
                offset: 0,
                message: format!("{}: empty file", path.display()),
            });
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Format {
                offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                message: format!(
                    "{}: truncated record ({} bytes is not a multiple of {})",
                    path.display(),
                    bytes.len(),
                    CIFAR_RECORD
                ),
            });
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0];
            if label > 9 {
                return Err(DataError::Format {
                    offset: (rec * CIFAR_RECORD) as u64,
                    message: format!("{}: label byte {} > 9", path.display(), label),
                });
            }
            labels.push(label as usize);
            features.push(chunk[1..].iter().map(|&b| b as f64 / 255.0).collect());
        }
    }
    Ok(Dataset::new(
        features,
        labels,
        10,
        InputShape::Image { channels: 3, height: 32, width: 32 },
    ))
}

/// The five standard training shards under a CIFAR-10 binary directory.
pub fn cifar10_train_paths(dir: &Path) -> Vec<std::path::PathBuf> {
    (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
}

pub fn cifar10_test_paths(dir: &Path) -> Vec<std::path::PathBuf> {
    vec![dir.join("test_batch.bin")]
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_jitter: f64,
    pub strong_jitter: f64,
    /// Fraction of coordinates zeroed in the strong view of vector data.
    pub strong_mask_fraction: f64,
    pub crop_padding: usize,
    pub horizontal_flip: bool,
    pub cutout_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_jitter: 0.05,
            strong_jitter: 0.2,
            strong_mask_fraction: 0.25,
            crop_padding: 4,
            horizontal_flip: true,
            cutout_size: 8,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.strong_jitter < self.weak_jitter {
            return Err(DataError::Config(
                "strong_jitter must be >= weak_jitter".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.strong_mask_fraction) {
            return Err(DataError::Config(
                "strong_mask_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Produces a weak or strong view. Vectors get additive Gaussian jitter,
/// with coordinate masking on the strong side. Images get crop-with-padding
/// and optional flip, with cutout and heavier jitter on the strong side.
pub fn augment<R: Rng>(
    x: &[f64],
    input: &InputShape,
    mode: AugmentMode,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<f64> {
    match *input {
        InputShape::Vector { dim } => {
            let jitter = match mode {
                AugmentMode::Weak => cfg.weak_jitter,
                AugmentMode::Strong => cfg.strong_jitter,
            };
            let mut out: Vec<f64> = if jitter == 0.0 {
                x.to_vec()
            } else {
                let noise = Normal::new(0.0, jitter).unwrap();
                x.iter().map(|&v| v + noise.sample(rng)).collect()
            };
            if mode == AugmentMode::Strong && cfg.strong_mask_fraction > 0.0 {
                let n_mask = (cfg.strong_mask_fraction * dim as f64).round() as usize;
                let mut coords: Vec<usize> = (0..dim).collect();
                coords.shuffle(rng);
                for &c in coords.iter().take(n_mask) {
                    out[c] = 0.0;
                }
            }
            out
        }
        InputShape::Image { channels, height, width } => {
            let mut out = x.to_vec();
            // crop with zero padding
            let p = cfg.crop_padding as i64;
            if p > 0 {
                let dy = rng.gen_range(-p..=p);
                let dx = rng.gen_range(-p..=p);
                out = shift_image(&out, channels, height, width, dy, dx);
            }
            if cfg.horizontal_flip && rng.gen_bool(0.5) {
                out = flip_image(&out, channels, height, width);
            }
            if mode == AugmentMode::Strong {
                if cfg.cutout_size > 0 {
                    let cy = rng.gen_range(0..height);
                    let cx = rng.gen_range(0..width);
                    cutout(&mut out, channels, height, width, cy, cx, cfg.cutout_size);
                }
                if cfg.strong_jitter > 0.0 {
                    let noise = Normal::new(0.0, cfg.strong_jitter).unwrap();
                    for v in out.iter_mut() {
                        *v += noise.sample(rng);
                    }
                }
            } else if cfg.weak_jitter > 0.0 {
                let noise = Normal::new(0.0, cfg.weak_jitter).unwrap();
                for v in out.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
            out
        }
    }
}

fn shift_image(x: &[f64], c: usize, h: usize, w: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let sy = y as i64 + dy;
                let sx = xx as i64 + dx;
                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    out[ch * h * w + y * w + xx] = x[ch * h * w + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

fn flip_image(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[ch * h * w + y * w + xx] = x[ch * h * w + y * w + (w - 1 - xx)];
            }
        }
    }
    out
}

fn cutout(x: &mut [f64], c: usize, h: usize, w: usize, cy: usize, cx: usize, size: usize) {
    let half = size / 2;
    for ch in 0..c {
        for y in cy.saturating_sub(half)..(cy + half).min(h) {
            for xx in cx.saturating_sub(half)..(cx + half).min(w) {
                x[ch * h * w + y * w + xx] = 0.0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch sampling

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub labeled: usize,
    pub unlabeled: usize,
}

/// One training batch: weak views of labeled samples with their labels,
/// plus weak and strong views of unlabeled samples.
pub struct TrainingBatch {
    pub labeled_weak: Array2<f64>,
    pub labels: Vec<usize>,
    pub unlabeled_weak: Array2<f64>,
    pub unlabeled_strong: Array2<f64>,
    pub unlabeled_ids: Vec<usize>,
    pub unlabeled_empty: bool,
}

/// Cycling, reshuffling batch source. Each side covers its index set
/// exactly once per epoch (short final batch at the boundary).
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    labeled: Vec<(usize, usize)>,
    unlabeled: Vec<usize>,
    spec: BatchSpec,
    aug: AugmentConfig,
    rng: ChaCha8Rng,
    labeled_order: Vec<usize>,
    labeled_pos: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_pos: usize,
    pub unlabeled_epoch: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        dataset: &'a Dataset,
        labeled: Vec<(usize, usize)>,
        unlabeled: Vec<usize>,
        spec: BatchSpec,
        aug: AugmentConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labeled_order: Vec<usize> = (0..labeled.len()).collect();
        labeled_order.shuffle(&mut rng);
        let mut unlabeled_order: Vec<usize> = (0..unlabeled.len()).collect();
        unlabeled_order.shuffle(&mut rng);
        BatchSampler {
            dataset,
            labeled,
            unlabeled,
            spec,
            aug,
            rng,
            labeled_order,
            labeled_pos: 0,
            unlabeled_order,
            unlabeled_pos: 0,
            unlabeled_epoch: 0,
        }
    }

    pub fn from_split(
        dataset: &'a Dataset,
        split: &OpenWorldSplit,
        spec: BatchSpec,
        aug: AugmentConfig,
        seed: u64,
    ) -> Self {
        Self::new(
            dataset,
            split.labeled.clone(),
            split.unlabeled.clone(),
            spec,
            aug,
            seed,
        )
    }

    /// Number of batches that make up one pass over the unlabeled side
    /// (or the labeled side when the unlabeled set is empty).
    pub fn batches_per_epoch(&self) -> usize {
        let (n, b) = if self.unlabeled.is_empty() {
            (self.labeled.len(), self.spec.labeled)
        } else {
            (self.unlabeled.len(), self.spec.unlabeled)
        };
        if b == 0 {
            1
        } else {
            (n + b - 1) / b
        }
    }

    fn draw_side(order: &mut Vec<usize>, pos: &mut usize, want: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        if order.is_empty() {
            return (vec![], false);
        }
        let take = want.min(order.len() - *pos);
        let out = order[*pos..*pos + take].to_vec();
        *pos += take;
        let mut wrapped = false;
        if *pos == order.len() {
            order.shuffle(rng);
            *pos = 0;
            wrapped = true;
        }
        (out, wrapped)
    }

    pub fn next_batch(&mut self) -> TrainingBatch {
        let (lab_slots, _) = Self::draw_side(
            &mut self.labeled_order,
            &mut self.labeled_pos,
            self.spec.labeled,
            &mut self.rng,
        );
        let (unlab_slots, wrapped) = Self::draw_side(
            &mut self.unlabeled_order,
            &mut self.unlabeled_pos,
            self.spec.unlabeled,
            &mut self.rng,
        );
        if wrapped {
            self.unlabeled_epoch += 1;
        }

        let d = self.dataset.input.dim();
        let mut labeled_weak = Array2::zeros((lab_slots.len(), d));
        let mut labels = Vec::with_capacity(lab_slots.len());
        for (r, &slot) in lab_slots.iter().enumerate() {
            let (idx, label) = self.labeled[slot];
            let view = augment(
                self.dataset.feature(idx),
                &self.dataset.input,
                AugmentMode::Weak,
                &self.aug,
                &mut self.rng,
            );
            for (c, v) in view.into_iter().enumerate() {
                labeled_weak[(r, c)] = v;
            }
            labels.push(label);
        }

        let mut unlabeled_weak = Array2::zeros((unlab_slots.len(), d));
        let mut unlabeled_strong = Array2::zeros((unlab_slots.len(), d));
        let mut unlabeled_ids = Vec::with_capacity(unlab_slots.len());
        for (r, &slot) in unlab_slots.iter().enumerate() {
            let idx = self.unlabeled[slot];
            let weak = augment(
                self.dataset.feature(idx),
                &self.dataset.input,
                AugmentMode::Weak,
                &self.aug,
                &mut self.rng,
            );
            let strong = augment(
                self.dataset.feature(idx),
                &self.dataset.input,
                AugmentMode::Strong,
                &self.aug,
                &mut self.rng,
            );
            for (c, v) in weak.into_iter().enumerate() {
                unlabeled_weak[(r, c)] = v;
            }
            for (c, v) in strong.into_iter().enumerate() {
                unlabeled_strong[(r, c)] = v;
            }
            unlabeled_ids.push(idx);
        }

        TrainingBatch {
            labeled_weak,
            labels,
            unlabeled_empty: unlabeled_ids.is_empty(),
            unlabeled_weak,
            unlabeled_strong,
            unlabeled_ids,
        }
    }
}
