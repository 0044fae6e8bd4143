//! Synthetic multi-domain classification data.
//!
//! Every domain shares one task: `C` Gaussian classes whose means sit evenly
//! on a circle in the first two feature dimensions. Domain `d` of `n` rotates
//! those means by `d·π/n`; out-of-domain sets sit halfway between, at
//! `(j + ½)·π/n`, and carry test data only.
//!
//! With `input_dim ≥ 4` and a nonzero `domain_shift`, every mean of a domain
//! rotated by `r` is also displaced by `domain_shift·(cos 2r, sin 2r)` in
//! dimensions 2 and 3, so the domain can be read off the input. Without it the
//! rotated domains label the same region of input space differently and no
//! single model does well on all of them.
//!
//! Example `k` of a domain has label `k mod C`. Train, dev and test take
//! consecutive index ranges of one per-domain stream, so the splits never
//! share an example.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::inference::{Batch, Matrix};
use crate::rng;

/// Stream ids used here: `DATA | domain` for generation and
/// `PARTITION | class` for partition shuffles.
const DATA_STREAM: u64 = 1 << 62;
const PARTITION_STREAM: u64 = (1 << 62) | (1 << 61);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("class {class} needs {needed} examples, only {available} available")]
    InsufficientData {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("dev fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DomainSpec {
    pub classes: usize,
    /// At least 2. Past the first two (and the domain marker) dimensions are
    /// pure noise.
    pub input_dim: usize,
    pub radius: f64,
    /// Radius of the domain marker in dimensions 2 and 3; 0 disables it.
    pub domain_shift: f64,
    /// Per-coordinate standard deviation of the isotropic class covariance.
    pub noise: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            input_dim: 4,
            radius: 2.0,
            domain_shift: 2.0,
            noise: 0.5,
            n_train: 1000,
            n_dev: 50,
            n_test: 500,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.into()));
        if self.classes < 2 {
            return bad("at least two classes");
        }
        if self.input_dim < 2 {
            return bad("input_dim must be at least 2");
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("split sizes must be positive");
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad("noise must be positive and finite");
        }
        if !self.radius.is_finite() {
            return bad("radius must be finite");
        }
        if !self.domain_shift.is_finite() {
            return bad("domain_shift must be finite");
        }
        if self.domain_shift != 0.0 && self.input_dim < 4 {
            return bad("domain_shift needs input_dim of at least 4");
        }
        Ok(())
    }

    /// Class means for a domain rotated by `rotation` radians.
    pub fn class_means(&self, rotation: f64) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / self.classes as f64 + rotation;
                let mut mean = alloc::vec![0.0; self.input_dim];
                mean[0] = self.radius * libm::cos(angle);
                mean[1] = self.radius * libm::sin(angle);
                if self.domain_shift != 0.0 {
                    mean[2] = self.domain_shift * libm::cos(2.0 * rotation);
                    mean[3] = self.domain_shift * libm::sin(2.0 * rotation);
                }
                mean
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub id: usize,
    pub rotation: f64,
    pub train: Batch,
    pub dev: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodDomain {
    pub id: usize,
    pub rotation: f64,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub spec: DomainSpec,
    pub domains: Vec<DomainSplits>,
    pub ood: Vec<OodDomain>,
}

impl SplitSet {
    pub fn pooled_train(&self) -> Batch {
        let parts: Vec<&Batch> = self.domains.iter().map(|d| &d.train).collect();
        Batch::concat(&parts).expect("domains share input width")
    }

    pub fn dev_sets(&self) -> Vec<&Batch> {
        self.domains.iter().map(|d| &d.dev).collect()
    }

    pub fn test_sets(&self) -> Vec<&Batch> {
        self.domains.iter().map(|d| &d.test).collect()
    }
}

fn sample_batch<R: Rng>(
    spec: &DomainSpec,
    means: &[Vec<f64>],
    start: usize,
    n: usize,
    rng: &mut R,
) -> Batch {
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for k in start..start + n {
        let label = k % spec.classes;
        for &m in &means[label] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + spec.noise * z);
        }
        labels.push(label);
    }
    let features = Matrix::new(n, spec.input_dim, data).expect("sized above");
    Batch::new(features, labels).expect("labels in range")
}

/// `n_domains` in-domain datasets plus `n_ood` test-only domains.
pub fn make_domains(
    n_domains: usize,
    spec: &DomainSpec,
    n_ood: usize,
    seed: u64,
) -> Result<SplitSet, DatasetError> {
    spec.validate()?;
    if n_domains == 0 {
        return Err(DatasetError::InvalidSpec(
            "n_domains must be at least 1".into(),
        ));
    }
    let step = PI / n_domains as f64;
    let domains = (0..n_domains)
        .map(|d| {
            let rotation = d as f64 * step;
            let means = spec.class_means(rotation);
            let mut rng = rng::stream(seed, DATA_STREAM | d as u64);
            let train = sample_batch(spec, &means, 0, spec.n_train, &mut rng);
            let dev = sample_batch(spec, &means, spec.n_train, spec.n_dev, &mut rng);
            let test = sample_batch(
                spec,
                &means,
                spec.n_train + spec.n_dev,
                spec.n_test,
                &mut rng,
            );
            DomainSplits {
                id: d,
                rotation,
                train,
                dev,
                test,
            }
        })
        .collect();
    let ood = (0..n_ood)
        .map(|j| {
            let id = n_domains + j;
            let rotation = (j as f64 + 0.5) * step;
            let means = spec.class_means(rotation);
            let mut rng = rng::stream(seed, DATA_STREAM | id as u64);
            OodDomain {
                id,
                rotation,
                test: sample_batch(spec, &means, 0, spec.n_test, &mut rng),
            }
        })
        .collect();
    Ok(SplitSet {
        spec: spec.clone(),
        domains,
        ood,
    })
}

/// Per-class example counts for `total` examples following `proportions`,
/// by largest remainder (ties to the lower class).
pub fn class_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let short = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Equal class proportions for every part.
pub fn uniform_skew(classes: usize, n_parts: usize) -> Vec<Vec<f64>> {
    alloc::vec![alloc::vec![1.0 / classes as f64; classes]; n_parts]
}

/// Part `p` weights classes with the parity of `p` by `factor` relative to
/// the rest; with two parts, part 0 favours even classes and part 1 odd ones.
pub fn parity_skew(classes: usize, n_parts: usize, factor: f64) -> Vec<Vec<f64>> {
    (0..n_parts)
        .map(|p| {
            let raw: Vec<f64> = (0..classes)
                .map(|k| if k % 2 == p % 2 { factor } else { 1.0 })
                .collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / sum).collect()
        })
        .collect()
}

/// Splits `source` into disjoint parts of `per_part` examples whose label
/// histograms follow `proportions[p]`.
pub fn non_iid_partition(
    source: &Batch,
    classes: usize,
    per_part: usize,
    proportions: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<Batch>, DatasetError> {
    if proportions.is_empty() || per_part == 0 {
        return Err(DatasetError::InvalidSpec(
            "need at least one non-empty part".into(),
        ));
    }
    for p in proportions {
        if p.len() != classes
            || p.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || p.iter().sum::<f64>() <= 0.0
        {
            return Err(DatasetError::InvalidSpec(
                "each proportion vector needs one non-negative weight per class".into(),
            ));
        }
    }
    let mut by_class: Vec<Vec<usize>> = alloc::vec![Vec::new(); classes];
    for (i, &y) in source.labels.iter().enumerate() {
        if y >= classes {
            return Err(DatasetError::InvalidSpec("label out of range".into()));
        }
        by_class[y].push(i);
    }
    let counts: Vec<Vec<usize>> = proportions
        .iter()
        .map(|p| class_counts(p, per_part))
        .collect();
    for (class, pool) in by_class.iter_mut().enumerate() {
        let needed: usize = counts.iter().map(|c| c[class]).sum();
        if needed > pool.len() {
            return Err(DatasetError::InsufficientData {
                class,
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng::stream(seed, PARTITION_STREAM | class as u64));
    }

    let mut cursor = alloc::vec![0usize; classes];
    Ok(counts
        .iter()
        .map(|part| {
            let mut indices = Vec::with_capacity(per_part);
            for (class, &c) in part.iter().enumerate() {
                indices.extend_from_slice(&by_class[class][cursor[class]..cursor[class] + c]);
                cursor[class] += c;
            }
            indices.sort_unstable();
            source.select(&indices)
        })
        .collect())
}

/// Copy of `split` whose dev sets are prefixes of length `⌈fraction·|dev|⌉`.
pub fn dev_fraction(split: &SplitSet, fraction: f64) -> Result<SplitSet, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut out = split.clone();
    for d in &mut out.domains {
        let keep = libm::ceil(fraction * d.dev.len() as f64) as usize;
        d.dev = d.dev.prefix(keep.min(d.dev.len()));
    }
    Ok(out)
}
