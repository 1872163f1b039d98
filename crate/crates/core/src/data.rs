//! Feature-vector datasets: synthetic Gaussian mixtures and the labeled /
//! unlabeled class split.
//!
//! Training code only ever sees [`FeatureSource`] for the unlabeled pool; the
//! pool's true labels live in [`SealedLabels`], reachable from evaluation code.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read access to feature rows.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    /// Rows `idx` as a `idx.len() x dim` batch.
    fn batch(&self, idx: &[usize]) -> Tensor;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features with class labels.
pub trait LabeledSource: FeatureSource {
    fn label(&self, i: usize) -> usize;
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RawDataset {
    features: Tensor,
    labels: Vec<usize>,
}

impl RawDataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        features.check_finite("dataset features")?;
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Centers are uniform in `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
    pub noise_sigma: f64,
    /// Minimum pairwise center distance in units of `noise_sigma`.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 250,
            dim: 64,
            center_scale: 1.5,
            noise_sigma: 1.0,
            min_separation: 4.0,
            seed: 0,
        }
    }
}

pub const MAX_CENTER_ATTEMPTS: usize = 10_000;

/// Class-major samples `center_c + N(0, σ² I)`.
pub fn generate_gaussian_mixture(spec: &MixtureSpec) -> Result<(RawDataset, Tensor)> {
    if spec.classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::InvalidArgument("classes, per_class and dim must be positive".into()));
    }
    if !(spec.noise_sigma > 0.0) || !(spec.center_scale > 0.0) || spec.min_separation < 0.0 {
        return Err(Error::InvalidArgument("noise_sigma and center_scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_dist = spec.min_separation * spec.noise_sigma;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while centers.len() < spec.classes {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let cand: Vec<f64> = (0..spec.dim)
                .map(|_| rng.random_range(-spec.center_scale..=spec.center_scale))
                .collect();
            let far = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                libm::sqrt(d2) >= min_dist
            });
            if far {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::RejectionFailed(MAX_CENTER_ATTEMPTS));
        }
    }
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in center {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.noise_sigma * e);
            }
            labels.push(c);
        }
    }
    let features = Tensor::from_vec(n, spec.dim, data)?;
    let centers = Tensor::from_rows(&centers)?;
    Ok((RawDataset::new(features, labels)?, centers))
}

/// First `labeled` class ids are labeled, the next `unlabeled` are novel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub total_classes: usize,
    pub labeled: usize,
    pub unlabeled: usize,
}

impl SplitSpec {
    pub fn new(total_classes: usize, labeled: usize, unlabeled: usize) -> Result<Self> {
        let s = Self {
            total_classes,
            labeled,
            unlabeled,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled == 0 || self.unlabeled == 0 || self.labeled + self.unlabeled != self.total_classes {
            return Err(Error::InvalidArgument(format!(
                "split {}-{}-{} needs M >= 1, N >= 1 and M + N = total",
                self.total_classes, self.labeled, self.unlabeled
            )));
        }
        Ok(())
    }
}

/// Features with labels and their row indices in the source dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabeledPool {
    features: Tensor,
    labels: Vec<usize>,
    source: Vec<usize>,
}

impl LabeledPool {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let source = (0..labels.len()).collect();
        Self::with_source(features, labels, source)
    }

    pub fn with_source(features: Tensor, labels: Vec<usize>, source: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != source.len() {
            return Err(Error::InvalidArgument("pool parts have different lengths".into()));
        }
        Ok(Self {
            features,
            labels,
            source,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl FeatureSource for LabeledPool {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.features.cols()
    }

    fn batch(&self, idx: &[usize]) -> Tensor {
        self.features.select_rows(idx)
    }
}

impl LabeledSource for LabeledPool {
    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Training view of the novel-class pool: features only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    features: Tensor,
    source: Vec<usize>,
}

impl UnlabeledPool {
    pub fn new(features: Tensor) -> Self {
        let source = (0..features.rows()).collect();
        Self { features, source }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source
    }
}

impl FeatureSource for UnlabeledPool {
    fn len(&self) -> usize {
        self.features.rows()
    }

    fn dim(&self) -> usize {
        self.features.cols()
    }

    fn batch(&self, idx: &[usize]) -> Tensor {
        self.features.select_rows(idx)
    }
}

/// True labels of the unlabeled training pool, kept apart from training.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    /// For metrics only.
    pub fn evaluation_labels(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub spec: SplitSpec,
    /// Labels `0..M`.
    pub train_lab: LabeledPool,
    pub train_unlab: UnlabeledPool,
    /// Novel labels re-indexed to `0..N`.
    pub train_unlab_labels: SealedLabels,
    pub test_lab: LabeledPool,
    /// Novel labels re-indexed to `0..N`.
    pub test_unlab: LabeledPool,
}

impl SplitDataset {
    pub fn dim(&self) -> usize {
        self.train_lab.features().cols()
    }

    /// Training pool with its true labels, for evaluation callbacks.
    pub fn train_unlab_for_eval(&self) -> Result<LabeledPool> {
        LabeledPool::with_source(
            self.train_unlab.features.clone(),
            self.train_unlab_labels.0.clone(),
            self.train_unlab.source.clone(),
        )
    }

    /// Assembles a split from already separated parts (for example four CSV
    /// files). Novel labels must already be re-indexed to `0..N`.
    pub fn from_parts(
        spec: SplitSpec,
        train_lab: LabeledPool,
        train_unlab: LabeledPool,
        test_lab: LabeledPool,
        test_unlab: LabeledPool,
    ) -> Result<Self> {
        spec.validate()?;
        let check = |pool: &LabeledPool, classes: usize, what: &str| -> Result<()> {
            let mut seen = alloc::vec![false; classes];
            for &y in pool.labels() {
                if y >= classes {
                    return Err(Error::InvalidArgument(format!("{what}: label {y} outside 0..{classes}")));
                }
                seen[y] = true;
            }
            pool.features().check_finite("dataset features")?;
            match seen.iter().position(|s| !s) {
                Some(c) => Err(Error::MissingClass(c)),
                None => Ok(()),
            }
        };
        check(&train_lab, spec.labeled, "labeled train")?;
        check(&train_unlab, spec.unlabeled, "unlabeled train")?;
        check(&test_lab, spec.labeled, "labeled test")?;
        check(&test_unlab, spec.unlabeled, "unlabeled test")?;
        let dim = train_lab.features().cols();
        if [&train_unlab, &test_lab, &test_unlab].iter().any(|p| p.features().cols() != dim) {
            return Err(Error::InvalidArgument("pools have different feature widths".into()));
        }
        let LabeledPool { features, labels, source } = train_unlab;
        Ok(Self {
            spec,
            train_lab,
            train_unlab: UnlabeledPool { features, source },
            train_unlab_labels: SealedLabels(labels),
            test_lab,
            test_unlab,
        })
    }
}

/// Stratified split: within every class, the last `round(n * test_fraction)`
/// samples (at least one, at most `n - 1`) go to test, the rest to train.
pub fn split(raw: &RawDataset, spec: SplitSpec, test_fraction: f64) -> Result<SplitDataset> {
    spec.validate()?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = alloc::vec![Vec::new(); spec.total_classes];
    for (i, &y) in raw.labels().iter().enumerate() {
        if y >= spec.total_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside 0..{} declared classes",
                spec.total_classes
            )));
        }
        by_class[y].push(i);
    }
    let mut parts: [(Vec<usize>, Vec<usize>); 4] = Default::default();
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!("class {c} has fewer than 2 samples")));
        }
        let n_test = (libm::round(idx.len() as f64 * test_fraction) as usize).clamp(1, idx.len() - 1);
        let cut = idx.len() - n_test;
        let (labeled, local) = if c < spec.labeled { (true, c) } else { (false, c - spec.labeled) };
        let (train_slot, test_slot) = if labeled { (0, 2) } else { (1, 3) };
        for &i in &idx[..cut] {
            parts[train_slot].0.push(i);
            parts[train_slot].1.push(local);
        }
        for &i in &idx[cut..] {
            parts[test_slot].0.push(i);
            parts[test_slot].1.push(local);
        }
    }
    let pool = |(rows, labels): (Vec<usize>, Vec<usize>)| {
        LabeledPool::with_source(raw.features().select_rows(&rows), labels, rows)
    };
    let [a, b, c, d] = parts;
    SplitDataset::from_parts(spec, pool(a)?, pool(b)?, pool(c)?, pool(d)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> MixtureSpec {
        MixtureSpec {
            classes: 10,
            per_class: 100,
            dim: 4,
            center_scale: 20.0,
            noise_sigma: 1.0,
            min_separation: 4.0,
            seed: 9,
        }
    }

    #[test]
    fn split_convention_and_counts() {
        let (raw, _) = generate_gaussian_mixture(&small_spec()).unwrap();
        let s = split(&raw, SplitSpec::new(10, 5, 5).unwrap(), 0.2).unwrap();
        let mut classes: Vec<usize> = s.train_lab.labels().to_vec();
        classes.dedup();
        assert_eq!(classes, alloc::vec![0, 1, 2, 3, 4]);
        assert_eq!(s.train_lab.len(), 400);
        assert_eq!(s.test_lab.len(), 100);
        assert_eq!(s.train_unlab.len(), 400);
        assert_eq!(s.test_unlab.len(), 100);
        for c in 0..5 {
            assert_eq!(s.test_unlab.labels().iter().filter(|&&y| y == c).count(), 20);
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (raw, _) = generate_gaussian_mixture(&small_spec()).unwrap();
        let s = split(&raw, SplitSpec::new(10, 5, 5).unwrap(), 0.2).unwrap();
        let mut all: Vec<usize> = s
            .train_lab
            .source_indices()
            .iter()
            .chain(s.train_unlab.source_indices())
            .chain(s.test_lab.source_indices())
            .chain(s.test_unlab.source_indices())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..raw.len()).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_split_spec() {
        assert!(SplitSpec::new(10, 5, 4).is_err());
        assert!(SplitSpec::new(5, 5, 0).is_err());
    }

    #[test]
    fn tiny_class_rejected() {
        let raw = RawDataset::new(Tensor::zeros(3, 1), alloc::vec![0, 0, 1]).unwrap();
        assert!(split(&raw, SplitSpec::new(2, 1, 1).unwrap(), 0.2).is_err());
    }

    #[test]
    fn crowded_centers_fail_rejection() {
        let spec = MixtureSpec {
            classes: 3,
            per_class: 1,
            dim: 1,
            center_scale: 1.0,
            noise_sigma: 1.0,
            min_separation: 4.0,
            seed: 0,
        };
        assert_eq!(generate_gaussian_mixture(&spec).unwrap_err(), Error::RejectionFailed(MAX_CENTER_ATTEMPTS));
    }

    #[test]
    fn zero_noise_limit_collapses_to_centers() {
        let spec = MixtureSpec {
            noise_sigma: 1e-300,
            min_separation: 0.0,
            per_class: 5,
            ..small_spec()
        };
        let (raw, centers) = generate_gaussian_mixture(&spec).unwrap();
        for i in 0..raw.len() {
            let c = raw.labels()[i];
            for (a, b) in raw.features().row_slice(i).iter().zip(centers.row_slice(c)) {
                assert!((a - b).abs() < 1e-250);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, _) = generate_gaussian_mixture(&small_spec()).unwrap();
        let (b, _) = generate_gaussian_mixture(&small_spec()).unwrap();
        assert_eq!(a, b);
    }
}
