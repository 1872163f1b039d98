//! Pseudo-latent generation for replay.
//!
//! A latent drawn from `N(0, I)` is pushed up the frozen labeled head's logit
//! for a chosen class by gradient ascent, then blended with that class's
//! stored mean latent using a `Beta(γ, ρ)` mixing coefficient.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, LeafKind};
use crate::nn::DenseNet;
use crate::tensor::Tensor;

/// Per-class mean latents `K = {z_μ^c}` recorded after supervised training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassMeanStore {
    /// `M x h`.
    means: Tensor,
    counts: Vec<usize>,
}

impl ClassMeanStore {
    pub fn from_parts(means: Tensor, counts: Vec<usize>) -> Result<Self> {
        if means.rows() != counts.len() || means.rows() == 0 {
            return Err(shape_err("class means", "one count per mean is required"));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass(c));
        }
        means.check_finite("class means")?;
        Ok(Self { means, counts })
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        self.means.row_slice(class)
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Arithmetic mean latent of every class `0..classes`.
pub fn compute_class_means(latents: &Tensor, labels: &[usize], classes: usize) -> Result<ClassMeanStore> {
    if latents.rows() != labels.len() {
        return Err(shape_err(
            "class means",
            format!("{} latents but {} labels", latents.rows(), labels.len()),
        ));
    }
    let mut sums = Tensor::zeros(classes, latents.cols());
    let mut counts = alloc::vec![0usize; classes];
    for (r, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument(format!("label {c} outside 0..{classes}")));
        }
        counts[c] += 1;
        crate::tensor::axpy(1.0, latents.row_slice(r), sums.row_slice_mut(c));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_slice_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    ClassMeanStore::from_parts(sums, counts)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    /// Ascent steps `L`.
    pub iterations: usize,
    /// Pseudo-latents per class `E`.
    pub per_class: usize,
    pub beta_gamma: f64,
    pub beta_rho: f64,
    /// `1.0` gives the unscaled update `z <- z + ∇p[c]`.
    pub step_size: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            per_class: 50,
            beta_gamma: 1.0,
            beta_rho: 100.0,
            step_size: 0.1,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations >= 1
            && self.per_class >= 1
            && self.beta_gamma > 0.0
            && self.beta_rho > 0.0
            && self.step_size > 0.0
            && self.beta_gamma.is_finite()
            && self.beta_rho.is_finite()
            && self.step_size.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid inversion config {self:?}")))
        }
    }
}

/// Synthesized `(z_p, c)` pairs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PseudoLatentSet {
    /// `n x h`.
    pub latents: Tensor,
    pub labels: Vec<usize>,
}

impl PseudoLatentSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ascends the logit of `class` for every row of `init`, with the head's
/// parameters held fixed. Returns the final latents and, per step, the
/// logits `p[c]` before that step (`iterations + 1` rows including the end).
pub fn invert_latents_traced(
    head: &DenseNet,
    class: usize,
    init: Tensor,
    iterations: usize,
    step_size: f64,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let classes = head.output_dim();
    if class >= classes {
        return Err(Error::InvalidArgument(format!("class {class} outside 0..{classes}")));
    }
    if init.cols() != head.input_dim() {
        return Err(shape_err("invert_latent", "latent width does not match head input"));
    }
    let rows = init.rows();
    let mut seed = Tensor::zeros(rows, classes);
    for r in 0..rows {
        seed.set(r, class, 1.0);
    }
    let mut z = init;
    let mut trace = Vec::with_capacity(iterations + 1);
    for i in 0..=iterations {
        let mut g = Graph::new();
        let bound = head.bind(&mut g, LeafKind::Constant);
        let zi = g.input(z.clone());
        let p = bound.forward(&mut g, zi).map_err(|_| Error::InversionDiverged { class, iteration: i })?;
        trace.push((0..rows).map(|r| g.value(p).get(r, class)).collect());
        if i == iterations {
            break;
        }
        let grads = g.backward_with(p, seed.clone())?;
        let dz = grads.get(zi).expect("input gradient");
        z.add_scaled(dz, step_size)?;
        if !z.is_finite() {
            return Err(Error::InversionDiverged { class, iteration: i + 1 });
        }
    }
    Ok((z, trace))
}

pub fn invert_latents(head: &DenseNet, class: usize, init: Tensor, iterations: usize, step_size: f64) -> Result<Tensor> {
    invert_latents_traced(head, class, init, iterations, step_size).map(|(z, _)| z)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// One inverted latent for `class`, starting from `z_1 ~ N(0, I_h)`.
pub fn invert_latent<R: Rng + ?Sized>(
    head: &DenseNet,
    class: usize,
    config: &InversionConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let init = standard_normal(1, head.input_dim(), rng);
    Ok(invert_latents(head, class, init, config.iterations, config.step_size)?.into_vec())
}

/// `α z_L + (1 - α) z_μ^c`.
pub fn mix_with_class_mean(z_l: &[f64], store: &ClassMeanStore, class: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if class >= store.len() {
        return Err(Error::InvalidArgument(format!("class {class} outside the mean store")));
    }
    let mean = store.mean(class);
    if mean.len() != z_l.len() {
        return Err(shape_err("mixup", "latent and mean widths differ"));
    }
    Ok(z_l
        .iter()
        .zip(mean)
        .map(|(&z, &m)| alpha * z + (1.0 - alpha) * m)
        .collect())
}

pub fn sample_alpha<R: Rng + ?Sized>(gamma: f64, rho: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(gamma, rho)
        .map_err(|e| Error::InvalidArgument(format!("Beta({gamma}, {rho}): {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Builds `D_pseudo`: for each class, `per_class` latents are drawn, inverted
/// through the frozen head, mixed with the class mean and labelled.
/// Classes are processed in order; within a class all starting points are
/// drawn first, then one `α` per latent.
pub fn generate_pseudo_dataset<R: Rng + ?Sized>(
    head: &DenseNet,
    store: &ClassMeanStore,
    config: &InversionConfig,
    rng: &mut R,
) -> Result<PseudoLatentSet> {
    config.validate()?;
    let (classes, h) = (head.output_dim(), head.input_dim());
    if store.len() != classes || store.dim() != h {
        return Err(shape_err("generate_pseudo_dataset", "mean store does not match the labeled head"));
    }
    let e = config.per_class;
    let mut data = Vec::with_capacity(classes * e * h);
    let mut labels = Vec::with_capacity(classes * e);
    for c in 0..classes {
        let init = standard_normal(e, h, rng);
        let z_l = invert_latents(head, c, init, config.iterations, config.step_size)?;
        for r in 0..e {
            let alpha = sample_alpha(config.beta_gamma, config.beta_rho, rng)?;
            data.extend(mix_with_class_mean(z_l.row_slice(r), store, c, alpha)?);
            labels.push(c);
        }
    }
    Ok(PseudoLatentSet {
        latents: Tensor::from_vec(labels.len(), h, data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_head(rows: &[[f64; 2]]) -> DenseNet {
        DenseNet::from_layers(
            alloc::vec![Layer {
                weight: Tensor::from_rows(rows).unwrap(),
                bias: Tensor::zeros(1, rows.len()),
            }],
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn singleton_and_midpoint_means() {
        let z = Tensor::from_rows(&[[1.0, 1.0], [3.0, 3.0], [5.0, -1.0]]).unwrap();
        let store = compute_class_means(&z, &[0, 0, 1], 2).unwrap();
        assert_eq!(store.mean(0), &[2.0, 2.0]);
        assert_eq!(store.mean(1), &[5.0, -1.0]);
        assert_eq!(store.counts(), &[2, 1]);
    }

    #[test]
    fn missing_class_is_an_error() {
        let z = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(compute_class_means(&z, &[0], 2).unwrap_err(), Error::MissingClass(1));
    }

    #[test]
    fn one_unscaled_step_on_linear_head() {
        let head = linear_head(&[[1.0, 0.0], [0.0, 1.0]]);
        let (z, trace) = invert_latents_traced(&head, 0, Tensor::zeros(1, 2), 1, 1.0).unwrap();
        assert_eq!(z.data(), &[1.0, 0.0]);
        assert_eq!(trace, alloc::vec![alloc::vec![0.0], alloc::vec![1.0]]);
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let store = ClassMeanStore::from_parts(Tensor::from_rows(&[[0.0, 2.0]]).unwrap(), alloc::vec![1]).unwrap();
        let zl = [2.0, 0.0];
        assert_eq!(mix_with_class_mean(&zl, &store, 0, 1.0).unwrap(), alloc::vec![2.0, 0.0]);
        assert_eq!(mix_with_class_mean(&zl, &store, 0, 0.0).unwrap(), alloc::vec![0.0, 2.0]);
        assert_eq!(mix_with_class_mean(&zl, &store, 0, 0.5).unwrap(), alloc::vec![1.0, 1.0]);
        assert!(mix_with_class_mean(&zl, &store, 0, 1.5).is_err());
    }

    #[test]
    fn divergent_ascent_names_class_and_iteration() {
        let head = linear_head(&[[1e300, 0.0], [0.0, 1.0]]);
        let err = invert_latents(&head, 0, Tensor::zeros(1, 2), 5, 1e10).unwrap_err();
        assert!(matches!(err, Error::InversionDiverged { class: 0, .. }));
    }

    #[test]
    fn counting_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DenseNet::new(&[4, 3], Activation::Identity, &mut rng);
        let store = ClassMeanStore::from_parts(Tensor::zeros(3, 4), alloc::vec![1, 1, 1]).unwrap();
        let cfg = InversionConfig {
            per_class: 2,
            ..InversionConfig::default()
        };
        let set = generate_pseudo_dataset(&head, &store, &cfg, &mut rng).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.labels, alloc::vec![0, 0, 1, 1, 2, 2]);
    }
}
