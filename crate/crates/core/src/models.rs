//! The network family: shared extractor, labeled and unlabeled heads, the
//! variational mean/variance pair and the known-class identifier.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, DenseNet};
use crate::pseudoreplay::ClassMeanStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub labeled_classes: usize,
    pub unlabeled_classes: usize,
    /// Hidden widths of the extractor before its final `latent_dim` layer.
    pub extractor_hidden: Vec<usize>,
    /// Hidden widths of both heads; empty means a linear classifier.
    pub head_hidden: Vec<usize>,
}

impl ModelDims {
    /// Two ReLU layers of width `latent_dim` in the extractor, linear heads.
    pub fn new(input_dim: usize, latent_dim: usize, labeled_classes: usize, unlabeled_classes: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            labeled_classes,
            unlabeled_classes,
            extractor_hidden: vec![latent_dim],
            head_hidden: Vec::new(),
        }
    }

    pub fn extractor_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.extractor_hidden);
        d.push(self.latent_dim);
        d
    }

    fn head_dims(&self, classes: usize) -> Vec<usize> {
        let mut d = vec![self.latent_dim];
        d.extend(&self.head_hidden);
        d.push(classes);
        d
    }

    pub fn labeled_head_dims(&self) -> Vec<usize> {
        self.head_dims(self.labeled_classes)
    }

    pub fn unlabeled_head_dims(&self) -> Vec<usize> {
        self.head_dims(self.unlabeled_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.labeled_classes == 0 || self.unlabeled_classes == 0 {
            return Err(Error::InvalidArgument("model dimensions must all be positive".into()));
        }
        if self.extractor_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NcdwfModel {
    pub dims: ModelDims,
    pub feature_extractor: DenseNet,
    pub labeled_head: DenseNet,
    pub unlabeled_head: DenseNet,
    frozen_extractor: Option<DenseNet>,
    frozen_labeled_head: Option<DenseNet>,
    class_means: Option<ClassMeanStore>,
}

impl NcdwfModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let feature_extractor = DenseNet::new(&dims.extractor_dims(), Activation::Relu, rng);
        let labeled_head = DenseNet::new(&dims.labeled_head_dims(), Activation::Identity, rng);
        let unlabeled_head = DenseNet::new(&dims.unlabeled_head_dims(), Activation::Identity, rng);
        Ok(Self {
            dims,
            feature_extractor,
            labeled_head,
            unlabeled_head,
            frozen_extractor: None,
            frozen_labeled_head: None,
            class_means: None,
        })
    }

    /// Assembles a model from explicit networks, checking every dimension.
    pub fn from_parts(
        dims: ModelDims,
        feature_extractor: DenseNet,
        labeled_head: DenseNet,
        unlabeled_head: DenseNet,
    ) -> Result<Self> {
        dims.validate()?;
        let check = |net: &DenseNet, want: Vec<usize>, what: &'static str| {
            if net.dims() != want {
                Err(shape_err(what, alloc::format!("expected {:?}, got {:?}", want, net.dims())))
            } else {
                Ok(())
            }
        };
        check(&feature_extractor, dims.extractor_dims(), "feature extractor")?;
        check(&labeled_head, dims.labeled_head_dims(), "labeled head")?;
        check(&unlabeled_head, dims.unlabeled_head_dims(), "unlabeled head")?;
        Ok(Self {
            dims,
            feature_extractor,
            labeled_head,
            unlabeled_head,
            frozen_extractor: None,
            frozen_labeled_head: None,
            class_means: None,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dims.input_dim {
            return Err(shape_err(
                "model input",
                alloc::format!("expected {} features, got {}", self.dims.input_dim, x.cols()),
            ));
        }
        Ok(())
    }

    /// Latents `Φ_FE(x)` for a batch `B x d`.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.feature_extractor.forward(x)
    }

    /// Labeled-head logits `B x M`.
    pub fn predict_labeled(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.extract(x)?;
        self.labeled_head.forward(&z)
    }

    /// Unlabeled-head logits `B x N`.
    pub fn predict_unlabeled(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.extract(x)?;
        self.unlabeled_head.forward(&z)
    }

    /// Deep copy of the current extractor and labeled head, taken once when
    /// supervised training ends. The copies are never mutated afterwards.
    pub fn freeze_extractor_snapshot(&mut self) -> Result<()> {
        if self.frozen_extractor.is_some() {
            return Err(Error::SnapshotExists);
        }
        self.frozen_extractor = Some(self.feature_extractor.clone());
        self.frozen_labeled_head = Some(self.labeled_head.clone());
        Ok(())
    }

    pub fn frozen_extractor(&self) -> Option<&DenseNet> {
        self.frozen_extractor.as_ref()
    }

    /// Labeled head as it was at snapshot time; pseudo-latents are inverted
    /// through this copy.
    pub fn frozen_labeled_head(&self) -> Option<&DenseNet> {
        self.frozen_labeled_head.as_ref()
    }

    pub fn class_means(&self) -> Option<&ClassMeanStore> {
        self.class_means.as_ref()
    }

    pub fn set_class_means(&mut self, store: ClassMeanStore) -> Result<()> {
        if store.len() != self.dims.labeled_classes || store.dim() != self.dims.latent_dim {
            return Err(shape_err("class means", "store does not match model dimensions"));
        }
        self.class_means = Some(store);
        Ok(())
    }

    /// Restores snapshot state, used when loading persisted models.
    pub fn restore_snapshot(&mut self, extractor: DenseNet, labeled_head: DenseNet) -> Result<()> {
        if extractor.dims() != self.dims.extractor_dims() || labeled_head.dims() != self.dims.labeled_head_dims() {
            return Err(shape_err("snapshot", "frozen networks do not match model dimensions"));
        }
        self.frozen_extractor = Some(extractor);
        self.frozen_labeled_head = Some(labeled_head);
        Ok(())
    }

    /// Frozen latents `Φ_FE^lab(x)`.
    pub fn extract_frozen(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.frozen_extractor
            .as_ref()
            .ok_or(Error::PhaseOneIncomplete("no frozen extractor"))?
            .forward(x)
    }
}

/// Gaussian variational family `q(l | u) = N(μ_θ(u), diag(σ_ω²))`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariationalHead {
    pub mean_net: DenseNet,
    /// `1 x M`; `σ_ω = exp(log_sigma)`.
    pub log_sigma: Tensor,
}

impl VariationalHead {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new<R: Rng + ?Sized>(unlabeled_classes: usize, labeled_classes: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mean_net: DenseNet::new(&[unlabeled_classes, hidden, labeled_classes], Activation::Identity, rng),
            log_sigma: Tensor::zeros(1, labeled_classes),
        }
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(libm::exp)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.mean_net.params();
        p.push(&self.log_sigma);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mean_net.params_mut();
        p.push(&mut self.log_sigma);
        p
    }
}

/// Binary identifier: two hidden layers of 128 units, one sigmoid output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KciNet {
    pub net: DenseNet,
}

impl KciNet {
    pub const HIDDEN: usize = 128;

    pub fn new<R: Rng + ?Sized>(latent_dim: usize, rng: &mut R) -> Self {
        Self::with_hidden(latent_dim, Self::HIDDEN, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            net: DenseNet::new(&[latent_dim, hidden, hidden, 1], Activation::Sigmoid, rng),
        }
    }

    /// Scores in `(0, 1)` for a batch of latents; high means "novel".
    pub fn scores(&self, z: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.forward(z)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model(d: usize) -> NcdwfModel {
        let dims = ModelDims {
            input_dim: d,
            latent_dim: d,
            labeled_classes: d,
            unlabeled_classes: 1,
            extractor_hidden: Vec::new(),
            head_hidden: Vec::new(),
        };
        let id = |n| Layer {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(1, n),
        };
        let fe = DenseNet::from_layers(vec![id(d)], Activation::Identity).unwrap();
        let lab = DenseNet::from_layers(vec![id(d)], Activation::Identity).unwrap();
        let ulb = DenseNet::zeros(&[d, 1], Activation::Identity);
        NcdwfModel::from_parts(dims, fe, lab, ulb).unwrap()
    }

    #[test]
    fn identity_composition_returns_input() {
        let m = identity_model(3);
        let x = Tensor::row(&[0.5, -1.0, 2.0]);
        assert_eq!(m.predict_labeled(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = NcdwfModel::new(ModelDims::new(4, 3, 2, 1), &mut rng).unwrap();
        m.labeled_head = DenseNet::zeros(&[3, 2], Activation::Identity);
        m.unlabeled_head = DenseNet::zeros(&[3, 1], Activation::Identity);
        let x = Tensor::row(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.predict_labeled(&x).unwrap().data(), &[0.0, 0.0]);
        // N = 1: a single scalar logit per input
        assert_eq!(m.predict_unlabeled(&x).unwrap().shape(), [1, 1]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = identity_model(3);
        assert!(m.predict_labeled(&Tensor::row(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn snapshot_twice_is_an_error() {
        let mut m = identity_model(2);
        m.freeze_extractor_snapshot().unwrap();
        assert_eq!(m.freeze_extractor_snapshot(), Err(Error::SnapshotExists));
    }

    #[test]
    fn snapshot_is_copy_of_live_extractor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = NcdwfModel::new(ModelDims::new(6, 4, 3, 2), &mut rng).unwrap();
        m.freeze_extractor_snapshot().unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1.0, -1.0, 1.0, -1.0, 1.0, -1.0]]).unwrap();
        assert_eq!(m.extract(&x).unwrap(), m.extract_frozen(&x).unwrap());
    }
}
