//! Known-class identifier: a binary scorer over latents, trained on
//! pseudo-latents (label 0, stand-ins for the labeled classes) against
//! latents of the unlabeled pool (label 1), then thresholded to pick a head.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, LeafKind, NodeId};
use crate::models::KciNet;
use crate::nn::BoundNet;
use crate::optim::SgdMomentum;
use crate::tensor::Tensor;

/// Scores are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct KciDataset {
    /// `(N_p + N_u) x h`, pseudo-latents first.
    pub latents: Tensor,
    /// `0.0` for pseudo-latents, `1.0` for unlabeled latents.
    pub labels: Vec<f64>,
}

impl KciDataset {
    pub fn new(pseudo: &Tensor, unlabeled: &Tensor) -> Result<Self> {
        if pseudo.rows() == 0 || unlabeled.rows() == 0 {
            return Err(Error::InvalidArgument("KCI needs at least one sample of each kind".into()));
        }
        if pseudo.cols() != unlabeled.cols() {
            return Err(shape_err("kci dataset", "latent widths differ"));
        }
        let mut data = Vec::with_capacity(pseudo.len() + unlabeled.len());
        data.extend_from_slice(pseudo.data());
        data.extend_from_slice(unlabeled.data());
        let mut labels = alloc::vec![0.0; pseudo.rows()];
        labels.resize(pseudo.rows() + unlabeled.rows(), 1.0);
        Ok(Self {
            latents: Tensor::from_vec(labels.len(), pseudo.cols(), data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> KciDataset {
        KciDataset {
            latents: self.latents.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Binary cross-entropy of the bound identifier on constant latents `z`.
pub fn record_kci_loss(g: &mut Graph, kci: &BoundNet, z: NodeId, labels: &[f64]) -> Result<NodeId> {
    let rows = g.value(z).rows();
    if rows == 0 || labels.len() != rows {
        return Err(shape_err("kci loss", format!("{rows} latents, {} labels", labels.len())));
    }
    let s = kci.forward(g, z)?;
    let s = g.clamp(s, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let y = g.constant(Tensor::from_vec(rows, 1, labels.to_vec())?);
    let one_minus_y = g.constant(Tensor::from_vec(rows, 1, labels.iter().map(|v| 1.0 - v).collect())?);
    let log_s = g.log(s)?;
    let neg = g.scale(s, -1.0)?;
    let one_minus_s = g.add_scalar(neg, 1.0)?;
    let log_1ms = g.log(one_minus_s)?;
    let pos_term = g.mul(y, log_s)?;
    let neg_term = g.mul(one_minus_y, log_1ms)?;
    let both = g.add(pos_term, neg_term)?;
    let total = g.sum(both)?;
    g.scale(total, -1.0 / rows as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KciLoss {
    pub value: f64,
    /// In [`crate::nn::DenseNet::params`] order.
    pub grads: Vec<Tensor>,
}

pub fn kci_loss(kci: &KciNet, batch: &KciDataset) -> Result<KciLoss> {
    let mut g = Graph::new();
    let bound = kci.net.bind(&mut g, LeafKind::Parameter);
    let z = g.constant(batch.latents.clone());
    let loss = record_kci_loss(&mut g, &bound, z, &batch.labels)?;
    let grads = g.backward(loss)?;
    Ok(KciLoss {
        value: g.value(loss).get(0, 0),
        grads: bound.grads(&grads),
    })
}

/// One SGD step on a batch; returns the loss before the step.
pub fn kci_step(kci: &mut KciNet, opt: &mut SgdMomentum, batch: &KciDataset) -> Result<f64> {
    let loss = kci_loss(kci, batch)?;
    opt.step(&mut kci.net.params_mut(), &loss.grads)?;
    Ok(loss.value)
}

/// Shuffled mini-batch training over a fixed dataset.
pub fn train_kci<R: Rng + ?Sized>(
    kci: &mut KciNet,
    data: &KciDataset,
    epochs: usize,
    batch_size: usize,
    opt: &mut SgdMomentum,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size.max(1)) {
            total += kci_step(kci, opt, &data.subset(chunk))?;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Route {
    LabeledHead,
    UnlabeledHead,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoutingDecision {
    pub score: f64,
    pub route: Route,
    pub tau: f64,
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")))
    }
}

/// `UnlabeledHead` exactly when `score > tau`.
pub fn route_for_score(score: f64, tau: f64) -> RoutingDecision {
    let route = if score > tau {
        Route::UnlabeledHead
    } else {
        Route::LabeledHead
    };
    RoutingDecision { score, route, tau }
}

pub fn route(kci: &KciNet, z_t: &[f64], tau: f64) -> Result<RoutingDecision> {
    validate_tau(tau)?;
    let score = kci.scores(&Tensor::row(z_t))?[0];
    Ok(route_for_score(score, tau))
}

/// Routes every row of a latent batch.
pub fn route_batch(kci: &KciNet, z: &Tensor, tau: f64) -> Result<Vec<RoutingDecision>> {
    validate_tau(tau)?;
    Ok(kci.scores(z)?.into_iter().map(|s| route_for_score(s, tau)).collect())
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn roc_auc(negatives: &[f64], positives: &[f64]) -> f64 {
    if negatives.is_empty() || positives.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = negatives.iter().map(|&s| (s, false)).chain(positives.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with average ranks for ties.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNet, Layer};

    /// A net whose sigmoid output is the constant `sigmoid(bias)`.
    fn constant_kci(bias: f64) -> KciNet {
        KciNet {
            net: DenseNet::from_layers(
                alloc::vec![Layer {
                    weight: Tensor::zeros(1, 2),
                    bias: Tensor::row(&[bias]),
                }],
                Activation::Sigmoid,
            )
            .unwrap(),
        }
    }

    fn logit(p: f64) -> f64 {
        libm::log(p / (1.0 - p))
    }

    #[test]
    fn half_scores_give_ln2() {
        let data = KciDataset::new(&Tensor::zeros(3, 2), &Tensor::zeros(2, 2)).unwrap();
        let l = kci_loss(&constant_kci(0.0), &data).unwrap();
        assert!((l.value - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_positive_at_point_nine() {
        let data = KciDataset {
            latents: Tensor::zeros(1, 2),
            labels: alloc::vec![1.0],
        };
        let l = kci_loss(&constant_kci(logit(0.9)), &data).unwrap();
        assert!((l.value + libm::log(0.9)).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_approach_zero() {
        let data = KciDataset {
            latents: Tensor::zeros(1, 2),
            labels: alloc::vec![1.0],
        };
        let l = kci_loss(&constant_kci(40.0), &data).unwrap();
        assert!(l.value < 1e-12);
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(route_for_score(0.995, 0.99).route, Route::UnlabeledHead);
        assert_eq!(route_for_score(0.95, 0.99).route, Route::LabeledHead);
        assert_eq!(route_for_score(0.99, 0.99).route, Route::LabeledHead);
        assert!(validate_tau(1.0).is_err());
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[0.8, 0.9]), 1.0);
        assert_eq!(roc_auc(&[0.8, 0.9], &[0.1, 0.2]), 0.0);
        assert_eq!(roc_auc(&[0.5], &[0.5]), 0.5);
    }

    #[test]
    fn empty_side_rejected() {
        assert!(KciDataset::new(&Tensor::zeros(0, 2), &Tensor::zeros(2, 2)).is_err());
    }
}
