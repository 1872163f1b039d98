//! Variational mutual-information regularizer between labeled-head logits
//! `l` and unlabeled-head logits `u`.
//!
//! With `q(l | u) = N(μ_θ(u), diag(σ_ω²))` the bound on `I(l; u)` is, up to
//! the constant entropy of `l`, the expected Gaussian log-likelihood. The
//! loss minimized here is its negation,
//! `mean_b Σ_i [ log σ_i + (l_i - μ_θ(u)_i)² / (2 σ_i²) ]`.
//! `l` is a fixed regression target: no gradient reaches the labeled head.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, LeafKind, NodeId};
use crate::models::VariationalHead;
use crate::nn::BoundNet;
use crate::tensor::Tensor;

/// Lower clamp on `σ_ω`.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiSign {
    /// Negative Gaussian log-likelihood, minimized.
    #[default]
    NegLogLikelihood,
    /// The expression with a leading minus, kept for comparison runs only.
    Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiBatch {
    /// `B x M`.
    pub labeled_logits: Tensor,
    /// `B x N`.
    pub unlabeled_logits: Tensor,
}

impl MiBatch {
    pub fn new(labeled_logits: Tensor, unlabeled_logits: Tensor) -> Result<Self> {
        if labeled_logits.rows() != unlabeled_logits.rows() {
            return Err(shape_err(
                "mi batch",
                format!("{} labeled rows vs {} unlabeled rows", labeled_logits.rows(), unlabeled_logits.rows()),
            ));
        }
        Ok(Self {
            labeled_logits,
            unlabeled_logits,
        })
    }
}

/// Variational head parameters recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundVariational {
    pub mean: BoundNet,
    pub log_sigma: NodeId,
}

impl BoundVariational {
    pub fn bind(head: &VariationalHead, g: &mut Graph, kind: LeafKind) -> Self {
        Self {
            mean: head.mean_net.bind(g, kind),
            log_sigma: g.leaf(head.log_sigma.clone(), kind),
        }
    }

    /// Gradients in [`VariationalHead::params`] order.
    pub fn grads(&self, grads: &crate::graph::Gradients) -> Vec<Tensor> {
        let mut out = self.mean.grads(grads);
        out.push(grads.get(self.log_sigma).cloned().expect("log sigma gradient"));
        out
    }
}

/// Records the regularizer on `g` for targets `l` (copied in as constants)
/// and unlabeled logits node `u`. Returns a `1 x 1` node.
pub fn record_mi_loss(
    g: &mut Graph,
    labeled_logits: &Tensor,
    u: NodeId,
    head: &BoundVariational,
    sign: MiSign,
) -> Result<NodeId> {
    let rows = g.value(u).rows();
    if labeled_logits.rows() != rows {
        return Err(shape_err("mi loss", "l and u row counts differ"));
    }
    let target = g.constant(labeled_logits.clone());
    let mu = head.mean.forward(g, u)?;
    if g.value(mu).cols() != labeled_logits.cols() {
        return Err(shape_err(
            "mi loss",
            format!("mean network emits {} values, l has {}", g.value(mu).cols(), labeled_logits.cols()),
        ));
    }
    let sigma = g.exp(head.log_sigma)?;
    let sigma = g.clamp(sigma, SIGMA_FLOOR, f64::MAX)?;
    let sigma = g.broadcast_rows(sigma, rows)?;
    let resid = g.sub(target, mu)?;
    let sq = g.square(resid)?;
    let var = g.square(sigma)?;
    let two_var = g.scale(var, 2.0)?;
    let quad = g.div(sq, two_var)?;
    let log_sigma = g.log(sigma)?;
    let terms = g.add(log_sigma, quad)?;
    let total = g.sum(terms)?;
    let k = match sign {
        MiSign::NegLogLikelihood => 1.0,
        MiSign::Printed => -1.0,
    };
    g.scale(total, k / rows as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiLoss {
    pub value: f64,
    /// In [`VariationalHead::params`] order.
    pub head_grads: Vec<Tensor>,
    /// Gradient with respect to `u`, `B x N`: the path into the unlabeled
    /// head and the extractor.
    pub unlabeled_grad: Tensor,
    /// Gradient with respect to `l`; always zero.
    pub labeled_grad: Tensor,
}

/// Loss value and gradients for one batch.
pub fn mi_loss(batch: &MiBatch, head: &VariationalHead) -> Result<MiLoss> {
    mi_loss_signed(batch, head, MiSign::NegLogLikelihood)
}

pub fn mi_loss_signed(batch: &MiBatch, head: &VariationalHead, sign: MiSign) -> Result<MiLoss> {
    head.log_sigma.check_finite("log sigma")?;
    let mut g = Graph::new();
    let bound = BoundVariational::bind(head, &mut g, LeafKind::Parameter);
    let l = g.input(batch.labeled_logits.clone());
    let l_val = g.value(l).clone();
    let u = g.input(batch.unlabeled_logits.clone());
    let loss = record_mi_loss(&mut g, &l_val, u, &bound, sign)?;
    let grads = g.backward(loss)?;
    Ok(MiLoss {
        value: g.value(loss).get(0, 0),
        head_grads: bound.grads(&grads),
        unlabeled_grad: grads.get(u).cloned().expect("u gradient"),
        labeled_grad: grads.get(l).cloned().expect("l gradient"),
    })
}

/// Per-dimension stationary point of the loss in `σ`:
/// `σ*_i = sqrt(mean_b r_{b,i}²)` for residuals `r = l - μ_θ(u)`.
pub fn optimal_sigma(residuals: &Tensor) -> Vec<f64> {
    let b = residuals.rows().max(1) as f64;
    (0..residuals.cols())
        .map(|i| {
            let ms: f64 = (0..residuals.rows()).map(|r| { let v = residuals.get(r, i); v * v }).sum::<f64>() / b;
            libm::sqrt(ms)
        })
        .collect()
}
