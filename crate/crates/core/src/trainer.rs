//! The two learning phases.
//!
//! Phase 1 fits the extractor and labeled head on `D_lab`, then freezes a
//! snapshot and the class means. Phase 2 sees only `D_unlab` and combines
//! self-labeled cross-entropy, the MI regularizer, feature distillation and
//! pseudo-latent replay, and trains the known-class identifier alongside.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureSource, LabeledSource};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, LeafKind, NodeId};
use crate::kci::{record_kci_loss, KciDataset};
use crate::miregularizer::{optimal_sigma, record_mi_loss, BoundVariational, MiSign, SIGMA_FLOOR};
use crate::models::{KciNet, NcdwfModel, VariationalHead};
use crate::nn::{BoundNet, DenseNet};
use crate::optim::SgdMomentum;
use crate::pseudoreplay::{compute_class_means, generate_pseudo_dataset, InversionConfig, PseudoLatentSet};
use crate::selflabel::{harden_labels, soft_targets, solve_sinkhorn, SelfLabelProblem, SinkhornConfig};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_ce: f64,
    pub lambda_mi: f64,
    pub lambda_fd: f64,
    pub lambda_replay: f64,
    /// Share of every discovery batch taken from `D_pseudo`.
    pub pseudo_fraction: f64,
    pub seed: u64,
    pub enable_plr: bool,
    pub enable_mir: bool,
    pub enable_fd: bool,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lambda_ce: 1.0,
            lambda_mi: 1.0,
            lambda_fd: 1.0,
            lambda_replay: 1.0,
            pseudo_fraction: 0.25,
            seed: 0,
            enable_plr: true,
            enable_mir: true,
            enable_fd: true,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("phase config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        let lambdas = [self.lambda_ce, self.lambda_mi, self.lambda_fd, self.lambda_replay];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("loss weights must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.pseudo_fraction) {
            return bad("pseudo_fraction must lie in [0, 1)");
        }
        if self.pseudo_fraction > 0.0 && self.batch_size < 2 {
            return bad("batch_size must be at least 2 when pseudo_fraction > 0");
        }
        Ok(())
    }

    fn optimizer(&self) -> Result<SgdMomentum> {
        SgdMomentum::new(self.learning_rate, self.momentum)
    }
}

/// Discovery-phase choices beyond the shared [`PhaseConfig`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscoveryOptions {
    /// Softmax over the concatenated `[Φ_LAB, Φ_ULB]` logits, with novel
    /// pseudo-labels placed after the `M` labeled classes. When false the
    /// cross-entropy uses `Φ_ULB` alone.
    pub unified_head: bool,
    /// Cross-entropy against the transport plan columns instead of their argmax.
    pub soft_targets: bool,
    pub squared_fd: bool,
    pub freeze_labeled_head: bool,
    pub mi_sign: MiSign,
    /// Rescales each batch's joint gradient (extractor, both heads and the
    /// variational head) to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    pub mi_frozen_target: bool,
    /// Before each step, set `σ_ω` to the batch minimizer of the loss,
    /// `sqrt(mean_b (l - μ_θ(u))²)` per dimension.
    pub sigma_closed_form: bool,
    /// Let the regularizer's gradient continue from `u` into the extractor.
    pub mi_through_extractor: bool,
    pub sinkhorn: SinkhornConfig,
    pub inversion: InversionConfig,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        Self {
            unified_head: true,
            soft_targets: false,
            squared_fd: false,
            freeze_labeled_head: false,
            mi_sign: MiSign::NegLogLikelihood,
            max_grad_norm: None,
            mi_frozen_target: false,
            sigma_closed_form: true,
            mi_through_extractor: false,
            sinkhorn: SinkhornConfig::default(),
            inversion: InversionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_mi: f64,
    pub loss_fd: f64,
    pub loss_replay: f64,
    pub loss_kci: f64,
    pub lab_acc: f64,
    pub unlab_acc: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Elapsed-time source; the core has no clock of its own.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Always zero.
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

/// Per-epoch `(lab_acc, unlab_acc)` provider, called on a read-only model.
pub trait Monitor {
    fn metrics(&mut self, model: &NcdwfModel) -> Result<(f64, f64)>;
}

/// Reports zero for both accuracies.
pub struct NoMonitor;

impl Monitor for NoMonitor {
    fn metrics(&mut self, _model: &NcdwfModel) -> Result<(f64, f64)> {
        Ok((0.0, 0.0))
    }
}

impl<F: FnMut(&NcdwfModel) -> Result<(f64, f64)>> Monitor for F {
    fn metrics(&mut self, model: &NcdwfModel) -> Result<(f64, f64)> {
        self(model)
    }
}

/// Clock and monitor for one phase.
pub struct Hooks<'a> {
    pub clock: &'a dyn Clock,
    pub monitor: &'a mut dyn Monitor,
}

fn one_hot(labels: &[usize], classes: usize, offset: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (r, &y) in labels.iter().enumerate() {
        t.set(r, offset + y, 1.0);
    }
    t
}

/// `-mean_b Σ_j T[b, j] log softmax(logits)[b, j]` for target rows `T`.
pub fn record_cross_entropy(g: &mut Graph, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    if g.value(logits).shape() != targets.shape() {
        return Err(shape_err("cross entropy", "targets do not match logits"));
    }
    let rows = targets.rows();
    if rows == 0 {
        return Err(shape_err("cross entropy", "empty batch"));
    }
    let ls = g.log_softmax(logits)?;
    let t = g.constant(targets.clone());
    let picked = g.mul(t, ls)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / rows as f64)
}

/// A scalar loss with gradients for every network in [`NcdwfModel`] order:
/// extractor, labeled head, unlabeled head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLoss {
    pub value: f64,
    pub extractor: Vec<Tensor>,
    pub labeled_head: Vec<Tensor>,
    pub unlabeled_head: Vec<Tensor>,
}

struct BoundModel {
    fe: BoundNet,
    lab: BoundNet,
    ulb: BoundNet,
}

impl BoundModel {
    fn bind(model: &NcdwfModel, g: &mut Graph) -> Self {
        Self {
            fe: model.feature_extractor.bind(g, LeafKind::Parameter),
            lab: model.labeled_head.bind(g, LeafKind::Parameter),
            ulb: model.unlabeled_head.bind(g, LeafKind::Parameter),
        }
    }

    fn finish(&self, g: &Graph, loss: NodeId) -> Result<ModelLoss> {
        let grads = g.backward(loss)?;
        Ok(ModelLoss {
            value: g.value(loss).get(0, 0),
            extractor: self.fe.grads(&grads),
            labeled_head: self.lab.grads(&grads),
            unlabeled_head: self.ulb.grads(&grads),
        })
    }
}

/// Softmax cross-entropy of `Φ_LAB(Φ_FE(x))` against labels `y`.
pub fn supervised_loss(model: &NcdwfModel, x: &Tensor, y: &[usize]) -> Result<ModelLoss> {
    let m = model.dims.labeled_classes;
    if let Some(&bad) = y.iter().find(|&&c| c >= m) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{m}")));
    }
    let mut g = Graph::new();
    let b = BoundModel::bind(model, &mut g);
    let xi = g.constant(x.clone());
    let z = b.fe.forward(&mut g, xi)?;
    let l = b.lab.forward(&mut g, z)?;
    let loss = record_cross_entropy(&mut g, l, &one_hot(y, m, 0))?;
    b.finish(&g, loss)
}

/// Cross-entropy of the discovery head against `targets` (`B x N` rows,
/// one-hot for hardened labels).
pub fn discovery_ce_loss(model: &NcdwfModel, x: &Tensor, targets: &Tensor, unified: bool) -> Result<ModelLoss> {
    let mut g = Graph::new();
    let b = BoundModel::bind(model, &mut g);
    let xi = g.constant(x.clone());
    let z = b.fe.forward(&mut g, xi)?;
    let u = b.ulb.forward(&mut g, z)?;
    let loss = if unified {
        let l = b.lab.forward(&mut g, z)?;
        record_unified_ce(&mut g, l, u, targets, model.dims.labeled_classes)?
    } else {
        record_cross_entropy(&mut g, u, targets)?
    };
    b.finish(&g, loss)
}

fn record_unified_ce(g: &mut Graph, l: NodeId, u: NodeId, novel_targets: &Tensor, m: usize) -> Result<NodeId> {
    let both = g.concat(l, u)?;
    let n = novel_targets.cols();
    let mut t = Tensor::zeros(novel_targets.rows(), m + n);
    for r in 0..t.rows() {
        t.row_slice_mut(r)[m..].copy_from_slice(novel_targets.row_slice(r));
    }
    record_cross_entropy(g, both, &t)
}

fn record_fd(g: &mut Graph, z: NodeId, frozen: &Tensor, squared: bool) -> Result<NodeId> {
    let rows = frozen.rows();
    let zf = g.constant(frozen.clone());
    let diff = g.sub(z, zf)?;
    let sq = g.square(diff)?;
    let per_row = g.row_sums(sq)?;
    let per_row = if squared { per_row } else { g.sqrt(per_row)? };
    let total = g.sum(per_row)?;
    g.scale(total, 1.0 / rows as f64)
}

/// `mean_b ‖Φ_FE(x_b) - Φ_FE^lab(x_b)‖₂`, or its square per sample when
/// `squared`. Only the live extractor receives gradients; at zero
/// difference the norm's subgradient is taken as zero.
pub fn feature_distillation_loss(model: &NcdwfModel, x: &Tensor, squared: bool) -> Result<ModelLoss> {
    let frozen = model.extract_frozen(x)?;
    let mut g = Graph::new();
    let b = BoundModel::bind(model, &mut g);
    let xi = g.constant(x.clone());
    let z = b.fe.forward(&mut g, xi)?;
    let loss = record_fd(&mut g, z, &frozen, squared)?;
    b.finish(&g, loss)
}

/// Cross-entropy of the labeled head on pseudo-latents.
pub fn replay_loss(model: &NcdwfModel, pseudo: &PseudoLatentSet) -> Result<ModelLoss> {
    let mut g = Graph::new();
    let b = BoundModel::bind(model, &mut g);
    let zp = g.constant(pseudo.latents.clone());
    let lp = b.lab.forward(&mut g, zp)?;
    let loss = record_cross_entropy(&mut g, lp, &one_hot(&pseudo.labels, model.dims.labeled_classes, 0))?;
    b.finish(&g, loss)
}

fn check_finite_value(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: what })
    }
}

fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Supervised phase. Ends by freezing the extractor and labeled head and
/// storing per-class mean latents of `D_lab` under the frozen extractor.
pub fn train_phase1<D: LabeledSource + ?Sized>(
    model: &mut NcdwfModel,
    data: &D,
    cfg: &PhaseConfig,
    hooks: Hooks<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let m = model.dims.labeled_classes;
    if data.dim() != model.dims.input_dim {
        return Err(shape_err("train_phase1", "feature width does not match the model"));
    }
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    let mut seen = alloc::vec![false; m];
    for &y in &labels {
        if y >= m {
            return Err(Error::InvalidArgument(format!("label {y} outside 0..{m}")));
        }
        seen[y] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass(c));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_fe = cfg.optimizer()?;
    let mut opt_lab = cfg.optimizer()?;
    let start = hooks.clock.now_ms();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled(data.len(), &mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = supervised_loss(model, &x, &y)?;
            model.feature_extractor.apply_step(&mut opt_fe, &loss.extractor)?;
            model.labeled_head.apply_step(&mut opt_lab, &loss.labeled_head)?;
            total += loss.value;
            batches += 1;
        }
        let (lab_acc, unlab_acc) = hooks.monitor.metrics(model)?;
        log.records.push(EpochRecord {
            epoch,
            loss_ce: check_finite_value(total / batches as f64, "phase 1 loss")?,
            loss_mi: 0.0,
            loss_fd: 0.0,
            loss_replay: 0.0,
            loss_kci: 0.0,
            lab_acc,
            unlab_acc,
            wall_ms: hooks.clock.now_ms() - start,
        });
    }

    model.freeze_extractor_snapshot()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let latents = model.extract_frozen(&data.batch(&all))?;
    let store = compute_class_means(&latents, &labels, m)?;
    model.set_class_means(store)?;
    Ok(log)
}

/// `⌈f·B⌉`, kept below `B` so every batch has an unlabeled sample.
pub fn pseudo_count(batch_size: usize, pseudo_fraction: f64) -> usize {
    if pseudo_fraction <= 0.0 {
        return 0;
    }
    // The small slack keeps exact products such as 0.1 * 30 from rounding up.
    let k = libm::ceil(pseudo_fraction * batch_size as f64 - 1e-9) as usize;
    k.clamp(1, batch_size.saturating_sub(1).max(1))
}

/// Row indices into `D_unlab` and `D_pseudo` for one discovery batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoveryBatch {
    pub unlabeled: Vec<usize>,
    pub pseudo: Vec<usize>,
}

/// Takes the unlabeled part from `unlabeled` (a slice of the epoch's
/// shuffled order) and draws the pseudo part uniformly with replacement.
pub fn compose_discovery_batch<R: Rng + ?Sized>(
    unlabeled: &[usize],
    pseudo_len: usize,
    batch_size: usize,
    pseudo_fraction: f64,
    rng: &mut R,
) -> Result<DiscoveryBatch> {
    let k = pseudo_count(batch_size, pseudo_fraction);
    if k > 0 && pseudo_len == 0 {
        return Err(Error::InvalidArgument("pseudo_fraction > 0 but D_pseudo is empty".into()));
    }
    if unlabeled.is_empty() || unlabeled.len() + k > batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} unlabeled rows do not fit a batch of {batch_size} with {k} pseudo rows",
            unlabeled.len()
        )));
    }
    Ok(DiscoveryBatch {
        unlabeled: unlabeled.to_vec(),
        pseudo: (0..k).map(|_| rng.random_range(0..pseudo_len)).collect(),
    })
}

/// Splits one epoch over `D_unlab` into discovery batches.
pub fn plan_epoch<R: Rng + ?Sized>(
    unlabeled_len: usize,
    pseudo_len: usize,
    batch_size: usize,
    pseudo_fraction: f64,
    rng: &mut R,
) -> Result<Vec<DiscoveryBatch>> {
    let per = batch_size - pseudo_count(batch_size, pseudo_fraction);
    let order = shuffled(unlabeled_len, rng);
    order
        .chunks(per)
        .map(|c| compose_discovery_batch(c, pseudo_len, batch_size, pseudo_fraction, rng))
        .collect()
}

/// Loss components of one discovery batch, unweighted. Disabled components
/// are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiscoveryComponents {
    pub ce: f64,
    pub mi: f64,
    pub fd: f64,
    pub replay: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryGradients {
    pub components: DiscoveryComponents,
    pub extractor: Vec<Tensor>,
    pub labeled_head: Vec<Tensor>,
    pub unlabeled_head: Vec<Tensor>,
    pub variational: Vec<Tensor>,
    /// Live latents of the unlabeled part, for the identifier.
    pub unlabeled_latents: Tensor,
    /// Novel-class targets used for the cross-entropy, `B_u x N`.
    pub targets: Tensor,
}

/// Self-labels from unlabeled-head logits: hardened or soft plan columns.
pub fn sinkhorn_targets(u: &Tensor, soft: bool, cfg: SinkhornConfig) -> Result<Tensor> {
    let plan = solve_sinkhorn(&SelfLabelProblem::from_logits(u, cfg)?)?;
    if soft {
        Ok(soft_targets(&plan))
    } else {
        // Unconverged plans are still usable as training signal.
        Ok(one_hot(&harden_labels(&plan, true)?, u.cols(), 0))
    }
}

/// Total discovery loss and gradients for one batch without touching any
/// parameters.
pub fn discovery_gradients(
    model: &NcdwfModel,
    vhead: &VariationalHead,
    x_unlab: &Tensor,
    pseudo: Option<&PseudoLatentSet>,
    cfg: &PhaseConfig,
    opts: &DiscoveryOptions,
) -> Result<DiscoveryGradients> {
    let frozen = if cfg.enable_fd {
        Some(model.extract_frozen(x_unlab)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let b = BoundModel::bind(model, &mut g);
    let bv = BoundVariational::bind(vhead, &mut g, LeafKind::Parameter);
    let xi = g.constant(x_unlab.clone());
    let z = b.fe.forward(&mut g, xi)?;
    let u = b.ulb.forward(&mut g, z)?;
    let l = b.lab.forward(&mut g, z)?;
    let targets = sinkhorn_targets(g.value(u), opts.soft_targets, opts.sinkhorn)?;

    let mut c = DiscoveryComponents::default();
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let ce = if opts.unified_head {
        record_unified_ce(&mut g, l, u, &targets, model.dims.labeled_classes)?
    } else {
        record_cross_entropy(&mut g, u, &targets)?
    };
    c.ce = g.value(ce).get(0, 0);
    terms.push((ce, cfg.lambda_ce));
    if cfg.enable_mir {
        let l_val = if opts.mi_frozen_target {
            mi_target(model, x_unlab, g.value(z), true)?
        } else {
            g.value(l).clone()
        };
        let u_mi = if opts.mi_through_extractor {
            u
        } else {
            let zd = g.detach(z);
            b.ulb.forward(&mut g, zd)?
        };
        let mi = record_mi_loss(&mut g, &l_val, u_mi, &bv, opts.mi_sign)?;
        c.mi = g.value(mi).get(0, 0);
        terms.push((mi, cfg.lambda_mi));
    }
    if let Some(frozen) = &frozen {
        let fd = record_fd(&mut g, z, frozen, opts.squared_fd)?;
        c.fd = g.value(fd).get(0, 0);
        terms.push((fd, cfg.lambda_fd));
    }
    if cfg.enable_plr {
        if let Some(p) = pseudo.filter(|p| !p.is_empty()) {
            let zp = g.constant(p.latents.clone());
            let lp = b.lab.forward(&mut g, zp)?;
            let rp = record_cross_entropy(&mut g, lp, &one_hot(&p.labels, model.dims.labeled_classes, 0))?;
            c.replay = g.value(rp).get(0, 0);
            terms.push((rp, cfg.lambda_replay));
        }
    }
    let mut total: Option<NodeId> = None;
    for (node, w) in terms {
        let t = g.scale(node, w)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let total = total.expect("cross-entropy term always present");
    c.total = check_finite_value(g.value(total).get(0, 0), "discovery loss")?;
    let grads = g.backward(total)?;
    Ok(DiscoveryGradients {
        components: c,
        extractor: b.fe.grads(&grads),
        labeled_head: b.lab.grads(&grads),
        unlabeled_head: b.ulb.grads(&grads),
        variational: bv.grads(&grads),
        unlabeled_latents: g.value(z).clone(),
        targets,
    })
}

/// Everything phase 2 updates besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryState {
    pub vhead: VariationalHead,
    pub kci: KciNet,
    /// `D_pseudo` of the last completed epoch.
    pub pseudo: Option<PseudoLatentSet>,
}

struct Optimizers {
    fe: SgdMomentum,
    lab: SgdMomentum,
    ulb: SgdMomentum,
    vh: SgdMomentum,
    kci: SgdMomentum,
}

fn step_vhead(vhead: &mut VariationalHead, opt: &mut SgdMomentum, grads: &[Tensor]) -> Result<()> {
    opt.step(&mut vhead.params_mut(), grads)
}

fn kci_batch_step(kci: &mut KciNet, opt: &mut SgdMomentum, data: &KciDataset) -> Result<f64> {
    let mut g = Graph::new();
    let bound = kci.net.bind(&mut g, LeafKind::Parameter);
    let z = g.constant(data.latents.clone());
    let loss = record_kci_loss(&mut g, &bound, z, &data.labels)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).get(0, 0);
    opt.step(&mut kci.net.params_mut(), &bound.grads(&grads))?;
    Ok(value)
}

/// Sets `σ_ω` to its per-dimension minimizer on the batch `x`.
pub fn fit_sigma(model: &NcdwfModel, vhead: &mut VariationalHead, x: &Tensor, frozen_target: bool) -> Result<()> {
    let z = model.extract(x)?;
    let l = mi_target(model, x, &z, frozen_target)?;
    let mu = vhead.mean_net.forward(&model.unlabeled_head.forward(&z)?)?;
    let r = l.zip_map(&mu, "sigma fit", |a, b| a - b)?;
    let log_sigma: Vec<f64> = optimal_sigma(&r).iter().map(|s| libm::log(s.max(SIGMA_FLOOR))).collect();
    vhead.log_sigma = Tensor::row(&log_sigma);
    Ok(())
}

fn mi_target(model: &NcdwfModel, x: &Tensor, z: &Tensor, frozen: bool) -> Result<Tensor> {
    if frozen {
        let head = model.frozen_labeled_head().ok_or(Error::PhaseOneIncomplete("no frozen labeled head"))?;
        head.forward(&model.extract_frozen(x)?)
    } else {
        model.labeled_head.forward(z)
    }
}

fn clip_joint_norm(step: &mut DiscoveryGradients, limit: f64) {
    let groups = [&mut step.extractor, &mut step.labeled_head, &mut step.unlabeled_head, &mut step.variational];
    let sq: f64 = groups.iter().flat_map(|g| g.iter()).map(|t| crate::tensor::dot(t.data(), t.data())).sum();
    let norm = libm::sqrt(sq);
    if norm > limit {
        let k = limit / norm;
        for g in groups {
            for t in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

fn frozen_parts(model: &NcdwfModel) -> Result<(DenseNet, crate::pseudoreplay::ClassMeanStore)> {
    let head = model
        .frozen_labeled_head()
        .ok_or(Error::PhaseOneIncomplete("no frozen labeled head"))?
        .clone();
    let means = model
        .class_means()
        .ok_or(Error::PhaseOneIncomplete("no class means"))?
        .clone();
    Ok((head, means))
}

/// Discovery phase over `D_unlab` alone. Every epoch regenerates `D_pseudo`
/// through the frozen labeled head; every batch takes one optimizer step on
/// the weighted loss, then one identifier step on the batch's pseudo-latents
/// (label 0) and unlabeled latents (label 1).
pub fn train_phase2<D: FeatureSource + ?Sized>(
    model: &mut NcdwfModel,
    state: &mut DiscoveryState,
    data: &D,
    cfg: &PhaseConfig,
    opts: &DiscoveryOptions,
    hooks: Hooks<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    opts.inversion.validate()?;
    let (frozen_head, means) = frozen_parts(model)?;
    if model.frozen_extractor().is_none() {
        return Err(Error::PhaseOneIncomplete("no frozen extractor"));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("D_unlab is empty".into()));
    }
    if data.dim() != model.dims.input_dim {
        return Err(shape_err("train_phase2", "feature width does not match the model"));
    }
    if state.kci.net.input_dim() != model.dims.latent_dim {
        return Err(shape_err("train_phase2", "identifier input does not match the latent width"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizers {
        fe: cfg.optimizer()?,
        lab: cfg.optimizer()?,
        ulb: cfg.optimizer()?,
        vh: cfg.optimizer()?,
        kci: cfg.optimizer()?,
    };
    let start = hooks.clock.now_ms();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let pseudo = generate_pseudo_dataset(&frozen_head, &means, &opts.inversion, &mut rng)?;
        let plan = plan_epoch(data.len(), pseudo.len(), cfg.batch_size, cfg.pseudo_fraction, &mut rng)?;
        let mut sums = [0.0f64; 5];
        for batch in &plan {
            let x = data.batch(&batch.unlabeled);
            // Without a pseudo part the identifier still needs negatives.
            let kci_idx: Vec<usize> = if batch.pseudo.is_empty() {
                (0..batch.unlabeled.len()).map(|_| rng.random_range(0..pseudo.len())).collect()
            } else {
                batch.pseudo.clone()
            };
            let bp = PseudoLatentSet {
                latents: pseudo.latents.select_rows(&batch.pseudo),
                labels: batch.pseudo.iter().map(|&i| pseudo.labels[i]).collect(),
            };
            if cfg.enable_mir && opts.sigma_closed_form {
                fit_sigma(model, &mut state.vhead, &x, opts.mi_frozen_target)?;
            }
            let mut step = discovery_gradients(model, &state.vhead, &x, Some(&bp), cfg, opts)?;
            if let Some(limit) = opts.max_grad_norm {
                clip_joint_norm(&mut step, limit);
            }
            model.feature_extractor.apply_step(&mut opt.fe, &step.extractor)?;
            if !opts.freeze_labeled_head {
                model.labeled_head.apply_step(&mut opt.lab, &step.labeled_head)?;
            }
            model.unlabeled_head.apply_step(&mut opt.ulb, &step.unlabeled_head)?;
            if cfg.enable_mir {
                step_vhead(&mut state.vhead, &mut opt.vh, &step.variational)?;
            }
            let kci_data = KciDataset::new(&pseudo.latents.select_rows(&kci_idx), &step.unlabeled_latents)?;
            let kci_loss = kci_batch_step(&mut state.kci, &mut opt.kci, &kci_data)?;
            let c = step.components;
            for (s, v) in sums.iter_mut().zip([c.ce, c.mi, c.fd, c.replay, kci_loss]) {
                *s += v;
            }
        }
        let n = plan.len() as f64;
        let (lab_acc, unlab_acc) = hooks.monitor.metrics(model)?;
        log.records.push(EpochRecord {
            epoch,
            loss_ce: check_finite_value(sums[0] / n, "ce")?,
            loss_mi: check_finite_value(sums[1] / n, "mi")?,
            loss_fd: check_finite_value(sums[2] / n, "fd")?,
            loss_replay: check_finite_value(sums[3] / n, "replay")?,
            loss_kci: check_finite_value(sums[4] / n, "kci")?,
            lab_acc,
            unlab_acc,
            wall_ms: hooks.clock.now_ms() - start,
        });
        state.pseudo = Some(pseudo);
    }
    Ok(log)
}

/// Task-aware labeled accuracy of `model` on a labeled pool.
pub fn labeled_accuracy<D: LabeledSource + ?Sized>(model: &NcdwfModel, data: &D) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty pool".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let logits = model.predict_labeled(&data.batch(&all))?;
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row_slice(r)) == data.label(r))
        .count();
    Ok(correct as f64 / data.len() as f64)
}
