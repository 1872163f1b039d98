//! Finite-difference checks of every training loss. Each check returns the
//! worst relative error over its variants for one seeded configuration, or
//! infinity when a gradient that must vanish does not.

use super::{flatten, numeric_gradient, random_tensor, relative_error};
use ncdwf_core::kci::{kci_loss, KciDataset};
use ncdwf_core::miregularizer::{mi_loss_signed, MiBatch, MiSign};
use ncdwf_core::models::{KciNet, ModelDims, NcdwfModel, VariationalHead};
use ncdwf_core::nn::DenseNet;
use ncdwf_core::pseudoreplay::PseudoLatentSet;
use ncdwf_core::selflabel::SinkhornConfig;
use ncdwf_core::trainer::{
    discovery_ce_loss, feature_distillation_loss, replay_loss, sinkhorn_targets, supervised_loss,
};
use ncdwf_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 100;
pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

/// Biases start at zero, which puts ReLU inputs exactly on the kink whenever
/// a whole row upstream is inactive. Finite differences are meaningless there.
fn jitter_biases(net: &mut DenseNet, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        layer.bias = random_tensor(1, layer.bias.cols(), 0.3, rng);
    }
}

struct Case {
    model: NcdwfModel,
    x: Tensor,
    rng: ChaCha8Rng,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..6);
    let h = rng.random_range(2..6);
    let mut dims = ModelDims::new(d, h, rng.random_range(2..5), rng.random_range(2..5));
    dims.extractor_hidden = vec![rng.random_range(2..6)];
    if rng.random_bool(0.5) {
        dims.head_hidden = vec![rng.random_range(2..5)];
    }
    let mut model = NcdwfModel::new(dims, &mut rng).unwrap();
    jitter_biases(&mut model.feature_extractor, &mut rng);
    jitter_biases(&mut model.labeled_head, &mut rng);
    jitter_biases(&mut model.unlabeled_head, &mut rng);
    let b = rng.random_range(3..7);
    let x = random_tensor(b, d, 2.0, &mut rng);
    Case { model, x, rng }
}

fn all_params(m: &mut NcdwfModel) -> Vec<&mut Tensor> {
    let mut v = m.feature_extractor.params_mut();
    v.extend(m.labeled_head.params_mut());
    v.extend(m.unlabeled_head.params_mut());
    v
}

fn fe_params(m: &mut NcdwfModel) -> Vec<&mut Tensor> {
    m.feature_extractor.params_mut()
}

fn lab_params(m: &mut NcdwfModel) -> Vec<&mut Tensor> {
    m.labeled_head.params_mut()
}

fn vhead_params(v: &mut (VariationalHead, MiBatch)) -> Vec<&mut Tensor> {
    v.0.params_mut()
}

fn u_param(v: &mut (VariationalHead, MiBatch)) -> Vec<&mut Tensor> {
    vec![&mut v.1.unlabeled_logits]
}

fn kci_params(k: &mut (KciNet, KciDataset)) -> Vec<&mut Tensor> {
    k.0.net.params_mut()
}

fn model_grads(l: &ncdwf_core::trainer::ModelLoss) -> Vec<f64> {
    let mut v = flatten(&l.extractor);
    v.extend(flatten(&l.labeled_head));
    v.extend(flatten(&l.unlabeled_head));
    v
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|&g| g == 0.0)
}

pub fn phase_one_ce(seed: u64) -> f64 {
    let mut c = case(seed);
    let m = c.model.dims.labeled_classes;
    let y: Vec<usize> = (0..c.x.rows()).map(|_| c.rng.random_range(0..m)).collect();
    let analytic = model_grads(&supervised_loss(&c.model, &c.x, &y).unwrap());
    let x = c.x.clone();
    let numeric = numeric_gradient(&mut c.model, all_params, |m| supervised_loss(m, &x, &y).unwrap().value, STEP);
    relative_error(&analytic, &numeric)
}

/// Hard targets on most seeds, soft on every third; both head layouts.
pub fn self_label_ce(seed: u64) -> f64 {
    let mut c = case(seed);
    let u = c.model.predict_unlabeled(&c.x).unwrap();
    let targets = sinkhorn_targets(&u, seed % 3 == 0, SinkhornConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    for unified in [false, true] {
        let analytic = model_grads(&discovery_ce_loss(&c.model, &c.x, &targets, unified).unwrap());
        let x = c.x.clone();
        let numeric = numeric_gradient(
            &mut c.model,
            all_params,
            |m| discovery_ce_loss(m, &x, &targets, unified).unwrap().value,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Variational head parameters and the unlabeled-head output `u`.
pub fn mutual_information(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, n) = (rng.random_range(2..7), rng.random_range(2..5), rng.random_range(2..5));
    let mut head = VariationalHead::new(n, m, rng.random_range(2..6), &mut rng);
    jitter_biases(&mut head.mean_net, &mut rng);
    head.log_sigma = random_tensor(1, m, 0.5, &mut rng);
    let batch = MiBatch::new(random_tensor(b, m, 2.0, &mut rng), random_tensor(b, n, 2.0, &mut rng)).unwrap();
    let sign = if seed % 4 == 0 { MiSign::Printed } else { MiSign::NegLogLikelihood };
    let loss = mi_loss_signed(&batch, &head, sign).unwrap();
    if !all_zero(loss.labeled_grad.data()) {
        return f64::INFINITY;
    }
    let mut state = (head, batch);
    let f = |s: &(VariationalHead, MiBatch)| mi_loss_signed(&s.1, &s.0, sign).unwrap().value;
    let head_err = relative_error(&flatten(&loss.head_grads), &numeric_gradient(&mut state, vhead_params, f, STEP));
    let u_err = relative_error(loss.unlabeled_grad.data(), &numeric_gradient(&mut state, u_param, f, STEP));
    head_err.max(u_err)
}

/// Norm and squared-norm forms, with the live extractor moved off the
/// snapshot so the norm is smooth.
pub fn feature_distillation(seed: u64) -> f64 {
    let mut c = case(seed);
    c.model.freeze_extractor_snapshot().unwrap();
    for t in c.model.feature_extractor.params_mut() {
        let noise = random_tensor(t.rows(), t.cols(), 0.3, &mut c.rng);
        t.add_scaled(&noise, 1.0).unwrap();
    }
    let mut worst: f64 = 0.0;
    for squared in [false, true] {
        let loss = feature_distillation_loss(&c.model, &c.x, squared).unwrap();
        if !all_zero(&flatten(&loss.labeled_head)) || !all_zero(&flatten(&loss.unlabeled_head)) {
            return f64::INFINITY;
        }
        let x = c.x.clone();
        let numeric = numeric_gradient(
            &mut c.model,
            fe_params,
            |m| feature_distillation_loss(m, &x, squared).unwrap().value,
            STEP,
        );
        worst = worst.max(relative_error(&flatten(&loss.extractor), &numeric));
    }
    worst
}

pub fn known_class_identifier(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(2..6);
    let mut kci = KciNet::with_hidden(h, rng.random_range(2..6), &mut rng);
    jitter_biases(&mut kci.net, &mut rng);
    let data = KciDataset::new(
        &random_tensor(rng.random_range(1..5), h, 2.0, &mut rng),
        &random_tensor(rng.random_range(1..5), h, 2.0, &mut rng),
    )
    .unwrap();
    let analytic = flatten(&kci_loss(&kci, &data).unwrap().grads);
    let mut state = (kci, data);
    let numeric = numeric_gradient(&mut state, kci_params, |s| kci_loss(&s.0, &s.1).unwrap().value, STEP);
    relative_error(&analytic, &numeric)
}

pub fn pseudo_latent_replay(seed: u64) -> f64 {
    let mut c = case(seed);
    let (m, h) = (c.model.dims.labeled_classes, c.model.dims.latent_dim);
    let k = c.rng.random_range(1..6);
    let pseudo = PseudoLatentSet {
        latents: random_tensor(k, h, 2.0, &mut c.rng),
        labels: (0..k).map(|_| c.rng.random_range(0..m)).collect(),
    };
    let loss = replay_loss(&c.model, &pseudo).unwrap();
    if !all_zero(&flatten(&loss.extractor)) {
        return f64::INFINITY;
    }
    let numeric = numeric_gradient(&mut c.model, lab_params, |m| replay_loss(m, &pseudo).unwrap().value, STEP);
    relative_error(&flatten(&loss.labeled_head), &numeric)
}

pub const LOSSES: [(&str, fn(u64) -> f64); 6] = [
    ("phase-1 CE", phase_one_ce),
    ("self-label CE", self_label_ce),
    ("MI", mutual_information),
    ("FD", feature_distillation),
    ("KCI", known_class_identifier),
    ("replay", pseudo_latent_replay),
];

/// Worst error and the seed it came from.
pub fn worst_over_configs(check: fn(u64) -> f64) -> (f64, u64) {
    (0..CONFIGS).map(|s| (check(s), s)).fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}
