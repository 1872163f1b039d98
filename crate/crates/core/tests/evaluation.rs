mod common;

use common::{brute_force_assignment, permutations};
use ncdwf_core::data::LabeledPool;
use ncdwf_core::evaluation::{
    accuracy, assignment_score, clustering_accuracy, evaluate_task_aware, hungarian, ScoredTestSet,
};
use ncdwf_core::models::{KciNet, ModelDims, NcdwfModel};
use ncdwf_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_int_matrix<R: Rng>(k: usize, rng: &mut R) -> Tensor {
    let data = (0..k * k).map(|_| rng.random_range(0..20) as f64).collect();
    Tensor::from_vec(k, k, data).unwrap()
}

#[test]
fn hungarian_matches_brute_force_on_6_and_7() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in [6, 7] {
        for _ in 0..100 {
            let m = random_int_matrix(k, &mut rng);
            let a = hungarian(&m).unwrap();
            let mut seen = a.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..k).collect::<Vec<_>>());
            assert_eq!(assignment_score(&m, &a), brute_force_assignment(&m));
        }
    }
}

#[test]
fn hungarian_small_sizes_and_real_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for k in 1..=5 {
        for _ in 0..50 {
            let data = (0..k * k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = Tensor::from_vec(k, k, data).unwrap();
            let got = assignment_score(&m, &hungarian(&m).unwrap());
            assert!((got - brute_force_assignment(&m)).abs() < 1e-9);
        }
    }
}

#[test]
fn brute_force_oracle_enumerates_everything() {
    assert_eq!(permutations(6).len(), 720);
    assert_eq!(permutations(7).len(), 5040);
}

fn relabel(y: &[usize], perm: &[usize]) -> Vec<usize> {
    y.iter().map(|&v| perm[v]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn clustering_accuracy_is_relabeling_invariant(
        seed in any::<u64>(), k in 1usize..6, n in 1usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y_true: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let base = clustering_accuracy(&y_pred, &y_true).unwrap();
        let perms = permutations(k);
        let p = &perms[rng.random_range(0..perms.len())];
        let q = &perms[rng.random_range(0..perms.len())];
        prop_assert_eq!(clustering_accuracy(&relabel(&y_pred, p), &y_true).unwrap(), base);
        prop_assert_eq!(clustering_accuracy(&y_pred, &relabel(&y_true, q)).unwrap(), base);
        prop_assert!(base >= accuracy(&y_pred, &y_true).unwrap());
    }

    #[test]
    fn clustering_accuracy_matches_permutation_search(seed in any::<u64>(), n in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let y_true: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let best = permutations(k)
            .iter()
            .map(|p| y_pred.iter().zip(&y_true).filter(|(a, t)| p[**a] == **t).count())
            .max()
            .unwrap();
        prop_assert_eq!(clustering_accuracy(&y_pred, &y_true).unwrap(), best as f64 / n as f64);
    }
}

fn pool<R: Rng>(n: usize, d: usize, classes: usize, rng: &mut R) -> LabeledPool {
    let data = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    LabeledPool::new(Tensor::from_vec(n, d, data).unwrap(), labels).unwrap()
}

#[test]
fn routing_can_only_lose_and_is_monotone_in_tau() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = NcdwfModel::new(ModelDims::new(4, 6, 3, 3), &mut rng).unwrap();
        let kci = KciNet::with_hidden(6, 8, &mut rng);
        let (tl, tu) = (pool(30, 4, 3, &mut rng), pool(30, 4, 3, &mut rng));
        let aware = evaluate_task_aware(&model, &tl, &tu).unwrap();
        let scored = ScoredTestSet::new(&model, &kci, &tl, &tu).unwrap();
        let mut routed_lab_prev = 0;
        for tau in [0.01, 0.2, 0.4, 0.5, 0.6, 0.8, 0.99] {
            let r = scored.report(tau).unwrap();
            assert!(r.lab_acc <= aware.lab_acc + 1e-15);
            assert!(r.unlab_acc <= aware.unlab_acc + 1e-15);
            let routed_lab = scored
                .labeled_scores()
                .iter()
                .chain(scored.unlabeled_scores())
                .filter(|&&s| s <= tau)
                .count();
            assert!(routed_lab >= routed_lab_prev);
            routed_lab_prev = routed_lab;
        }
    }
}

#[test]
fn extreme_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = NcdwfModel::new(ModelDims::new(4, 6, 3, 3), &mut rng).unwrap();
    let kci = KciNet::with_hidden(6, 8, &mut rng);
    let (tl, tu) = (pool(30, 4, 3, &mut rng), pool(30, 4, 3, &mut rng));
    let aware = evaluate_task_aware(&model, &tl, &tu).unwrap();
    let scored = ScoredTestSet::new(&model, &kci, &tl, &tu).unwrap();
    let hi = scored.report(1.0 - 1e-15).unwrap();
    assert_eq!((hi.lab_acc, hi.unlab_acc), (aware.lab_acc, 0.0));
    let lo = scored.report(1e-300).unwrap();
    assert_eq!(lo.lab_acc, 0.0);
}

#[test]
fn perfect_heads_report_one() {
    // Identity extractor; each head reads off one-hot blocks of the input.
    use ncdwf_core::nn::{Activation, DenseNet, Layer};
    let d = 6;
    let id = DenseNet::from_layers(vec![Layer { weight: Tensor::identity(d), bias: Tensor::zeros(1, d) }], Activation::Relu).unwrap();
    let block = |off: usize| {
        let mut w = Tensor::zeros(3, d);
        for c in 0..3 {
            w.set(c, off + c, 1.0);
        }
        DenseNet::from_layers(vec![Layer { weight: w, bias: Tensor::zeros(1, 3) }], Activation::Identity).unwrap()
    };
    let mut dims = ModelDims::new(d, d, 3, 3);
    dims.extractor_hidden.clear();
    let model = NcdwfModel::from_parts(dims, id, block(0), block(3)).unwrap();
    let onehots = |off: usize| {
        let mut x = Tensor::zeros(9, d);
        for r in 0..9 {
            x.set(r, off + r % 3, 1.0);
        }
        LabeledPool::new(x, (0..9).map(|r| r % 3).collect()).unwrap()
    };
    let r = evaluate_task_aware(&model, &onehots(0), &onehots(3)).unwrap();
    assert_eq!((r.lab_acc, r.unlab_acc, r.all_acc), (1.0, 1.0, 1.0));
}

#[test]
fn untrained_model_is_near_chance() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = NcdwfModel::new(ModelDims::new(8, 16, 5, 5), &mut rng).unwrap();
        let (tl, tu) = (pool(200, 8, 5, &mut rng), pool(200, 8, 5, &mut rng));
        total += evaluate_task_aware(&model, &tl, &tu).unwrap().lab_acc;
    }
    let mean = total / 10.0;
    assert!((mean - 0.2).abs() <= 0.1, "mean {mean}");
}
