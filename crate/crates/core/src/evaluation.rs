//! Accuracy metrics: plain accuracy on labeled classes, clustering accuracy
//! under the optimal label matching on novel classes, and the Lab / Unlab /
//! All report under task-aware or identifier-routed inference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabeledPool;
use crate::error::{shape_err, Error, Result};
use crate::kci::{validate_tau, Route};
use crate::models::{KciNet, NcdwfModel};
use crate::tensor::Tensor;

/// Assignment maximizing the total selected score of a square matrix.
/// `result[row] = column`.
pub fn hungarian(scores: &Tensor) -> Result<Vec<usize>> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(shape_err("hungarian", format!("{}x{} is not square", n, scores.cols())));
    }
    scores.check_finite("hungarian")?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let top = scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Minimize `top - score` with the potential-based shortest augmenting
    // path method; 1-based indices, column 0 is the virtual start.
    let cost = |i: usize, j: usize| top - scores.get(i - 1, j - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

pub fn assignment_score(scores: &Tensor, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| scores.get(i, j)).sum()
}

/// Square contingency table: `counts[p][t]` samples predicted `p` with true
/// label `t`, over dense indices of the distinct labels seen.
#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub counts: Tensor,
    pub total: usize,
}

impl Contingency {
    pub fn build(y_pred: &[usize], y_true: &[usize]) -> Result<Self> {
        if y_pred.len() != y_true.len() {
            return Err(shape_err(
                "contingency",
                format!("{} predictions, {} labels", y_pred.len(), y_true.len()),
            ));
        }
        let dense = |ys: &[usize]| {
            let mut map = BTreeMap::new();
            for &y in ys {
                let next = map.len();
                map.entry(y).or_insert(next);
            }
            map
        };
        let (pm, tm) = (dense(y_pred), dense(y_true));
        let k = pm.len().max(tm.len());
        let mut counts = Tensor::zeros(k, k);
        for (p, t) in y_pred.iter().zip(y_true) {
            let (i, j) = (pm[p], tm[t]);
            counts.set(i, j, counts.get(i, j) + 1.0);
        }
        Ok(Self {
            counts,
            total: y_pred.len(),
        })
    }

    /// Samples on the diagonal of the best matching.
    pub fn matched(&self) -> Result<usize> {
        if self.total == 0 {
            return Ok(0);
        }
        let a = hungarian(&self.counts)?;
        Ok(assignment_score(&self.counts, &a) as usize)
    }
}

/// Fraction of samples correct under the best one-to-one relabeling of the
/// predicted clusters.
pub fn clustering_accuracy(y_pred: &[usize], y_true: &[usize]) -> Result<f64> {
    if y_pred.is_empty() {
        return Err(Error::InvalidArgument("clustering accuracy of an empty set".into()));
    }
    let c = Contingency::build(y_pred, y_true)?;
    Ok(c.matched()? as f64 / y_true.len() as f64)
}

pub fn accuracy(y_pred: &[usize], y_true: &[usize]) -> Result<f64> {
    if y_pred.len() != y_true.len() || y_pred.is_empty() {
        return Err(shape_err("accuracy", "non-empty equal-length inputs required"));
    }
    let hits = y_pred.iter().zip(y_true).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y_true.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Protocol {
    TaskAware,
    Generalized,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub tau: Option<f64>,
    pub lab_acc: f64,
    pub unlab_acc: f64,
    /// Unweighted mean of `lab_acc` and `unlab_acc`.
    pub all_acc: f64,
}

impl MetricsReport {
    pub fn new(protocol: Protocol, tau: Option<f64>, lab_acc: f64, unlab_acc: f64) -> Self {
        Self {
            protocol,
            tau,
            lab_acc,
            unlab_acc,
            all_acc: (lab_acc + unlab_acc) / 2.0,
        }
    }
}

/// One row of the per-sample export.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplePrediction {
    pub sample_id: usize,
    /// Global class id: labeled classes `0..M`, novel classes `M..M+N`.
    pub true_label: usize,
    pub route: Route,
    /// Labeled route: labeled-head argmax. Unlabeled route: `M` plus the
    /// unlabeled-head argmax (a cluster id, not matched to true classes).
    pub pred_label: usize,
    pub kci_score: Option<f64>,
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|r| t.argmax_row(r)).collect()
}

fn nonempty(pool: &LabeledPool, what: &'static str) -> Result<()> {
    if pool.is_empty() {
        Err(Error::InvalidArgument(format!("{what} test set is empty")))
    } else {
        Ok(())
    }
}

/// Head chosen by the sample's known origin.
pub fn evaluate_task_aware(model: &NcdwfModel, test_lab: &LabeledPool, test_unlab: &LabeledPool) -> Result<MetricsReport> {
    let (report, _) = task_aware_with_predictions(model, test_lab, test_unlab)?;
    Ok(report)
}

pub fn task_aware_with_predictions(
    model: &NcdwfModel,
    test_lab: &LabeledPool,
    test_unlab: &LabeledPool,
) -> Result<(MetricsReport, Vec<SamplePrediction>)> {
    nonempty(test_lab, "labeled")?;
    nonempty(test_unlab, "unlabeled")?;
    let m = model.dims.labeled_classes;
    let lab_pred = argmax_rows(&model.predict_labeled(test_lab.features())?);
    let unl_pred = argmax_rows(&model.predict_unlabeled(test_unlab.features())?);
    let lab_acc = accuracy(&lab_pred, test_lab.labels())?;
    let unlab_acc = clustering_accuracy(&unl_pred, test_unlab.labels())?;
    let mut rows = Vec::with_capacity(lab_pred.len() + unl_pred.len());
    for (i, (&p, &t)) in lab_pred.iter().zip(test_lab.labels()).enumerate() {
        rows.push(SamplePrediction {
            sample_id: i,
            true_label: t,
            route: Route::LabeledHead,
            pred_label: p,
            kci_score: None,
        });
    }
    let off = lab_pred.len();
    for (i, (&p, &t)) in unl_pred.iter().zip(test_unlab.labels()).enumerate() {
        rows.push(SamplePrediction {
            sample_id: off + i,
            true_label: m + t,
            route: Route::UnlabeledHead,
            pred_label: m + p,
            kci_score: None,
        });
    }
    Ok((MetricsReport::new(Protocol::TaskAware, None, lab_acc, unlab_acc), rows))
}

/// Head chosen by the identifier at threshold `tau`. A sample sent to the
/// wrong head counts as an error; the novel-class clustering accuracy is
/// matched over the correctly routed samples but divided by the size of the
/// whole novel test set.
pub fn evaluate_generalized(
    model: &NcdwfModel,
    kci: &KciNet,
    tau: f64,
    test_lab: &LabeledPool,
    test_unlab: &LabeledPool,
) -> Result<MetricsReport> {
    Ok(generalized_with_predictions(model, kci, tau, test_lab, test_unlab)?.0)
}

/// Scores and head outputs for the test pools, computed once and reusable
/// across thresholds.
#[derive(Debug, Clone)]
pub struct ScoredTestSet {
    labeled_classes: usize,
    lab_scores: Vec<f64>,
    /// Labeled-head and unlabeled-head argmax for the labeled test pool.
    lab_pred: (Vec<usize>, Vec<usize>),
    lab_true: Vec<usize>,
    unl_scores: Vec<f64>,
    /// Same pair for the novel test pool.
    unl_pred: (Vec<usize>, Vec<usize>),
    unl_true: Vec<usize>,
}

impl ScoredTestSet {
    pub fn new(model: &NcdwfModel, kci: &KciNet, test_lab: &LabeledPool, test_unlab: &LabeledPool) -> Result<Self> {
        nonempty(test_lab, "labeled")?;
        nonempty(test_unlab, "unlabeled")?;
        let score_pool = |pool: &LabeledPool| -> Result<(Vec<f64>, (Vec<usize>, Vec<usize>))> {
            let z = model.extract(pool.features())?;
            let scores = kci.scores(&z)?;
            let lab = argmax_rows(&model.labeled_head.forward(&z)?);
            let unl = argmax_rows(&model.unlabeled_head.forward(&z)?);
            Ok((scores, (lab, unl)))
        };
        let (lab_scores, lab_pred) = score_pool(test_lab)?;
        let (unl_scores, unl_pred) = score_pool(test_unlab)?;
        Ok(Self {
            labeled_classes: model.dims.labeled_classes,
            lab_scores,
            lab_pred,
            lab_true: test_lab.labels().to_vec(),
            unl_scores,
            unl_pred,
            unl_true: test_unlab.labels().to_vec(),
        })
    }

    pub fn labeled_scores(&self) -> &[f64] {
        &self.lab_scores
    }

    pub fn unlabeled_scores(&self) -> &[f64] {
        &self.unl_scores
    }

    pub fn report(&self, tau: f64) -> Result<MetricsReport> {
        validate_tau(tau)?;
        let lab_hits = self
            .lab_scores
            .iter()
            .zip(self.lab_pred.0.iter().zip(&self.lab_true))
            .filter(|(&s, (p, t))| s <= tau && p == t)
            .count();
        let lab_acc = lab_hits as f64 / self.lab_true.len() as f64;
        let (routed_pred, routed_true): (Vec<usize>, Vec<usize>) = self
            .unl_scores
            .iter()
            .zip(self.unl_pred.1.iter().zip(&self.unl_true))
            .filter(|(&s, _)| s > tau)
            .map(|(_, (&p, &t))| (p, t))
            .unzip();
        let matched = Contingency::build(&routed_pred, &routed_true)?.matched()?;
        let unlab_acc = matched as f64 / self.unl_true.len() as f64;
        Ok(MetricsReport::new(Protocol::Generalized, Some(tau), lab_acc, unlab_acc))
    }

    pub fn predictions(&self, tau: f64) -> Vec<SamplePrediction> {
        let m = self.labeled_classes;
        let pools = [
            (&self.lab_scores, &self.lab_pred, &self.lab_true, 0),
            (&self.unl_scores, &self.unl_pred, &self.unl_true, m),
        ];
        let mut rows = Vec::with_capacity(self.lab_true.len() + self.unl_true.len());
        for (scores, (lab, unl), truth, label_offset) in pools {
            for (i, &s) in scores.iter().enumerate() {
                let route = crate::kci::route_for_score(s, tau).route;
                let pred_label = match route {
                    Route::LabeledHead => lab[i],
                    Route::UnlabeledHead => m + unl[i],
                };
                rows.push(SamplePrediction {
                    sample_id: rows.len(),
                    true_label: label_offset + truth[i],
                    route,
                    pred_label,
                    kci_score: Some(s),
                });
            }
        }
        rows
    }
}

pub fn generalized_with_predictions(
    model: &NcdwfModel,
    kci: &KciNet,
    tau: f64,
    test_lab: &LabeledPool,
    test_unlab: &LabeledPool,
) -> Result<(MetricsReport, Vec<SamplePrediction>)> {
    let scored = ScoredTestSet::new(model, kci, test_lab, test_unlab)?;
    Ok((scored.report(tau)?, scored.predictions(tau)))
}
