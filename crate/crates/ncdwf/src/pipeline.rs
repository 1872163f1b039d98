//! End-to-end experiment steps shared by the CLI and the test suites.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ncdwf_core::data::{generate_gaussian_mixture, split, LabeledPool, SplitDataset};
use ncdwf_core::evaluation::{
    evaluate_task_aware, task_aware_with_predictions, MetricsReport, SamplePrediction, ScoredTestSet,
};
use ncdwf_core::kci::roc_auc;
use ncdwf_core::models::{KciNet, NcdwfModel, VariationalHead};
use ncdwf_core::trainer::{train_phase1, train_phase2, Clock, DiscoveryState, Hooks, Monitor, NoMonitor, TrainLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, DataSource, RunConfig};
use crate::dataset::{load_csv, read_split, write_split};
use crate::error::{Error, Result};
use crate::report::{
    append_train_log, report_file_name, write_json, write_predictions, write_train_log, LogLine, Manifest, MANIFEST,
    PHASE1_CKPT, PHASE2_CKPT, PREDICTIONS, TRAIN_LOG,
};

/// Stream offsets so data, initial weights and the discovery-phase networks
/// draw from unrelated generators under one run seed.
const INIT_STREAM: u64 = 0x5eed_0001;
const DISCOVERY_STREAM: u64 = 0x5eed_0002;

struct StdClock(Instant);

impl Clock for StdClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Per-epoch test accuracy, task-aware.
struct TestMonitor<'a> {
    test_lab: &'a LabeledPool,
    test_unlab: &'a LabeledPool,
}

impl Monitor for TestMonitor<'_> {
    fn metrics(&mut self, model: &NcdwfModel) -> ncdwf_core::Result<(f64, f64)> {
        let (r, _) = task_aware_with_predictions(model, self.test_lab, self.test_unlab)?;
        Ok((r.lab_acc, r.unlab_acc))
    }
}

/// The split dataset described by `cfg`, built in memory.
pub fn build_dataset(cfg: &RunConfig) -> Result<SplitDataset> {
    let raw = match cfg.data.source {
        DataSource::Synthetic => generate_gaussian_mixture(&cfg.mixture_spec())?.0,
        DataSource::Csv => {
            let path = cfg.data.csv_path.as_ref().ok_or_else(|| Error::Config("data.csv_path is not set".into()))?;
            load_csv(path)?
        }
    };
    let spec = cfg.split_spec()?;
    if raw.num_classes() != spec.total_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the split declares {}",
            raw.num_classes(),
            spec.total_classes
        )));
    }
    Ok(split(&raw, spec, cfg.data.test_fraction)?)
}

pub fn init_model(cfg: &RunConfig, input_dim: usize) -> Result<NcdwfModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
    Ok(NcdwfModel::new(cfg.model_dims(input_dim), &mut rng)?)
}

pub fn init_discovery(cfg: &RunConfig) -> DiscoveryState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DISCOVERY_STREAM);
    let (m, n, h) = (cfg.split.labeled, cfg.split.unlabeled, cfg.model.latent_dim);
    DiscoveryState {
        vhead: VariationalHead::new(n, m, cfg.model.variational_hidden, &mut rng),
        kci: KciNet::with_hidden(h, cfg.model.kci_hidden, &mut rng),
        pseudo: None,
    }
}

fn tag(phase: u8, log: TrainLog) -> Vec<LogLine> {
    log.records.into_iter().map(|record| LogLine { phase, record }).collect()
}

fn run_with_hooks<F>(cfg: &RunConfig, data: &SplitDataset, f: F) -> Result<TrainLog>
where
    F: FnOnce(Hooks<'_>) -> ncdwf_core::Result<TrainLog>,
{
    let clock = StdClock(Instant::now());
    let log = if cfg.eval.monitor {
        let mut mon = TestMonitor {
            test_lab: &data.test_lab,
            test_unlab: &data.test_unlab,
        };
        f(Hooks { clock: &clock, monitor: &mut mon })
    } else {
        f(Hooks { clock: &clock, monitor: &mut NoMonitor })
    }?;
    Ok(log)
}

pub fn run_phase1(cfg: &RunConfig, data: &SplitDataset) -> Result<(NcdwfModel, Vec<LogLine>)> {
    let mut model = init_model(cfg, data.dim())?;
    let pc = cfg.phase1_config();
    let log = run_with_hooks(cfg, data, |hooks| train_phase1(&mut model, &data.train_lab, &pc, hooks))?;
    Ok((model, tag(1, log)))
}

pub fn run_phase2(cfg: &RunConfig, model: &mut NcdwfModel, data: &SplitDataset) -> Result<(DiscoveryState, Vec<LogLine>)> {
    let mut state = init_discovery(cfg);
    let (pc, opts) = (cfg.phase2_config(), cfg.discovery_options());
    let log = run_with_hooks(cfg, data, |hooks| {
        train_phase2(model, &mut state, &data.train_unlab, &pc, &opts, hooks)
    })?;
    Ok((state, tag(2, log)))
}

/// Both phases in memory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub phase1: NcdwfModel,
    pub phase1_report: MetricsReport,
    pub model: NcdwfModel,
    pub state: DiscoveryState,
    pub log: Vec<LogLine>,
}

impl Experiment {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            seed,
            model: self.model.clone(),
            vhead: Some(self.state.vhead.clone()),
            kci: Some(self.state.kci.clone()),
        }
    }
}

pub fn run_experiment(cfg: &RunConfig, data: &SplitDataset) -> Result<Experiment> {
    let (phase1, mut log) = run_phase1(cfg, data)?;
    let phase1_report = evaluate_task_aware(&phase1, &data.test_lab, &data.test_unlab)?;
    let mut model = phase1.clone();
    let (state, log2) = run_phase2(cfg, &mut model, data)?;
    log.extend(log2);
    Ok(Experiment {
        phase1,
        phase1_report,
        model,
        state,
        log,
    })
}

/// Everything `eval` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub task_aware: MetricsReport,
    pub generalized: Vec<MetricsReport>,
    /// Identifier ROC-AUC, labeled test latents as negatives.
    pub kci_auc: Option<f64>,
    #[serde(skip)]
    pub predictions: Vec<SamplePrediction>,
}

pub fn evaluate(cfg: &RunConfig, model: &NcdwfModel, kci: Option<&KciNet>, data: &SplitDataset) -> Result<Evaluation> {
    let (task_aware, ta_rows) = task_aware_with_predictions(model, &data.test_lab, &data.test_unlab)?;
    let Some(kci) = kci else {
        return Ok(Evaluation {
            task_aware,
            generalized: Vec::new(),
            kci_auc: None,
            predictions: ta_rows,
        });
    };
    let scored = ScoredTestSet::new(model, kci, &data.test_lab, &data.test_unlab)?;
    let generalized = cfg.eval.taus.iter().map(|&t| scored.report(t)).collect::<ncdwf_core::Result<Vec<_>>>()?;
    Ok(Evaluation {
        task_aware,
        generalized,
        kci_auc: Some(roc_auc(scored.labeled_scores(), scored.unlabeled_scores())),
        predictions: scored.predictions(cfg.eval.tau),
    })
}

/// Which phases `train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSelect {
    One,
    Two,
    All,
}

impl PhaseSelect {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("--phase must be 1, 2 or all, got {other:?}"))),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_manifest(command: &str, cfg: &RunConfig, files: &[PathBuf]) -> Result<PathBuf> {
    let path = cfg.out.join(MANIFEST);
    write_json(&path, &Manifest::new(command, cfg, files)?)?;
    Ok(path)
}

/// Writes the four split CSVs and a manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    ensure_dir(&cfg.out)?;
    let files = write_split(&cfg.data_dir(), &data)?;
    write_manifest("generate", cfg, &files)?;
    info!("wrote {} dataset files to {}", files.len(), cfg.data_dir().display());
    Ok(files)
}

fn load_data(cfg: &RunConfig) -> Result<SplitDataset> {
    let dir = cfg.data_dir();
    if !dir.join(crate::dataset::TRAIN_LAB).exists() {
        return Err(Error::Config(format!(
            "no dataset in {} (run `generate` first or set data.dir)",
            dir.display()
        )));
    }
    read_split(&dir, cfg.split_spec()?)
}

fn dataset_files(cfg: &RunConfig) -> Vec<PathBuf> {
    crate::dataset::SPLIT_FILES.iter().map(|f| cfg.data_dir().join(f)).collect()
}

/// Trains from the dataset in the data directory; returns the written files.
pub fn cmd_train(cfg: &RunConfig, phase: PhaseSelect) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    ensure_dir(&cfg.out)?;
    let (p1, p2, log) = (cfg.out.join(PHASE1_CKPT), cfg.out.join(PHASE2_CKPT), cfg.out.join(TRAIN_LOG));
    let mut files = dataset_files(cfg);
    let mut model = if phase == PhaseSelect::Two {
        let ckpt = Checkpoint::load(&p1)?;
        check_dims(cfg, &ckpt.model, data.dim())?;
        ckpt.model
    } else {
        let (model, lines) = run_phase1(cfg, &data)?;
        Checkpoint {
            seed: cfg.seed,
            model: model.clone(),
            vhead: None,
            kci: None,
        }
        .save(&p1)?;
        write_train_log(&log, &lines)?;
        info!("phase 1 done: {} epochs", lines.len());
        model
    };
    files.push(p1);
    if phase != PhaseSelect::One {
        let (state, lines) = run_phase2(cfg, &mut model, &data)?;
        Checkpoint {
            seed: cfg.seed,
            model,
            vhead: Some(state.vhead),
            kci: Some(state.kci),
        }
        .save(&p2)?;
        append_train_log(&log, &lines)?;
        info!("phase 2 done: {} epochs", lines.len());
        files.push(p2);
    }
    files.push(log);
    write_manifest("train", cfg, &files)?;
    Ok(files)
}

fn check_dims(cfg: &RunConfig, model: &NcdwfModel, input_dim: usize) -> Result<()> {
    let want = cfg.model_dims(input_dim);
    if model.dims != want {
        return Err(Error::Dimension(format!(
            "checkpoint model {:?} does not match config and dataset {:?}",
            model.dims, want
        )));
    }
    Ok(())
}

/// The checkpoint `eval` uses when none is given: phase 2 if present.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    let p2 = cfg.out.join(PHASE2_CKPT);
    if p2.exists() {
        p2
    } else {
        cfg.out.join(PHASE1_CKPT)
    }
}

pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in std::iter::once(&ev.task_aware).chain(&ev.generalized) {
        let path = dir.join(report_file_name(r));
        write_json(&path, r)?;
        files.push(path);
    }
    let pred = dir.join(PREDICTIONS);
    write_predictions(&pred, &ev.predictions)?;
    files.push(pred);
    Ok(files)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_dims(cfg, &ckpt.model, data.dim())?;
    let ev = evaluate(cfg, &ckpt.model, ckpt.kci.as_ref(), &data)?;
    ensure_dir(&cfg.out)?;
    let mut files = dataset_files(cfg);
    files.push(checkpoint.to_path_buf());
    files.extend(write_evaluation(&cfg.out, &ev)?);
    write_manifest("eval", cfg, &files)?;
    Ok(ev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSweep {
    pub taus: Vec<f64>,
    pub lab_acc: Vec<f64>,
    pub unlab_acc: Vec<f64>,
    pub all_acc: Vec<f64>,
    pub task_aware: MetricsReport,
    pub kci_auc: f64,
}

impl TauSweep {
    pub fn from_evaluation(ev: &Evaluation) -> Result<Self> {
        let auc = ev
            .kci_auc
            .ok_or_else(|| Error::Config("the checkpoint has no identifier; run phase 2 first".into()))?;
        Ok(Self {
            taus: ev.generalized.iter().filter_map(|r| r.tau).collect(),
            lab_acc: ev.generalized.iter().map(|r| r.lab_acc).collect(),
            unlab_acc: ev.generalized.iter().map(|r| r.unlab_acc).collect(),
            all_acc: ev.generalized.iter().map(|r| r.all_acc).collect(),
            task_aware: ev.task_aware.clone(),
            kci_auc: auc,
        })
    }
}

pub const TAU_SWEEP_REPORT: &str = "report_tau_sweep.json";

pub fn cmd_sweep_tau(cfg: &RunConfig, checkpoint: &Path) -> Result<TauSweep> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_dims(cfg, &ckpt.model, data.dim())?;
    let ev = evaluate(cfg, &ckpt.model, ckpt.kci.as_ref(), &data)?;
    let sweep = TauSweep::from_evaluation(&ev)?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join(TAU_SWEEP_REPORT);
    write_json(&path, &sweep)?;
    let mut files = dataset_files(cfg);
    files.push(checkpoint.to_path_buf());
    files.push(path);
    write_manifest("sweep-tau", cfg, &files)?;
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub task_aware: MetricsReport,
    pub generalized: MetricsReport,
    pub kci_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub phase1: MetricsReport,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_REPORT: &str = "report_ablation.json";

/// Trains the full method and each single-component ablation on the same
/// data and phase-1 model, one subdirectory of `out` per variant.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    ensure_dir(&cfg.out)?;
    let mut files = write_split(&cfg.data_dir(), &data)?;
    let (phase1, lines1) = run_phase1(cfg, &data)?;
    let phase1_report = evaluate_task_aware(&phase1, &data.test_lab, &data.test_unlab)?;
    let variants = std::iter::once(("full", None)).chain(Ablation::ALL.iter().map(|a| (a.name(), Some(*a))));
    let mut rows = Vec::new();
    for (name, ablation) in variants {
        let mut vcfg = cfg.clone();
        if let Some(a) = ablation {
            vcfg.apply_ablation(a);
        }
        let dir = cfg.out.join(name);
        ensure_dir(&dir)?;
        let mut model = phase1.clone();
        let (state, lines2) = run_phase2(&vcfg, &mut model, &data)?;
        let ckpt = Checkpoint {
            seed: cfg.seed,
            model,
            vhead: Some(state.vhead),
            kci: Some(state.kci),
        };
        ckpt.save(&dir.join(PHASE2_CKPT))?;
        let log: Vec<LogLine> = lines1.iter().copied().chain(lines2).collect();
        write_train_log(&dir.join(TRAIN_LOG), &log)?;
        let ev = evaluate(&vcfg, &ckpt.model, ckpt.kci.as_ref(), &data)?;
        files.extend(write_evaluation(&dir, &ev)?);
        let generalized = ncdwf_core::evaluation::evaluate_generalized(
            &ckpt.model,
            ckpt.kci.as_ref().expect("phase 2 trains an identifier"),
            cfg.eval.tau,
            &data.test_lab,
            &data.test_unlab,
        )?;
        info!(
            "{name}: lab {:.3} unlab {:.3}",
            ev.task_aware.lab_acc, ev.task_aware.unlab_acc
        );
        rows.push(AblationRow {
            variant: name.to_string(),
            task_aware: ev.task_aware,
            generalized,
            kci_auc: ev.kci_auc.unwrap_or(f64::NAN),
        });
    }
    let report = AblationReport {
        seed: cfg.seed,
        phase1: phase1_report,
        rows,
    };
    let path = cfg.out.join(ABLATION_REPORT);
    write_json(&path, &report)?;
    files.push(path);
    write_manifest("ablate", cfg, &files)?;
    Ok(report)
}
