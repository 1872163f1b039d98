//! Versioned text checkpoints.
//!
//! ```text
//! NCDWF-CKPT v1
//! M 5
//! N 5
//! d 64
//! h 64
//! seed 7
//! extractor_hidden 64
//! head_hidden
//! tensor feature_extractor.0.weight 64 64
//! <one line per row, 17 significant digits>
//! ...
//! end
//! ```
//!
//! Networks are stored as `<net>.<layer>.weight` / `<net>.<layer>.bias`
//! tensors; layer counts and hidden widths are recovered from the shapes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ncdwf_core::models::{KciNet, ModelDims, NcdwfModel, VariationalHead};
use ncdwf_core::nn::{Activation, DenseNet, Layer};
use ncdwf_core::pseudoreplay::ClassMeanStore;
use ncdwf_core::Tensor;

use crate::error::{Error, Result};

pub const HEADER: &str = "NCDWF-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub model: NcdwfModel,
    pub vhead: Option<VariationalHead>,
    pub kci: Option<KciNet>,
}

fn widths(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let _ = writeln!(out, "tensor {name} {} {}", t.rows(), t.cols());
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

fn write_net(out: &mut String, name: &str, net: &DenseNet) {
    for (i, layer) in net.layers().iter().enumerate() {
        write_tensor(out, &format!("{name}.{i}.weight"), &layer.weight);
        write_tensor(out, &format!("{name}.{i}.bias"), &layer.bias);
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &m.dims;
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "M {}", d.labeled_classes);
        let _ = writeln!(out, "N {}", d.unlabeled_classes);
        let _ = writeln!(out, "d {}", d.input_dim);
        let _ = writeln!(out, "h {}", d.latent_dim);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "extractor_hidden {}", widths(&d.extractor_hidden));
        let _ = writeln!(out, "head_hidden {}", widths(&d.head_hidden));
        write_net(&mut out, "feature_extractor", &m.feature_extractor);
        write_net(&mut out, "labeled_head", &m.labeled_head);
        write_net(&mut out, "unlabeled_head", &m.unlabeled_head);
        if let (Some(fe), Some(lab)) = (m.frozen_extractor(), m.frozen_labeled_head()) {
            write_net(&mut out, "frozen_extractor", fe);
            write_net(&mut out, "frozen_labeled_head", lab);
        }
        if let Some(store) = m.class_means() {
            write_tensor(&mut out, "class_means", store.means());
            let counts: Vec<f64> = store.counts().iter().map(|&c| c as f64).collect();
            write_tensor(&mut out, "class_counts", &Tensor::row(&counts));
        }
        if let Some(v) = &self.vhead {
            write_net(&mut out, "vhead_mean", &v.mean_net);
            write_tensor(&mut out, "vhead_log_sigma", &v.log_sigma);
        }
        if let Some(k) = &self.kci {
            write_net(&mut out, "kci", &k.net);
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((_, other)) => {
                return Err(Error::Version {
                    found: other.to_string(),
                    expected: HEADER,
                })
            }
            None => return Err(Error::Truncated("empty file".into())),
        }
        let mut keys: BTreeMap<String, String> = BTreeMap::new();
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut ended = false;
        while let Some((no, line)) = lines.next() {
            if line == "end" {
                ended = true;
                break;
            }
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            if key == "tensor" {
                let malformed = || Error::Dimension(format!("line {no}: malformed tensor header {line:?}"));
                let name = parts.next().ok_or_else(malformed)?.to_string();
                let rows: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(malformed)?;
                let cols: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(malformed)?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rno, row) = lines
                        .next()
                        .ok_or_else(|| Error::Truncated(format!("tensor {name} ends early")))?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| Error::Dimension(format!("line {rno}: bad number {tok:?}")))?;
                        data.push(v);
                    }
                    if data.len() - before != cols {
                        return Err(Error::Dimension(format!(
                            "line {rno}: tensor {name} row has {} values, header says {cols}",
                            data.len() - before
                        )));
                    }
                }
                tensors.insert(name, Tensor::from_vec(rows, cols, data)?);
            } else {
                keys.insert(key.to_string(), parts.collect::<Vec<_>>().join(" "));
            }
        }
        if !ended {
            return Err(Error::Truncated("missing end marker".into()));
        }
        assemble(&keys, tensors)
    }
}

fn key_usize(keys: &BTreeMap<String, String>, k: &str) -> Result<usize> {
    keys.get(k)
        .ok_or_else(|| Error::Truncated(format!("missing key {k}")))?
        .parse()
        .map_err(|_| Error::Dimension(format!("key {k} is not a count")))
}

fn key_widths(keys: &BTreeMap<String, String>, k: &str) -> Result<Vec<usize>> {
    keys.get(k)
        .ok_or_else(|| Error::Truncated(format!("missing key {k}")))?
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| Error::Dimension(format!("key {k}: bad width {w:?}"))))
        .collect()
}

fn take_net(tensors: &mut BTreeMap<String, Tensor>, name: &str, output: Activation) -> Result<Option<DenseNet>> {
    let mut layers = Vec::new();
    loop {
        let i = layers.len();
        let Some(weight) = tensors.remove(&format!("{name}.{i}.weight")) else { break };
        let bias = tensors
            .remove(&format!("{name}.{i}.bias"))
            .ok_or_else(|| Error::Truncated(format!("{name}.{i}.bias missing")))?;
        layers.push(Layer { weight, bias });
    }
    if layers.is_empty() {
        return Ok(None);
    }
    DenseNet::from_layers(layers, output)
        .map(Some)
        .map_err(|e| Error::Dimension(format!("{name}: {e}")))
}

fn require(net: Option<DenseNet>, name: &str) -> Result<DenseNet> {
    net.ok_or_else(|| Error::Truncated(format!("network {name} missing")))
}

fn assemble(keys: &BTreeMap<String, String>, mut t: BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let dims = ModelDims {
        input_dim: key_usize(keys, "d")?,
        latent_dim: key_usize(keys, "h")?,
        labeled_classes: key_usize(keys, "M")?,
        unlabeled_classes: key_usize(keys, "N")?,
        extractor_hidden: key_widths(keys, "extractor_hidden")?,
        head_hidden: key_widths(keys, "head_hidden")?,
    };
    let seed = keys
        .get("seed")
        .ok_or_else(|| Error::Truncated("missing key seed".into()))?
        .parse()
        .map_err(|_| Error::Dimension("seed is not an integer".into()))?;
    let dim_err = |e: ncdwf_core::Error| Error::Dimension(e.to_string());
    let fe = require(take_net(&mut t, "feature_extractor", Activation::Relu)?, "feature_extractor")?;
    let lab = require(take_net(&mut t, "labeled_head", Activation::Identity)?, "labeled_head")?;
    let ulb = require(take_net(&mut t, "unlabeled_head", Activation::Identity)?, "unlabeled_head")?;
    let mut model = NcdwfModel::from_parts(dims.clone(), fe, lab, ulb).map_err(dim_err)?;
    let frozen_fe = take_net(&mut t, "frozen_extractor", Activation::Relu)?;
    let frozen_lab = take_net(&mut t, "frozen_labeled_head", Activation::Identity)?;
    match (frozen_fe, frozen_lab) {
        (Some(fe), Some(lab)) => model.restore_snapshot(fe, lab).map_err(dim_err)?,
        (None, None) => {}
        _ => return Err(Error::Truncated("snapshot is incomplete".into())),
    }
    match (t.remove("class_means"), t.remove("class_counts")) {
        (Some(means), Some(counts)) => {
            let counts = counts.data().iter().map(|&c| c as usize).collect();
            let store = ClassMeanStore::from_parts(means, counts).map_err(dim_err)?;
            model.set_class_means(store).map_err(dim_err)?;
        }
        (None, None) => {}
        _ => return Err(Error::Truncated("class mean store is incomplete".into())),
    }
    let vhead = match take_net(&mut t, "vhead_mean", Activation::Identity)? {
        Some(mean_net) => {
            let log_sigma = t
                .remove("vhead_log_sigma")
                .ok_or_else(|| Error::Truncated("vhead_log_sigma missing".into()))?;
            let m = dims.labeled_classes;
            if mean_net.input_dim() != dims.unlabeled_classes || mean_net.output_dim() != m || log_sigma.shape() != [1, m] {
                return Err(Error::Dimension("variational head does not match M and N".into()));
            }
            Some(VariationalHead { mean_net, log_sigma })
        }
        None => None,
    };
    let kci = match take_net(&mut t, "kci", Activation::Sigmoid)? {
        Some(net) => {
            if net.input_dim() != dims.latent_dim || net.output_dim() != 1 {
                return Err(Error::Dimension("identifier does not match h".into()));
            }
            Some(KciNet { net })
        }
        None => None,
    };
    if let Some(name) = t.keys().next() {
        return Err(Error::Dimension(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint { seed, model, vhead, kci })
}
