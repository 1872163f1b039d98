//! Dataset CSV files: header `feat_0,...,feat_{d-1},label`, one sample per
//! row, features in shortest round-trip decimal form.
//!
//! A split is stored as four files in one directory. Labels in the files are
//! global class ids; novel classes are `M..M+N` on disk and `0..N` in memory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ncdwf_core::data::{LabeledPool, RawDataset, SplitDataset, SplitSpec};
use ncdwf_core::Tensor;

use crate::error::{Error, Result};

pub const TRAIN_LAB: &str = "train_lab.csv";
pub const TRAIN_UNLAB: &str = "train_unlab.csv";
pub const TEST_LAB: &str = "test_lab.csv";
pub const TEST_UNLAB: &str = "test_unlab.csv";

/// All four split files, in the order they are written.
pub const SPLIT_FILES: [&str; 4] = [TRAIN_LAB, TRAIN_UNLAB, TEST_LAB, TEST_UNLAB];

pub fn write_csv(path: &Path, features: &Tensor, labels: &[usize]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::Config(format!(
            "{}: {} feature rows but {} labels",
            path.display(),
            features.rows(),
            labels.len()
        )));
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut header: Vec<String> = (0..features.cols()).map(|j| format!("feat_{j}")).collect();
    header.push("label".into());
    let mut body = header.join(",");
    body.push('\n');
    for (r, y) in labels.iter().enumerate() {
        for v in features.row_slice(r) {
            // Display for f64 is the shortest string that parses back exactly.
            body.push_str(&v.to_string());
            body.push(',');
        }
        body.push_str(&y.to_string());
        body.push('\n');
    }
    w.write_all(body.as_bytes()).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn load_csv(path: &Path) -> Result<RawDataset> {
    let file = File::open(path).map_err(Error::io(path))?;
    parse_csv(file, path)
}

/// Parses dataset CSV text; `path` is only used in error messages.
pub fn parse_csv<R: std::io::Read>(input: R, path: &Path) -> Result<RawDataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| parse_err(1, "missing label column".into()))?;
    if label_col + 1 != header.len() {
        return Err(parse_err(1, "label must be the last column".into()));
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (j, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: {cell:?} is not a number", header[j].trim())))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", header[j].trim())));
            }
            data.push(v);
        }
        let cell = record[label_col].trim();
        let y: usize = cell
            .parse()
            .map_err(|_| parse_err(line, format!("label {cell:?} is not a nonnegative integer")))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no samples".into()));
    }
    let features = Tensor::from_vec(labels.len(), dim, data)?;
    Ok(RawDataset::new(features, labels)?)
}

/// Writes the four split files into `dir`, creating it if needed.
pub fn write_split(dir: &Path, data: &SplitDataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let m = data.spec.labeled;
    let shift = |labels: &[usize]| labels.iter().map(|y| y + m).collect::<Vec<_>>();
    let parts: [(&str, &Tensor, Vec<usize>); 4] = [
        (TRAIN_LAB, data.train_lab.features(), data.train_lab.labels().to_vec()),
        (
            TRAIN_UNLAB,
            data.train_unlab.features(),
            shift(data.train_unlab_labels.evaluation_labels()),
        ),
        (TEST_LAB, data.test_lab.features(), data.test_lab.labels().to_vec()),
        (TEST_UNLAB, data.test_unlab.features(), shift(data.test_unlab.labels())),
    ];
    let mut written = Vec::with_capacity(4);
    for (name, features, labels) in parts {
        let path = dir.join(name);
        write_csv(&path, features, &labels)?;
        written.push(path);
    }
    Ok(written)
}

fn read_pool(path: &Path, lo: usize, hi: usize) -> Result<LabeledPool> {
    let raw = load_csv(path)?;
    if let Some(bad) = raw.labels().iter().find(|&&y| y < lo || y >= hi) {
        return Err(Error::Config(format!(
            "{}: label {bad} outside the expected range {lo}..{hi}",
            path.display()
        )));
    }
    let labels = raw.labels().iter().map(|y| y - lo).collect();
    Ok(LabeledPool::new(raw.features().clone(), labels)?)
}

pub fn read_split(dir: &Path, spec: SplitSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let (m, t) = (spec.labeled, spec.total_classes);
    Ok(SplitDataset::from_parts(
        spec,
        read_pool(&dir.join(TRAIN_LAB), 0, m)?,
        read_pool(&dir.join(TRAIN_UNLAB), m, t)?,
        read_pool(&dir.join(TEST_LAB), 0, m)?,
        read_pool(&dir.join(TEST_UNLAB), m, t)?,
    )?)
}
