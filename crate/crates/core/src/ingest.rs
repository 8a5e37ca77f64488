//! File formats: logits and labels CSV, run manifests, binary checkpoint
//! weights, calibration records, and the curve / rank tables.
//!
//! Readers accept LF or CRLF and report 1-based line numbers. Writers always
//! emit LF and render floats with Rust's shortest round-trip formatting, so a
//! read → write cycle is byte-stable.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{LogitsSet, TemperatureFit};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::selective::{Ranking, RiskCoveragePoint, DEFAULT_TARGET_COVERAGE};

pub const CURVE_HEADER: [&str; 6] = [
    "threshold",
    "coverage",
    "n_retained",
    "sel_accuracy",
    "sel_macro_f1",
    "sel_qwk",
];

pub const RANK_HEADER: [&str; 8] = [
    "rank",
    "checkpoint_id",
    "pretrain_epoch",
    "threshold",
    "coverage",
    "sel_accuracy",
    "sel_macro_f1",
    "sel_qwk",
];

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Undefined metrics become empty cells.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// CRLF is folded to LF first: the csv crate positions a record after a `\r\n`
// at the `\n`, which would report every line number one too low.
fn csv_reader(text: &str) -> csv::Reader<std::io::Cursor<Vec<u8>>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::Cursor::new(text.replace("\r\n", "\n").into_bytes()))
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn parse_err(source: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_owned(),
        line,
        message: message.into(),
    }
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_err(source: &str, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    parse_err(source, line, err.to_string())
}

/// Parses logits text with header `l0,...,l{K-1}`. `source` names the input in errors.
pub fn parse_logits(text: &str, source: &str) -> Result<Matrix> {
    let mut reader = csv_reader(text);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_err(source, e))?,
        None => return Err(parse_err(source, 1, "empty file, expected header l0,...")),
    };
    let k = header.len();
    for (j, name) in header.iter().enumerate() {
        if name != format!("l{j}") {
            return Err(parse_err(
                source,
                record_line(&header),
                format!("header column {} is {name:?}, expected \"l{j}\"", j + 1),
            ));
        }
    }

    let mut data = Vec::new();
    let mut rows = 0;
    for record in records {
        let record = record.map_err(|e| csv_err(source, e))?;
        let line = record_line(&record);
        if record.len() != k {
            return Err(parse_err(
                source,
                line,
                format!("expected {k} values, found {}", record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(source, line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(source, line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Validation(format!("{source}: no logits rows")));
    }
    Matrix::new(rows, k, data)
}

pub fn read_logits(path: &Path) -> Result<Matrix> {
    parse_logits(&read_text(path)?, &path.display().to_string())
}

pub fn logits_to_string(logits: &Matrix) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..logits.cols()).map(|j| format!("l{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in logits.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_logits(path: &Path, logits: &Matrix) -> Result<()> {
    write_bytes(path, logits_to_string(logits).as_bytes())
}

/// Parses a single-column label file with no header; every value must be below `k`.
pub fn parse_labels(text: &str, k: usize, source: &str) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for record in csv_reader(text).records() {
        let record = record.map_err(|e| csv_err(source, e))?;
        let line = record_line(&record);
        if record.len() != 1 {
            return Err(parse_err(
                source,
                line,
                format!("expected one label, found {} fields", record.len()),
            ));
        }
        let field = &record[0];
        let label: usize = field
            .parse()
            .map_err(|_| parse_err(source, line, format!("not a non-negative integer: {field:?}")))?;
        if label >= k {
            return Err(Error::Validation(format!(
                "{source}:{line}: label {label} outside [0, {k})"
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!("{source}: no labels")));
    }
    Ok(labels)
}

pub fn read_labels(path: &Path, k: usize) -> Result<Vec<usize>> {
    parse_labels(&read_text(path)?, k, &path.display().to_string())
}

pub fn labels_to_string(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_bytes(path, labels_to_string(labels).as_bytes())
}

/// Reads a logits file and its labels as one validated set.
pub fn read_logits_set(logits: &Path, labels: &Path) -> Result<LogitsSet> {
    let m = read_logits(logits)?;
    let y = read_labels(labels, m.cols())?;
    if y.len() != m.rows() {
        return Err(Error::Validation(format!(
            "{} has {} rows but {} has {} labels",
            logits.display(),
            m.rows(),
            labels.display(),
            y.len()
        )));
    }
    LogitsSet::new(m, y)
}

// ---------------------------------------------------------------- manifest

fn default_target_coverage() -> f64 {
    DEFAULT_TARGET_COVERAGE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub pretrain_epoch: u64,
    pub cal_logits: PathBuf,
    pub cal_labels: PathBuf,
    pub eval_logits: PathBuf,
    pub eval_labels: PathBuf,
}

/// A run manifest. Paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub n_classes: usize,
    #[serde(default = "default_target_coverage")]
    pub target_coverage: f64,
    pub checkpoints: Vec<ManifestEntry>,
}

/// Calibration and evaluation sets of one manifest entry.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub entry: ManifestEntry,
    pub cal: LogitsSet,
    pub eval: LogitsSet,
}

/// Reads and validates a manifest, including every file it references.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    load_manifest(path).map(|(m, _)| m)
}

/// Like [`read_manifest`], also returning the loaded logits sets.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<LoadedCheckpoint>)> {
    let text = read_text(path)?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for entry in &mut manifest.checkpoints {
        for p in [
            &mut entry.cal_logits,
            &mut entry.cal_labels,
            &mut entry.eval_logits,
            &mut entry.eval_labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    let loaded = validate_manifest(&manifest, path)?;
    Ok((manifest, loaded))
}

fn validate_manifest(m: &Manifest, path: &Path) -> Result<Vec<LoadedCheckpoint>> {
    let ctx = path.display();
    if m.n_classes < 2 {
        return Err(Error::Validation(format!("{ctx}: n_classes must be at least 2")));
    }
    if !(m.target_coverage > 0.0 && m.target_coverage <= 1.0) {
        return Err(Error::Validation(format!(
            "{ctx}: target_coverage must lie in (0, 1], got {}",
            m.target_coverage
        )));
    }
    if m.checkpoints.is_empty() {
        return Err(Error::Validation(format!("{ctx}: no checkpoints listed")));
    }
    let mut ids = HashSet::new();
    let mut loaded = Vec::with_capacity(m.checkpoints.len());
    for e in &m.checkpoints {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Validation(format!("{ctx}: duplicate checkpoint id {:?}", e.id)));
        }
        let paths = [&e.cal_logits, &e.cal_labels, &e.eval_logits, &e.eval_labels];
        let distinct: HashSet<_> = paths.iter().collect();
        if distinct.len() != paths.len() {
            return Err(Error::Validation(format!(
                "{ctx}: checkpoint {:?} reuses a path across its four files",
                e.id
            )));
        }
        for p in paths {
            if !p.is_file() {
                return Err(Error::Validation(format!(
                    "{ctx}: checkpoint {:?} references missing file {}",
                    e.id,
                    p.display()
                )));
            }
        }
        let cal = read_logits_set(&e.cal_logits, &e.cal_labels)?;
        let eval = read_logits_set(&e.eval_logits, &e.eval_labels)?;
        for (set, p) in [(&cal, &e.cal_logits), (&eval, &e.eval_logits)] {
            if set.n_classes() != m.n_classes {
                return Err(Error::Validation(format!(
                    "{ctx}: {} has {} columns but n_classes is {}",
                    p.display(),
                    set.n_classes(),
                    m.n_classes
                )));
            }
        }
        loaded.push(LoadedCheckpoint {
            entry: e.clone(),
            cal,
            eval,
        });
    }
    Ok(loaded)
}

// ------------------------------------------------------- checkpoint weights

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Binary weights: magic `SPCK`, u32 version, u64 rows, u64 cols, then
/// row-major f64 values, all little-endian.
pub fn encode_checkpoint(weights: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * weights.as_slice().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(weights.cols() as u64).to_le_bytes());
    for v in weights.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], source: &str) -> Result<Matrix> {
    let bad = |msg: String| Error::Validation(format!("{source}: {msg}"));
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected SPCK".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (rows, cols) = (u64_at(8) as usize, u64_at(16) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(CHECKPOINT_HEADER_LEN))
        .ok_or_else(|| bad(format!("implausible dimensions {rows}x{cols}")))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {rows}x{cols}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[CHECKPOINT_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_checkpoint(path: &Path, weights: &Matrix) -> Result<()> {
    write_bytes(path, &encode_checkpoint(weights))
}

pub fn read_checkpoint(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

// ------------------------------------------------------ calibration record

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub temperature: f64,
    pub nll: f64,
    pub clamped: bool,
    pub n: usize,
}

impl CalibrationRecord {
    pub fn new(fit: &TemperatureFit, n: usize) -> Self {
        Self {
            temperature: fit.temperature,
            nll: fit.nll_at_t,
            clamped: fit.clamped,
            n,
        }
    }
}

pub fn write_calibration_record(path: &Path, record: &CalibrationRecord) -> Result<()> {
    let mut text = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Validation(format!("serializing calibration record: {e}")))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_calibration_record(path: &Path) -> Result<CalibrationRecord> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

// ------------------------------------------------------------ result tables

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> String {
    let bytes = writer.into_inner().expect("writing to a Vec cannot fail");
    String::from_utf8(bytes).expect("csv output is UTF-8")
}

pub fn curve_to_string(curve: &[RiskCoveragePoint]) -> String {
    let mut w = csv_writer(Vec::new());
    w.write_record(CURVE_HEADER).expect("in-memory write");
    for p in curve {
        w.write_record([
            fmt_f64(p.threshold),
            fmt_f64(p.coverage),
            p.n_retained.to_string(),
            fmt_opt(p.sel_accuracy),
            fmt_opt(p.sel_macro_f1),
            fmt_opt(p.sel_qwk),
        ])
        .expect("in-memory write");
    }
    finish_csv(w)
}

pub fn write_curve(path: &Path, curve: &[RiskCoveragePoint]) -> Result<()> {
    write_bytes(path, curve_to_string(curve).as_bytes())
}

pub fn rank_to_string(ranking: &Ranking) -> String {
    let mut w = csv_writer(Vec::new());
    w.write_record(RANK_HEADER).expect("in-memory write");
    for r in &ranking.ranked {
        let p = &r.score.operating_point.point;
        w.write_record([
            r.rank.to_string(),
            r.score.checkpoint_id.clone(),
            r.score.pretrain_epoch.to_string(),
            fmt_f64(p.threshold),
            fmt_f64(p.coverage),
            fmt_opt(p.sel_accuracy),
            fmt_opt(p.sel_macro_f1),
            fmt_opt(p.sel_qwk),
        ])
        .expect("in-memory write");
    }
    finish_csv(w)
}

pub fn write_rank(path: &Path, ranking: &Ranking) -> Result<()> {
    write_bytes(path, rank_to_string(ranking).as_bytes())
}

/// Writes any text output, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
