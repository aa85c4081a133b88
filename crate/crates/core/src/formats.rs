//! On-disk formats: model and certificate JSON, dataset/set CSV, training
//! traces, config files and content hashes.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a value
//! read back compares equal to the one written and identical inputs give
//! byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::ReconstructionResult;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::forge::WeightedSet;
use crate::kkt::{KktCertificate, Multipliers};
use crate::net::{check_label, NetworkParams};
use crate::trainer::{TraceRecord, TrainTrace};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn digest(parts: impl IntoIterator<Item = f64>, dims: &[usize]) -> String {
    let mut h = Sha256::new();
    for &d in dims {
        h.update((d as u64).to_le_bytes());
    }
    for x in parts {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 over the shape and the flattened parameters `(W rows, b, v)`.
pub fn model_hash(params: &NetworkParams) -> String {
    digest(params.flatten().as_slice().to_vec(), &[params.width(), params.input_dim()])
}

/// SHA-256 over the shape, the row-major points and the labels.
pub fn data_hash(points: &DMatrix<f64>, labels: &[f64]) -> String {
    let (n, d) = points.shape();
    let rows = (0..n).flat_map(|i| (0..d).map(move |c| (i, c))).map(|(i, c)| points[(i, c)]);
    digest(rows.chain(labels.iter().copied()), &[n, d])
}

pub fn dataset_hash(dataset: &LabeledDataset) -> String {
    data_hash(dataset.points(), dataset.labels())
}

pub fn check_hash(what: &'static str, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch { what, expected: expected.into(), found: found.into() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    d: usize,
    k: usize,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    v: Vec<f64>,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

pub fn model_to_json(params: &NetworkParams, meta: serde_json::Map<String, serde_json::Value>) -> String {
    let file = ModelFile {
        d: params.input_dim(),
        k: params.width(),
        w: (0..params.width()).map(|j| params.weight_row(j)).collect(),
        b: params.biases().iter().copied().collect(),
        v: params.output_weights().iter().copied().collect(),
        meta,
    };
    serde_json::to_string_pretty(&file).expect("model serializes")
}

pub fn parse_model(text: &str) -> Result<(NetworkParams, serde_json::Map<String, serde_json::Value>)> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("model file: {e}")))?;
    if file.w.len() != file.k {
        return Err(Error::Parse(format!("model file: k={} but W has {} rows", file.k, file.w.len())));
    }
    if let Some(row) = file.w.iter().find(|r| r.len() != file.d) {
        return Err(Error::Parse(format!("model file: d={} but a W row has {} entries", file.d, row.len())));
    }
    let params = NetworkParams::from_rows(&file.w, file.b, file.v)?;
    Ok((params, file.meta))
}

pub fn write_model(path: &Path, params: &NetworkParams, meta: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    write_text(path, &model_to_json(params, meta))
}

pub fn read_model(path: &Path) -> Result<NetworkParams> {
    parse_model(&read_text(path)?).map(|(p, _)| p).map_err(|e| e.context(path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub lambda: Vec<f64>,
    pub epsilon: f64,
    pub delta: f64,
    pub p: f64,
    pub satisfied_margin: bool,
    pub model_hash: String,
    pub data_hash: String,
}

impl CertificateFile {
    pub fn new(cert: &KktCertificate, model_hash: String, data_hash: String) -> Self {
        CertificateFile {
            lambda: cert.multipliers.0.clone(),
            epsilon: cert.epsilon,
            delta: cert.delta,
            p: cert.p,
            satisfied_margin: cert.satisfied_margin,
            model_hash,
            data_hash,
        }
    }

    pub fn certificate(&self) -> KktCertificate {
        KktCertificate {
            multipliers: Multipliers(self.lambda.clone()),
            epsilon: self.epsilon,
            p: self.p,
            delta: self.delta,
            satisfied_margin: self.satisfied_margin,
        }
    }

    /// Errors unless the certificate was computed for exactly this model and
    /// these points.
    pub fn verify(&self, params: &NetworkParams, points: &DMatrix<f64>, labels: &[f64]) -> Result<()> {
        check_hash("model", &self.model_hash, &model_hash(params))?;
        check_hash("data", &self.data_hash, &data_hash(points, labels))
    }
}

pub fn parse_certificate(text: &str) -> Result<CertificateFile> {
    let cert: CertificateFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("certificate file: {e}")))?;
    if cert.lambda.iter().any(|l| !l.is_finite()) || !(cert.epsilon.is_finite() && cert.delta.is_finite() && cert.p.is_finite()) {
        return Err(Error::Parse("certificate file: non-finite value".into()));
    }
    Ok(cert)
}

/// Parses a JSON config; missing fields take their defaults.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("config file: {e}")))
}

/// Rows of `f0..f{d−1},label[,lambda]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub points: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
}

impl Table {
    pub fn dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(self.points.clone(), self.labels.clone())
    }

    /// A weighted set; requires a lambda column.
    pub fn weighted_set(&self) -> Result<WeightedSet> {
        let lambda = self.lambda.clone().ok_or_else(|| Error::Parse("set file needs a lambda column".into()))?;
        WeightedSet::new(self.points.clone(), self.labels.clone(), Multipliers(lambda))
    }
}

fn parse_number(field: &str, line: usize, column: &str) -> Result<f64> {
    let value: f64 = field.trim().parse().map_err(|_| Error::Parse(format!("line {line}, column {column}: not a number: {field:?}")))?;
    if !value.is_finite() {
        return Err(Error::Parse(format!("line {line}, column {column}: non-finite value")));
    }
    Ok(value)
}

pub fn parse_table(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse(format!("header: {e}")))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_lambda = names.last() == Some(&"lambda");
    let d = names.len().checked_sub(if has_lambda { 2 } else { 1 }).unwrap_or(0);
    let expected = (0..d).map(|c| format!("f{c}")).chain(["label".to_string()]);
    if d == 0 || !names.iter().zip(expected).all(|(a, b)| *a == b) {
        return Err(Error::Parse(format!("header must be f0..f{{d-1}},label[,lambda] (got {:?})", names.join(","))));
    }
    let (mut values, mut labels, mut lambda) = (Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        for c in 0..d {
            values.push(parse_number(&record[c], line, &names[c])?);
        }
        let y = parse_number(&record[d], line, "label")?;
        check_label(y).map_err(|e| e.context(format!("line {line}")))?;
        labels.push(y);
        if has_lambda {
            lambda.push(parse_number(&record[d + 1], line, "lambda")?);
        }
    }
    let n = labels.len();
    Ok(Table {
        points: DMatrix::from_row_slice(n, d, &values),
        labels,
        lambda: has_lambda.then_some(lambda),
    })
}

pub fn table_to_csv(points: &DMatrix<f64>, labels: &[f64], lambda: Option<&[f64]>) -> String {
    let d = points.ncols();
    let mut out = (0..d).map(|c| format!("f{c}")).collect::<Vec<_>>().join(",");
    out.push_str(if d > 0 { ",label" } else { "label" });
    if lambda.is_some() {
        out.push_str(",lambda");
    }
    out.push('\n');
    for i in 0..points.nrows() {
        for c in 0..d {
            write!(out, "{},", points[(i, c)]).unwrap();
        }
        write!(out, "{}", labels[i]).unwrap();
        if let Some(l) = lambda {
            write!(out, ",{}", l[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn dataset_to_csv(dataset: &LabeledDataset) -> String {
    table_to_csv(dataset.points(), dataset.labels(), None)
}

pub fn set_to_csv(set: &WeightedSet) -> String {
    table_to_csv(set.points(), set.labels(), Some(set.multipliers()))
}

pub fn read_table(path: &Path) -> Result<Table> {
    parse_table(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    read_table(path)?.dataset().map_err(|e| e.context(path.display().to_string()))
}

const TRACE_HEADER: &str = "epoch,loss,normalized_margin,residual,theta_norm,below_1_over_n";

pub fn trace_to_csv(trace: &TrainTrace) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in &trace.records {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.loss, r.normalized_margin, r.residual, r.theta_norm, r.below_1_over_n).unwrap();
    }
    out
}

pub fn parse_trace(text: &str) -> Result<TrainTrace> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(Error::Parse(format!("trace header must be {TRACE_HEADER}")));
    }
    let mut records = Vec::new();
    for (r, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = r + 2;
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("line {line_no}: expected 6 fields, got {}", f.len())));
        }
        let bad = |what: &str| Error::Parse(format!("line {line_no}: bad {what}"));
        let float = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        records.push(TraceRecord {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            loss: float(f[1], "loss")?,
            normalized_margin: float(f[2], "normalized_margin")?,
            residual: float(f[3], "residual")?,
            theta_norm: float(f[4], "theta_norm")?,
            below_1_over_n: f[5].parse().map_err(|_| bad("below_1_over_n"))?,
        });
    }
    if records.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        return Err(Error::Parse("trace epochs must be strictly increasing".into()));
    }
    Ok(TrainTrace { records })
}

/// Summary written next to a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub final_kkt_loss: f64,
    /// `None` for restarts that diverged.
    pub restart_losses: Vec<Option<f64>>,
    pub best_restart: usize,
    pub top_k: Option<usize>,
    pub topk_mean_nn_distance: Option<f64>,
    pub per_candidate_nn_distance: Option<Vec<f64>>,
    pub model_hash: String,
    pub data_hash: Option<String>,
}

impl AttackReport {
    pub fn new(result: &ReconstructionResult, top_k: Option<usize>, model_hash: String, data_hash: Option<String>) -> Self {
        AttackReport {
            final_kkt_loss: result.final_kkt_loss,
            restart_losses: result.restart_losses.iter().map(|l| l.is_finite().then_some(*l)).collect(),
            best_restart: result.best_restart,
            top_k: top_k.filter(|_| result.topk_mean_nn_distance.is_some()),
            topk_mean_nn_distance: result.topk_mean_nn_distance,
            per_candidate_nn_distance: result.per_candidate_nn_distance.clone(),
            model_hash,
            data_hash,
        }
    }
}
