//! Datasets, experiment orchestration and report emission.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{reconstruct, AttackConfig, InitGeometry};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::formats::{check_hash, dataset_hash, model_hash, read_text, write_text};
use crate::kkt::{certify, fit_multipliers, margin_value, KktCertificate};
use crate::net::NetworkParams;
use crate::trainer::{train_to_kkt, TrainConfig};

/// Number of best candidates averaged in the reported distance.
pub const DEFAULT_TOP_K: usize = 5;

/// Points uniform on the unit sphere `S^{d−1}`, labeled by the sign of the
/// first coordinate, exactly `n/2` per class.
pub fn gen_sphere_dataset(n: usize, d: usize, seed: u64) -> Result<LabeledDataset> {
    if n % 2 == 1 {
        return Err(Error::OddSampleCount(n));
    }
    if n == 0 || d < 2 {
        return Err(Error::Invalid(format!("need n ≥ 2 and d ≥ 2 (got n={n}, d={d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let (mut pos, mut neg) = (Vec::with_capacity(half), Vec::with_capacity(half));
    while pos.len() < half || neg.len() < half {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let p: Vec<f64> = g.into_iter().map(|t| t / norm).collect();
        if p[0].abs() < 1e-9 {
            continue;
        }
        let bucket = if p[0] > 0.0 { &mut pos } else { &mut neg };
        if bucket.len() < half {
            bucket.push(p);
        }
    }
    // Interleave so any prefix stays roughly balanced.
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (a, b) in pos.into_iter().zip(neg) {
        rows.push(a);
        y.push(1.0);
        rows.push(b);
        y.push(-1.0);
    }
    let x = DMatrix::from_fn(n, d, |i, c| rows[i][c]);
    LabeledDataset::new(x, y)
}

/// Config file shape for the sweep and defense experiments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub attack: AttackConfig,
}

/// One experimental condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: f64,
    pub topk_mean_nn_distance: f64,
    pub final_kkt_loss: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// What `condition` measures, e.g. `radius`.
    pub condition_name: String,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub seed: u64,
    pub version: String,
    pub model_hash: String,
    pub data_hash: String,
}

impl ExperimentReport {
    fn new(experiment: &str, condition_name: &str, config: serde_json::Value, mut rows: Vec<ReportRow>, seed: u64, params: &NetworkParams, dataset: &LabeledDataset) -> Result<Self> {
        rows.sort_by(|a, b| a.condition.total_cmp(&b.condition));
        let report = ExperimentReport {
            experiment: experiment.into(),
            condition_name: condition_name.into(),
            config,
            rows,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            model_hash: model_hash(params),
            data_hash: dataset_hash(dataset),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            let values = [r.condition, r.topk_mean_nn_distance, r.final_kkt_loss, r.epsilon, r.delta, r.p];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("report row for condition {} has a non-finite value", r.condition)));
            }
        }
        if self.rows.windows(2).any(|w| w[0].condition > w[1].condition) {
            return Err(Error::Invalid("report rows must be sorted by condition".into()));
        }
        Ok(())
    }

    /// Errors unless the report was computed from exactly this model and data.
    pub fn verify(&self, params: &NetworkParams, dataset: &LabeledDataset) -> Result<()> {
        check_hash("model", &self.model_hash, &model_hash(params))?;
        check_hash("data", &self.data_hash, &dataset_hash(dataset))
    }

    pub fn distances(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.topk_mean_nn_distance).collect()
    }
}

struct Trained {
    params: NetworkParams,
    cert: KktCertificate,
}

fn train_and_certify(dataset: &LabeledDataset, config: &TrainConfig) -> Result<Trained> {
    let (params, _) = train_to_kkt(dataset, config).map_err(|e| e.context("training"))?;
    let lambda = fit_multipliers(&params, dataset)?;
    let p = margin_value(&params, dataset)?;
    let cert = certify(&params, dataset, &lambda, p)?;
    Ok(Trained { params, cert })
}

fn attack_row(params: &NetworkParams, config: &AttackConfig, truth: &LabeledDataset, cert: &KktCertificate, condition: f64) -> Result<ReportRow> {
    let res = reconstruct(params, config, Some(truth), DEFAULT_TOP_K)?;
    Ok(ReportRow {
        condition,
        topk_mean_nn_distance: res.topk_mean_nn_distance.expect("truth supplied"),
        final_kkt_loss: res.final_kkt_loss,
        epsilon: cert.epsilon,
        delta: cert.delta,
        p: cert.p,
    })
}

/// Trains once, then attacks with a sphere initialization of each radius.
/// Every condition uses the same attack seed.
pub fn run_radius_sweep(dataset: &LabeledDataset, train_config: &TrainConfig, attack_base: &AttackConfig, radii: &[f64]) -> Result<ExperimentReport> {
    if radii.is_empty() {
        return Err(Error::Invalid("radius list is empty".into()));
    }
    train_config.validate()?;
    let configs: Vec<AttackConfig> = radii
        .iter()
        .map(|&radius| AttackConfig { init: InitGeometry::Sphere { radius }, ..attack_base.clone() })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let trained = train_and_certify(dataset, train_config)?;
    let rows = configs
        .par_iter()
        .zip(radii)
        .map(|(c, &r)| attack_row(&trained.params, c, dataset, &trained.cert, r).map_err(|e| e.context(format!("radius {r}"))))
        .collect::<Result<Vec<_>>>()?;
    let config = serde_json::json!({ "train": train_config, "attack": attack_base, "radii": radii, "top_k": DEFAULT_TOP_K });
    ExperimentReport::new("radius_sweep", "radius", config, rows, attack_base.seed, &trained.params, dataset)
}

/// Largest `|f_u(x+u) − f(x)|` over random probes, relative to the size of
/// the terms that cancel inside `f(x)`.
pub fn probe_shift_equivalence(original: &NetworkParams, shifted: &NetworkParams, u: &[f64], probes: usize, seed: u64) -> Result<f64> {
    let d = original.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let xu: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + b).collect();
        let (a, b) = (shifted.forward(&xu)?, original.forward(&x)?);
        let scale: f64 = (0..original.width())
            .map(|j| original.output_weights()[j].abs() * original.preactivation(j, &x).abs())
            .sum::<f64>()
            + b.abs();
        if scale > 0.0 {
            worst = worst.max((a - b).abs() / scale);
        } else if a != b {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

/// Trains on the original data, applies the bias-shift defense with `u`, and
/// attacks both networks with the same initialization. Row `0` holds the
/// original network against the original data, row `‖u‖` the defended
/// network against the shifted data `x_i + u`.
pub fn run_defense_eval(dataset: &LabeledDataset, u: &[f64], train_config: &TrainConfig, attack_config: &AttackConfig) -> Result<ExperimentReport> {
    crate::error::check_len("shift vector", dataset.dim(), u.len())?;
    if u.iter().any(|t| !t.is_finite()) {
        return Err(Error::Invalid("shift vector must be finite".into()));
    }
    train_config.validate()?;
    attack_config.validate()?;
    let trained = train_and_certify(dataset, train_config)?;
    let defended = trained.params.shift_bias_defense(u)?;
    let worst = probe_shift_equivalence(&trained.params, &defended, u, 1000, train_config.seed)?;
    if !(worst <= 1e-6) {
        return Err(Error::DefenseTransform(worst));
    }
    let shifted = dataset.shifted(u)?;
    let shifted_cert = certify(&defended, &shifted, &trained.cert.multipliers, trained.cert.p)?;
    let norm = u.iter().map(|t| t * t).sum::<f64>().sqrt();
    let (original, defended_row) = rayon::join(
        || attack_row(&trained.params, attack_config, dataset, &trained.cert, 0.0).map_err(|e| e.context("original network")),
        || attack_row(&defended, attack_config, &shifted, &shifted_cert, norm).map_err(|e| e.context("defended network")),
    );
    let config = serde_json::json!({
        "train": train_config,
        "attack": attack_config,
        "u": u,
        "top_k": DEFAULT_TOP_K,
        "probe_max_relative_error": worst,
        "defended_model_hash": model_hash(&defended),
        "shifted_data_hash": dataset_hash(&shifted),
    });
    ExperimentReport::new("defense", "shift_norm", config, vec![original?, defended_row?], attack_config.seed, &trained.params, dataset)
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = rank;
        }
        i = j + 1;
    }
    ranks
}

const CSV_HEADER: &str = "condition,topk_mean_nn_distance,final_kkt_loss,epsilon,delta,p";

pub fn report_to_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in &report.rows {
        writeln!(out, "{},{},{},{},{},{}", r.condition, r.topk_mean_nn_distance, r.final_kkt_loss, r.epsilon, r.delta, r.p).unwrap();
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse(format!("report header must be {CSV_HEADER}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f = line
                .split(',')
                .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .filter(|f| f.len() == 6)
                .ok_or_else(|| Error::Parse(format!("report line {}: expected 6 finite numbers", i + 2)))?;
            Ok(ReportRow { condition: f[0], topk_mean_nn_distance: f[1], final_kkt_loss: f[2], epsilon: f[3], delta: f[4], p: f[5] })
        })
        .collect()
}

pub fn report_to_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn parse_report_json(text: &str) -> Result<ExperimentReport> {
    let report: ExperimentReport = serde_json::from_str(text).map_err(|e| Error::Parse(format!("report file: {e}")))?;
    report.validate()?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    parse_report_json(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
}

/// Plot geometry of the emitted SVG, in user units.
pub mod plot {
    pub const WIDTH: f64 = 640.0;
    pub const HEIGHT: f64 = 420.0;
    pub const LEFT: f64 = 70.0;
    pub const RIGHT: f64 = 20.0;
    pub const TOP: f64 = 30.0;
    pub const BOTTOM: f64 = 50.0;
    pub const TICKS: usize = 5;
}

/// Data ranges of the plot: conditions span the x axis (±1 around a single
/// value), distances run from 0 to 110% of the largest.
pub fn plot_ranges(rows: &[ReportRow]) -> ((f64, f64), (f64, f64)) {
    let lo = rows.iter().map(|r| r.condition).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.condition).fold(f64::NEG_INFINITY, f64::max);
    let x = if rows.is_empty() { (0.0, 1.0) } else if lo == hi { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let top = rows.iter().map(|r| r.topk_mean_nn_distance).fold(0.0f64, f64::max);
    let y = if top > 0.0 { (0.0, 1.1 * top) } else { (0.0, 1.0) };
    (x, y)
}

pub fn report_to_svg(report: &ExperimentReport) -> String {
    use plot::*;
    let ((x0, x1), (y0, y1)) = plot_ranges(&report.rows);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |c: f64| LEFT + (c - x0) / (x1 - x0) * pw;
    let py = |v: f64| TOP + ph - (v - y0) / (y1 - y0) * ph;
    let (bottom, right) = (TOP + ph, LEFT + pw);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.3}" y="18" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, report.experiment).unwrap();
    writeln!(s, r#"<line class="axis" x1="{LEFT:.3}" y1="{bottom:.3}" x2="{right:.3}" y2="{bottom:.3}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line class="axis" x1="{LEFT:.3}" y1="{TOP:.3}" x2="{LEFT:.3}" y2="{bottom:.3}" stroke="black"/>"#).unwrap();
    for t in 0..=TICKS {
        let f = t as f64 / TICKS as f64;
        let (cx, cy) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (tx, ty) = (px(cx), py(cy));
        writeln!(s, r#"<line x1="{tx:.3}" y1="{bottom:.3}" x2="{tx:.3}" y2="{:.3}" stroke="black"/>"#, bottom + 5.0).unwrap();
        writeln!(s, r#"<text x="{tx:.3}" y="{:.3}" text-anchor="middle">{cx:.3}</text>"#, bottom + 18.0).unwrap();
        writeln!(s, r#"<line x1="{:.3}" y1="{ty:.3}" x2="{LEFT:.3}" y2="{ty:.3}" stroke="black"/>"#, LEFT - 5.0).unwrap();
        writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{cy:.3}</text>"#, LEFT - 8.0, ty + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 8.0, report.condition_name).unwrap();
    writeln!(s, r#"<text x="16" y="{:.3}" text-anchor="middle" transform="rotate(-90 16 {:.3})">top-k mean NN distance</text>"#, TOP + ph / 2.0, TOP + ph / 2.0).unwrap();
    let pts: Vec<(f64, f64)> = report.rows.iter().map(|r| (px(r.condition), py(r.topk_mean_nn_distance))).collect();
    if pts.len() > 1 {
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, path.join(" ")).unwrap();
    }
    for (x, y) in pts {
        writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="4" fill="steelblue"/>"#).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the CSV table, the SVG plot and, if given, the full JSON report.
pub fn emit_report(report: &ExperimentReport, csv_path: &Path, svg_path: &Path, json_path: Option<&Path>) -> Result<()> {
    report.validate()?;
    write_text(csv_path, &report_to_csv(report))?;
    write_text(svg_path, &report_to_svg(report))?;
    if let Some(p) = json_path {
        write_text(p, &report_to_json(report))?;
    }
    Ok(())
}
