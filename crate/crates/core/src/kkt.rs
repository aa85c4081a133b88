//! Stationarity residuals, the KKT-loss, multiplier fitting and (ε, δ)-KKT
//! certification.
//!
//! Everything here is evaluated in batch form: with `Z = X Wᵀ + 1bᵀ`,
//! `S = 1[Z > 0]`, `A = [Z]_+` and `c_i = λ_i y_i`, the weighted gradient sum
//! `Σ_i c_i ∇_θΦ(θ; x_i)` has blocks
//! `W: diag(v) (S∘c)ᵀ X`, `b: v ∘ (S∘c)ᵀ1`, `v: Aᵀc`.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_len, Error, Result};
use crate::net::{check_label, relu_matrix, step_matrix, NetworkParams, ParamVector};
use crate::nnls;

/// Lagrange multipliers, one per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers(pub Vec<f64>);

impl Deref for Multipliers {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Multipliers {
    pub fn zeros(m: usize) -> Self {
        Multipliers(vec![0.0; m])
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn check_nonnegative(&self) -> Result<()> {
        for (index, &value) in self.0.iter().enumerate() {
            if !(value >= 0.0) {
                return Err(Error::InvalidMultiplier { index, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktLossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl KktLossWeights {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma1.is_finite() && gamma2 > 0.0 && gamma2.is_finite()) {
            return Err(Error::Invalid(format!("KKT-loss weights must be positive (got {gamma1}, {gamma2})")));
        }
        Ok(KktLossWeights { gamma1, gamma2 })
    }
}

impl Default for KktLossWeights {
    fn default() -> Self {
        KktLossWeights { gamma1: 1.0, gamma2: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktCertificate {
    pub multipliers: Multipliers,
    /// Stationarity residual `‖θ − Σ λ_i y_i ∇_θΦ(θ; x_i)‖₂`.
    pub epsilon: f64,
    /// Margin value the certificate was measured against.
    pub p: f64,
    /// `max(0, max_i λ_i (y_iΦ(θ; x_i) − p))`.
    pub delta: f64,
    /// Whether every `y_iΦ(θ; x_i) ≥ p`.
    pub satisfied_margin: bool,
}

/// Activation data for a batch of points under fixed parameters.
pub(crate) struct Activations {
    pub z: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

impl Activations {
    pub fn new(params: &NetworkParams, points: &DMatrix<f64>) -> Result<Self> {
        if points.ncols() != params.input_dim() {
            return Err(Error::Shape { expected: params.input_dim(), got: points.ncols() });
        }
        let z = params.preactivations(points);
        let s = step_matrix(&z);
        let a = relu_matrix(&z);
        Ok(Activations { z, s, a })
    }
}

fn check_inputs(params: &NetworkParams, points: &DMatrix<f64>, labels: &[f64], lambda: &[f64]) -> Result<()> {
    if points.ncols() != params.input_dim() {
        return Err(Error::Shape { expected: params.input_dim(), got: points.ncols() });
    }
    check_len("labels", points.nrows(), labels.len())?;
    check_len("multipliers", points.nrows(), lambda.len())?;
    for &y in labels {
        check_label(y)?;
    }
    Ok(())
}

/// `Σ_i λ_i ∇_θ[y_iΦ(θ; x_i)]` given precomputed activations.
pub(crate) fn weighted_gradient_sum_with(
    params: &NetworkParams,
    points: &DMatrix<f64>,
    act: &Activations,
    coef: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (m, k) = act.s.shape();
    let mut sc = act.s.clone();
    for i in 0..m {
        let ci = coef[i];
        sc.row_mut(i).scale_mut(ci);
    }
    let v = params.output_weights();
    let mut gw = sc.transpose() * points;
    for j in 0..k {
        gw.row_mut(j).scale_mut(v[j]);
    }
    let col_sums = sc.row_sum().transpose();
    let gb = col_sums.component_mul(v);
    let gv = act.a.transpose() * coef;
    (gw, gb, gv)
}

fn pack(gw: &DMatrix<f64>, gb: &DVector<f64>, gv: &DVector<f64>) -> ParamVector {
    let (k, d) = gw.shape();
    let mut p = ParamVector::zeros(k, d);
    for j in 0..k {
        for c in 0..d {
            p.w_block_mut(j)[c] = gw[(j, c)];
        }
        *p.b_entry_mut(j) = gb[j];
        *p.v_entry_mut(j) = gv[j];
    }
    p
}

/// `Σ_i λ_i ∇_θ[y_iΦ(θ; x_i)]`.
pub fn weighted_gradient_sum(
    params: &NetworkParams,
    points: &DMatrix<f64>,
    labels: &[f64],
    lambda: &[f64],
) -> Result<ParamVector> {
    check_inputs(params, points, labels, lambda)?;
    let act = Activations::new(params, points)?;
    let coef = DVector::from_fn(labels.len(), |i, _| lambda[i] * labels[i]);
    let (gw, gb, gv) = weighted_gradient_sum_with(params, points, &act, &coef);
    Ok(pack(&gw, &gb, &gv))
}

/// Returns `(‖r‖₂, r)` with `r = θ − Σ_i λ_i ∇_θ[y_iΦ(θ; x_i)]`.
pub fn stationarity_residual(
    params: &NetworkParams,
    points: &DMatrix<f64>,
    labels: &[f64],
    lambda: &[f64],
) -> Result<(f64, ParamVector)> {
    let sum = weighted_gradient_sum(params, points, labels, lambda)?;
    let r = params.flatten().sub(&sum);
    Ok((r.norm(), r))
}

/// `γ₁‖r‖₂ + γ₂ Σ_i max(−λ_i, 0)` with the unsquared residual norm.
pub fn kkt_loss(
    params: &NetworkParams,
    points: &DMatrix<f64>,
    labels: &[f64],
    lambda: &[f64],
    weights: KktLossWeights,
) -> Result<f64> {
    let (norm, _) = stationarity_residual(params, points, labels, lambda)?;
    Ok(weights.gamma1 * norm + weights.gamma2 * negative_mass(lambda))
}

pub(crate) fn negative_mass(lambda: &[f64]) -> f64 {
    lambda.iter().map(|&l| (-l).max(0.0)).sum()
}

/// Gram matrix `H_il = ⟨g_i, g_l⟩` and `c_i = ⟨g_i, θ⟩` for `g_i = ∇_θ[y_iΦ(θ; x_i)]`.
pub fn gradient_gram(
    params: &NetworkParams,
    points: &DMatrix<f64>,
    labels: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let act = Activations::new(params, points)?;
    check_len("labels", points.nrows(), labels.len())?;
    let m = points.nrows();
    let v = params.output_weights();
    let mut sv = act.s.clone();
    for j in 0..sv.ncols() {
        let vj = v[j];
        sv.column_mut(j).scale_mut(vj);
    }
    let pattern_part = &sv * sv.transpose();
    let inner = points * points.transpose();
    let value_part = &act.a * act.a.transpose();
    let h = DMatrix::from_fn(m, m, |i, l| {
        labels[i] * labels[l] * (pattern_part[(i, l)] * (inner[(i, l)] + 1.0) + value_part[(i, l)])
    });
    // ⟨θ, ∇_θΦ(θ; x)⟩ = 2Φ(θ; x) by homogeneity; written out explicitly here.
    let c = DVector::from_fn(m, |i, _| {
        let mut acc = 0.0;
        for j in 0..params.width() {
            acc += v[j] * (act.s[(i, j)] * act.z[(i, j)] + act.a[(i, j)]);
        }
        labels[i] * acc
    });
    Ok((h, c))
}

/// Nonnegative multipliers minimizing `‖θ − Σ λ_i y_i ∇_θΦ(θ; x_i)‖₂²`.
pub fn fit_multipliers(params: &NetworkParams, dataset: &LabeledDataset) -> Result<Multipliers> {
    fit_multipliers_to(params, dataset.points(), dataset.labels())
}

pub fn fit_multipliers_to(params: &NetworkParams, points: &DMatrix<f64>, labels: &[f64]) -> Result<Multipliers> {
    let (h, c) = gradient_gram(params, points, labels)?;
    let tol = 1e-10 * (1.0 + params.norm());
    let sol = nnls::solve(&h, &c, tol, nnls::MAX_ITERATIONS);
    Ok(Multipliers(sol.x.iter().map(|&t| t.max(0.0)).collect()))
}

/// Projected-gradient norm of the multiplier fit objective at `lambda`.
pub fn multiplier_fit_stationarity(params: &NetworkParams, dataset: &LabeledDataset, lambda: &[f64]) -> Result<f64> {
    let (h, c) = gradient_gram(params, dataset.points(), dataset.labels())?;
    let x = DVector::from_column_slice(lambda);
    let g = &h * &x - c;
    Ok(nnls::projected_gradient_norm(&x, &g))
}

/// `p = min_i y_iΦ(θ; x_i)`.
pub fn margin_value(params: &NetworkParams, dataset: &LabeledDataset) -> Result<f64> {
    let out = params.forward_batch(dataset.points())?;
    Ok(out.iter().zip(dataset.labels()).map(|(f, y)| y * f).fold(f64::INFINITY, f64::min))
}

pub fn certify(params: &NetworkParams, dataset: &LabeledDataset, lambda: &Multipliers, p: f64) -> Result<KktCertificate> {
    certify_points(params, dataset.points(), dataset.labels(), lambda, p)
}

pub fn certify_points(
    params: &NetworkParams,
    points: &DMatrix<f64>,
    labels: &[f64],
    lambda: &Multipliers,
    p: f64,
) -> Result<KktCertificate> {
    check_inputs(params, points, labels, lambda)?;
    lambda.check_nonnegative()?;
    let (epsilon, _) = stationarity_residual(params, points, labels, lambda)?;
    let out = params.forward_batch(points)?;
    let mut satisfied_margin = true;
    let mut delta = 0.0f64;
    for i in 0..labels.len() {
        let m = labels[i] * out[i];
        if m < p {
            satisfied_margin = false;
        }
        delta = delta.max(lambda[i] * (m - p));
    }
    Ok(KktCertificate { multipliers: lambda.clone(), epsilon, p, delta, satisfied_margin })
}
