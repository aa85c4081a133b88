//! Alternative KKT sets built from a known one: merging and splitting points,
//! certified splitting budgets, and sets arbitrarily far from the original.
//!
//! Every construction here preserves the weighted gradient sum
//! `Σ λ_i y_i ∇_θΦ(θ; x_i)` exactly, so the stationarity residual of the new
//! set equals that of the old one.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_len, Error, Result};
use crate::kkt::Multipliers;
use crate::net::{check_label, NetworkParams};

/// Budgets above this are reported as unbounded.
pub const UNBOUNDED_CAP: f64 = 1e12;

/// Points with labels and nonnegative multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSet {
    points: DMatrix<f64>,
    labels: Vec<f64>,
    multipliers: Multipliers,
}

impl WeightedSet {
    pub fn new(points: DMatrix<f64>, labels: Vec<f64>, multipliers: Multipliers) -> Result<Self> {
        check_len("labels", points.nrows(), labels.len())?;
        check_len("multipliers", points.nrows(), multipliers.len())?;
        for &y in &labels {
            check_label(y)?;
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("set contains a non-finite coordinate".into()));
        }
        multipliers.check_nonnegative()?;
        Ok(WeightedSet { points, labels, multipliers })
    }

    pub fn from_dataset(dataset: &LabeledDataset, multipliers: Multipliers) -> Result<Self> {
        Self::new(dataset.points().clone(), dataset.labels().to_vec(), multipliers)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn multipliers(&self) -> &Multipliers {
        &self.multipliers
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Invalid(format!("point index {i} out of range for a set of {}", self.len())));
        }
        Ok(())
    }

    fn from_parts(rows: Vec<Vec<f64>>, labels: Vec<f64>, lambda: Vec<f64>, d: usize) -> Self {
        let points = DMatrix::from_fn(rows.len(), d, |i, c| rows[i][c]);
        WeightedSet { points, labels, multipliers: Multipliers(lambda) }
    }

    fn parts(&self) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        ((0..self.len()).map(|i| self.point(i)).collect(), self.labels.clone(), self.multipliers.0.clone())
    }
}

/// A split of point `index` into `x + αν` and `x − βν`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub index: usize,
    pub direction: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Certified bound `|⟨ν, x_i⟩| ≤ γ` over the set.
    pub gamma: f64,
}

impl SplitPlan {
    /// Builds a plan with `γ` measured on `set`.
    pub fn new(set: &WeightedSet, index: usize, direction: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let gamma = direction_bound(set, &direction)?;
        let plan = SplitPlan { index, direction, alpha, beta, gamma };
        plan.validate(set.dim())?;
        Ok(plan)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        check_len("split direction", d, self.direction.len())?;
        let norm = self.direction.iter().map(|t| t * t).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("split direction must have unit norm (got {norm})")));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("split steps must be positive (got α={}, β={})", self.alpha, self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Invalid(format!("direction bound must be nonnegative (got {})", self.gamma)));
        }
        Ok(())
    }
}

/// A splitting budget: a finite step, or unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Finite(f64),
    Unbounded,
}

impl Budget {
    pub fn from_value(value: f64) -> Self {
        if value > UNBOUNDED_CAP {
            Budget::Unbounded
        } else {
            Budget::Finite(value)
        }
    }

    /// The budget as a number, `+∞` when unbounded.
    pub fn value(self) -> f64 {
        match self {
            Budget::Finite(v) => v,
            Budget::Unbounded => f64::INFINITY,
        }
    }

    pub fn min(self, other: Budget) -> Budget {
        Budget::from_value(self.value().min(other.value()))
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Finite(v) => s.serialize_f64(*v),
            Budget::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v >= 0.0 => Ok(Budget::from_value(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("budget must be nonnegative (got {v})"))),
            Raw::Word(w) if w == "unbounded" => Ok(Budget::Unbounded),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("unknown budget value {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub index: usize,
    pub gamma: f64,
    pub epsilon: f64,
    /// The exact-KKT formula as usually stated, without the `|v_j|` factor.
    pub exact_budget: Budget,
    /// The exact-KKT formula with `|v_j|` in the denominator.
    pub exact_budget_corrected: Budget,
    pub approx_budget: Budget,
    /// `min(exact_budget_corrected, approx_budget)`.
    pub safe_budget: Budget,
    /// Distance to the nearest activation boundary along `±ν`.
    pub oracle_budget: Budget,
    /// `|D_j(x_l)|‖w_j‖ / (ε + γ|v_j|Σλ)` per neuron.
    pub per_neuron_terms: Vec<Budget>,
}

/// `max_i |⟨ν, x_i⟩|`.
pub fn direction_bound(set: &WeightedSet, direction: &[f64]) -> Result<f64> {
    check_len("direction", set.dim(), direction.len())?;
    let nu = DVector::from_column_slice(direction);
    Ok((set.points() * nu).amax())
}

fn first_pattern_difference(params: &NetworkParams, a: &[f64], b: &[f64]) -> Result<Option<usize>> {
    Ok(params.activation_pattern(a)?.first_difference(&params.activation_pattern(b)?))
}

/// Replaces points `i1`, `i2` (same label and activation pattern) by their
/// multiplier-weighted average carrying `λ_{i1} + λ_{i2}`. The merged point
/// takes the smaller index.
pub fn merge(set: &WeightedSet, i1: usize, i2: usize, params: &NetworkParams) -> Result<WeightedSet> {
    set.check_index(i1)?;
    set.check_index(i2)?;
    if i1 == i2 {
        return Err(Error::Invalid("cannot merge a point with itself".into()));
    }
    let (l1, l2) = (set.multipliers[i1], set.multipliers[i2]);
    if !(l1 > 0.0 && l2 > 0.0) {
        return Err(Error::MergeMultiplier(l1, l2));
    }
    let (y1, y2) = (set.labels[i1], set.labels[i2]);
    if y1 != y2 {
        return Err(Error::MergeLabel(y1, y2));
    }
    let (x1, x2) = (set.point(i1), set.point(i2));
    if let Some(neuron) = first_pattern_difference(params, &x1, &x2)? {
        return Err(Error::MergePattern { neuron });
    }
    let alpha = l1 / (l1 + l2);
    let merged: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    if let Some(neuron) = first_pattern_difference(params, &x1, &merged)? {
        return Err(Error::MergePattern { neuron });
    }
    let (keep, drop) = (i1.min(i2), i1.max(i2));
    let (mut rows, mut labels, mut lambda) = set.parts();
    rows[keep] = merged;
    lambda[keep] = l1 + l2;
    rows.remove(drop);
    labels.remove(drop);
    lambda.remove(drop);
    Ok(WeightedSet::from_parts(rows, labels, lambda, set.dim()))
}

fn children(x: &[f64], plan: &SplitPlan) -> (Vec<f64>, Vec<f64>) {
    let z1 = x.iter().zip(&plan.direction).map(|(a, n)| a + plan.alpha * n).collect();
    let z2 = x.iter().zip(&plan.direction).map(|(a, n)| a - plan.beta * n).collect();
    (z1, z2)
}

fn check_split_children(params: &NetworkParams, x: &[f64], z1: &[f64], z2: &[f64]) -> Result<()> {
    let base = params.activation_pattern(x)?;
    for z in [z1, z2] {
        if let Some(neuron) = base.first_difference(&params.activation_pattern(z)?) {
            return Err(Error::SplitPattern { neuron });
        }
    }
    let sign = params.forward(x)?.signum();
    for z in [z1, z2] {
        if params.forward(z)?.signum() != sign {
            return Err(Error::SplitClassification);
        }
    }
    Ok(())
}

/// Replaces `x_l` by `z₁ = x_l + αν` (multiplier `βλ_l/(α+β)`) at index `l`
/// and `z₂ = x_l − βν` (multiplier `αλ_l/(α+β)`) right after it.
pub fn split(set: &WeightedSet, plan: &SplitPlan, params: &NetworkParams) -> Result<WeightedSet> {
    set.check_index(plan.index)?;
    plan.validate(set.dim())?;
    let l = plan.index;
    let lambda_l = set.multipliers[l];
    if !(lambda_l > 0.0) {
        return Err(Error::SplitMultiplier(lambda_l));
    }
    let x = set.point(l);
    let (z1, z2) = children(&x, plan);
    check_split_children(params, &x, &z1, &z2)?;
    let total = plan.alpha + plan.beta;
    let (mut rows, mut labels, mut lambda) = set.parts();
    rows[l] = z1;
    lambda[l] = plan.beta * lambda_l / total;
    rows.insert(l + 1, z2);
    labels.insert(l + 1, labels[l]);
    lambda.insert(l + 1, plan.alpha * lambda_l / total);
    Ok(WeightedSet::from_parts(rows, labels, lambda, set.dim()))
}

/// `(t⁺, t⁻)`: how far `x` can move along `+ν` and `−ν` before any neuron
/// changes state. `+∞` when no neuron constrains that direction.
pub fn pattern_boundary_oracle(params: &NetworkParams, x: &[f64], direction: &[f64]) -> Result<(f64, f64)> {
    check_len("direction", params.input_dim(), direction.len())?;
    let (mut up, mut down) = (f64::INFINITY, f64::INFINITY);
    for j in 0..params.width() {
        let z = params.preactivation(j, x);
        if z == 0.0 {
            return Err(Error::BoundaryPosition { neuron: j });
        }
        let rate: f64 = params.weight_row(j).iter().zip(direction).map(|(a, b)| a * b).sum();
        if rate == 0.0 {
            continue;
        }
        let t = -z / rate;
        if t > 0.0 {
            up = up.min(t);
        } else {
            down = down.min(-t);
        }
    }
    Ok((up, down))
}

/// `|⟨w_j, x⟩ + b_j|` for every neuron, i.e. `|D_j(x)|·‖w_j‖`. Neurons with
/// `w_j = 0` never change state and get `+∞`.
fn boundary_terms(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    (0..params.width())
        .map(|j| match params.signed_distance(j, x) {
            Ok(dist) => Ok(dist.abs() * params.weight_row(j).iter().map(|t| t * t).sum::<f64>().sqrt()),
            Err(Error::DegenerateNeuron { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect()
}

fn min_ratio(numerators: &[f64], denominators: impl Iterator<Item = f64>) -> f64 {
    numerators
        .iter()
        .zip(denominators)
        .map(|(&n, den)| if den > 0.0 { n / den } else if n == 0.0 { 0.0 } else { f64::INFINITY })
        .fold(f64::INFINITY, f64::min)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || gamma.is_infinite() {
        return Err(Error::Invalid(format!("direction bound γ must be finite and nonnegative (got {gamma})")));
    }
    Ok(())
}

/// `min_j |D_j(x_l)|‖w_j‖ / (γ Σλ)`: the exact-KKT budget as stated, without
/// an output-weight factor. `γ = 0` is unbounded.
pub fn split_budget_exact(params: &NetworkParams, set: &WeightedSet, l: usize, gamma: f64) -> Result<Budget> {
    set.check_index(l)?;
    check_gamma(gamma)?;
    let terms = boundary_terms(params, &set.point(l))?;
    let den = gamma * set.multipliers.total();
    Ok(Budget::from_value(min_ratio(&terms, std::iter::repeat(den))))
}

/// `min_j |D_j(x_l)|‖w_j‖ / (|v_j| γ Σλ)`.
pub fn split_budget_exact_corrected(params: &NetworkParams, set: &WeightedSet, l: usize, gamma: f64) -> Result<Budget> {
    set.check_index(l)?;
    check_gamma(gamma)?;
    let terms = boundary_terms(params, &set.point(l))?;
    let total = set.multipliers.total();
    let v = params.output_weights();
    Ok(Budget::from_value(min_ratio(&terms, v.iter().map(|vj| vj.abs() * gamma * total))))
}

fn approx_terms(params: &NetworkParams, set: &WeightedSet, l: usize, gamma: f64, epsilon: f64) -> Result<Vec<f64>> {
    set.check_index(l)?;
    check_gamma(gamma)?;
    if !(epsilon >= 0.0) || epsilon.is_infinite() {
        return Err(Error::Invalid(format!("residual ε must be finite and nonnegative (got {epsilon})")));
    }
    let terms = boundary_terms(params, &set.point(l))?;
    let total = set.multipliers.total();
    let v = params.output_weights();
    Ok(terms
        .iter()
        .zip(v.iter())
        .map(|(&n, vj)| min_ratio(&[n], std::iter::once(epsilon + gamma * vj.abs() * total)))
        .collect())
}

/// `min_j |D_j(x_l)|‖w_j‖ / (ε + γ|v_j|Σλ)`.
pub fn split_budget_approx(params: &NetworkParams, set: &WeightedSet, l: usize, gamma: f64, epsilon: f64) -> Result<Budget> {
    let terms = approx_terms(params, set, l, gamma, epsilon)?;
    Ok(Budget::from_value(terms.into_iter().fold(f64::INFINITY, f64::min)))
}

pub fn budget_report(params: &NetworkParams, set: &WeightedSet, l: usize, direction: &[f64], gamma: f64, epsilon: f64) -> Result<BudgetReport> {
    let exact = split_budget_exact(params, set, l, gamma)?;
    let corrected = split_budget_exact_corrected(params, set, l, gamma)?;
    let terms = approx_terms(params, set, l, gamma, epsilon)?;
    let approx = Budget::from_value(terms.iter().copied().fold(f64::INFINITY, f64::min));
    let (up, down) = pattern_boundary_oracle(params, &set.point(l), direction)?;
    Ok(BudgetReport {
        index: l,
        gamma,
        epsilon,
        exact_budget: exact,
        exact_budget_corrected: corrected,
        approx_budget: approx,
        safe_budget: corrected.min(approx),
        oracle_budget: Budget::from_value(up.min(down)),
        per_neuron_terms: terms.into_iter().map(Budget::from_value).collect(),
    })
}

/// Upper bound on the growth of the complementarity slack `δ` caused by a
/// split, summed over all neurons: `λ_l(α+β) Σ_j |v_j| (ε + γ|v_j|Σλ)`.
/// Admissible when it stays below the margin `p = min_i y_iΦ(x_i)` of the set.
pub fn delta_degradation(params: &NetworkParams, set: &WeightedSet, plan: &SplitPlan, epsilon: f64) -> Result<(f64, bool)> {
    set.check_index(plan.index)?;
    let total = set.multipliers.total();
    let per: f64 = params.output_weights().iter().map(|vj| vj.abs() * (epsilon + plan.gamma * vj.abs() * total)).sum();
    let delta = set.multipliers[plan.index] * (plan.alpha + plan.beta) * per;
    let out = params.forward_batch(set.points())?;
    let p = out.iter().zip(set.labels()).map(|(f, y)| y * f).fold(f64::INFINITY, f64::min);
    Ok((delta, delta < p))
}

/// Full left singular basis of the `d × n` column data matrix, with singular
/// values padded by zeros up to `d`.
fn left_singular(set: &WeightedSet) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = (set.len(), set.dim());
    let cols = n.max(d);
    let padded = DMatrix::from_fn(d, cols, |r, c| if c < n { set.points()[(c, r)] } else { 0.0 });
    let svd = SVD::new(padded, true, false);
    let u = svd.u.expect("left singular vectors requested");
    (u, svd.singular_values.iter().copied().collect())
}

fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    if lead < 0.0 {
        v.iter_mut().for_each(|t| *t = -*t);
    }
    v
}

fn argmin(values: &[f64]) -> usize {
    (0..values.len()).fold(0, |best, i| if values[i] < values[best] { i } else { best })
}

/// A unit vector orthogonal to every point, if the points do not span `R^d`
/// (numerical rank judged at `1e-10·σ₁`).
pub fn orthogonal_direction(set: &WeightedSet) -> Option<Vec<f64>> {
    if set.is_empty() {
        let mut e = vec![0.0; set.dim()];
        e[0] = 1.0;
        return Some(e);
    }
    let (u, sigma) = left_singular(set);
    let top = sigma.iter().copied().fold(0.0f64, f64::max);
    if top == 0.0 {
        return Some(canonical_sign(u.column(0).iter().copied().collect()));
    }
    let rank = sigma.iter().filter(|&&s| s > 1e-10 * top).count();
    if rank >= set.dim() {
        return None;
    }
    let idx = argmin(&sigma);
    let mut nu: DVector<f64> = u.column(idx).into_owned();
    // Clean off any round-off component along the row space.
    for (c, &s) in sigma.iter().enumerate() {
        if s > 1e-10 * top {
            let uc = u.column(c);
            let proj = uc.dot(&nu);
            nu.axpy(-proj, &uc, 1.0);
        }
    }
    let norm = nu.norm();
    if norm == 0.0 {
        return None;
    }
    Some(canonical_sign((nu / norm).iter().copied().collect()))
}

/// The left singular vector of the smallest singular value `σ_d` of the
/// `d × n` column data matrix; `|⟨x_i, ν⟩| ≤ σ_d` for every point.
pub fn svd_direction(set: &WeightedSet) -> (Vec<f64>, f64) {
    let (u, sigma) = left_singular(set);
    let idx = argmin(&sigma);
    (canonical_sign(u.column(idx).iter().copied().collect()), sigma[idx])
}

/// Splits every point along a direction orthogonal to the whole set with
/// `α = β = r(1 + 10⁻³)`, so every new point is farther than `r` from every
/// original point. Points with zero multiplier are split the same way and
/// both children carry zero.
pub fn construct_distant_kkt_set(params: &NetworkParams, set: &WeightedSet, r: f64) -> Result<WeightedSet> {
    if !(r >= 0.0) || r.is_infinite() {
        return Err(Error::Invalid(format!("radius must be finite and nonnegative (got {r})")));
    }
    let nu = orthogonal_direction(set).ok_or(Error::NoOrthogonalDirection)?;
    let step = if r > 0.0 { r * (1.0 + 1e-3) } else { 1e-6 };
    let plan_for = |index| SplitPlan { index, direction: nu.clone(), alpha: step, beta: step, gamma: 0.0 };
    let (mut rows, mut labels, mut lambda) = (Vec::new(), Vec::new(), Vec::new());
    for l in 0..set.len() {
        let x = set.point(l);
        let (z1, z2) = children(&x, &plan_for(l));
        check_split_children(params, &x, &z1, &z2)?;
        let half = set.multipliers[l] / 2.0;
        rows.push(z1);
        rows.push(z2);
        labels.extend([set.labels[l]; 2]);
        lambda.extend([half; 2]);
    }
    Ok(WeightedSet::from_parts(rows, labels, lambda, set.dim()))
}
