//! The prior-free reconstruction attack: joint gradient descent on candidate
//! points and multipliers against the KKT-loss.
//!
//! The optimizer works on the smooth surrogate `γ₁‖r‖² + γ₂ Σ[−λ_i]_+`; reported
//! losses are always the unsquared `γ₁‖r‖ + γ₂ Σ[−λ_i]_+`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_len, Error, Result};
use crate::kkt::{self, negative_mass, Activations, KktLossWeights};
use crate::net::{check_label, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitGeometry {
    Sphere { radius: f64 },
    Box { lo: f64, hi: f64 },
}

impl InitGeometry {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitGeometry::Sphere { radius } if !(radius > 0.0 && radius.is_finite()) => {
                Err(Error::Invalid(format!("sphere radius must be positive (got {radius})")))
            }
            InitGeometry::Box { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => {
                Err(Error::Invalid(format!("box bounds must satisfy lo < hi (got {lo}, {hi})")))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        match *self {
            InitGeometry::Sphere { radius } => loop {
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = g.iter().map(|t| t * t).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break g.into_iter().map(|t| radius * t / norm).collect();
                }
            },
            InitGeometry::Box { lo, hi } => (0..d).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }
}

/// `sphere:<r>` or `box:<lo>,<hi>`.
impl std::str::FromStr for InitGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("init must be sphere:<r> or box:<lo>,<hi> (got {s:?})"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let geometry = match kind {
            "sphere" => InitGeometry::Sphere { radius: num(rest)? },
            "box" => {
                let (lo, hi) = rest.split_once(',').ok_or_else(bad)?;
                InitGeometry::Box { lo: num(lo)?, hi: num(hi)? }
            }
            _ => return Err(bad()),
        };
        geometry.validate()?;
        Ok(geometry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelAssignment {
    /// Alternating `+1, −1, +1, …` by candidate index.
    Balanced,
    AllPositive,
    AllNegative,
}

impl LabelAssignment {
    pub fn label(self, i: usize) -> f64 {
        match self {
            LabelAssignment::Balanced => {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            LabelAssignment::AllPositive => 1.0,
            LabelAssignment::AllNegative => -1.0,
        }
    }
}

/// How the multipliers are initialized for a fresh restart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaInit {
    /// One shared value `s ≥ 0` minimizing `‖θ − s Σ_i y_i ∇_θΦ(θ; x_i)‖`.
    SharedLeastSquares,
    /// Nonnegative least squares against the initial candidates.
    Nonnegative,
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub m: usize,
    pub init: InitGeometry,
    pub label_assignment: LabelAssignment,
    pub lambda_init: LambdaInit,
    pub weights: KktLossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Run restarts on the rayon pool.
    pub parallel: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            m: 200,
            init: InitGeometry::Sphere { radius: 1.0 },
            label_assignment: LabelAssignment::Balanced,
            lambda_init: LambdaInit::SharedLeastSquares,
            weights: KktLossWeights::default(),
            learning_rate: 1e-2,
            iterations: 5_000,
            restarts: 8,
            seed: 0,
            parallel: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("candidate count m must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Invalid("restarts must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive (got {})", self.learning_rate)));
        }
        KktLossWeights::new(self.weights.gamma1, self.weights.gamma2)?;
        self.init.validate()
    }
}

/// Candidate points, their labels and multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateState {
    pub points: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl CandidateState {
    pub fn new(points: DMatrix<f64>, labels: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        check_len("candidate labels", points.nrows(), labels.len())?;
        check_len("candidate multipliers", points.nrows(), lambda.len())?;
        for &y in &labels {
            check_label(y)?;
        }
        Ok(CandidateState { points, labels, lambda })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One logged point of a descent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentLog {
    pub iteration: usize,
    /// Unsquared KKT-loss of the accepted state.
    pub kkt_loss: f64,
    /// Value of the squared surrogate the optimizer minimizes.
    pub surrogate: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub state: CandidateState,
    pub kkt_loss: f64,
    pub log: Vec<DescentLog>,
    pub steps: StepSizes,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub candidates: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub final_kkt_loss: f64,
    pub per_candidate_nn_distance: Option<Vec<f64>>,
    pub topk_mean_nn_distance: Option<f64>,
    /// Final unsquared loss per restart; `+∞` marks a diverged restart.
    pub restart_losses: Vec<f64>,
    pub best_restart: usize,
}

struct Evaluation {
    surrogate: f64,
    residual_norm: f64,
    act: Activations,
    rw: DMatrix<f64>,
    rb: DVector<f64>,
    rv: DVector<f64>,
}

fn evaluate(params: &NetworkParams, state: &CandidateState, weights: KktLossWeights) -> Result<Evaluation> {
    let act = Activations::new(params, &state.points)?;
    let coef = DVector::from_fn(state.len(), |i, _| state.lambda[i] * state.labels[i]);
    let (gw, gb, gv) = kkt::weighted_gradient_sum_with(params, &state.points, &act, &coef);
    let rw = params.weights() - gw;
    let rb = params.biases() - gb;
    let rv = params.output_weights() - gv;
    let sq = rw.norm_squared() + rb.norm_squared() + rv.norm_squared();
    let surrogate = weights.gamma1 * sq + weights.gamma2 * negative_mass(&state.lambda);
    Ok(Evaluation { surrogate, residual_norm: sq.sqrt(), act, rw, rb, rv })
}

fn unsquared(eval: &Evaluation, state: &CandidateState, weights: KktLossWeights) -> f64 {
    weights.gamma1 * eval.residual_norm + weights.gamma2 * negative_mass(&state.lambda)
}

/// `⟨r, ∇_θΦ(θ; x_i)⟩` for every row of `points`, given that row's activations.
fn residual_projection(params: &NetworkParams, points: &DMatrix<f64>, act: &Activations, eval: &Evaluation) -> DVector<f64> {
    let (m, k) = act.s.shape();
    let v = params.output_weights();
    // Q_ij = ⟨r_Wj, x_i⟩ + r_bj
    let q = points * eval.rw.transpose();
    DVector::from_fn(m, |i, _| {
        let mut acc = 0.0;
        for j in 0..k {
            if act.s[(i, j)] != 0.0 {
                acc += v[j] * (q[(i, j)] + eval.rb[j]) + act.a[(i, j)] * eval.rv[j];
            }
        }
        acc
    })
}

fn lambda_gradient(params: &NetworkParams, state: &CandidateState, eval: &Evaluation, weights: KktLossWeights) -> DVector<f64> {
    let proj = residual_projection(params, &state.points, &eval.act, eval);
    DVector::from_fn(state.len(), |i, _| {
        let penalty = if state.lambda[i] < 0.0 { -weights.gamma2 } else { 0.0 };
        -2.0 * weights.gamma1 * state.labels[i] * proj[i] + penalty
    })
}

// ∂/∂x_i = −2γ₁ c_i Σ_j S_ij (v_j r_Wj + r_vj w_j)
fn point_gradient(params: &NetworkParams, state: &CandidateState, eval: &Evaluation, weights: KktLossWeights) -> DMatrix<f64> {
    let v = params.output_weights();
    let w = params.weights();
    let mut mix = eval.rw.clone();
    for j in 0..mix.nrows() {
        let (vj, rvj) = (v[j], eval.rv[j]);
        for c in 0..mix.ncols() {
            mix[(j, c)] = vj * mix[(j, c)] + rvj * w[(j, c)];
        }
    }
    let mut grad = &eval.act.s * mix;
    for i in 0..state.len() {
        let ci = state.lambda[i] * state.labels[i];
        grad.row_mut(i).scale_mut(-2.0 * weights.gamma1 * ci);
    }
    grad
}

/// Change of `γ₁‖r‖²` if candidate `i` alone moved from `x_i` to `x'_i`, for
/// every `i` at once.
fn single_move_changes(
    params: &NetworkParams,
    state: &CandidateState,
    eval: &Evaluation,
    moved: &DMatrix<f64>,
    weights: KktLossWeights,
) -> Result<DVector<f64>> {
    let act_new = Activations::new(params, moved)?;
    let proj_old = residual_projection(params, &state.points, &eval.act, eval);
    let proj_new = residual_projection(params, moved, &act_new, eval);
    let (m, k) = eval.act.s.shape();
    let v = params.output_weights();
    Ok(DVector::from_fn(m, |i, _| {
        let c = state.lambda[i] * state.labels[i];
        let x = state.points.row(i);
        let xn = moved.row(i);
        let (xx, xn_xn, x_xn) = (x.dot(&x) + 1.0, xn.dot(&xn) + 1.0, x.dot(&xn) + 1.0);
        // ‖∇Φ(x') − ∇Φ(x)‖²
        let mut diff = 0.0;
        for j in 0..k {
            let (s0, s1) = (eval.act.s[(i, j)], act_new.s[(i, j)]);
            let (a0, a1) = (eval.act.a[(i, j)], act_new.a[(i, j)]);
            let v2 = v[j] * v[j];
            diff += v2 * (s1 * xn_xn + s0 * xx - 2.0 * s0 * s1 * x_xn) + (a1 - a0) * (a1 - a0);
        }
        weights.gamma1 * (c * c * diff.max(0.0) - 2.0 * c * (proj_new[i] - proj_old[i]))
    }))
}

/// Gradients of the squared surrogate `γ₁‖r‖² + γ₂Σ[−λ_i]_+` with respect to
/// the candidate points (`m × d`) and multipliers.
pub fn attack_gradients(
    params: &NetworkParams,
    candidates: &DMatrix<f64>,
    labels: &[f64],
    lambda: &[f64],
    weights: KktLossWeights,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let state = CandidateState::new(candidates.clone(), labels.to_vec(), lambda.to_vec())?;
    let eval = evaluate(params, &state, weights)?;
    Ok((point_gradient(params, &state, &eval, weights), lambda_gradient(params, &state, &eval, weights)))
}

/// The squared surrogate objective at the given state.
pub fn surrogate_loss(params: &NetworkParams, candidates: &DMatrix<f64>, labels: &[f64], lambda: &[f64], weights: KktLossWeights) -> Result<f64> {
    let state = CandidateState::new(candidates.clone(), labels.to_vec(), lambda.to_vec())?;
    Ok(evaluate(params, &state, weights)?.surrogate)
}

fn is_log_iteration(it: usize) -> bool {
    it == 0 || it.is_power_of_two()
}

/// Step sizes after a descent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    /// Per-candidate step on the points.
    pub points: Vec<f64>,
    pub multipliers: f64,
}

/// Gradient descent from an explicit initial state.
///
/// Each iteration takes one step on the multipliers and then one on the
/// points. The multiplier step is a plain backtracking step: rejected and
/// halved if the surrogate increases, grown by 10% when accepted.
///
/// The residual jumps whenever a candidate crosses a neuron boundary, so the
/// point step is backtracked per candidate. Each candidate's move is first
/// tested on its own against the current residual; a failing candidate stays
/// put and has its step halved. The passing moves are applied together, and
/// their steps grow if the joint move decreases the surrogate and halve if it
/// does not.
pub fn descend(
    params: &NetworkParams,
    init: CandidateState,
    weights: KktLossWeights,
    learning_rate: f64,
    iterations: usize,
) -> Result<DescentOutcome> {
    if init.points.ncols() != params.input_dim() {
        return Err(Error::Shape { expected: params.input_dim(), got: init.points.ncols() });
    }
    let m = init.len();
    let mut state = init;
    let mut eval = evaluate(params, &state, weights)?;
    if !eval.surrogate.is_finite() {
        return Err(Error::AttackDiverged { restarts: 1, losses: vec![eval.surrogate] });
    }
    let mut steps = StepSizes { points: vec![learning_rate; m], multipliers: learning_rate };
    let entry = |it: usize, eval: &Evaluation, state: &CandidateState, steps: &StepSizes| DescentLog {
        iteration: it,
        kkt_loss: unsquared(eval, state, weights),
        surrogate: eval.surrogate,
        learning_rate: steps.multipliers,
    };
    let mut log = vec![entry(0, &eval, &state, &steps)];
    let mut last = 0;
    for it in 1..=iterations {
        if eval.surrogate == 0.0 {
            break;
        }
        let mut active = false;

        let g = lambda_gradient(params, &state, &eval, weights);
        if g.amax() > 0.0 {
            active = true;
            let lr = steps.multipliers;
            let trial = CandidateState {
                points: state.points.clone(),
                labels: state.labels.clone(),
                lambda: state.lambda.iter().zip(g.iter()).map(|(l, g)| l - lr * g).collect(),
            };
            let trial_eval = evaluate(params, &trial, weights)?;
            if trial_eval.surrogate.is_finite() && trial_eval.surrogate <= eval.surrogate {
                state = trial;
                eval = trial_eval;
                steps.multipliers *= 1.1;
            } else {
                steps.multipliers *= 0.5;
            }
        }

        let g = point_gradient(params, &state, &eval, weights);
        if g.amax() > 0.0 {
            active = true;
            let mut moved = state.points.clone();
            for i in 0..m {
                let step = steps.points[i];
                for c in 0..moved.ncols() {
                    moved[(i, c)] -= step * g[(i, c)];
                }
            }
            let changes = single_move_changes(params, &state, &eval, &moved, weights)?;
            let mut trial = state.clone();
            let mut passed = Vec::new();
            for i in 0..m {
                if g.row(i).amax() == 0.0 {
                    continue;
                }
                if changes[i] <= 0.0 {
                    trial.points.set_row(i, &moved.row(i));
                    passed.push(i);
                } else {
                    steps.points[i] *= 0.5;
                }
            }
            if !passed.is_empty() {
                let trial_eval = evaluate(params, &trial, weights)?;
                let accept = trial_eval.surrogate.is_finite() && trial_eval.surrogate <= eval.surrogate;
                if accept {
                    state = trial;
                    eval = trial_eval;
                }
                let factor = if accept { 1.1 } else { 0.5 };
                for &i in &passed {
                    steps.points[i] *= factor;
                }
            }
        }

        last = it;
        if !active || (steps.multipliers < 1e-300 && steps.points.iter().all(|&p| p < 1e-300)) {
            break;
        }
        if is_log_iteration(it) {
            log.push(entry(it, &eval, &state, &steps));
        }
    }
    let kkt_loss = unsquared(&eval, &state, weights);
    if log.last().map(|l| l.iteration) != Some(last) {
        log.push(entry(last, &eval, &state, &steps));
    }
    Ok(DescentOutcome { state, kkt_loss, log, steps })
}

/// Per-candidate RNG stream, a function of `(seed, restart, candidate)` only.
fn candidate_rng(seed: u64, restart: usize, candidate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((restart as u64) << 32) ^ candidate as u64);
    rng
}

/// Initial candidates for one restart; λ is filled in by [`initial_lambda`].
pub fn initial_candidates(config: &AttackConfig, d: usize, restart: usize) -> CandidateState {
    let m = config.m;
    let mut points = DMatrix::zeros(m, d);
    for i in 0..m {
        let mut rng = candidate_rng(config.seed, restart, i);
        let p = config.init.sample(&mut rng, d);
        for (c, t) in p.into_iter().enumerate() {
            points[(i, c)] = t;
        }
    }
    let labels = (0..m).map(|i| config.label_assignment.label(i)).collect();
    CandidateState { points, labels, lambda: vec![0.0; m] }
}

pub fn initial_lambda(params: &NetworkParams, state: &CandidateState, init: LambdaInit) -> Result<Vec<f64>> {
    let m = state.len();
    Ok(match init {
        LambdaInit::Constant { value } => vec![value; m],
        LambdaInit::Nonnegative => kkt::fit_multipliers_to(params, &state.points, &state.labels)?.0,
        LambdaInit::SharedLeastSquares => {
            let ones = vec![1.0; m];
            let g = kkt::weighted_gradient_sum(params, &state.points, &state.labels, &ones)?;
            let gg = g.dot(&g);
            let s = if gg > 0.0 { (params.flatten().dot(&g) / gg).max(0.0) } else { 0.0 };
            vec![s; m]
        }
    })
}

/// Per-candidate minimum Euclidean distance to the true points, and the mean
/// of the `top_k` smallest of those distances.
pub fn nn_metrics(candidates: &DMatrix<f64>, truth: &DMatrix<f64>, top_k: usize) -> Result<(Vec<f64>, f64)> {
    if truth.nrows() == 0 {
        return Err(Error::Invalid("true set is empty".into()));
    }
    if candidates.ncols() != truth.ncols() {
        return Err(Error::Shape { expected: truth.ncols(), got: candidates.ncols() });
    }
    let m = candidates.nrows();
    if top_k == 0 || top_k > m {
        return Err(Error::Invalid(format!("top_k must be in 1..={m} (got {top_k})")));
    }
    let dists: Vec<f64> = (0..m)
        .map(|i| {
            (0..truth.nrows())
                .map(|t| (candidates.row(i) - truth.row(t)).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted[..top_k].iter().sum::<f64>() / top_k as f64;
    Ok((dists, mean))
}

pub fn reconstruct(params: &NetworkParams, config: &AttackConfig, truth: Option<&LabeledDataset>, top_k: usize) -> Result<ReconstructionResult> {
    config.validate()?;
    let d = params.input_dim();
    if let Some(t) = truth {
        if t.dim() != d {
            return Err(Error::Shape { expected: d, got: t.dim() });
        }
    }
    let run = |restart: usize| -> Option<DescentOutcome> {
        let mut state = initial_candidates(config, d, restart);
        state.lambda = initial_lambda(params, &state, config.lambda_init).ok()?;
        descend(params, state, config.weights, config.learning_rate, config.iterations)
            .ok()
            .filter(|o| o.kkt_loss.is_finite())
    };
    let outcomes: Vec<Option<DescentOutcome>> = if config.parallel {
        (0..config.restarts).into_par_iter().map(run).collect()
    } else {
        (0..config.restarts).map(run).collect()
    };
    let restart_losses: Vec<f64> = outcomes.iter().map(|o| o.as_ref().map_or(f64::INFINITY, |o| o.kkt_loss)).collect();
    let best = (0..config.restarts)
        .filter(|&r| outcomes[r].is_some())
        .min_by(|&a, &b| restart_losses[a].total_cmp(&restart_losses[b]).then(a.cmp(&b)));
    let Some(best_restart) = best else {
        return Err(Error::AttackDiverged { restarts: config.restarts, losses: restart_losses });
    };
    let outcome = outcomes.into_iter().nth(best_restart).flatten().expect("best restart has an outcome");
    let (per, mean) = match truth {
        Some(t) => {
            let (per, mean) = nn_metrics(&outcome.state.points, t.points(), top_k.clamp(1, config.m))?;
            (Some(per), Some(mean))
        }
        None => (None, None),
    };
    Ok(ReconstructionResult {
        candidates: outcome.state.points,
        labels: outcome.state.labels,
        multipliers: outcome.state.lambda,
        final_kkt_loss: outcome.kkt_loss,
        per_candidate_nn_distance: per,
        topk_mean_nn_distance: mean,
        restart_losses,
        best_restart,
    })
}
