//! Full-batch gradient descent on the logistic or exponential loss.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kkt::{fit_multipliers, stationarity_residual};
use crate::net::{relu_matrix, step_matrix, NetworkParams, ParamVector, HOMOGENEITY_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Exponential,
}

impl LossKind {
    pub fn value(self, z: f64) -> f64 {
        match self {
            // log(1 + e^{-z}) without overflow for large |z|
            LossKind::Logistic => (-z).max(0.0) + (-z.abs()).exp().ln_1p(),
            LossKind::Exponential => (-z).exp(),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                if z >= 0.0 {
                    let e = (-z).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + z.exp())
                }
            }
            LossKind::Exponential => -(-z).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Divide the step by the current loss once it is below `1/n`.
    LossNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub width: usize,
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub target_loss: f64,
    pub seed: u64,
    /// Half-width of the uniform initialization; `None` means `1/√d`.
    pub init_scale: Option<f64>,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width: 200,
            loss_kind: LossKind::Logistic,
            learning_rate: 0.05,
            max_epochs: 50_000,
            target_loss: 1e-7,
            seed: 0,
            init_scale: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Invalid("width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive (got {})", self.learning_rate)));
        }
        if !(self.target_loss > 0.0) {
            return Err(Error::Invalid(format!("target loss must be positive (got {})", self.target_loss)));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Invalid(format!("init scale must be positive (got {s})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: f64,
    pub normalized_margin: f64,
    /// Stationarity residual norm under the best nonnegative multipliers.
    pub residual: f64,
    pub theta_norm: f64,
    /// Whether the loss has been below `1/n` at any epoch so far.
    pub below_1_over_n: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn reached_below_one_over_n(&self) -> bool {
        self.records.iter().any(|r| r.below_1_over_n)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.last().map(|r| r.loss)
    }
}

pub fn empirical_loss(params: &NetworkParams, dataset: &LabeledDataset, loss_kind: LossKind) -> Result<f64> {
    let out = params.forward_batch(dataset.points())?;
    let n = dataset.len() as f64;
    Ok(out.iter().zip(dataset.labels()).map(|(f, y)| loss_kind.value(y * f)).sum::<f64>() / n)
}

/// `min_i y_iΦ(θ; x_i) / ‖θ‖₂²`.
pub fn normalized_margin(params: &NetworkParams, dataset: &LabeledDataset) -> Result<f64> {
    let norm = params.norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("normalized margin of the zero network".into()));
    }
    let p = crate::kkt::margin_value(params, dataset)?;
    Ok(p / norm.powi(HOMOGENEITY_ORDER))
}

/// Empirical loss and its gradient with respect to θ, in `(W rows, b, v)` layout.
pub fn loss_and_gradient(params: &NetworkParams, dataset: &LabeledDataset, loss_kind: LossKind) -> Result<(f64, ParamVector)> {
    let (loss, gw, gb, gv) = loss_and_gradient_blocks(params, dataset, loss_kind)?;
    let (k, d) = (params.width(), params.input_dim());
    let mut g = ParamVector::zeros(k, d);
    for j in 0..k {
        for c in 0..d {
            g.w_block_mut(j)[c] = gw[(j, c)];
        }
        *g.b_entry_mut(j) = gb[j];
        *g.v_entry_mut(j) = gv[j];
    }
    Ok((loss, g))
}

fn loss_and_gradient_blocks(
    params: &NetworkParams,
    dataset: &LabeledDataset,
    loss_kind: LossKind,
) -> Result<(f64, DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let x = dataset.points();
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape { expected: params.input_dim(), got: x.ncols() });
    }
    let n = dataset.len();
    let z = params.preactivations(x);
    let a = relu_matrix(&z);
    let out = &a * params.output_weights();
    let y = dataset.labels();
    let mut loss = 0.0;
    let mut coef = DVector::zeros(n);
    for i in 0..n {
        let m = y[i] * out[i];
        loss += loss_kind.value(m);
        coef[i] = loss_kind.derivative(m) * y[i] / n as f64;
    }
    loss /= n as f64;
    let gv = a.transpose() * &coef;
    let mut dz = step_matrix(&z);
    let v = params.output_weights();
    for i in 0..n {
        for j in 0..params.width() {
            dz[(i, j)] *= coef[i] * v[j];
        }
    }
    let gw = dz.transpose() * x;
    let gb = dz.row_sum().transpose();
    Ok((loss, gw, gb, gv))
}

pub fn initialize(k: usize, d: usize, init_scale: f64, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(-init_scale..=init_scale);
    let mut w = DMatrix::zeros(k, d);
    for j in 0..k {
        for c in 0..d {
            w[(j, c)] = draw();
        }
    }
    let b = DVector::from_fn(k, |_, _| draw());
    let v = DVector::from_fn(k, |_, _| draw());
    NetworkParams::new(w, b, v).expect("finite initialization")
}

/// Epochs 1, 2, 4, 8, ... are logged, plus epoch 0 and the final epoch.
fn is_log_epoch(epoch: usize) -> bool {
    epoch == 0 || epoch.is_power_of_two()
}

fn record(params: &NetworkParams, dataset: &LabeledDataset, epoch: usize, loss: f64, below: bool) -> Result<TraceRecord> {
    let theta_norm = params.norm();
    let normalized_margin = if theta_norm > 0.0 { normalized_margin(params, dataset)? } else { 0.0 };
    let lambda = fit_multipliers(params, dataset)?;
    let (residual, _) = stationarity_residual(params, dataset.points(), dataset.labels(), &lambda)?;
    Ok(TraceRecord { epoch, loss, normalized_margin, residual, theta_norm, below_1_over_n: below })
}

pub fn train_to_kkt(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(NetworkParams, TrainTrace)> {
    config.validate()?;
    let init_scale = config.init_scale.unwrap_or(1.0 / (dataset.dim() as f64).sqrt());
    let params = initialize(config.width, dataset.dim(), init_scale, config.seed);
    train_from(params, dataset, config)
}

/// Runs gradient descent from the given parameters.
pub fn train_from(mut params: NetworkParams, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(NetworkParams, TrainTrace)> {
    config.validate()?;
    if params.input_dim() != dataset.dim() {
        return Err(Error::Shape { expected: params.input_dim(), got: dataset.dim() });
    }
    let threshold = 1.0 / dataset.len() as f64;
    let mut trace = TrainTrace::default();
    let (mut loss, mut gw, mut gb, mut gv) = loss_and_gradient_blocks(&params, dataset, config.loss_kind)?;
    let mut below = loss < threshold;
    trace.records.push(record(&params, dataset, 0, loss, below)?);

    let mut epoch = 0;
    while epoch < config.max_epochs && loss > config.target_loss {
        let step = match config.lr_schedule {
            LrSchedule::LossNormalized if loss < threshold => config.learning_rate / loss,
            _ => config.learning_rate,
        };
        *params.w_mut() -= step * &gw;
        *params.b_mut() -= step * &gb;
        *params.v_mut() -= step * &gv;
        epoch += 1;
        let next = loss_and_gradient_blocks(&params, dataset, config.loss_kind)?;
        if !next.0.is_finite() || !params.norm().is_finite() {
            return Err(Error::TrainingDiverged { epoch, trace: Box::new(trace) });
        }
        (loss, gw, gb, gv) = next;
        below |= loss < threshold;
        if is_log_epoch(epoch) {
            trace.records.push(record(&params, dataset, epoch, loss, below)?);
        }
    }
    if trace.records.last().map(|r| r.epoch) != Some(epoch) {
        trace.records.push(record(&params, dataset, epoch, loss, below)?);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_net, random_points};

    fn two_points() -> LabeledDataset {
        LabeledDataset::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn zero_network_losses() {
        let ds = two_points();
        let zero = NetworkParams::zeros(3, 2);
        assert_eq!(empirical_loss(&zero, &ds, LossKind::Logistic).unwrap(), 2f64.ln());
        assert_eq!(empirical_loss(&zero, &ds, LossKind::Exponential).unwrap(), 1.0);
    }

    #[test]
    fn loss_vanishes_under_scaling_of_a_separating_net() {
        let ds = two_points();
        let net = NetworkParams::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0], vec![1.0, -1.0]).unwrap();
        let big = net.scaled(1e3f64.sqrt() * 10.0);
        assert!(empirical_loss(&big, &ds, LossKind::Logistic).unwrap() < 1e-300);
        assert!(empirical_loss(&big, &ds, LossKind::Exponential).unwrap() < 1e-300);
    }

    #[test]
    fn logistic_is_stable_for_large_margins() {
        assert!(LossKind::Logistic.value(-800.0).is_finite());
        assert!((LossKind::Logistic.value(-800.0) - 800.0).abs() < 1e-9);
        assert!(LossKind::Logistic.derivative(800.0) <= 0.0);
        assert!((LossKind::Logistic.derivative(-800.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_margin_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng, 6, 2);
        let ds = two_points();
        let g = normalized_margin(&net, &ds).unwrap();
        for s in [0.5, 4.0] {
            assert!((normalized_margin(&net.scaled(s), &ds).unwrap() - g).abs() < 1e-9);
        }
        // A network that misclassifies the first point.
        let wrong = NetworkParams::from_rows(&[vec![1.0, 0.0]], vec![0.0], vec![-1.0]).unwrap();
        assert!(normalized_margin(&wrong, &ds).unwrap() < 0.0);
        assert!(normalized_margin(&NetworkParams::zeros(2, 2), &ds).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng, 4, 3);
        let ds = LabeledDataset::new(random_points(&mut rng, 5, 3), vec![1.0, -1.0, 1.0, 1.0, -1.0]).unwrap();
        for kind in [LossKind::Logistic, LossKind::Exponential] {
            let (_, g) = loss_and_gradient(&net, &ds, kind).unwrap();
            let theta = net.flatten();
            for i in 0..theta.len() {
                let h = 1e-6;
                let mut p = theta.as_slice().to_vec();
                let mut m = p.clone();
                p[i] += h;
                m[i] -= h;
                let lp = empirical_loss(&NetworkParams::from_flat(&ParamVector::from_vec(4, 3, p).unwrap()).unwrap(), &ds, kind).unwrap();
                let lm = empirical_loss(&NetworkParams::from_flat(&ParamVector::from_vec(4, 3, m).unwrap()).unwrap(), &ds, kind).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g.as_slice()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let net = random_net(&mut rng, 8, 3);
            let ds = LabeledDataset::new(random_points(&mut rng, 10, 3), (0..10).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect()).unwrap();
            let (l0, g) = loss_and_gradient(&net, &ds, LossKind::Logistic).unwrap();
            let mut theta = net.flatten();
            theta.axpy(-1e-6, &g);
            let l1 = empirical_loss(&NetworkParams::from_flat(&theta).unwrap(), &ds, LossKind::Logistic).unwrap();
            assert!(l1 < l0, "seed {seed}: {l1} >= {l0}");
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = two_points();
        let cfg = TrainConfig { width: 4, max_epochs: 0, seed: 9, ..TrainConfig::default() };
        let (net, trace) = train_to_kkt(&ds, &cfg).unwrap();
        assert_eq!(net, initialize(4, 2, 1.0 / 2f64.sqrt(), 9));
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].epoch, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = two_points();
        let cfg = TrainConfig { width: 4, max_epochs: 300, seed: 1, ..TrainConfig::default() };
        let (a, ta) = train_to_kkt(&ds, &cfg).unwrap();
        let (b, tb) = train_to_kkt(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = two_points();
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { target_loss: -1.0, ..TrainConfig::default() },
            TrainConfig { width: 0, ..TrainConfig::default() },
            TrainConfig { init_scale: Some(0.0), ..TrainConfig::default() },
        ] {
            assert!(train_to_kkt(&ds, &cfg).is_err());
        }
    }

    #[test]
    fn huge_learning_rate_diverges_with_trace() {
        let ds = two_points();
        let cfg = TrainConfig {
            width: 4,
            learning_rate: 1e200,
            lr_schedule: LrSchedule::Constant,
            loss_kind: LossKind::Exponential,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        match train_to_kkt(&ds, &cfg) {
            Err(Error::TrainingDiverged { trace, .. }) => {
                assert!(!trace.records.is_empty());
                assert!(trace.records.iter().all(|r| r.loss.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
