//! Deterministic fixtures shared by unit tests, integration tests and the
//! acceptance suite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::net::NetworkParams;

/// A network that satisfies the stationarity condition exactly for a known
/// dataset and known nonnegative multipliers.
#[derive(Debug, Clone)]
pub struct PlantedKkt {
    pub params: NetworkParams,
    pub dataset: LabeledDataset,
    pub lambda: Vec<f64>,
}

pub fn random_net(rng: &mut ChaCha8Rng, k: usize, d: usize) -> NetworkParams {
    let w = DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let v = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    NetworkParams::new(w, b, v).expect("finite parameters")
}

pub fn random_points(rng: &mut ChaCha8Rng, m: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0))
}

/// Two clusters around `±2e₁`; one group of neurons per class.
///
/// With `u₊ = Σ_{y_i=+1} λ_i (x_i, 1)` normalized to unit length, every
/// positive-group neuron is `(w_j, b_j) = v_j u₊` with `v_j > 0`; it is active
/// exactly on the positive cluster, and `v_j = Σ_i λ_i y_i [⟨w_j, x_i⟩ + b_j]_+`
/// holds because `‖u₊‖ = 1`. The negative group mirrors this with `v_j < 0`.
pub fn planted_kkt(seed: u64, d: usize, per_class: usize, neurons_per_class: usize) -> PlantedKkt {
    assert!(d >= 1 && per_class >= 1 && neurons_per_class >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * per_class;
    let (x, y) = loop {
        let x = DMatrix::from_fn(n, d, |i, c| {
            let centre = if c == 0 { if i < per_class { 2.0 } else { -2.0 } } else { 0.0 };
            centre + rng.random_range(-0.3..0.3)
        });
        let y: Vec<f64> = (0..n).map(|i| if i < per_class { 1.0 } else { -1.0 }).collect();
        let ok = (0..n).all(|i| {
            (0..n).all(|l| {
                let ip = x.row(i).dot(&x.row(l)) + 1.0;
                if y[i] == y[l] {
                    ip > 0.1
                } else {
                    ip < -0.1
                }
            })
        });
        if ok {
            break (x, y);
        }
    };
    let mut lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut groups = Vec::new();
    for class in [1.0, -1.0] {
        let members: Vec<usize> = (0..n).filter(|&i| y[i] == class).collect();
        let mut u = DVector::<f64>::zeros(d + 1);
        for &i in &members {
            for c in 0..d {
                u[c] += lambda[i] * class * x[(i, c)];
            }
            u[d] += lambda[i] * class;
        }
        let norm = u.norm();
        for &i in &members {
            lambda[i] /= norm;
        }
        groups.push((class, u / norm));
    }
    let k = 2 * neurons_per_class;
    let mut w = DMatrix::zeros(k, d);
    let mut b = DVector::zeros(k);
    let mut v = DVector::zeros(k);
    for (g, (class, u)) in groups.iter().enumerate() {
        for t in 0..neurons_per_class {
            let j = g * neurons_per_class + t;
            let vj = class * rng.random_range(0.5..1.5);
            v[j] = vj;
            for c in 0..d {
                w[(j, c)] = vj * u[c];
            }
            b[j] = vj * u[d];
        }
    }
    PlantedKkt {
        params: NetworkParams::new(w, b, v).expect("finite"),
        dataset: LabeledDataset::new(x, y).expect("valid labels"),
        lambda,
    }
}

/// Like [`planted_kkt`] but with the data confined to the first `subspace_dim`
/// coordinates of `R^d`.
pub fn planted_kkt_in_subspace(seed: u64, d: usize, subspace_dim: usize, per_class: usize, neurons_per_class: usize) -> PlantedKkt {
    assert!(subspace_dim < d);
    let inner = planted_kkt(seed, subspace_dim, per_class, neurons_per_class);
    let n = inner.dataset.len();
    let k = inner.params.width();
    let x = DMatrix::from_fn(n, d, |i, c| if c < subspace_dim { inner.dataset.points()[(i, c)] } else { 0.0 });
    let w = DMatrix::from_fn(k, d, |j, c| if c < subspace_dim { inner.params.weights()[(j, c)] } else { 0.0 });
    PlantedKkt {
        params: NetworkParams::new(w, inner.params.biases().clone(), inner.params.output_weights().clone()).expect("finite"),
        dataset: LabeledDataset::new(x, inner.dataset.labels().to_vec()).expect("valid"),
        lambda: inner.lambda,
    }
}
