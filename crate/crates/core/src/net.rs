//! The homogeneous two-layer ReLU classifier `Φ(θ; x) = Σ_j v_j [⟨w_j, x⟩ + b_j]_+`.
//!
//! Parameters are stored as a `k × d` weight matrix (row `j` is `w_j`), a bias
//! vector and an output-weight vector. Flattened parameter vectors always use
//! the layout `(W rows in order, b, v)`.
//!
//! The ReLU subgradient at an exactly-zero preactivation is taken to be 0, in
//! agreement with the strict inequality used for activation patterns.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Degree of positive homogeneity of a two-layer ReLU network.
pub const HOMOGENEITY_ORDER: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    w: DMatrix<f64>,
    b: DVector<f64>,
    v: DVector<f64>,
}

/// Per-neuron on/off bits for one input.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern(pub Vec<bool>);

impl ActivationPattern {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.0[j]
    }

    /// Index of the first neuron whose bit differs, if any.
    pub fn first_difference(&self, other: &ActivationPattern) -> Option<usize> {
        self.0.iter().zip(&other.0).position(|(a, b)| a != b)
    }
}

/// Flat parameter-space vector in `(W rows, b, v)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    k: usize,
    d: usize,
    data: DVector<f64>,
}

impl ParamVector {
    pub fn zeros(k: usize, d: usize) -> Self {
        ParamVector { k, d, data: DVector::zeros(k * d + 2 * k) }
    }

    pub fn from_vec(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        crate::error::check_len("parameter vector", k * d + 2 * k, data.len())?;
        Ok(ParamVector { k, d, data: DVector::from_vec(data) })
    }

    pub fn width(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.data.dot(&other.data)
    }

    pub fn w_block(&self, j: usize) -> &[f64] {
        &self.data.as_slice()[j * self.d..(j + 1) * self.d]
    }

    pub fn b_entry(&self, j: usize) -> f64 {
        self.data[self.k * self.d + j]
    }

    pub fn v_entry(&self, j: usize) -> f64 {
        self.data[self.k * self.d + self.k + j]
    }

    pub fn w_block_mut(&mut self, j: usize) -> &mut [f64] {
        let d = self.d;
        &mut self.data.as_mut_slice()[j * d..(j + 1) * d]
    }

    pub fn b_entry_mut(&mut self, j: usize) -> &mut f64 {
        let i = self.k * self.d + j;
        &mut self.data[i]
    }

    pub fn v_entry_mut(&mut self, j: usize) -> &mut f64 {
        let i = self.k * self.d + self.k + j;
        &mut self.data[i]
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        self.data.axpy(alpha, &other.data, 1.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.data *= s;
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector { k: self.k, d: self.d, data: &self.data - &other.data }
    }
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

pub(crate) fn check_label(y: f64) -> Result<()> {
    if y == 1.0 || y == -1.0 {
        Ok(())
    } else {
        Err(Error::InvalidLabel(y))
    }
}

impl NetworkParams {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        let (k, d) = w.shape();
        if k == 0 || d == 0 {
            return Err(Error::Invalid(format!("network must have k >= 1 and d >= 1 (got k={k}, d={d})")));
        }
        crate::error::check_len("bias vector", k, b.len())?;
        crate::error::check_len("output weights", k, v.len())?;
        if w.iter().chain(b.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("network parameters must be finite".into()));
        }
        Ok(NetworkParams { w, b, v })
    }

    /// Builds a network from row-major weight rows.
    pub fn from_rows(rows: &[Vec<f64>], b: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        for row in rows {
            crate::error::check_len("weight row", d, row.len())?;
        }
        let w = DMatrix::from_fn(k, d, |j, c| rows[j][c]);
        Self::new(w, DVector::from_vec(b), DVector::from_vec(v))
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        NetworkParams { w: DMatrix::zeros(k, d), b: DVector::zeros(k), v: DVector::zeros(k) }
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn biases(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn output_weights(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn weight_row(&self, j: usize) -> Vec<f64> {
        self.w.row(j).iter().copied().collect()
    }

    pub fn param_count(&self) -> usize {
        self.width() * self.input_dim() + 2 * self.width()
    }

    /// `‖θ‖₂` over all parameters.
    pub fn norm(&self) -> f64 {
        (self.w.norm_squared() + self.b.norm_squared() + self.v.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> NetworkParams {
        NetworkParams { w: &self.w * s, b: &self.b * s, v: &self.v * s }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn preactivation(&self, j: usize, x: &[f64]) -> f64 {
        self.w.row(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[j]
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok((0..self.width()).map(|j| self.v[j] * relu(self.preactivation(j, x))).sum())
    }

    pub fn activation_pattern(&self, x: &[f64]) -> Result<ActivationPattern> {
        self.check_input(x)?;
        Ok(ActivationPattern((0..self.width()).map(|j| self.preactivation(j, x) > 0.0).collect()))
    }

    /// Signed distance `(⟨w_j, x⟩ + b_j) / ‖w_j‖` from `x` to neuron `j`'s hyperplane.
    pub fn signed_distance(&self, j: usize, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        if j >= self.width() {
            return Err(Error::Invalid(format!("neuron index {j} out of range")));
        }
        let norm = self.w.row(j).norm();
        if norm == 0.0 {
            return Err(Error::DegenerateNeuron { neuron: j });
        }
        Ok(self.preactivation(j, x) / norm)
    }

    /// `∇_θ [y Φ(θ; x)]` in `(W rows, b, v)` layout.
    pub fn grad_theta(&self, x: &[f64], y: f64) -> Result<ParamVector> {
        self.check_input(x)?;
        check_label(y)?;
        let (k, d) = (self.width(), self.input_dim());
        let mut g = ParamVector::zeros(k, d);
        for j in 0..k {
            let z = self.preactivation(j, x);
            if z > 0.0 {
                let s = y * self.v[j];
                for (gi, xi) in g.w_block_mut(j).iter_mut().zip(x) {
                    *gi = s * xi;
                }
                *g.b_entry_mut(j) = s;
                *g.v_entry_mut(j) = y * z;
            }
        }
        Ok(g)
    }

    /// Replaces every bias `b_j` by `b_j − ⟨w_j, u⟩`, so that the returned
    /// network evaluated at `x + u` reproduces this network at `x`.
    pub fn shift_bias_defense(&self, u: &[f64]) -> Result<NetworkParams> {
        self.check_input(u)?;
        let mut b = self.b.clone();
        for j in 0..self.width() {
            b[j] -= self.w.row(j).iter().zip(u).map(|(a, c)| a * c).sum::<f64>();
        }
        Ok(NetworkParams { w: self.w.clone(), b, v: self.v.clone() })
    }

    pub fn flatten(&self) -> ParamVector {
        let (k, d) = (self.width(), self.input_dim());
        let mut p = ParamVector::zeros(k, d);
        for j in 0..k {
            for c in 0..d {
                p.w_block_mut(j)[c] = self.w[(j, c)];
            }
            *p.b_entry_mut(j) = self.b[j];
            *p.v_entry_mut(j) = self.v[j];
        }
        p
    }

    pub fn from_flat(p: &ParamVector) -> Result<NetworkParams> {
        let (k, d) = (p.width(), p.input_dim());
        let w = DMatrix::from_fn(k, d, |j, c| p.w_block(j)[c]);
        let b = DVector::from_fn(k, |j, _| p.b_entry(j));
        let v = DVector::from_fn(k, |j, _| p.v_entry(j));
        NetworkParams::new(w, b, v)
    }

    /// Preactivation matrix `Z = X Wᵀ + 1 bᵀ` for a batch of row-stacked inputs.
    pub fn preactivations(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.w.transpose();
        for mut row in z.row_iter_mut() {
            row += self.b.transpose();
        }
        z
    }

    /// Network outputs for each row of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: x.ncols() });
        }
        let z = self.preactivations(x);
        Ok(z.map(relu) * &self.v)
    }

    pub(crate) fn w_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }

    pub(crate) fn b_mut(&mut self) -> &mut DVector<f64> {
        &mut self.b
    }

    pub(crate) fn v_mut(&mut self) -> &mut DVector<f64> {
        &mut self.v
    }
}

pub(crate) fn relu_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(relu)
}

pub(crate) fn step_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(|t| if t > 0.0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand_net() -> NetworkParams {
        NetworkParams::from_rows(&[vec![2.0], vec![1.0]], vec![0.0, 1.0], vec![1.0, -1.0]).unwrap()
    }

    fn random_net(rng: &mut ChaCha8Rng, k: usize, d: usize) -> NetworkParams {
        let w = DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        NetworkParams::new(w, b, v).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = NetworkParams::zeros(3, 4);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.0);
        assert!(net.activation_pattern(&[1.0, 2.0, 3.0, 4.0]).unwrap().0.iter().all(|b| !b));
    }

    #[test]
    fn hand_evaluated_forward_and_pattern() {
        let net = hand_net();
        assert_eq!(net.forward(&[1.0]).unwrap(), 0.0);
        assert_eq!(net.activation_pattern(&[1.0]).unwrap().0, vec![true, true]);
    }

    #[test]
    fn scaling_by_three_scales_output_by_nine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng, 5, 3);
        let x = random_vec(&mut rng, 3);
        let a = net.forward(&x).unwrap();
        let b = net.scaled(3.0).forward(&x).unwrap();
        assert!((b - 9.0 * a).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn boundary_point_is_inactive() {
        let net = NetworkParams::from_rows(&[vec![1.0, 1.0]], vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(net.activation_pattern(&[0.25, 0.75]).unwrap().0, vec![false]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = hand_net();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { expected: 1, got: 2 })));
        assert!(net.activation_pattern(&[]).is_err());
        assert!(net.grad_theta(&[1.0, 1.0], 1.0).is_err());
        assert!(net.shift_bias_defense(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let r = NetworkParams::from_rows(&[vec![f64::NAN]], vec![0.0], vec![1.0]);
        assert!(r.is_err());
    }

    #[test]
    fn signed_distance_examples() {
        let net = NetworkParams::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]], vec![0.0, -2.0], vec![1.0, 1.0])
            .unwrap();
        assert_eq!(net.signed_distance(0, &[3.0, 5.0]).unwrap(), 3.0);
        assert_eq!(net.signed_distance(1, &[0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(net.signed_distance(1, &[1.0, 7.0]).unwrap(), 0.0);
        let dead = NetworkParams::from_rows(&[vec![0.0, 0.0]], vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(dead.signed_distance(0, &[1.0, 1.0]), Err(Error::DegenerateNeuron { neuron: 0 })));
    }

    #[test]
    fn inactive_neuron_has_zero_gradient_blocks() {
        let net = NetworkParams::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0], vec![2.0, 3.0])
            .unwrap();
        let g = net.grad_theta(&[1.0, 4.0], 1.0).unwrap();
        assert_eq!(g.w_block(1), &[0.0, 0.0]);
        assert_eq!(g.b_entry(1), 0.0);
        assert_eq!(g.v_entry(1), 0.0);
        assert_eq!(g.w_block(0), &[2.0, 8.0]);
        assert_eq!(g.b_entry(0), 2.0);
        assert_eq!(g.v_entry(0), 1.0);
    }

    #[test]
    fn flipping_label_negates_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_net(&mut rng, 6, 4);
        let x = random_vec(&mut rng, 4);
        let gp = net.grad_theta(&x, 1.0).unwrap();
        let gn = net.grad_theta(&x, -1.0).unwrap();
        for (a, b) in gp.as_slice().iter().zip(gn.as_slice()) {
            assert_eq!(*a, -*b);
        }
        assert!(net.grad_theta(&x, 0.5).is_err());
    }

    #[test]
    fn grad_theta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let net = random_net(&mut rng, 5, 3);
            let x = random_vec(&mut rng, 3);
            if (0..5).any(|j| net.preactivation(j, &x).abs() < 1e-3) {
                continue;
            }
            let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let g = net.grad_theta(&x, y).unwrap();
            let theta = net.flatten();
            let h = 1e-5;
            for i in 0..theta.len() {
                let mut plus = theta.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                let fp = y * NetworkParams::from_flat(&ParamVector::from_vec(5, 3, plus).unwrap())
                    .unwrap()
                    .forward(&x)
                    .unwrap();
                let fm = y * NetworkParams::from_flat(&ParamVector::from_vec(5, 3, minus).unwrap())
                    .unwrap()
                    .forward(&x)
                    .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let a = g.as_slice()[i];
                assert!((fd - a).abs() <= 1e-5 * a.abs().max(1.0), "param {i}: fd {fd} vs {a}");
            }
            checked += 1;
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng, 4, 7);
        let back = NetworkParams::from_flat(&net.flatten()).unwrap();
        assert_eq!(back, net);
        assert!((net.flatten().norm() - net.norm()).abs() < 1e-12);
    }

    #[test]
    fn shift_with_zero_is_identity_and_inverse_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng, 8, 5);
        assert_eq!(net.shift_bias_defense(&[0.0; 5]).unwrap(), net);
        let u = random_vec(&mut rng, 5);
        let neg: Vec<f64> = u.iter().map(|t| -t).collect();
        let back = net.shift_bias_defense(&u).unwrap().shift_bias_defense(&neg).unwrap();
        assert_eq!(back.weights(), net.weights());
        assert_eq!(back.output_weights(), net.output_weights());
        for j in 0..8 {
            assert!((back.biases()[j] - net.biases()[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_forward_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_net(&mut rng, 7, 3);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let out = net.forward_batch(&x).unwrap();
        for i in 0..6 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            assert!((out[i] - net.forward(&row).unwrap()).abs() < 1e-12);
        }
    }
}
