//! Trainable top-T gating over the teacher pool:
//! `G(f) = softmax(keep_top(f . W_g, T))`.
//!
//! The top-T index set is treated as a constant of each forward pass, so the
//! backward pass routes gradient only through the kept softmax. Ties at the
//! selection boundary keep the lower index, which makes every run replayable.

use serde::{Deserialize, Serialize};

use crate::error::{MopdError, Result};
use crate::numerics::{masked_softmax, Distribution, MaskedLogits, Matrix, Vector};
use crate::rng;

/// Default spread for the seeded Gaussian gate initialization; near-zero
/// logits make early gates close to uniform.
pub const GATE_INIT_SIGMA: f64 = 0.01;

/// Retain the top-`t` entries of `u`, mask the rest. Ties at the t-th value
/// keep lower indices first.
pub fn keep_top(u: &[f64], t: usize) -> Result<MaskedLogits> {
    if t == 0 || t > u.len() {
        return Err(MopdError::invalid(format!(
            "selection width {t} out of range 1..={}",
            u.len()
        )));
    }
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| {
        u[b].partial_cmp(&u[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    let mut kept = vec![false; u.len()];
    for &i in order.iter().take(t) {
        kept[i] = true;
    }
    MaskedLogits::new(u.to_vec(), kept)
}

/// Gate output: sparse weights over the pool plus the selected index set
/// (ascending).
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub weights: Distribution,
    pub selected: Vec<usize>,
}

/// Single linear layer (no bias) with top-T masking and softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingNetwork {
    /// `d x H` weight matrix; logits are `f . W_g`.
    weights: Matrix,
    top_t: usize,
}

impl GatingNetwork {
    pub fn new(weights: Matrix, top_t: usize) -> Result<Self> {
        if top_t == 0 || top_t > weights.cols() {
            return Err(MopdError::invalid(format!(
                "selection width {top_t} out of range 1..={}",
                weights.cols()
            )));
        }
        Ok(GatingNetwork { weights, top_t })
    }

    pub fn seeded(joint_dim: usize, pool_size: usize, top_t: usize, seed: u64) -> Result<Self> {
        let mut r = rng::derive(seed, "gate");
        let data = rng::gaussian_vec(&mut r, joint_dim * pool_size, GATE_INIT_SIGMA);
        GatingNetwork::new(Matrix::new(joint_dim, pool_size, data)?, top_t)
    }

    pub fn pool_size(&self) -> usize {
        self.weights.cols()
    }

    pub fn joint_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn top_t(&self) -> usize {
        self.top_t
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn logits(&self, f: &Vector) -> Result<Vec<f64>> {
        self.weights.vecmat(f.as_slice())
    }

    /// `softmax(keep_top(f . W_g, T))`: masked positions are exactly zero and
    /// the kept weights sum to 1.
    pub fn forward(&self, f: &Vector) -> Result<GateOutput> {
        let logits = self.logits(f)?;
        let masked = keep_top(&logits, self.top_t)?;
        let weights = masked_softmax(&masked)?;
        Ok(GateOutput {
            selected: masked.kept_indices(),
            weights,
        })
    }

    /// Gradient of `sum_t upstream_t G(f)_t` with respect to `W_g`, holding
    /// the selected index set fixed. Unselected columns receive exactly zero.
    pub fn backward(&self, f: &Vector, upstream: &[f64]) -> Result<Matrix> {
        if upstream.len() != self.pool_size() {
            return Err(MopdError::DimensionMismatch {
                context: "gate upstream length",
                expected: self.pool_size(),
                got: upstream.len(),
            });
        }
        let out = self.forward(f)?;
        let g = out.weights.as_slice();
        // weighted mean of upstream over the kept set
        let mut mean = 0.0;
        for &t in &out.selected {
            mean += upstream[t] * g[t];
        }
        let mut grad = Matrix::zeros(self.joint_dim(), self.pool_size());
        for &t in &out.selected {
            let dl_dlogit = g[t] * (upstream[t] - mean);
            if dl_dlogit == 0.0 {
                continue;
            }
            for a in 0..self.joint_dim() {
                grad.set(a, t, f[a] * dl_dlogit);
            }
        }
        Ok(grad)
    }

    pub fn apply_update(&mut self, grad: &Matrix, lr: f64) {
        self.weights.add_scaled(grad, -lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_top_full_width_is_identity() {
        let u = vec![3.0, 1.0, 2.0];
        let m = keep_top(&u, 3).unwrap();
        assert_eq!(m.kept_indices(), vec![0, 1, 2]);
        assert_eq!(m.values(), &u[..]);
    }

    #[test]
    fn keep_top_masks_below_threshold() {
        let m = keep_top(&[3.0, 1.0, 2.0], 2).unwrap();
        assert!(m.is_kept(0));
        assert!(!m.is_kept(1));
        assert!(m.is_kept(2));
    }

    #[test]
    fn keep_top_ties_prefer_lower_index() {
        let m = keep_top(&[5.0, 5.0, 5.0, 1.0], 2).unwrap();
        assert_eq!(m.kept_indices(), vec![0, 1]);
    }

    #[test]
    fn keep_top_rejects_out_of_range_width() {
        assert!(keep_top(&[1.0, 2.0], 0).is_err());
        assert!(keep_top(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn zero_weights_full_width_gate_is_uniform() {
        let gate = GatingNetwork::new(Matrix::zeros(3, 4), 4).unwrap();
        let f = Vector::new(vec![0.1, -0.5, 0.7]).unwrap();
        let out = gate.forward(&f).unwrap();
        for &w in out.weights.as_slice() {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_sparsity_contract() {
        let mut r = rng::derive(3, "gate-sparse");
        for _ in 0..100 {
            let gate = GatingNetwork::new(
                Matrix::new(4, 6, rng::gaussian_vec(&mut r, 24, 1.0)).unwrap(),
                2,
            )
            .unwrap();
            let f = Vector::new(rng::gaussian_vec(&mut r, 4, 1.0)).unwrap();
            let out = gate.forward(&f).unwrap();
            let nonzeros = out.weights.as_slice().iter().filter(|&&w| w > 0.0).count();
            assert_eq!(nonzeros, 2);
            let sum: f64 = out.weights.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_gate_equals_plain_softmax() {
        let mut r = rng::derive(4, "gate-dense");
        let gate = GatingNetwork::new(
            Matrix::new(3, 5, rng::gaussian_vec(&mut r, 15, 1.0)).unwrap(),
            5,
        )
        .unwrap();
        let f = Vector::new(rng::gaussian_vec(&mut r, 3, 1.0)).unwrap();
        let out = gate.forward(&f).unwrap();
        let dense = crate::numerics::softmax(&Vector::new(gate.logits(&f).unwrap()).unwrap())
            .unwrap();
        for (a, b) in out.weights.as_slice().iter().zip(dense.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradient() {
        let gate = GatingNetwork::seeded(3, 4, 2, 7).unwrap();
        let f = Vector::new(vec![0.4, -0.2, 0.9]).unwrap();
        let grad = gate.backward(&f, &[0.0; 4]).unwrap();
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_unselected_columns_are_zero() {
        let mut r = rng::derive(8, "gate-back");
        let gate = GatingNetwork::new(
            Matrix::new(3, 5, rng::gaussian_vec(&mut r, 15, 1.0)).unwrap(),
            2,
        )
        .unwrap();
        let f = Vector::new(rng::gaussian_vec(&mut r, 3, 1.0)).unwrap();
        let out = gate.forward(&f).unwrap();
        let upstream: Vec<f64> = (0..5).map(|i| i as f64 + 1.0).collect();
        let grad = gate.backward(&f, &upstream).unwrap();
        for t in 0..5 {
            let col_zero = (0..3).all(|a| grad.get(a, t) == 0.0);
            assert_eq!(col_zero, !out.selected.contains(&t), "column {t}");
        }
    }
}
