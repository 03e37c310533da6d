//! Dense vectors/matrices, probability primitives, and a finite-difference
//! gradient oracle.
//!
//! Everything here is plain `f64` with deterministic left-to-right reductions
//! so that identical seeds reproduce identical runs bit for bit. User-visible
//! values are always finite; the top-T mask is carried as an explicit flag
//! (see [`MaskedLogits`]) rather than a floating `-inf`.

use serde::{Deserialize, Serialize};

use crate::error::{MopdError, Result};

/// Epsilon floor applied to the non-reference distribution inside
/// [`kl_divergence`] before taking logs.
pub const KL_EPSILON: f64 = 1e-12;

/// A dense real vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(MopdError::invalid("vector must be non-empty"));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(MopdError::NonFinite(format!("vector entry {bad}")));
        }
        Ok(Vector { data })
    }

    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(MopdError::DimensionMismatch {
                context: "dot product",
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Unit-norm copy. Errors on (near-)zero input.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        if n < 1e-300 {
            return Err(MopdError::DegenerateVector("zero norm"));
        }
        Ok(Vector {
            data: self.data.iter().map(|x| x / n).collect(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Vector, factor: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Left-to-right dot product; the fixed order is part of the determinism
/// contract.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MopdError::invalid("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(MopdError::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(MopdError::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(MopdError::invalid("matrix must have at least one row"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(MopdError::DimensionMismatch {
                    context: "ragged matrix rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = A x` where `x` has `cols` entries.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(MopdError::DimensionMismatch {
                context: "matvec input",
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `y = x A` where `x` has `rows` entries; used for gate logits `f . W_g`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(MopdError::DimensionMismatch {
                context: "vecmat input",
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            let row = self.row(i);
            for (o, r) in out.iter_mut().zip(row.iter()) {
                *o += xi * r;
            }
        }
        Ok(out)
    }

    /// `y = A^T x` where `x` has `rows` entries.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.vecmat(x)
    }

    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.data.iter_mut() {
            *a *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// A probability distribution over categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and normalization to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MopdError::EmptySupport);
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(MopdError::invalid(format!(
                    "probability entry {p} out of range"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MopdError::invalid(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Distribution { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest probability; ties broken by lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with the 0 ln 0 = 0 convention.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for &p in &self.probs {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }
}

impl std::ops::Index<usize> for Distribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.probs[i]
    }
}

/// Logits with an explicit keep mask. Dropped positions stand in for the
/// `-inf` of a top-T selection without ever materializing a non-finite float.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLogits {
    values: Vec<f64>,
    kept: Vec<bool>,
}

impl MaskedLogits {
    pub fn dense(values: Vec<f64>) -> Self {
        let kept = vec![true; values.len()];
        MaskedLogits { values, kept }
    }

    pub fn new(values: Vec<f64>, kept: Vec<bool>) -> Result<Self> {
        if values.len() != kept.len() {
            return Err(MopdError::DimensionMismatch {
                context: "mask length",
                expected: values.len(),
                got: kept.len(),
            });
        }
        Ok(MaskedLogits { values, kept })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.kept[i]
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.kept[i]).collect()
    }
}

/// Numerically stable softmax over the kept positions; masked positions map
/// to probability exactly 0.
pub fn masked_softmax(logits: &MaskedLogits) -> Result<Distribution> {
    let kept: Vec<usize> = logits.kept_indices();
    if kept.is_empty() {
        return Err(MopdError::EmptySupport);
    }
    for &i in &kept {
        if !logits.values[i].is_finite() {
            return Err(MopdError::NonFinite(format!(
                "logit {} at index {i}",
                logits.values[i]
            )));
        }
    }
    let max = kept
        .iter()
        .map(|&i| logits.values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for &i in &kept {
        let e = (logits.values[i] - max).exp();
        probs[i] = e;
        sum += e;
    }
    for &i in &kept {
        probs[i] /= sum;
    }
    Distribution::new(probs)
}

/// Softmax of a dense logit vector (max-subtraction for stability).
pub fn softmax(logits: &Vector) -> Result<Distribution> {
    masked_softmax(&MaskedLogits::dense(logits.as_slice().to_vec()))
}

/// Cosine similarity `a.b / (|a||b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MopdError::DimensionMismatch {
            context: "cosine",
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na < 1e-300 || nb < 1e-300 {
        return Err(MopdError::DegenerateVector("cosine of zero-norm vector"));
    }
    let c = a.dot(b)? / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Which argument of the divergence acts as the reference (the distribution
/// the expectation is taken under).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p, q) = sum_i p_i ln(p_i / q_i)`.
    #[default]
    FirstArgRef,
    /// `KL(p, q) = sum_i q_i ln(q_i / p_i)`.
    SecondArgRef,
}

/// KL divergence between two distributions of equal length.
///
/// The non-reference distribution is floored at [`KL_EPSILON`] before the log
/// and `0 ln 0` is taken as 0. An exactly-zero entry opposite nonzero
/// reference mass is rejected as disjoint support.
pub fn kl_divergence(p: &Distribution, q: &Distribution, direction: KlDirection) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MopdError::DimensionMismatch {
            context: "kl divergence",
            expected: p.len(),
            got: q.len(),
        });
    }
    let (reference, other) = match direction {
        KlDirection::FirstArgRef => (p.as_slice(), q.as_slice()),
        KlDirection::SecondArgRef => (q.as_slice(), p.as_slice()),
    };
    let mut acc = 0.0;
    for (&r, &o) in reference.iter().zip(other.iter()) {
        if r == 0.0 {
            continue;
        }
        if o == 0.0 {
            return Err(MopdError::DisjointSupport);
        }
        acc += r * (r / o.max(KL_EPSILON)).ln();
    }
    Ok(acc)
}

/// Central-difference gradient of a scalar function of a matrix parameter.
///
/// This is the verification oracle for every analytic gradient in the crate;
/// it must stay independent of the backward passes it checks.
pub fn finite_difference_gradient<F>(mut loss_fn: F, point: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(MopdError::invalid(format!("step must be positive: {step}")));
    }
    let mut probe = point.clone();
    let mut grad = Matrix::zeros(point.rows(), point.cols());
    for i in 0..point.rows() {
        for j in 0..point.cols() {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + step);
            let plus = loss_fn(&probe)?;
            probe.set(i, j, orig - step);
            let minus = loss_fn(&probe)?;
            probe.set(i, j, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(MopdError::NonFinite(format!(
                    "loss at probe ({i},{j}): f+={plus}, f-={minus}"
                )));
            }
            grad.set(i, j, (plus - minus) / (2.0 * step));
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let d = softmax(&Vector::new(vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        for &p in d.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Vector::new(vec![0.3, -1.2, 4.0, 2.2]).unwrap();
        let shifted = Vector::new(x.as_slice().iter().map(|v| v + 17.5).collect()).unwrap();
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (pa, pb) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((pa - pb).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_is_empty_support() {
        let m = MaskedLogits::new(vec![1.0, 2.0], vec![false, false]).unwrap();
        assert!(matches!(masked_softmax(&m), Err(MopdError::EmptySupport)));
    }

    #[test]
    fn masked_softmax_zeroes_dropped_positions() {
        let m = MaskedLogits::new(vec![2.0, 1.0, 0.0], vec![true, false, true]).unwrap();
        let d = masked_softmax(&m).unwrap();
        assert_eq!(d.as_slice()[1], 0.0);
        assert!((d.as_slice()[0] + d.as_slice()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let v = Vector::new(vec![0.3, -0.4, 1.1]).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let e1 = Vector::new(vec![1.0, 0.0]).unwrap();
        let e2 = Vector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let z = Vector::zeros(3);
        let v = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            cosine(&z, &v),
            Err(MopdError::DegenerateVector(_))
        ));
    }

    #[test]
    fn kl_self_is_zero() {
        let p = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert!(kl_divergence(&p, &p, KlDirection::FirstArgRef).unwrap() < 1e-15);
    }

    #[test]
    fn kl_with_exact_zero_in_reference() {
        // 0 ln 0 = 0 convention: KL([1,0],[0.5,0.5]) = ln 2.
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let q = Distribution::new(vec![0.5, 0.5]).unwrap();
        let v = kl_divergence(&p, &q, KlDirection::FirstArgRef).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_disjoint_support_rejected() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        let q = Distribution::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            kl_divergence(&p, &q, KlDirection::FirstArgRef),
            Err(MopdError::DisjointSupport)
        ));
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = Distribution::new(vec![0.7, 0.3]).unwrap();
        let q = Distribution::new(vec![0.4, 0.6]).unwrap();
        let forward = kl_divergence(&p, &q, KlDirection::FirstArgRef).unwrap();
        let reverse = kl_divergence(&p, &q, KlDirection::SecondArgRef).unwrap();
        assert!((forward - reverse).abs() > 1e-3);
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let point = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let grad = finite_difference_gradient(
            |m| Ok(0.5 * dot(m.as_slice(), m.as_slice())),
            &point,
            1e-5,
        )
        .unwrap();
        for (g, x) in grad.as_slice().iter().zip(point.as_slice()) {
            assert!((g - x).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_gradient_of_constant_is_zero() {
        let point = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let grad = finite_difference_gradient(|_| Ok(4.2), &point, 1e-5).unwrap();
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fd_gradient_rejects_bad_step() {
        let point = Matrix::zeros(1, 1);
        assert!(finite_difference_gradient(|_| Ok(0.0), &point, 0.0).is_err());
    }

    #[test]
    fn distribution_argmax_ties_to_lowest_index() {
        let d = Distribution::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(d.argmax(), 0);
        let d = Distribution::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(d.argmax(), 1);
    }
}
