//! The trainable student: a soft prompt shared across classes, its induced
//! per-class text table, and the soft prediction distribution.
//!
//! The prompt is the only trainable part; the backbone it feeds is frozen.
//! Because the text encoder mean-pools the prompt vectors, every prompt
//! vector receives the same gradient, which the backward helpers exploit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{MopdError, Result};
use crate::numerics::{dot, masked_softmax, Distribution, MaskedLogits, Matrix, Vector};
use crate::rng;

/// M learnable prompting vectors in word-embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    vectors: Vec<Vector>,
}

impl SoftPrompt {
    /// Gaussian initialization with the given spread.
    pub fn seeded(len: usize, embed_dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(MopdError::invalid("prompt length must be at least 1"));
        }
        let mut r = rng::derive(seed, "soft-prompt");
        let vectors = (0..len)
            .map(|_| Vector::new(rng::gaussian_vec(&mut r, embed_dim, sigma)))
            .collect::<Result<_>>()?;
        Ok(SoftPrompt { vectors })
    }

    pub fn from_vectors(vectors: Vec<Vector>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(MopdError::invalid("prompt length must be at least 1"));
        }
        let d = vectors[0].len();
        if vectors.iter().any(|v| v.len() != d) {
            return Err(MopdError::invalid("prompt vectors must share a dimension"));
        }
        Ok(SoftPrompt { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vector] {
        &self.vectors
    }

    /// SGD step: `v_i -= lr * grad_row_i`.
    pub fn apply_update(&mut self, grad: &Matrix, lr: f64) {
        debug_assert_eq!(grad.rows(), self.vectors.len());
        for (i, v) in self.vectors.iter_mut().enumerate() {
            for (x, g) in v.as_mut_slice().iter_mut().zip(grad.row(i)) {
                *x -= lr * g;
            }
        }
    }
}

/// Student model: soft prompt + frozen backbone + temperature.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub soft_prompt: SoftPrompt,
    backbone: Arc<Backbone>,
    pub tau: f64,
}

impl StudentModel {
    pub fn new(soft_prompt: SoftPrompt, backbone: Arc<Backbone>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(MopdError::invalid(format!("tau must be positive: {tau}")));
        }
        if soft_prompt.embed_dim() != backbone.text.embed_dim() {
            return Err(MopdError::DimensionMismatch {
                context: "prompt embed dim",
                expected: backbone.text.embed_dim(),
                got: soft_prompt.embed_dim(),
            });
        }
        Ok(StudentModel {
            soft_prompt,
            backbone,
            tau,
        })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes()
    }

    pub fn prompt_len(&self) -> usize {
        self.soft_prompt.len()
    }

    /// The `C x d` text table induced by the current prompt, with the cached
    /// per-class norms and squash derivatives needed for backward passes.
    pub fn table_forward(&self) -> Result<TableForward> {
        let c = self.num_classes();
        let d = self.backbone.text.joint_dim();
        let mut table = Matrix::zeros(c, d);
        let mut squash_grads = Matrix::zeros(c, d);
        let mut pre_norms = Vec::with_capacity(c);
        let mut pooled_count = 0.0;
        for class in 0..c {
            let fwd = self
                .backbone
                .text
                .encode_cached(self.soft_prompt.vectors(), self.backbone.vocab.token(class))?;
            table.row_mut(class).copy_from_slice(&fwd.embedding);
            squash_grads.row_mut(class).copy_from_slice(&fwd.squash_grad);
            pre_norms.push(fwd.pre_norm);
            pooled_count = fwd.pooled_count;
        }
        Ok(TableForward {
            table,
            squash_grads,
            pre_norms,
            pooled_count,
            tau: self.tau,
        })
    }

    /// Plain text table (rows unit-norm), without backward caches.
    pub fn text_table(&self) -> Result<Matrix> {
        Ok(self.table_forward()?.table)
    }

    /// Soft prediction distribution over classes for visual embedding `f`.
    pub fn p_soft(&self, f: &Vector) -> Result<Distribution> {
        let tf = self.table_forward()?;
        Ok(tf.instance_forward(f)?.probs)
    }

    /// Argmax class; ties broken by lowest index. The gate plays no part
    /// here: inference uses the student alone.
    pub fn predict(&self, f: &Vector) -> Result<usize> {
        Ok(self.p_soft(f)?.argmax())
    }

    /// Argmax restricted to an allowed label subset (base-to-new protocol
    /// scores each split within its own label space).
    pub fn predict_restricted(&self, f: &Vector, allowed: &[usize]) -> Result<usize> {
        if allowed.is_empty() {
            return Err(MopdError::EmptySupport);
        }
        let tf = self.table_forward()?;
        let fwd = tf.instance_forward(f)?;
        let mut best = allowed[0];
        for &c in allowed {
            if c >= fwd.logits.len() {
                return Err(MopdError::IndexOutOfRange {
                    context: "restricted label",
                    index: c,
                    len: fwd.logits.len(),
                });
            }
            if fwd.logits[c] > fwd.logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Pulls a joint-space gradient (already summed over classes) back onto
    /// the prompt. Every prompt vector receives the same row because of the
    /// mean-pool: `P^T g / (M + 1)`.
    pub fn joint_grad_to_prompt(&self, joint_grad: &[f64], pooled_count: f64) -> Result<Matrix> {
        let shared = self.backbone.text.projection().tr_matvec(joint_grad)?;
        let m = self.soft_prompt.len();
        let d_e = self.soft_prompt.embed_dim();
        let mut grad = Matrix::zeros(m, d_e);
        for i in 0..m {
            for (g, s) in grad.row_mut(i).iter_mut().zip(shared.iter()) {
                *g = s / pooled_count;
            }
        }
        Ok(grad)
    }

    /// Analytic gradient of `ln p_soft(y|f)` with respect to every prompt
    /// vector, as an `M x d_e` matrix.
    pub fn grad_log_p_soft(&self, f: &Vector, y: usize) -> Result<Matrix> {
        let tf = self.table_forward()?;
        let fwd = tf.instance_forward(f)?;
        if y >= fwd.probs.len() {
            return Err(MopdError::IndexOutOfRange {
                context: "class label",
                index: y,
                len: fwd.probs.len(),
            });
        }
        let dl_ds: Vec<f64> = (0..fwd.probs.len())
            .map(|c| (if c == y { 1.0 } else { 0.0 }) - fwd.probs[c])
            .collect();
        let joint = tf.logit_grad_to_joint(&fwd, &dl_ds);
        self.joint_grad_to_prompt(&joint, tf.pooled_count)
    }
}

/// Cached student text table plus everything needed to run backward passes
/// without re-encoding.
#[derive(Debug, Clone)]
pub struct TableForward {
    pub table: Matrix,
    /// Per-class squash derivatives `1 - tanh^2` at the projected mean.
    pub squash_grads: Matrix,
    pub pre_norms: Vec<f64>,
    pub pooled_count: f64,
    pub tau: f64,
}

/// Per-instance forward state: cosine logits and the soft distribution.
#[derive(Debug, Clone)]
pub struct InstanceForward {
    pub f_unit: Vec<f64>,
    pub cos: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Distribution,
}

impl TableForward {
    pub fn num_classes(&self) -> usize {
        self.table.rows()
    }

    /// Cosine logits and softmax for one (internally normalized) visual
    /// embedding.
    pub fn instance_forward(&self, f: &Vector) -> Result<InstanceForward> {
        let f_unit = f.normalized()?;
        if f_unit.len() != self.table.cols() {
            return Err(MopdError::DimensionMismatch {
                context: "visual embedding dimension",
                expected: self.table.cols(),
                got: f_unit.len(),
            });
        }
        let c = self.table.rows();
        let mut cos = Vec::with_capacity(c);
        for class in 0..c {
            cos.push(dot(self.table.row(class), f_unit.as_slice()).clamp(-1.0, 1.0));
        }
        let logits: Vec<f64> = cos.iter().map(|x| x / self.tau).collect();
        let probs = masked_softmax(&MaskedLogits::dense(logits.clone()))?;
        Ok(InstanceForward {
            f_unit: f_unit.as_slice().to_vec(),
            cos,
            logits,
            probs,
        })
    }

    /// Chain rule from per-class logit gradients back through normalization
    /// and squash to the shared projected space:
    /// `sum_c (1 - a_c^2) . dl_ds_c (f - cos_c t_c) / (tau |a_c|)`.
    pub fn logit_grad_to_joint(&self, fwd: &InstanceForward, dl_ds: &[f64]) -> Vec<f64> {
        let d = self.table.cols();
        let mut joint = vec![0.0; d];
        for c in 0..self.table.rows() {
            let w = dl_ds[c] / (self.tau * self.pre_norms[c]);
            if w == 0.0 {
                continue;
            }
            let t_row = self.table.row(c);
            let sg = self.squash_grads.row(c);
            for k in 0..d {
                joint[k] += sg[k] * w * (fwd.f_unit[k] - fwd.cos[c] * t_row[k]);
            }
        }
        joint
    }

    /// Chain rule from a gradient on the (unit-norm) table rows back through
    /// normalization and squash:
    /// `sum_c (1 - a_c^2) . (g_c - (g_c . t_c) t_c) / |a_c|`.
    pub fn table_grad_to_joint(&self, dl_dt: &Matrix) -> Vec<f64> {
        debug_assert_eq!(dl_dt.rows(), self.table.rows());
        let d = self.table.cols();
        let mut joint = vec![0.0; d];
        for c in 0..self.table.rows() {
            let g = dl_dt.row(c);
            let t_row = self.table.row(c);
            let sg = self.squash_grads.row(c);
            let g_dot_t = dot(g, t_row);
            let inv_norm = 1.0 / self.pre_norms[c];
            for k in 0..d {
                joint[k] += sg[k] * (g[k] - g_dot_t * t_row[k]) * inv_norm;
            }
        }
        joint
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> StudentModel {
        let backbone = Arc::new(Backbone::seeded(4, 6, 5, seed).unwrap());
        let prompt = SoftPrompt::seeded(3, 6, 0.2, seed).unwrap();
        StudentModel::new(prompt, backbone, 0.5).unwrap()
    }

    #[test]
    fn table_rows_are_unit_norm() {
        let model = tiny_model(1);
        let table = model.text_table().unwrap();
        for c in 0..table.rows() {
            let n = crate::numerics::norm(table.row(c));
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_class_tokens_give_identical_rows() {
        let backbone = Backbone::seeded(4, 6, 5, 2).unwrap();
        let mut duplicated = backbone.clone();
        // Force token 1 to equal token 0 through serialization surgery.
        let json = crate::jsonio::to_json_string(&backbone.vocab).unwrap();
        let mut tokens: Vec<Vec<f64>> =
            serde_json::from_str::<serde_json::Value>(&json)
                .unwrap()
                .get("tokens")
                .unwrap()
                .as_array()
                .unwrap()
                .iter()
                .map(|v| {
                    v.as_array()
                        .unwrap()
                        .iter()
                        .map(|x| x.as_f64().unwrap())
                        .collect()
                })
                .collect();
        tokens[1] = tokens[0].clone();
        duplicated.vocab = crate::jsonio::from_json_str(
            &serde_json::json!({ "tokens": tokens }).to_string(),
        )
        .unwrap();
        let prompt = SoftPrompt::seeded(2, 6, 0.2, 2).unwrap();
        let model = StudentModel::new(prompt, Arc::new(duplicated), 0.5).unwrap();
        let table = model.text_table().unwrap();
        assert_eq!(table.row(0), table.row(1));
    }

    #[test]
    fn p_soft_uniform_in_large_tau_limit() {
        let backbone = Arc::new(Backbone::seeded(5, 6, 6, 3).unwrap());
        let prompt = SoftPrompt::seeded(2, 6, 0.2, 3).unwrap();
        let model = StudentModel::new(prompt, backbone, 1e3).unwrap();
        let f = Vector::new(rng::gaussian_vec(&mut rng::derive(3, "f"), 6, 1.0)).unwrap();
        let p = model.p_soft(&f).unwrap();
        let c = p.len() as f64;
        for &prob in p.as_slice() {
            assert!((prob - 1.0 / c).abs() < 1e-3);
        }
    }

    #[test]
    fn predict_is_tau_invariant() {
        let backbone = Arc::new(Backbone::seeded(6, 8, 6, 4).unwrap());
        let prompt = SoftPrompt::seeded(4, 8, 0.3, 4).unwrap();
        let mut r = rng::derive(10, "tau-inv");
        for _ in 0..20 {
            let f = Vector::new(rng::gaussian_vec(&mut r, 6, 1.0)).unwrap();
            let mut answers = Vec::new();
            for tau in [0.01, 0.1, 1.0] {
                let model =
                    StudentModel::new(prompt.clone(), Arc::clone(&backbone), tau).unwrap();
                answers.push(model.predict(&f).unwrap());
            }
            assert!(answers.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn grad_log_p_rows_are_identical_across_prompt_vectors() {
        let model = tiny_model(5);
        let f = Vector::new(rng::gaussian_vec(&mut rng::derive(5, "g"), 5, 1.0)).unwrap();
        let grad = model.grad_log_p_soft(&f, 2).unwrap();
        for i in 1..grad.rows() {
            assert_eq!(grad.row(0), grad.row(i));
        }
    }

    #[test]
    fn grad_vanishes_in_projection_null_space() {
        // joint_dim < embed_dim leaves a null space; gradient rows must be
        // orthogonal to it (they live in the row space of the projection).
        let backbone = Arc::new(Backbone::seeded(3, 8, 4, 6).unwrap());
        let prompt = SoftPrompt::seeded(2, 8, 0.2, 6).unwrap();
        let model = StudentModel::new(prompt, Arc::clone(&backbone), 0.5).unwrap();
        let f = Vector::new(rng::gaussian_vec(&mut rng::derive(6, "null"), 4, 1.0)).unwrap();
        let grad = model.grad_log_p_soft(&f, 0).unwrap();
        // Build a null-space vector: component of a random vector orthogonal
        // to all projection rows.
        let p = backbone.text.projection();
        let mut v = rng::gaussian_vec(&mut rng::derive(7, "null-dir"), 8, 1.0);
        for i in 0..p.rows() {
            let proj = dot(&v, p.row(i));
            for (x, r) in v.iter_mut().zip(p.row(i)) {
                *x -= proj * r;
            }
        }
        let overlap = dot(grad.row(0), &v);
        assert!(overlap.abs() < 1e-10, "null-space overlap {overlap}");
    }

    #[test]
    fn predict_restricted_respects_subset() {
        let model = tiny_model(8);
        let f = Vector::new(rng::gaussian_vec(&mut rng::derive(8, "r"), 5, 1.0)).unwrap();
        let full = model.predict(&f).unwrap();
        let allowed: Vec<usize> = (0..model.num_classes()).filter(|&c| c != full).collect();
        let restricted = model.predict_restricted(&f, &allowed).unwrap();
        assert_ne!(restricted, full);
        assert!(allowed.contains(&restricted));
    }
}
