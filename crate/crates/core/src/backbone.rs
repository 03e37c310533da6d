//! Frozen encoder surrogates and frozen teacher-prompt tables.
//!
//! The text encoder maps a sequence of prompt vectors plus a class token to a
//! unit-norm joint embedding: mean-pool, frozen linear projection, normalize.
//! That keeps the structure (prompt vectors in word-embedding space, class
//! embeddings in joint space) while staying differentiable in closed form.
//! All parameters here are fixed at construction and never updated.

use serde::{Deserialize, Serialize};

use crate::error::{MopdError, Result};
use crate::jsonio;
use crate::numerics::{dot, masked_softmax, norm, Distribution, MaskedLogits, Matrix, Vector};
use crate::rng;

/// Default word-embedding and joint-embedding dimension.
pub const DEFAULT_DIM: usize = 32;

/// Default temperature for cosine logits (logit scale 100).
pub const DEFAULT_TAU: f64 = 0.01;

/// How far aligned class tokens push the squash toward saturation. Larger
/// values give the prompt more class-specific leverage (saturation patterns
/// differ per class) at the cost of flatter gradients on saturated
/// coordinates.
pub const ALIGN_GAIN: f64 = 2.0;

/// Saturation clamp for the inverse squash during token construction.
const ATANH_CLAMP: f64 = 0.95;

/// Frozen text encoder: mean-pool, frozen linear projection, pointwise
/// squash, normalize.
///
/// The squash is what gives a shared prompt class-specific effect: each
/// class token drives a different subset of coordinates toward saturation,
/// so the same prompt shift bends different classes differently. A purely
/// linear stack collapses the prompt to a single shared offset, which caps
/// every method at the zero-shot level regardless of objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenTextEncoder {
    embed_dim: usize,
    joint_dim: usize,
    /// `joint_dim x embed_dim`, rows orthonormalized when possible.
    projection: Matrix,
}

impl FrozenTextEncoder {
    /// Seeded construction. Rows of the projection are Gram-Schmidt
    /// orthonormalized when `joint_dim <= embed_dim`, otherwise unit-scaled.
    pub fn seeded(embed_dim: usize, joint_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || joint_dim == 0 {
            return Err(MopdError::invalid("encoder dimensions must be positive"));
        }
        let mut r = rng::derive(seed, "text-encoder");
        let mut rows: Vec<Vec<f64>> = (0..joint_dim)
            .map(|_| rng::gaussian_vec(&mut r, embed_dim, 1.0))
            .collect();
        if joint_dim <= embed_dim {
            gram_schmidt(&mut rows);
        } else {
            for row in rows.iter_mut() {
                let n = norm(row);
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
        Ok(FrozenTextEncoder {
            embed_dim,
            joint_dim,
            projection: Matrix::from_rows(rows)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Forward pass keeping the pre-normalization state needed by backward
    /// passes.
    pub fn encode_cached(
        &self,
        prompt_vectors: &[Vector],
        class_token: &Vector,
    ) -> Result<TextForward> {
        if prompt_vectors.is_empty() {
            return Err(MopdError::invalid("prompt must have at least one vector"));
        }
        for v in prompt_vectors {
            if v.len() != self.embed_dim {
                return Err(MopdError::DimensionMismatch {
                    context: "prompt vector dimension",
                    expected: self.embed_dim,
                    got: v.len(),
                });
            }
        }
        if class_token.len() != self.embed_dim {
            return Err(MopdError::DimensionMismatch {
                context: "class token dimension",
                expected: self.embed_dim,
                got: class_token.len(),
            });
        }
        let count = (prompt_vectors.len() + 1) as f64;
        let mut mean = vec![0.0; self.embed_dim];
        for v in prompt_vectors {
            for (m, x) in mean.iter_mut().zip(v.as_slice()) {
                *m += x;
            }
        }
        for (m, x) in mean.iter_mut().zip(class_token.as_slice()) {
            *m += x;
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let projected = self.projection.matvec(&mean)?;
        let squashed: Vec<f64> = projected.iter().map(|x| x.tanh()).collect();
        let squash_grad: Vec<f64> = squashed.iter().map(|a| 1.0 - a * a).collect();
        let pre_norm = norm(&squashed);
        if pre_norm < 1e-300 {
            return Err(MopdError::DegenerateVector(
                "text embedding collapsed to zero",
            ));
        }
        let embedding: Vec<f64> = squashed.iter().map(|x| x / pre_norm).collect();
        Ok(TextForward {
            pooled_count: count,
            pre_norm,
            squash_grad,
            embedding,
        })
    }

    /// `normalize(tanh(projection . mean(v_1..v_M, class_token)))`.
    pub fn encode(&self, prompt_vectors: &[Vector], class_token: &Vector) -> Result<Vector> {
        let fwd = self.encode_cached(prompt_vectors, class_token)?;
        Vector::new(fwd.embedding)
    }
}

/// Cached intermediates of one text-encoder forward pass.
#[derive(Debug, Clone)]
pub struct TextForward {
    /// M + 1: prompt vectors plus the class token.
    pub pooled_count: f64,
    /// Norm of the squashed activation before normalization.
    pub pre_norm: f64,
    /// Derivative of the squash at each coordinate: `1 - tanh^2`.
    pub squash_grad: Vec<f64>,
    /// Unit-norm output embedding.
    pub embedding: Vec<f64>,
}

impl TextForward {
    /// Pulls a gradient on the unit-norm embedding back through the
    /// normalization and the squash, to the projected (pre-squash) space:
    /// `(1 - a^2) . (g - (g.t) t) / |a|`.
    pub fn backprop_to_projected(&self, grad_embedding: &[f64]) -> Vec<f64> {
        let g_dot_t = dot(grad_embedding, &self.embedding);
        grad_embedding
            .iter()
            .zip(&self.embedding)
            .zip(&self.squash_grad)
            .map(|((g, t), sg)| sg * (g - g_dot_t * t) / self.pre_norm)
            .collect()
    }
}

fn gram_schmidt(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        for j in 0..i {
            let proj = dot(&rows[i], &rows[j]);
            let prev = rows[j].clone();
            for (x, p) in rows[i].iter_mut().zip(prev.iter()) {
                *x -= proj * p;
            }
        }
        let n = norm(&rows[i]);
        for x in rows[i].iter_mut() {
            *x /= n;
        }
    }
}

/// Frozen image encoder: optional linear map followed by normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenImageEncoder {
    /// `None` means identity on raw features already living in joint space.
    map: Option<Matrix>,
    joint_dim: usize,
}

impl FrozenImageEncoder {
    pub fn identity(joint_dim: usize) -> Self {
        FrozenImageEncoder {
            map: None,
            joint_dim,
        }
    }

    pub fn linear(map: Matrix) -> Self {
        let joint_dim = map.rows();
        FrozenImageEncoder {
            map: Some(map),
            joint_dim,
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    /// Unit-norm visual embedding.
    pub fn encode(&self, raw: &Vector) -> Result<Vector> {
        let mapped = match &self.map {
            None => {
                if raw.len() != self.joint_dim {
                    return Err(MopdError::DimensionMismatch {
                        context: "image encoder input",
                        expected: self.joint_dim,
                        got: raw.len(),
                    });
                }
                raw.clone()
            }
            Some(m) => Vector::new(m.matvec(raw.as_slice())?)?,
        };
        mapped.normalized()
    }
}

/// Frozen per-class token vectors standing in for class names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    tokens: Vec<Vector>,
}

impl ClassVocabulary {
    pub fn seeded(num_classes: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(MopdError::invalid("vocabulary needs at least 2 classes"));
        }
        let mut r = rng::derive(seed, "class-vocab");
        let tokens: Vec<Vector> = (0..num_classes)
            .map(|_| Vector::new(rng::gaussian_vec(&mut r, embed_dim, 1.0)))
            .collect::<Result<_>>()?;
        Self::from_tokens(tokens)
    }

    /// Class tokens whose zero-prompt text embedding lands near the given
    /// joint-space anchors.
    ///
    /// This is what gives the frozen stack its zero-shot knowledge. The
    /// squash is inverted during construction: with a zero prompt of length
    /// `prompt_len`, `encode` pools the token down by `prompt_len + 1`,
    /// projects, and squashes, so the token is built as
    /// `(prompt_len + 1) P^T atanh(gain . normalize(anchor + sigma e))`. The
    /// gain pushes coordinates into the bend of the squash, which is where a
    /// shared prompt picks up class-specific leverage; the noise level
    /// controls how good the built-in knowledge is.
    pub fn aligned(
        anchors: &[Vector],
        encoder: &FrozenTextEncoder,
        noise_sigma: f64,
        prompt_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(MopdError::invalid("vocabulary needs at least 2 classes"));
        }
        let mut r = rng::derive(seed, "class-vocab");
        let pooled = (prompt_len + 1) as f64;
        let mut tokens = Vec::with_capacity(anchors.len());
        for anchor in anchors {
            if anchor.len() != encoder.joint_dim() {
                return Err(MopdError::DimensionMismatch {
                    context: "vocabulary anchor dimension",
                    expected: encoder.joint_dim(),
                    got: anchor.len(),
                });
            }
            let mut noisy = anchor.clone();
            if noise_sigma > 0.0 {
                let noise = Vector::new(rng::gaussian_vec(&mut r, anchor.len(), noise_sigma))?;
                noisy.add_scaled(&noise, 1.0);
            }
            let target = noisy.normalized()?;
            let pre_squash: Vec<f64> = target
                .as_slice()
                .iter()
                .map(|x| (ALIGN_GAIN * x).clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh())
                .collect();
            let mut token = encoder.projection.tr_matvec(&pre_squash)?;
            for x in token.iter_mut() {
                *x *= pooled;
            }
            tokens.push(Vector::new(token)?);
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<Vector>) -> Result<Self> {
        for i in 0..tokens.len() {
            for j in 0..i {
                if tokens[i] == tokens[j] {
                    return Err(MopdError::GenerationFailed(format!(
                        "class tokens {i} and {j} collided"
                    )));
                }
            }
        }
        Ok(ClassVocabulary { tokens })
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, class: usize) -> &Vector {
        &self.tokens[class]
    }
}

/// Pool of frozen teacher tables, one `C x d` unit-row matrix per hard
/// prompt, plus human-readable labels for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherPool {
    tables: Vec<Matrix>,
    labels: Vec<String>,
}

impl TeacherPool {
    pub fn new(tables: Vec<Matrix>, labels: Vec<String>) -> Result<Self> {
        if tables.is_empty() {
            return Err(MopdError::invalid("teacher pool must not be empty"));
        }
        if tables.len() != labels.len() {
            return Err(MopdError::DimensionMismatch {
                context: "teacher labels",
                expected: tables.len(),
                got: labels.len(),
            });
        }
        let (rows, cols) = (tables[0].rows(), tables[0].cols());
        for (t, table) in tables.iter().enumerate() {
            if table.rows() != rows || table.cols() != cols {
                return Err(MopdError::invalid(format!(
                    "teacher {t} has shape {}x{}, expected {rows}x{cols}",
                    table.rows(),
                    table.cols()
                )));
            }
            for c in 0..rows {
                let n = norm(table.row(c));
                if (n - 1.0).abs() > 1e-9 {
                    return Err(MopdError::invalid(format!(
                        "teacher {t} row {c} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(TeacherPool { tables, labels })
    }

    pub fn size(&self) -> usize {
        self.tables.len()
    }

    pub fn num_classes(&self) -> usize {
        self.tables[0].rows()
    }

    pub fn joint_dim(&self) -> usize {
        self.tables[0].cols()
    }

    pub fn table(&self, t: usize) -> &Matrix {
        &self.tables[t]
    }

    pub fn label(&self, t: usize) -> &str {
        &self.labels[t]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Prediction distribution of teacher `t_index` on visual embedding `f`:
    /// softmax over classes of `cos(row_c, f) / tau`.
    pub fn teacher_distribution(
        &self,
        t_index: usize,
        f: &Vector,
        tau: f64,
    ) -> Result<Distribution> {
        if t_index >= self.size() {
            return Err(MopdError::IndexOutOfRange {
                context: "teacher index",
                index: t_index,
                len: self.size(),
            });
        }
        if !(tau > 0.0) {
            return Err(MopdError::invalid(format!("tau must be positive: {tau}")));
        }
        let logits = teacher_logits(self.table(t_index), f, tau)?;
        masked_softmax(&MaskedLogits::dense(logits))
    }
}

/// Cosine logits of a frozen table against `f`, scaled by `1/tau`.
pub(crate) fn teacher_logits(table: &Matrix, f: &Vector, tau: f64) -> Result<Vec<f64>> {
    if f.len() != table.cols() {
        return Err(MopdError::DimensionMismatch {
            context: "teacher logits input",
            expected: table.cols(),
            got: f.len(),
        });
    }
    let f_norm = f.norm();
    if f_norm < 1e-300 {
        return Err(MopdError::DegenerateVector("zero visual embedding"));
    }
    Ok((0..table.rows())
        .map(|c| {
            let row = table.row(c);
            let cos = dot(row, f.as_slice()) / (norm(row) * f_norm);
            cos.clamp(-1.0, 1.0) / tau
        })
        .collect())
}

/// The full frozen stack: text encoder, image encoder, class vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub seed: u64,
    pub text: FrozenTextEncoder,
    pub image: FrozenImageEncoder,
    pub vocab: ClassVocabulary,
}

impl Backbone {
    pub fn seeded(num_classes: usize, embed_dim: usize, joint_dim: usize, seed: u64) -> Result<Self> {
        Ok(Backbone {
            seed,
            text: FrozenTextEncoder::seeded(embed_dim, joint_dim, seed)?,
            image: FrozenImageEncoder::identity(joint_dim),
            vocab: ClassVocabulary::seeded(num_classes, embed_dim, seed)?,
        })
    }

    /// Backbone whose vocabulary carries zero-shot knowledge of the given
    /// class anchors (noisy alignment, like a pretrained model that has seen
    /// the class names before).
    pub fn aligned(
        anchors: &[Vector],
        embed_dim: usize,
        zero_shot_sigma: f64,
        prompt_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(MopdError::invalid("need at least one anchor"));
        }
        let joint_dim = anchors[0].len();
        if embed_dim < joint_dim {
            return Err(MopdError::invalid(format!(
                "embed_dim {embed_dim} must be >= joint dimension {joint_dim} for an aligned vocabulary"
            )));
        }
        let text = FrozenTextEncoder::seeded(embed_dim, joint_dim, seed)?;
        let vocab = ClassVocabulary::aligned(anchors, &text, zero_shot_sigma, prompt_len, seed)?;
        Ok(Backbone {
            seed,
            text,
            image: FrozenImageEncoder::identity(joint_dim),
            vocab,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.num_classes()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        jsonio::write_json(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        jsonio::read_json(path)
    }

    /// Hash of the canonical serialized form; recorded in checkpoints.
    pub fn content_hash(&self) -> Result<String> {
        jsonio::value_sha256(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vector {
        Vector::new(v).unwrap().normalized().unwrap()
    }

    #[test]
    fn encode_text_zero_prompt_reduces_to_squashed_projected_token() {
        let enc = FrozenTextEncoder::seeded(6, 4, 3).unwrap();
        let m = 3;
        let zeros = vec![Vector::zeros(6); m];
        let token = Vector::new(vec![0.5, -1.0, 2.0, 0.1, 0.0, 1.5]).unwrap();
        let out = enc.encode(&zeros, &token).unwrap();
        let projected = enc
            .projection()
            .matvec(&token.scaled(1.0 / (m as f64 + 1.0)).as_slice().to_vec())
            .unwrap();
        let squashed: Vec<f64> = projected.iter().map(|x| x.tanh()).collect();
        let expected = Vector::new(squashed).unwrap().normalized().unwrap();
        for (a, b) in out.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_vocab_zero_prompt_recovers_anchor_direction() {
        let mut r = rng::derive(21, "anchor");
        let anchors: Vec<Vector> = (0..3)
            .map(|_| unit(rng::gaussian_vec(&mut r, 5, 1.0).to_vec()))
            .collect();
        let enc = FrozenTextEncoder::seeded(5, 5, 21).unwrap();
        let vocab = ClassVocabulary::aligned(&anchors, &enc, 0.0, 2, 21).unwrap();
        let zeros = vec![Vector::zeros(5); 2];
        for (c, anchor) in anchors.iter().enumerate() {
            let out = enc.encode(&zeros, vocab.token(c)).unwrap();
            let cos = crate::numerics::cosine(&out, anchor).unwrap();
            // The clamp distorts large coordinates (badly in low dimension);
            // direction must still be close.
            assert!(cos > 0.9, "class {c}: cos {cos}");
        }
    }

    #[test]
    fn encode_text_is_permutation_invariant() {
        let enc = FrozenTextEncoder::seeded(5, 5, 11).unwrap();
        let mut r = rng::derive(9, "perm");
        let vs: Vec<Vector> = (0..4)
            .map(|_| Vector::new(rng::gaussian_vec(&mut r, 5, 1.0)).unwrap())
            .collect();
        let token = Vector::new(rng::gaussian_vec(&mut r, 5, 1.0)).unwrap();
        let a = enc.encode(&vs, &token).unwrap();
        let permuted = vec![vs[2].clone(), vs[0].clone(), vs[3].clone(), vs[1].clone()];
        let b = enc.encode(&permuted, &token).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_text_rejects_dimension_mismatch() {
        let enc = FrozenTextEncoder::seeded(5, 5, 11).unwrap();
        let vs = vec![Vector::zeros(4)];
        let token = Vector::zeros(5);
        assert!(matches!(
            enc.encode(&vs, &token),
            Err(MopdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let enc = FrozenTextEncoder::seeded(8, 6, 1).unwrap();
        let p = enc.projection();
        for i in 0..p.rows() {
            for j in 0..=i {
                let d = dot(p.row(i), p.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9, "rows {i},{j}: {d}");
            }
        }
    }

    #[test]
    fn image_identity_preserves_unit_input() {
        let enc = FrozenImageEncoder::identity(3);
        let f = unit(vec![1.0, 2.0, -1.0]);
        let out = enc.encode(&f).unwrap();
        for (a, b) in out.as_slice().iter().zip(f.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn image_encoder_rejects_zero_input() {
        let enc = FrozenImageEncoder::identity(3);
        assert!(matches!(
            enc.encode(&Vector::zeros(3)),
            Err(MopdError::DegenerateVector(_))
        ));
    }

    #[test]
    fn image_linear_output_is_unit_norm() {
        let map = Matrix::new(2, 3, vec![1.0, 0.5, 0.0, -0.3, 2.0, 1.0]).unwrap();
        let enc = FrozenImageEncoder::linear(map);
        let out = enc
            .encode(&Vector::new(vec![0.3, 0.7, -0.2]).unwrap())
            .unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn teacher_distribution_uniform_when_rows_identical() {
        let row = unit(vec![1.0, 1.0, 0.0]);
        let table =
            Matrix::from_rows(vec![row.as_slice().to_vec(); 4]).unwrap();
        let pool = TeacherPool::new(vec![table], vec!["t".into()]).unwrap();
        let f = unit(vec![0.2, -0.4, 0.9]);
        let d = pool.teacher_distribution(0, &f, 1.0).unwrap();
        for &p in d.as_slice() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_distribution_two_class_analytic() {
        // cos values (1, 0) at tau=1 give [e/(e+1), 1/(e+1)].
        let table = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pool = TeacherPool::new(vec![table], vec!["t".into()]).unwrap();
        let f = Vector::new(vec![1.0, 0.0]).unwrap();
        let d = pool.teacher_distribution(0, &f, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((d[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn teacher_distribution_scale_invariant_in_f() {
        let mut r = rng::derive(5, "scale");
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                unit(rng::gaussian_vec(&mut r, 4, 1.0))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let pool =
            TeacherPool::new(vec![Matrix::from_rows(rows).unwrap()], vec!["t".into()]).unwrap();
        let f = Vector::new(rng::gaussian_vec(&mut r, 4, 1.0)).unwrap();
        let a = pool.teacher_distribution(0, &f, 0.5).unwrap();
        let b = pool.teacher_distribution(0, &f.scaled(7.3), 0.5).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_index_out_of_range() {
        let table = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pool = TeacherPool::new(vec![table], vec!["t".into()]).unwrap();
        let f = Vector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            pool.teacher_distribution(1, &f, 1.0),
            Err(MopdError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backbone_round_trip_is_bit_exact() {
        let b = Backbone::seeded(5, 8, 6, 42).unwrap();
        let dir = std::env::temp_dir().join("mopd-backbone-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("backbone.json");
        b.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(b, loaded);
        let first = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}
