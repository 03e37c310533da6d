//! Training losses: cross-entropy, single-prompt distillation, gated mixture
//! distillation, the selection loss, and the combined objective, all with
//! analytic gradients.
//!
//! Gradient routing is structural: cross-entropy touches only the prompt, the
//! selection loss only the gate weights, and the mixture distillation term
//! reaches both (through the KL and through the gate weights respectively).
//! Batch reductions are left-to-right sums by default; a mean reduction is
//! available behind [`Reduction::Mean`].

use serde::{Deserialize, Serialize};

use crate::backbone::TeacherPool;
use crate::error::{MopdError, Result};
use crate::gating::GatingNetwork;
use crate::numerics::{KlDirection, Matrix, KL_EPSILON};
use crate::student::{InstanceForward, StudentModel};
use crate::synthdata::Instance;

/// Underflow guard for logs of softmax outputs.
const LN_FLOOR: f64 = 1e-300;

/// How knowledge moves from teacher to student in the mixture term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    /// KL divergence between prediction distributions.
    #[default]
    Kl,
    /// Linear-kernel maximum mean discrepancy between prediction
    /// distributions (squared distance of probability vectors).
    Mmd,
    /// One minus cosine similarity between per-class textual embeddings.
    Cosine,
    /// L1 distance between per-class textual embeddings.
    L1,
}

/// Batch reduction. Sum matches the loss definitions literally; mean is
/// available for scale-free learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn factor(&self, batch_len: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / batch_len as f64,
        }
    }
}

/// Per-step loss components and the weights that combined them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mpd: f64,
    pub mps: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.mpd.is_finite() && self.mps.is_finite() && self.total.is_finite()
    }

    pub fn max_component(&self) -> f64 {
        self.ce.max(self.mpd).max(self.mps)
    }
}

/// A loss value with its prompt gradient.
#[derive(Debug, Clone)]
pub struct PromptLoss {
    pub value: f64,
    pub prompt_grad: Matrix,
}

/// A loss value with its gate gradient.
#[derive(Debug, Clone)]
pub struct GateLoss {
    pub value: f64,
    pub gate_grad: Matrix,
}

/// A loss value with gradients for both trainable parts.
#[derive(Debug, Clone)]
pub struct MixtureLoss {
    pub value: f64,
    pub prompt_grad: Matrix,
    pub gate_grad: Matrix,
}

/// Combined objective output.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub breakdown: LossBreakdown,
    pub prompt_grad: Matrix,
    pub gate_grad: Matrix,
}

fn check_batch(batch: &[Instance]) -> Result<()> {
    if batch.is_empty() {
        return Err(MopdError::invalid("empty batch"));
    }
    Ok(())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(MopdError::IndexOutOfRange {
            context: "batch label",
            index: label,
            len: classes,
        });
    }
    Ok(())
}

/// Cross-entropy over the batch: `sum -ln p_soft(y|x)`, gradient w.r.t. the
/// soft prompt.
pub fn ce_loss(model: &StudentModel, batch: &[Instance], reduction: Reduction) -> Result<PromptLoss> {
    check_batch(batch)?;
    let tf = model.table_forward()?;
    let classes = tf.num_classes();
    let d = tf.table.cols();
    let mut value = 0.0;
    let mut joint = vec![0.0; d];
    for inst in batch {
        check_label(inst.label, classes)?;
        let fwd = tf.instance_forward(&inst.features)?;
        value -= fwd.probs[inst.label].max(LN_FLOOR).ln();
        let dl_ds: Vec<f64> = (0..classes)
            .map(|c| fwd.probs[c] - if c == inst.label { 1.0 } else { 0.0 })
            .collect();
        let g = tf.logit_grad_to_joint(&fwd, &dl_ds);
        for (a, b) in joint.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }
    let factor = reduction.factor(batch.len());
    value *= factor;
    for x in joint.iter_mut() {
        *x *= factor;
    }
    Ok(PromptLoss {
        value,
        prompt_grad: model.joint_grad_to_prompt(&joint, tf.pooled_count)?,
    })
}

/// One teacher's distribution term against the student: value plus the
/// gradient w.r.t. the student class logits.
fn distribution_term(
    variant: TransferVariant,
    direction: KlDirection,
    fwd: &InstanceForward,
    teacher_probs: &[f64],
) -> (f64, Vec<f64>) {
    let p = fwd.probs.as_slice();
    let q = teacher_probs;
    match variant {
        TransferVariant::Kl => match direction {
            KlDirection::FirstArgRef => {
                // sum p ln(p/q~), gradient p_c (ln(p_c/q~_c) - KL)
                let mut value = 0.0;
                let mut log_ratio = vec![0.0; p.len()];
                for c in 0..p.len() {
                    if p[c] > 0.0 {
                        log_ratio[c] = (p[c] / q[c].max(KL_EPSILON)).ln();
                        value += p[c] * log_ratio[c];
                    }
                }
                let dl_ds: Vec<f64> = (0..p.len())
                    .map(|c| {
                        if p[c] > 0.0 {
                            p[c] * (log_ratio[c] - value)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (value, dl_ds)
            }
            KlDirection::SecondArgRef => {
                // sum q ln(q/p~), gradient p - q
                let mut value = 0.0;
                for c in 0..p.len() {
                    if q[c] > 0.0 {
                        value += q[c] * (q[c] / p[c].max(KL_EPSILON)).ln();
                    }
                }
                let dl_ds: Vec<f64> = (0..p.len()).map(|c| p[c] - q[c]).collect();
                (value, dl_ds)
            }
        },
        TransferVariant::Mmd => {
            // |p - q|^2 with a linear kernel; gradient 2(p - q) projected
            // through the softmax.
            let mut value = 0.0;
            let g: Vec<f64> = (0..p.len())
                .map(|c| {
                    let diff = p[c] - q[c];
                    value += diff * diff;
                    2.0 * diff
                })
                .collect();
            let weighted: f64 = p.iter().zip(g.iter()).map(|(pc, gc)| pc * gc).sum();
            let dl_ds: Vec<f64> = (0..p.len()).map(|c| p[c] * (g[c] - weighted)).collect();
            (value, dl_ds)
        }
        TransferVariant::Cosine | TransferVariant::L1 => {
            unreachable!("embedding variants are handled by embedding_term")
        }
    }
}

/// Per-class textual-embedding comparison for the cosine and L1 variants:
/// value plus the gradient w.r.t. the (unit-norm) student table rows.
pub fn embedding_term(
    variant: TransferVariant,
    student_table: &Matrix,
    teacher_table: &Matrix,
) -> Result<(f64, Matrix)> {
    if student_table.rows() != teacher_table.rows()
        || student_table.cols() != teacher_table.cols()
    {
        return Err(MopdError::DimensionMismatch {
            context: "table comparison",
            expected: student_table.rows() * student_table.cols(),
            got: teacher_table.rows() * teacher_table.cols(),
        });
    }
    let (c, d) = (student_table.rows(), student_table.cols());
    let mut value = 0.0;
    let mut grad = Matrix::zeros(c, d);
    match variant {
        TransferVariant::Cosine => {
            for class in 0..c {
                let t = student_table.row(class);
                let a = teacher_table.row(class);
                let cos = crate::numerics::dot(t, a);
                value += 1.0 - cos;
                for k in 0..d {
                    grad.set(class, k, -a[k]);
                }
            }
        }
        TransferVariant::L1 => {
            for class in 0..c {
                let t = student_table.row(class);
                let a = teacher_table.row(class);
                for k in 0..d {
                    let diff = t[k] - a[k];
                    value += diff.abs();
                    grad.set(class, k, diff.signum() * f64::from(diff != 0.0));
                }
            }
        }
        _ => {
            return Err(MopdError::invalid(
                "embedding_term only handles cosine and l1",
            ))
        }
    }
    Ok((value, grad))
}

/// Single-prompt distillation: `sum KL(p_soft, p_hard)` against one frozen
/// teacher table, gradient w.r.t. the soft prompt.
pub fn pd_loss(
    model: &StudentModel,
    teacher: &Matrix,
    batch: &[Instance],
    direction: KlDirection,
    reduction: Reduction,
) -> Result<PromptLoss> {
    check_batch(batch)?;
    let tf = model.table_forward()?;
    if teacher.rows() != tf.num_classes() || teacher.cols() != tf.table.cols() {
        return Err(MopdError::DimensionMismatch {
            context: "teacher table shape",
            expected: tf.num_classes() * tf.table.cols(),
            got: teacher.rows() * teacher.cols(),
        });
    }
    let d = tf.table.cols();
    let mut value = 0.0;
    let mut joint = vec![0.0; d];
    for inst in batch {
        let fwd = tf.instance_forward(&inst.features)?;
        let q = teacher_probs(teacher, inst, model.tau)?;
        let (term, dl_ds) = distribution_term(TransferVariant::Kl, direction, &fwd, &q);
        value += term;
        let g = tf.logit_grad_to_joint(&fwd, &dl_ds);
        for (a, b) in joint.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }
    let factor = reduction.factor(batch.len());
    value *= factor;
    for x in joint.iter_mut() {
        *x *= factor;
    }
    Ok(PromptLoss {
        value,
        prompt_grad: model.joint_grad_to_prompt(&joint, tf.pooled_count)?,
    })
}

fn teacher_probs(table: &Matrix, inst: &Instance, tau: f64) -> Result<Vec<f64>> {
    let logits = crate::backbone::teacher_logits(table, &inst.features, tau)?;
    let dist =
        crate::numerics::masked_softmax(&crate::numerics::MaskedLogits::dense(logits))?;
    Ok(dist.as_slice().to_vec())
}

fn check_pool(model: &StudentModel, pool: &TeacherPool) -> Result<()> {
    if pool.num_classes() != model.num_classes() {
        return Err(MopdError::DimensionMismatch {
            context: "pool class count",
            expected: model.num_classes(),
            got: pool.num_classes(),
        });
    }
    Ok(())
}

/// Gated mixture distillation (default KL transfer): see
/// [`transfer_variant_loss`].
pub fn mpd_loss(
    model: &StudentModel,
    gate: &GatingNetwork,
    pool: &TeacherPool,
    batch: &[Instance],
    direction: KlDirection,
    reduction: Reduction,
) -> Result<MixtureLoss> {
    transfer_variant_loss(TransferVariant::Kl, model, gate, pool, batch, direction, reduction)
}

/// `sum_t sum_x G(f)_t term_t(x)` where `term_t` is the configured transfer
/// discrepancy against teacher `t`. Unselected teachers contribute exactly
/// zero. Gradients flow to the soft prompt through the terms and to the gate
/// weights through `G(f)_t`.
pub fn transfer_variant_loss(
    variant: TransferVariant,
    model: &StudentModel,
    gate: &GatingNetwork,
    pool: &TeacherPool,
    batch: &[Instance],
    direction: KlDirection,
    reduction: Reduction,
) -> Result<MixtureLoss> {
    check_batch(batch)?;
    check_pool(model, pool)?;
    if gate.pool_size() != pool.size() {
        return Err(MopdError::DimensionMismatch {
            context: "gate width vs pool size",
            expected: pool.size(),
            got: gate.pool_size(),
        });
    }
    let tf = model.table_forward()?;
    let d = tf.table.cols();
    let h = pool.size();
    let mut value = 0.0;
    let mut joint = vec![0.0; d];
    let mut table_grad_acc = Matrix::zeros(tf.num_classes(), d);
    let mut gate_grad = Matrix::zeros(gate.joint_dim(), h);
    // Embedding-space terms do not depend on the instance; cache per teacher.
    let mut embed_cache: Vec<Option<(f64, Matrix)>> = vec![None; h];

    for inst in batch {
        let fwd = tf.instance_forward(&inst.features)?;
        let gout = gate.forward(&inst.features)?;
        let mut upstream = vec![0.0; h];
        for &t in &gout.selected {
            let weight = gout.weights[t];
            match variant {
                TransferVariant::Kl | TransferVariant::Mmd => {
                    let q = teacher_probs(pool.table(t), inst, model.tau)?;
                    let (term, dl_ds) = distribution_term(variant, direction, &fwd, &q);
                    upstream[t] = term;
                    value += weight * term;
                    let weighted: Vec<f64> = dl_ds.iter().map(|g| g * weight).collect();
                    let g = tf.logit_grad_to_joint(&fwd, &weighted);
                    for (a, b) in joint.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                TransferVariant::Cosine | TransferVariant::L1 => {
                    if embed_cache[t].is_none() {
                        embed_cache[t] =
                            Some(embedding_term(variant, &tf.table, pool.table(t))?);
                    }
                    let (term, dl_dt) = embed_cache[t].as_ref().unwrap();
                    upstream[t] = *term;
                    value += weight * term;
                    table_grad_acc.add_scaled(dl_dt, weight);
                }
            }
        }
        gate_grad.add_scaled(&gate.backward(&inst.features, &upstream)?, 1.0);
    }

    let g = tf.table_grad_to_joint(&table_grad_acc);
    for (a, b) in joint.iter_mut().zip(g.iter()) {
        *a += b;
    }

    let factor = reduction.factor(batch.len());
    value *= factor;
    for x in joint.iter_mut() {
        *x *= factor;
    }
    gate_grad.scale(factor);
    Ok(MixtureLoss {
        value,
        prompt_grad: model.joint_grad_to_prompt(&joint, tf.pooled_count)?,
        gate_grad,
    })
}

/// Selection loss: `-sum_t sum_(x,y) G(f)_t ln p_tea,t(y|x)`. Gradient
/// reaches only the gate weights; the teachers are frozen and the student
/// plays no part.
pub fn mps_loss(
    gate: &GatingNetwork,
    pool: &TeacherPool,
    batch: &[Instance],
    tau: f64,
    reduction: Reduction,
) -> Result<GateLoss> {
    check_batch(batch)?;
    if gate.pool_size() != pool.size() {
        return Err(MopdError::DimensionMismatch {
            context: "gate width vs pool size",
            expected: pool.size(),
            got: gate.pool_size(),
        });
    }
    let h = pool.size();
    let classes = pool.num_classes();
    let mut value = 0.0;
    let mut gate_grad = Matrix::zeros(gate.joint_dim(), h);
    for inst in batch {
        check_label(inst.label, classes)?;
        let gout = gate.forward(&inst.features)?;
        let mut upstream = vec![0.0; h];
        for &t in &gout.selected {
            let q = pool.teacher_distribution(t, &inst.features, tau)?;
            let nll = -q[inst.label].max(LN_FLOOR).ln();
            upstream[t] = nll;
            value += gout.weights[t] * nll;
        }
        gate_grad.add_scaled(&gate.backward(&inst.features, &upstream)?, 1.0);
    }
    let factor = reduction.factor(batch.len());
    value *= factor;
    gate_grad.scale(factor);
    Ok(GateLoss { value, gate_grad })
}

/// Settings for the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSettings {
    pub alpha: f64,
    pub beta: f64,
    pub transfer: TransferVariant,
    pub kl_direction: KlDirection,
    pub reduction: Reduction,
}

impl ObjectiveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(MopdError::invalid(format!(
                "alpha must lie in [0, 1]: {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(MopdError::invalid(format!(
                "beta must be non-negative: {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Combined objective `alpha ce + (1 - alpha) mpd + beta mps` with gradients
/// for prompt and gate. The routing is structural: the mps term cannot reach
/// the prompt and the ce term cannot reach the gate.
pub fn combined_loss(
    model: &StudentModel,
    gate: &GatingNetwork,
    pool: &TeacherPool,
    batch: &[Instance],
    settings: &ObjectiveSettings,
) -> Result<CombinedLoss> {
    settings.validate()?;
    let ce = ce_loss(model, batch, settings.reduction)?;
    let mpd = transfer_variant_loss(
        settings.transfer,
        model,
        gate,
        pool,
        batch,
        settings.kl_direction,
        settings.reduction,
    )?;
    let mps = mps_loss(gate, pool, batch, model.tau, settings.reduction)?;

    let alpha = settings.alpha;
    let beta = settings.beta;
    let total = alpha * ce.value + (1.0 - alpha) * mpd.value + beta * mps.value;

    let mut prompt_grad = Matrix::zeros(ce.prompt_grad.rows(), ce.prompt_grad.cols());
    if alpha != 0.0 {
        prompt_grad.add_scaled(&ce.prompt_grad, alpha);
    }
    if alpha != 1.0 {
        prompt_grad.add_scaled(&mpd.prompt_grad, 1.0 - alpha);
    }
    let mut gate_grad = Matrix::zeros(mpd.gate_grad.rows(), mpd.gate_grad.cols());
    if alpha != 1.0 {
        gate_grad.add_scaled(&mpd.gate_grad, 1.0 - alpha);
    }
    if beta != 0.0 {
        gate_grad.add_scaled(&mps.gate_grad, beta);
    }

    Ok(CombinedLoss {
        breakdown: LossBreakdown {
            ce: ce.value,
            mpd: mpd.value,
            mps: mps.value,
            total,
            alpha,
            beta,
        },
        prompt_grad,
        gate_grad,
    })
}

/// Mixture distillation with externally fixed uniform teacher sets (one set
/// per instance, weight `1/T` each): the random-selection ablation. The
/// weights are constants, so no gate gradient exists.
pub fn uniform_mixture_loss(
    model: &StudentModel,
    pool: &TeacherPool,
    batch: &[Instance],
    teacher_sets: &[Vec<usize>],
    variant: TransferVariant,
    direction: KlDirection,
    reduction: Reduction,
) -> Result<PromptLoss> {
    check_batch(batch)?;
    check_pool(model, pool)?;
    if teacher_sets.len() != batch.len() {
        return Err(MopdError::DimensionMismatch {
            context: "teacher sets per instance",
            expected: batch.len(),
            got: teacher_sets.len(),
        });
    }
    let tf = model.table_forward()?;
    let d = tf.table.cols();
    let mut value = 0.0;
    let mut joint = vec![0.0; d];
    let mut table_grad_acc = Matrix::zeros(tf.num_classes(), d);
    let mut embed_cache: Vec<Option<(f64, Matrix)>> = vec![None; pool.size()];

    for (inst, set) in batch.iter().zip(teacher_sets.iter()) {
        if set.is_empty() {
            return Err(MopdError::invalid("empty teacher set"));
        }
        let weight = 1.0 / set.len() as f64;
        let fwd = tf.instance_forward(&inst.features)?;
        for &t in set {
            if t >= pool.size() {
                return Err(MopdError::IndexOutOfRange {
                    context: "sampled teacher",
                    index: t,
                    len: pool.size(),
                });
            }
            match variant {
                TransferVariant::Kl | TransferVariant::Mmd => {
                    let q = teacher_probs(pool.table(t), inst, model.tau)?;
                    let (term, dl_ds) = distribution_term(variant, direction, &fwd, &q);
                    value += weight * term;
                    let weighted: Vec<f64> = dl_ds.iter().map(|g| g * weight).collect();
                    let g = tf.logit_grad_to_joint(&fwd, &weighted);
                    for (a, b) in joint.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                TransferVariant::Cosine | TransferVariant::L1 => {
                    if embed_cache[t].is_none() {
                        embed_cache[t] =
                            Some(embedding_term(variant, &tf.table, pool.table(t))?);
                    }
                    let (term, dl_dt) = embed_cache[t].as_ref().unwrap();
                    value += weight * term;
                    table_grad_acc.add_scaled(dl_dt, weight);
                }
            }
        }
    }
    let g = tf.table_grad_to_joint(&table_grad_acc);
    for (a, b) in joint.iter_mut().zip(g.iter()) {
        *a += b;
    }
    let factor = reduction.factor(batch.len());
    value *= factor;
    for x in joint.iter_mut() {
        *x *= factor;
    }
    Ok(PromptLoss {
        value,
        prompt_grad: model.joint_grad_to_prompt(&joint, tf.pooled_count)?,
    })
}

/// Selection-loss value under externally fixed uniform teacher sets. Pure
/// bookkeeping for the random ablation's loss report: constant weights mean
/// no gradient anywhere.
pub fn uniform_mps_value(
    pool: &TeacherPool,
    batch: &[Instance],
    teacher_sets: &[Vec<usize>],
    tau: f64,
    reduction: Reduction,
) -> Result<f64> {
    check_batch(batch)?;
    let mut value = 0.0;
    for (inst, set) in batch.iter().zip(teacher_sets.iter()) {
        let weight = 1.0 / set.len() as f64;
        for &t in set {
            let q = pool.teacher_distribution(t, &inst.features, tau)?;
            value -= weight * q[inst.label].max(LN_FLOOR).ln();
        }
    }
    Ok(value * reduction.factor(batch.len()))
}
