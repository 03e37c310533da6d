//! Mini-batch SGD over (soft prompt, gate weights) with the method variants:
//! plain cross-entropy, single-prompt distillation, the gated mixture, the
//! random-selection ablation, and the no-selection-loss ablation.
//!
//! The loop is plain constant-rate SGD (cosine decay behind a flag). A run is
//! a pure function of (config, data, backbone, pool): batch order, parameter
//! initialization, and random teacher draws all come from named seed streams.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TeacherPool, DEFAULT_DIM, DEFAULT_TAU};
use crate::error::{MopdError, Result};
use crate::gating::GatingNetwork;
use crate::jsonio;
use crate::numerics::{KlDirection, Matrix};
use crate::objectives::{
    ce_loss, combined_loss, pd_loss, uniform_mixture_loss, uniform_mps_value,
    LossBreakdown, ObjectiveSettings, Reduction, TransferVariant,
};
use crate::student::{SoftPrompt, StudentModel};
use crate::synthdata::Instance;

/// Loss components above this magnitude trigger a diagnostic abort.
pub const ABORT_THRESHOLD: f64 = 1e6;

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-entropy only (CoOp-style baseline).
    CeOnly,
    /// Single-prompt distillation against one designated teacher.
    Sipd,
    /// Full gated mixture objective.
    #[default]
    Mopd,
    /// Mixture distillation with per-instance random teacher selection.
    MopdR,
    /// Gated mixture without the selection loss (beta forced to 0).
    MopdNoMps,
}

impl Variant {
    pub fn uses_pool(&self) -> bool {
        !matches!(self, Variant::CeOnly)
    }

    pub fn uses_gate(&self) -> bool {
        matches!(self, Variant::Mopd | Variant::MopdNoMps)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::CeOnly => "ce_only",
            Variant::Sipd => "sipd",
            Variant::Mopd => "mopd",
            Variant::MopdR => "mopd_r",
            Variant::MopdNoMps => "mopd_no_mps",
        }
    }
}

fn default_alpha() -> f64 {
    0.8
}
fn default_beta() -> f64 {
    0.0005
}
fn default_top_t() -> usize {
    2
}
fn default_pool_size() -> usize {
    12
}
fn default_prompt_len() -> usize {
    4
}
fn default_embed_dim() -> usize {
    DEFAULT_DIM
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_lr() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    32
}
fn default_prompt_init_sigma() -> f64 {
    0.02
}
fn default_zero_shot_sigma() -> f64 {
    0.4
}

/// All scalar hyperparameters of a run. `seed` is required; everything else
/// defaults to the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Selection width T of the gate.
    #[serde(default = "default_top_t")]
    pub top_t: usize,
    /// Expected teacher pool size H.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Prompt length M.
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    /// Word-embedding dimension fed to the frozen text encoder.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Cosine learning-rate decay over the full run.
    #[serde(default)]
    pub cosine_lr: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub transfer: TransferVariant,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub reduction: Reduction,
    /// Designated teacher index for the single-prompt variant.
    #[serde(default)]
    pub sipd_teacher: usize,
    #[serde(default = "default_prompt_init_sigma")]
    pub prompt_init_sigma: f64,
    /// Angular noise of the backbone's built-in class knowledge (how good
    /// its zero-shot predictions are before any prompt learning).
    #[serde(default = "default_zero_shot_sigma")]
    pub zero_shot_sigma: f64,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            top_t: default_top_t(),
            pool_size: default_pool_size(),
            prompt_len: default_prompt_len(),
            embed_dim: default_embed_dim(),
            tau: default_tau(),
            lr: default_lr(),
            cosine_lr: false,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed,
            variant: Variant::default(),
            transfer: TransferVariant::default(),
            kl_direction: KlDirection::default(),
            reduction: Reduction::default(),
            sipd_teacher: 0,
            prompt_init_sigma: default_prompt_init_sigma(),
            zero_shot_sigma: default_zero_shot_sigma(),
        }
    }

    /// Backbone for a task under this config: frozen encoders plus a
    /// vocabulary noisily aligned to the task's class prototypes.
    pub fn backbone_for(&self, task: &crate::synthdata::SyntheticTask) -> Result<Backbone> {
        Backbone::aligned(
            &task.prototypes,
            self.embed_dim,
            self.zero_shot_sigma,
            self.prompt_len,
            self.seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(MopdError::invalid(format!("alpha out of [0,1]: {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(MopdError::invalid(format!("beta must be >= 0: {}", self.beta)));
        }
        if self.top_t == 0 || self.top_t > self.pool_size {
            return Err(MopdError::invalid(format!(
                "selection width {} out of range 1..={}",
                self.top_t, self.pool_size
            )));
        }
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(MopdError::invalid(format!("lr must be >= 0: {}", self.lr)));
        }
        if self.lr < 0.0 {
            return Err(MopdError::invalid(format!("lr must be >= 0: {}", self.lr)));
        }
        if !(self.tau > 0.0) {
            return Err(MopdError::invalid(format!("tau must be > 0: {}", self.tau)));
        }
        if self.prompt_len == 0 || self.embed_dim == 0 {
            return Err(MopdError::invalid("prompt_len and embed_dim must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(MopdError::invalid("batch_size must be >= 1"));
        }
        if !self.zero_shot_sigma.is_finite() || self.zero_shot_sigma < 0.0 {
            return Err(MopdError::invalid(format!(
                "zero_shot_sigma must be non-negative: {}",
                self.zero_shot_sigma
            )));
        }
        Ok(())
    }

    fn settings(&self, beta_override: Option<f64>) -> ObjectiveSettings {
        ObjectiveSettings {
            alpha: self.alpha,
            beta: beta_override.unwrap_or(self.beta),
            transfer: self.transfer,
            kl_direction: self.kl_direction,
            reduction: self.reduction,
        }
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    pub gate_entropy: f64,
}

/// Mutable training state. The loss history is append-only and the RNG
/// streams are owned here so a run replays exactly from its seed.
#[derive(Debug)]
pub struct TrainState {
    pub model: StudentModel,
    pub gate: GatingNetwork,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<StepRecord>,
    /// Labels of every instance that entered any batch; lets harnesses audit
    /// that base-to-new training never saw a new-class instance.
    pub seen_labels: BTreeSet<usize>,
    teacher_rng: ChaCha8Rng,
    total_steps: usize,
    lr: f64,
    cosine_lr: bool,
}

impl TrainState {
    /// Current learning rate under the configured schedule.
    pub fn current_lr(&self) -> f64 {
        if self.cosine_lr && self.total_steps > 0 {
            let progress = self.step as f64 / self.total_steps as f64;
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.lr
        }
    }

    /// Compute the variant loss on a batch, apply simultaneous SGD updates
    /// to prompt and gate, and append the record. Aborts with a diagnostic
    /// dump if any component is non-finite or explodes.
    pub fn training_step(
        &mut self,
        batch: &[Instance],
        config: &TrainConfig,
        pool: Option<&TeacherPool>,
    ) -> Result<LossBreakdown> {
        let (breakdown, prompt_grad, gate_grad) = self.compute_losses(batch, config, pool)?;
        if !breakdown.is_finite() || breakdown.max_component().abs() > ABORT_THRESHOLD {
            let dump = jsonio::to_json_string(&serde_json::json!({
                "epoch": self.epoch,
                "step": self.step,
                "ce": breakdown.ce,
                "mpd": breakdown.mpd,
                "mps": breakdown.mps,
                "total": breakdown.total,
                "prompt_max_abs": self.model.soft_prompt.vectors()
                    .iter()
                    .map(|v| v.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs())))
                    .fold(0.0f64, f64::max),
                "gate_max_abs": self.gate.weights().max_abs(),
            }))
            .unwrap_or_default();
            return Err(MopdError::NumericalAbort {
                epoch: self.epoch,
                step: self.step,
                reason: format!("loss components ce={} mpd={} mps={}", breakdown.ce, breakdown.mpd, breakdown.mps),
                dump,
            });
        }

        let gate_entropy = if config.variant.uses_gate() {
            let mut acc = 0.0;
            for inst in batch {
                acc += self.gate.forward(&inst.features)?.weights.entropy();
            }
            acc / batch.len() as f64
        } else {
            0.0
        };

        let lr = self.current_lr();
        self.model.soft_prompt.apply_update(&prompt_grad, lr);
        self.gate.apply_update(&gate_grad, lr);
        for inst in batch {
            self.seen_labels.insert(inst.label);
        }
        self.history.push(StepRecord {
            epoch: self.epoch,
            step: self.step,
            breakdown: breakdown.clone(),
            gate_entropy,
        });
        self.step += 1;
        Ok(breakdown)
    }

    fn compute_losses(
        &mut self,
        batch: &[Instance],
        config: &TrainConfig,
        pool: Option<&TeacherPool>,
    ) -> Result<(LossBreakdown, Matrix, Matrix)> {
        let gate_shape = (self.gate.joint_dim(), self.gate.pool_size());
        let zero_gate = move || Matrix::zeros(gate_shape.0, gate_shape.1);
        match config.variant {
            Variant::CeOnly => {
                let ce = ce_loss(&self.model, batch, config.reduction)?;
                let breakdown = LossBreakdown {
                    ce: ce.value,
                    mpd: 0.0,
                    mps: 0.0,
                    total: ce.value,
                    alpha: 1.0,
                    beta: 0.0,
                };
                Ok((breakdown, ce.prompt_grad, zero_gate()))
            }
            Variant::Sipd => {
                let pool = pool.ok_or_else(|| MopdError::invalid("sipd requires a teacher pool"))?;
                if config.sipd_teacher >= pool.size() {
                    return Err(MopdError::IndexOutOfRange {
                        context: "designated sipd teacher",
                        index: config.sipd_teacher,
                        len: pool.size(),
                    });
                }
                let ce = ce_loss(&self.model, batch, config.reduction)?;
                let pd = pd_loss(
                    &self.model,
                    pool.table(config.sipd_teacher),
                    batch,
                    config.kl_direction,
                    config.reduction,
                )?;
                let alpha = config.alpha;
                let total = alpha * ce.value + (1.0 - alpha) * pd.value;
                let mut prompt_grad = Matrix::zeros(ce.prompt_grad.rows(), ce.prompt_grad.cols());
                prompt_grad.add_scaled(&ce.prompt_grad, alpha);
                prompt_grad.add_scaled(&pd.prompt_grad, 1.0 - alpha);
                let breakdown = LossBreakdown {
                    ce: ce.value,
                    mpd: pd.value,
                    mps: 0.0,
                    total,
                    alpha,
                    beta: 0.0,
                };
                Ok((breakdown, prompt_grad, zero_gate()))
            }
            Variant::Mopd | Variant::MopdNoMps => {
                let pool = pool.ok_or_else(|| {
                    MopdError::invalid(format!("{} requires a teacher pool", config.variant.name()))
                })?;
                let beta_override = match config.variant {
                    Variant::MopdNoMps => Some(0.0),
                    _ => None,
                };
                let out = combined_loss(
                    &self.model,
                    &self.gate,
                    pool,
                    batch,
                    &config.settings(beta_override),
                )?;
                Ok((out.breakdown, out.prompt_grad, out.gate_grad))
            }
            Variant::MopdR => {
                let pool = pool
                    .ok_or_else(|| MopdError::invalid("mopd_r requires a teacher pool"))?;
                let sets = self.sample_teacher_sets(batch.len(), pool.size(), config.top_t);
                let ce = ce_loss(&self.model, batch, config.reduction)?;
                let mpd = uniform_mixture_loss(
                    &self.model,
                    pool,
                    batch,
                    &sets,
                    config.transfer,
                    config.kl_direction,
                    config.reduction,
                )?;
                let mps = uniform_mps_value(pool, batch, &sets, self.model.tau, config.reduction)?;
                let alpha = config.alpha;
                let beta = config.beta;
                let total = alpha * ce.value + (1.0 - alpha) * mpd.value + beta * mps;
                let mut prompt_grad = Matrix::zeros(ce.prompt_grad.rows(), ce.prompt_grad.cols());
                prompt_grad.add_scaled(&ce.prompt_grad, alpha);
                prompt_grad.add_scaled(&mpd.prompt_grad, 1.0 - alpha);
                let breakdown = LossBreakdown {
                    ce: ce.value,
                    mpd: mpd.value,
                    mps,
                    total,
                    alpha,
                    beta,
                };
                // Fixed random weights carry no gradient to anything.
                Ok((breakdown, prompt_grad, zero_gate()))
            }
        }
    }

    /// Per-instance uniform draw of `t` distinct teachers, sorted for a
    /// deterministic reduction order.
    fn sample_teacher_sets(&mut self, batch_len: usize, pool_size: usize, t: usize) -> Vec<Vec<usize>> {
        (0..batch_len)
            .map(|_| {
                let mut indices: Vec<usize> = (0..pool_size).collect();
                indices.shuffle(&mut self.teacher_rng);
                let mut set: Vec<usize> = indices.into_iter().take(t).collect();
                set.sort_unstable();
                set
            })
            .collect()
    }

    /// Mean gate weight per teacher over a set of instances.
    pub fn mean_gate_weights(&self, instances: &[Instance]) -> Result<Vec<f64>> {
        mean_gate_weights(&self.gate, instances)
    }
}

/// Mean gate weight per teacher over a set of instances.
pub fn mean_gate_weights(gate: &GatingNetwork, instances: &[Instance]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; gate.pool_size()];
    if instances.is_empty() {
        return Ok(acc);
    }
    for inst in instances {
        let out = gate.forward(&inst.features)?;
        for (a, w) in acc.iter_mut().zip(out.weights.as_slice()) {
            *a += w;
        }
    }
    for a in acc.iter_mut() {
        *a /= instances.len() as f64;
    }
    Ok(acc)
}

/// Run the full training loop. The batch sampler shuffles without
/// replacement each epoch; every stream is derived from `config.seed`.
pub fn train(
    config: &TrainConfig,
    data: &[Instance],
    backbone: std::sync::Arc<Backbone>,
    pool: Option<&TeacherPool>,
) -> Result<TrainState> {
    config.validate()?;
    if data.is_empty() {
        return Err(MopdError::invalid("training data must be non-empty"));
    }
    if config.variant.uses_pool() {
        let pool = pool.ok_or_else(|| {
            MopdError::invalid(format!("variant {} requires a teacher pool", config.variant.name()))
        })?;
        if config.variant.uses_gate() || config.variant == Variant::MopdR {
            if pool.size() != config.pool_size {
                return Err(MopdError::invalid(format!(
                    "pool size {} does not match configured H={}",
                    pool.size(),
                    config.pool_size
                )));
            }
        }
        if pool.num_classes() != backbone.num_classes() {
            return Err(MopdError::DimensionMismatch {
                context: "pool classes vs backbone",
                expected: backbone.num_classes(),
                got: pool.num_classes(),
            });
        }
    }

    let joint_dim = backbone.text.joint_dim();
    let prompt = SoftPrompt::seeded(
        config.prompt_len,
        config.embed_dim,
        config.prompt_init_sigma,
        config.seed,
    )?;
    let model = StudentModel::new(prompt, backbone, config.tau)?;
    let gate_width = pool.map_or(config.pool_size, |p| p.size());
    let gate = GatingNetwork::seeded(
        joint_dim,
        gate_width,
        config.top_t.min(gate_width),
        config.seed,
    )?;

    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    let mut state = TrainState {
        model,
        gate,
        epoch: 0,
        step: 0,
        history: Vec::with_capacity(config.epochs * batches_per_epoch),
        seen_labels: BTreeSet::new(),
        teacher_rng: crate::rng::derive(config.seed, "teacher-sampler"),
        total_steps: config.epochs * batches_per_epoch,
        lr: config.lr,
        cosine_lr: config.cosine_lr,
    };

    let mut batch_rng = crate::rng::derive(config.seed, "batch-sampler");
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        order.shuffle(&mut batch_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Instance> = chunk.iter().map(|&i| data[i].clone()).collect();
            state.training_step(&batch, config, pool)?;
        }
    }
    Ok(state)
}

/// A trained run frozen to disk: everything needed to reproduce predictions,
/// including the frozen backbone itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub soft_prompt: SoftPrompt,
    pub gate: GatingNetwork,
    pub tau: f64,
    pub backbone: Backbone,
    pub backbone_hash: String,
    /// Hash of the task file this run trained on (when file-based).
    #[serde(default)]
    pub task_hash: Option<String>,
    #[serde(default)]
    pub pool_hash: Option<String>,
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Result<Self> {
        let backbone = state.model.backbone().as_ref().clone();
        Ok(Checkpoint {
            format_version: 1,
            config: config.clone(),
            soft_prompt: state.model.soft_prompt.clone(),
            gate: state.gate.clone(),
            tau: state.model.tau,
            backbone_hash: backbone.content_hash()?,
            backbone,
            task_hash: None,
            pool_hash: None,
            steps: state.step,
            final_loss: state.history.last().map(|r| r.breakdown.clone()),
        })
    }

    /// Rebuild the student. The gate is deliberately not consulted anywhere
    /// on this path: inference is gate-free.
    pub fn student(&self) -> Result<StudentModel> {
        StudentModel::new(
            self.soft_prompt.clone(),
            std::sync::Arc::new(self.backbone.clone()),
            self.tau,
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        jsonio::write_json(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        jsonio::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_task, generate_teacher_pool, TaskSpec, TeacherSpec};
    use std::sync::Arc;

    fn tiny_task(seed: u64) -> crate::synthdata::SyntheticTask {
        generate_task(&TaskSpec {
            classes: 4,
            dim: 8,
            shots: 4,
            test_per_class: 4,
            sigma_x: 0.2,
            base_fraction: 0.5,
            seed,
        })
        .unwrap()
    }

    fn tiny_config(seed: u64, variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::desk_default(seed);
        c.variant = variant;
        c.pool_size = 3;
        c.top_t = 2;
        c.epochs = 3;
        c.batch_size = 4;
        c.embed_dim = 8;
        c.tau = 0.2;
        c.lr = 0.05;
        c
    }

    fn tiny_pool(task: &crate::synthdata::SyntheticTask, seed: u64) -> crate::backbone::TeacherPool {
        generate_teacher_pool(
            task,
            &TeacherSpec {
                related_sigmas: vec![0.1, 0.3, 0.6],
                noisy: 0,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_seeds_replay_identically() {
        let task = tiny_task(1);
        let pool = tiny_pool(&task, 1);
        let config = tiny_config(5, Variant::Mopd);
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, config.seed).unwrap());
        let a = train(&config, &task.train, Arc::clone(&backbone), Some(&pool)).unwrap();
        let b = train(&config, &task.train, backbone, Some(&pool)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.soft_prompt, b.model.soft_prompt);
        assert_eq!(a.gate.weights(), b.gate.weights());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let task = tiny_task(2);
        let pool = tiny_pool(&task, 2);
        let mut config = tiny_config(6, Variant::Mopd);
        config.lr = 0.0;
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, config.seed).unwrap());
        let state = train(&config, &task.train, Arc::clone(&backbone), Some(&pool)).unwrap();
        let fresh =
            SoftPrompt::seeded(config.prompt_len, config.embed_dim, config.prompt_init_sigma, config.seed)
                .unwrap();
        assert_eq!(state.model.soft_prompt, fresh);
        let fresh_gate = GatingNetwork::seeded(8, 3, 2, config.seed).unwrap();
        assert_eq!(state.gate.weights(), fresh_gate.weights());
    }

    #[test]
    fn mopd_with_alpha_one_beta_zero_tracks_ce_only() {
        let task = tiny_task(3);
        let pool = tiny_pool(&task, 3);
        let mut mopd = tiny_config(7, Variant::Mopd);
        mopd.alpha = 1.0;
        mopd.beta = 0.0;
        let ce = tiny_config(7, Variant::CeOnly);
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, 7).unwrap());
        let run_mopd = train(&mopd, &task.train, Arc::clone(&backbone), Some(&pool)).unwrap();
        let run_ce = train(&ce, &task.train, Arc::clone(&backbone), None).unwrap();
        assert_eq!(run_mopd.history.len(), run_ce.history.len());
        for (a, b) in run_mopd.history.iter().zip(run_ce.history.iter()) {
            assert!((a.breakdown.total - b.breakdown.total).abs() <= 1e-9);
            assert!((a.breakdown.ce - b.breakdown.ce).abs() <= 1e-9);
        }
        assert_eq!(run_mopd.model.soft_prompt, run_ce.model.soft_prompt);
        // W_g never moves when (1 - alpha) and beta both vanish.
        let init_gate = GatingNetwork::seeded(8, 3, 2, 7).unwrap();
        assert_eq!(run_mopd.gate.weights(), init_gate.weights());
    }

    #[test]
    fn gated_variant_requires_matching_pool_size() {
        let task = tiny_task(4);
        let pool = tiny_pool(&task, 4); // size 3
        let mut config = tiny_config(8, Variant::Mopd);
        config.pool_size = 5;
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, 8).unwrap());
        assert!(train(&config, &task.train, backbone, Some(&pool)).is_err());
    }

    #[test]
    fn gated_variant_requires_pool_at_all() {
        let task = tiny_task(4);
        let config = tiny_config(8, Variant::Mopd);
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, 8).unwrap());
        assert!(train(&config, &task.train, backbone, None).is_err());
    }

    #[test]
    fn mopd_r_with_full_width_matches_dense_uniform_selection() {
        // T = H: the sampled set is always the whole pool, weights 1/H.
        let task = tiny_task(5);
        let pool = tiny_pool(&task, 5);
        let mut config = tiny_config(9, Variant::MopdR);
        config.top_t = 3;
        config.pool_size = 3;
        config.epochs = 1;
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, 9).unwrap());
        let state = train(&config, &task.train, Arc::clone(&backbone), Some(&pool)).unwrap();

        // Replicate one step by hand with the dense uniform mixture.
        let prompt = SoftPrompt::seeded(config.prompt_len, config.embed_dim, config.prompt_init_sigma, config.seed).unwrap();
        let model = StudentModel::new(prompt, Arc::clone(&backbone), config.tau).unwrap();
        let mut batch_rng = crate::rng::derive(config.seed, "batch-sampler");
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut batch_rng);
        let batch: Vec<Instance> = order[..config.batch_size]
            .iter()
            .map(|&i| task.train[i].clone())
            .collect();
        let sets = vec![vec![0, 1, 2]; batch.len()];
        let mpd = uniform_mixture_loss(
            &model,
            &pool,
            &batch,
            &sets,
            config.transfer,
            config.kl_direction,
            config.reduction,
        )
        .unwrap();
        let rec = &state.history[0];
        assert!((rec.breakdown.mpd - mpd.value).abs() < 1e-12);
    }

    #[test]
    fn seen_labels_track_training_batches() {
        let task = tiny_task(6);
        let config = tiny_config(10, Variant::CeOnly);
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, 10).unwrap());
        let base = task.base_train();
        let state = train(&config, &base, backbone, None).unwrap();
        for label in &state.seen_labels {
            assert!(task.base_ids.contains(label));
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let task = tiny_task(7);
        let pool = tiny_pool(&task, 7);
        let config = tiny_config(11, Variant::Mopd);
        let backbone = Arc::new(Backbone::seeded(4, 8, 8, 11).unwrap());
        let state = train(&config, &task.train, backbone, Some(&pool)).unwrap();
        let ck = Checkpoint::from_state(&state, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, loaded);
        // Predictions survive the round trip bit for bit.
        let a = ck.student().unwrap();
        let b = loaded.student().unwrap();
        for inst in &task.test {
            assert_eq!(
                a.predict(&inst.features).unwrap(),
                b.predict(&inst.features).unwrap()
            );
        }
    }
}
