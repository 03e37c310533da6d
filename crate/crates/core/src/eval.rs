//! Evaluation protocols: base-to-new with the harmonic-mean trade-off metric,
//! few-shot curves, domain-shifted test sets, and noisy-pool robustness.
//!
//! Base and new splits are scored inside their own label spaces (a base test
//! instance competes only against base labels, a new one only against new
//! labels). Inference never touches the gate; it exists in the checkpoint
//! only for diagnostics like the mean weight it puts on each teacher.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::backbone::TeacherPool;
use crate::error::{MopdError, Result};
use crate::gating::GatingNetwork;
use crate::jsonio;
use crate::synthdata::{generate_teacher_pool, Instance, SyntheticTask, TeacherSpec};
use crate::trainer::{mean_gate_weights, train, Checkpoint, TrainConfig, TrainState, Variant};

/// Harmonic mean of base and new accuracy: `2ab / (a + b)`, 0 when both
/// vanish. Inputs are fractions in [0, 1].
pub fn harmonic_mean(acc_base: f64, acc_new: f64) -> Result<f64> {
    for v in [acc_base, acc_new] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(MopdError::invalid(format!("accuracy out of [0, 1]: {v}")));
        }
    }
    if acc_base + acc_new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * acc_base * acc_new / (acc_base + acc_new))
}

/// Result of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub acc_base: f64,
    pub acc_new: f64,
    pub h: f64,
    /// Accuracy per class, each measured inside its split's label space.
    pub per_class: Vec<f64>,
    /// Mean gate weight per teacher over the base training data.
    pub gate_stats: Vec<f64>,
    pub config_hash: String,
}

fn split_accuracy(
    student: &crate::student::StudentModel,
    instances: &[&Instance],
    allowed: &[usize],
    per_class_hits: &mut [usize],
    per_class_totals: &mut [usize],
) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for inst in instances {
        let pred = student.predict_restricted(&inst.features, allowed)?;
        per_class_totals[inst.label] += 1;
        if pred == inst.label {
            correct += 1;
            per_class_hits[inst.label] += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// Base-to-new evaluation of a trained checkpoint: base and new test splits
/// scored within their own label spaces; H combines them.
pub fn evaluate_base_to_new(checkpoint: &Checkpoint, task: &SyntheticTask) -> Result<EvalReport> {
    if checkpoint.backbone.num_classes() != task.num_classes() {
        return Err(MopdError::invalid(format!(
            "label-space mismatch: checkpoint has {} classes, task has {}",
            checkpoint.backbone.num_classes(),
            task.num_classes()
        )));
    }
    let student = checkpoint.student()?;
    let c = task.num_classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    let acc_base = split_accuracy(
        &student,
        &task.test_base(),
        &task.base_ids,
        &mut hits,
        &mut totals,
    )?;
    let acc_new = split_accuracy(
        &student,
        &task.test_new(),
        &task.new_ids,
        &mut hits,
        &mut totals,
    )?;
    let per_class = (0..c)
        .map(|k| {
            if totals[k] == 0 {
                0.0
            } else {
                hits[k] as f64 / totals[k] as f64
            }
        })
        .collect();
    let gate_stats = mean_gate_weights(&checkpoint.gate, &task.base_train())?;
    Ok(EvalReport {
        protocol: format!(
            "base-to-new{}",
            if task.domain_shift > 0.0 {
                format!("(shift={})", task.domain_shift)
            } else {
                String::new()
            }
        ),
        acc_base,
        acc_new,
        h: harmonic_mean(acc_base, acc_new)?,
        per_class,
        gate_stats,
        config_hash: jsonio::value_sha256(&checkpoint.config)?,
    })
}

/// Domain-shift protocol: same checkpoint, rotated/noisier test split.
pub fn evaluate_domain_shift(
    checkpoint: &Checkpoint,
    task: &SyntheticTask,
    shift: f64,
) -> Result<EvalReport> {
    let shifted = crate::synthdata::apply_domain_shift(task, shift)?;
    let mut report = evaluate_base_to_new(checkpoint, &shifted)?;
    report.protocol = format!("domain-shift(shift={shift})");
    Ok(report)
}

/// Train on the task's base split and evaluate base-to-new. Returns the
/// training state alongside so callers can inspect history and gate
/// trajectories. Audits that no new-class instance entered a batch.
pub fn run_base_to_new(
    config: &TrainConfig,
    task: &SyntheticTask,
    pool: Option<&TeacherPool>,
) -> Result<(TrainState, Checkpoint, EvalReport)> {
    let backbone = Arc::new(config.backbone_for(task)?);
    let base_train = task.base_train();
    let state = train(config, &base_train, backbone, pool)?;
    for label in &state.seen_labels {
        if !task.base_ids.contains(label) {
            return Err(MopdError::invalid(format!(
                "training touched new-class label {label}"
            )));
        }
    }
    let checkpoint = Checkpoint::from_state(&state, config)?;
    let report = evaluate_base_to_new(&checkpoint, task)?;
    Ok((state, checkpoint, report))
}

/// One row of the few-shot table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub shots: usize,
    pub per_seed: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Few-shot table over the requested shot counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub protocol: String,
    pub rows: Vec<FewShotRow>,
    pub config_hash: String,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / values.len() as f64;
    (mean, var.sqrt())
}

/// Few-shot protocol: train on all classes with `k` shots each, score on the
/// held-out test split over the full label space, averaged over seeds.
pub fn evaluate_few_shot(
    config: &TrainConfig,
    task: &SyntheticTask,
    pool: Option<&TeacherPool>,
    shots: &[usize],
    seeds: &[u64],
) -> Result<FewShotReport> {
    if shots.is_empty() || seeds.is_empty() {
        return Err(MopdError::invalid("need at least one shot count and one seed"));
    }
    let max_shots = *shots.iter().max().unwrap();
    if max_shots > task.spec.shots {
        return Err(MopdError::invalid(format!(
            "task provides {} shots per class but {max_shots} were requested",
            task.spec.shots
        )));
    }
    let all_labels: Vec<usize> = (0..task.num_classes()).collect();
    let mut rows = Vec::with_capacity(shots.len());
    for &k in shots {
        let train_data = task.few_shot_train(k)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.seed = seed;
            let backbone = Arc::new(cfg.backbone_for(task)?);
            let state = train(&cfg, &train_data, backbone, pool)?;
            let mut correct = 0usize;
            for inst in &task.test {
                let pred = state
                    .model
                    .predict_restricted(&inst.features, &all_labels)?;
                if pred == inst.label {
                    correct += 1;
                }
            }
            per_seed.push(correct as f64 / task.test.len() as f64);
        }
        let (mean_accuracy, std_accuracy) = mean_std(&per_seed);
        rows.push(FewShotRow {
            shots: k,
            per_seed,
            mean_accuracy,
            std_accuracy,
        });
    }
    Ok(FewShotReport {
        protocol: "few-shot".into(),
        rows,
        config_hash: jsonio::value_sha256(config)?,
    })
}

/// One robustness run: a pool mixture, a method variant, a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub mixture: String,
    pub variant: String,
    pub seed: u64,
    pub acc_base: f64,
    pub acc_new: f64,
    pub h: f64,
    /// Gate mass on the noisy teachers before training.
    pub noisy_mass_initial: f64,
    /// Gate mass on the noisy teachers after training.
    pub noisy_mass_final: f64,
}

/// Seed-averaged summary per (mixture, variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub mixture: String,
    pub variant: String,
    pub mean_h: f64,
    pub std_h: f64,
    pub mean_noisy_mass_initial: f64,
    pub mean_noisy_mass_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub protocol: String,
    pub rows: Vec<RobustnessRow>,
    pub summary: Vec<RobustnessSummary>,
    pub config_hash: String,
}

fn noisy_mass(weights: &[f64], noisy_indices: &[usize]) -> f64 {
    noisy_indices.iter().map(|&i| weights[i]).sum()
}

/// Robustness protocol: per pool mixture, train the gated method and the
/// random-selection ablation with shared seeds and report base/new/H plus the
/// gate mass sitting on noisy teachers before and after training.
///
/// The mixture list must cover the three regimes: all task-related, mixed,
/// and all noisy.
pub fn evaluate_robustness(
    config: &TrainConfig,
    task: &SyntheticTask,
    mixtures: &[TeacherSpec],
    seeds: &[u64],
) -> Result<RobustnessReport> {
    if seeds.is_empty() {
        return Err(MopdError::invalid("need at least one seed"));
    }
    let has_all_related = mixtures
        .iter()
        .any(|m| m.noisy == 0 && !m.related_sigmas.is_empty());
    let has_mixed = mixtures
        .iter()
        .any(|m| m.noisy > 0 && !m.related_sigmas.is_empty());
    let has_all_noisy = mixtures
        .iter()
        .any(|m| m.noisy > 0 && m.related_sigmas.is_empty());
    if !(has_all_related && has_mixed && has_all_noisy) {
        return Err(MopdError::invalid(
            "mixtures must include an all-related, a mixed, and an all-noisy pool",
        ));
    }

    let mut rows = Vec::new();
    for mixture in mixtures {
        mixture.validate()?;
        let noisy_indices = mixture.noisy_indices();
        for &seed in seeds {
            // Shared pool per (mixture, seed) so both variants see the same
            // teachers.
            let pool_spec = TeacherSpec {
                related_sigmas: mixture.related_sigmas.clone(),
                noisy: mixture.noisy,
                seed: mixture.seed.wrapping_add(seed),
            };
            let pool = generate_teacher_pool(task, &pool_spec)?;
            for variant in [Variant::Mopd, Variant::MopdR] {
                let mut cfg = config.clone();
                cfg.seed = seed;
                cfg.variant = variant;
                cfg.pool_size = pool.size();
                cfg.top_t = config.top_t.min(pool.size());
                let initial_gate = GatingNetwork::seeded(
                    task.dim(),
                    pool.size(),
                    cfg.top_t,
                    cfg.seed,
                )?;
                let base_train = task.base_train();
                let initial_weights = mean_gate_weights(&initial_gate, &base_train)?;
                let (state, _ck, report) = run_base_to_new(&cfg, task, Some(&pool))?;
                let final_weights = state.mean_gate_weights(&base_train)?;
                rows.push(RobustnessRow {
                    mixture: mixture.mixture_label(),
                    variant: variant.name().to_string(),
                    seed,
                    acc_base: report.acc_base,
                    acc_new: report.acc_new,
                    h: report.h,
                    noisy_mass_initial: noisy_mass(&initial_weights, &noisy_indices),
                    noisy_mass_final: noisy_mass(&final_weights, &noisy_indices),
                });
            }
        }
    }

    let mut summary = Vec::new();
    for mixture in mixtures {
        let label = mixture.mixture_label();
        for variant in [Variant::Mopd, Variant::MopdR] {
            let selected: Vec<&RobustnessRow> = rows
                .iter()
                .filter(|r| r.mixture == label && r.variant == variant.name())
                .collect();
            let hs: Vec<f64> = selected.iter().map(|r| r.h).collect();
            let (mean_h, std_h) = mean_std(&hs);
            let (mean_i, _) = mean_std(
                &selected
                    .iter()
                    .map(|r| r.noisy_mass_initial)
                    .collect::<Vec<f64>>(),
            );
            let (mean_f, _) = mean_std(
                &selected
                    .iter()
                    .map(|r| r.noisy_mass_final)
                    .collect::<Vec<f64>>(),
            );
            summary.push(RobustnessSummary {
                mixture: label.clone(),
                variant: variant.name().to_string(),
                mean_h,
                std_h,
                mean_noisy_mass_initial: mean_i,
                mean_noisy_mass_final: mean_f,
            });
        }
    }

    Ok(RobustnessReport {
        protocol: "robustness".into(),
        rows,
        summary,
        config_hash: jsonio::value_sha256(config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_task, TaskSpec};

    fn small_task(seed: u64) -> SyntheticTask {
        generate_task(&TaskSpec {
            classes: 6,
            dim: 8,
            shots: 4,
            test_per_class: 5,
            sigma_x: 0.2,
            base_fraction: 0.5,
            seed,
        })
        .unwrap()
    }

    fn small_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::desk_default(seed);
        c.epochs = 4;
        c.batch_size = 6;
        c.embed_dim = 8;
        c.tau = 0.2;
        c.lr = 0.05;
        c.pool_size = 3;
        c.top_t = 2;
        c
    }

    #[test]
    fn harmonic_mean_paper_rows() {
        let h = harmonic_mean(0.8264, 0.6800).unwrap();
        assert!((h * 100.0 - 74.61).abs() < 0.01);
        let h = harmonic_mean(0.6934, 0.7422).unwrap();
        assert!((h * 100.0 - 71.70).abs() < 0.01);
    }

    #[test]
    fn harmonic_mean_of_equal_args_is_identity() {
        for a in [0.0, 0.25, 0.5, 1.0] {
            assert!((harmonic_mean(a, a).unwrap() - a).abs() < 1e-15);
        }
    }

    #[test]
    fn harmonic_mean_rejects_out_of_range() {
        assert!(harmonic_mean(-0.1, 0.5).is_err());
        assert!(harmonic_mean(0.5, 1.2).is_err());
        assert!(harmonic_mean(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn harmonic_mean_zero_cases() {
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn harmonic_mean_between_min_and_max() {
        let mut r = crate::rng::derive(1, "hm");
        use rand::Rng;
        for _ in 0..200 {
            let a: f64 = r.random_range(0.01..1.0);
            let b: f64 = r.random_range(0.01..1.0);
            let h = harmonic_mean(a, b).unwrap();
            assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
            if (a - b).abs() > 1e-9 {
                assert!(h < a.max(b));
            }
        }
    }

    #[test]
    fn base_to_new_smoke_and_gate_independence() {
        let task = small_task(1);
        let mut config = small_config(2);
        config.variant = Variant::CeOnly;
        let (_state, mut ck, report) = run_base_to_new(&config, &task, None).unwrap();
        assert!(report.acc_base >= 0.0 && report.acc_base <= 1.0);
        assert!((report.h - harmonic_mean(report.acc_base, report.acc_new).unwrap()).abs() < 1e-12);

        // Wrecking the gate must not change a single prediction.
        let student_before = ck.student().unwrap();
        let preds_before: Vec<usize> = task
            .test
            .iter()
            .map(|i| student_before.predict(&i.features).unwrap())
            .collect();
        ck.gate = GatingNetwork::seeded(task.dim(), 5, 1, 999).unwrap();
        let report_after = evaluate_base_to_new(&ck, &task).unwrap();
        let student_after = ck.student().unwrap();
        let preds_after: Vec<usize> = task
            .test
            .iter()
            .map(|i| student_after.predict(&i.features).unwrap())
            .collect();
        assert_eq!(preds_before, preds_after);
        assert_eq!(report.acc_base, report_after.acc_base);
        assert_eq!(report.acc_new, report_after.acc_new);
    }

    #[test]
    fn evaluation_is_replayable() {
        let task = small_task(3);
        let mut config = small_config(4);
        config.variant = Variant::CeOnly;
        let (_s, ck, report) = run_base_to_new(&config, &task, None).unwrap();
        let again = evaluate_base_to_new(&ck, &task).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn label_space_mismatch_is_rejected() {
        let task = small_task(5);
        let mut config = small_config(6);
        config.variant = Variant::CeOnly;
        let (_s, ck, _r) = run_base_to_new(&config, &task, None).unwrap();
        let other = generate_task(&TaskSpec {
            classes: 8,
            dim: 8,
            shots: 2,
            test_per_class: 2,
            sigma_x: 0.2,
            base_fraction: 0.5,
            seed: 7,
        })
        .unwrap();
        assert!(evaluate_base_to_new(&ck, &other).is_err());
    }

    #[test]
    fn few_shot_rejects_insufficient_shots() {
        let task = small_task(8);
        let config = small_config(9);
        assert!(evaluate_few_shot(&config, &task, None, &[16], &[1]).is_err());
    }

    #[test]
    fn few_shot_row_count_matches_request() {
        let task = small_task(10);
        let mut config = small_config(11);
        config.variant = Variant::CeOnly;
        config.epochs = 2;
        let report = evaluate_few_shot(&config, &task, None, &[1, 2, 4], &[1, 2]).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert_eq!(row.per_seed.len(), 2);
        }
    }

    #[test]
    fn robustness_requires_all_three_regimes() {
        let task = small_task(12);
        let config = small_config(13);
        let only_mixed = vec![TeacherSpec::mixture(2, 2, 0)];
        assert!(evaluate_robustness(&config, &task, &only_mixed, &[1]).is_err());
    }
}
