//! Seeded synthetic classification tasks in embedding space.
//!
//! A task is a set of unit prototype vectors, one per class, with train/test
//! instances drawn as normalized noisy copies. Teacher pools are built from
//! the same prototypes with controllable angular noise ("task-related") or as
//! independent random tables ("noisy"), so pool quality is a dial. Everything
//! is a pure function of its seed.

use serde::{Deserialize, Serialize};

use crate::backbone::TeacherPool;
use crate::error::{MopdError, Result};
use crate::numerics::{dot, norm, Matrix, Vector};
use crate::rng;

/// Maximum pairwise cosine allowed between class prototypes.
pub const PROTOTYPE_COS_LIMIT: f64 = 0.95;

/// Rejection-sampling budget for prototype draws.
const MAX_PROTOTYPE_DRAWS: usize = 10_000;

/// Quality ladder cycled over task-related teachers when no explicit sigmas
/// are given: a mixed pool, none perfect, none useless. Teacher 0 sits in
/// the middle of the ladder, a reasonable single pick but not the best one.
pub const DEFAULT_SIGMA_LADDER: [f64; 6] = [0.3, 0.1, 0.4, 0.2, 0.5, 0.6];

fn default_test_per_class() -> usize {
    20
}
fn default_sigma_x() -> f64 {
    0.3
}
fn default_base_fraction() -> f64 {
    0.5
}
fn default_shots() -> usize {
    16
}
fn default_classes() -> usize {
    20
}
fn default_dim() -> usize {
    32
}

/// Generator parameters for one synthetic task. `seed` is mandatory; every
/// other field has a desk-scale default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_sigma_x")]
    pub sigma_x: f64,
    #[serde(default = "default_base_fraction")]
    pub base_fraction: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn desk_default(seed: u64) -> Self {
        TaskSpec {
            classes: default_classes(),
            dim: default_dim(),
            shots: default_shots(),
            test_per_class: default_test_per_class(),
            sigma_x: default_sigma_x(),
            base_fraction: default_base_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 4 {
            return Err(MopdError::invalid(
                "need at least 4 classes for a base/new split",
            ));
        }
        if self.dim < 2 {
            return Err(MopdError::invalid("dimension must be at least 2"));
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return Err(MopdError::invalid("shots and test_per_class must be >= 1"));
        }
        if !self.sigma_x.is_finite() || self.sigma_x < 0.0 {
            return Err(MopdError::invalid(format!(
                "sigma_x must be finite and non-negative: {}",
                self.sigma_x
            )));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(MopdError::invalid(format!(
                "base_fraction must lie strictly between 0 and 1: {}",
                self.base_fraction
            )));
        }
        Ok(())
    }
}

/// One labeled instance: a unit visual embedding plus its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    pub features: Vector,
    pub label: usize,
}

/// A generated task: prototypes, instance splits, and the base/new label
/// partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// Domain-shift magnitude applied to the test split (0 = source task).
    #[serde(default)]
    pub domain_shift: f64,
    pub prototypes: Vec<Vector>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub base_ids: Vec<usize>,
    pub new_ids: Vec<usize>,
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.spec.classes
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn is_base(&self, label: usize) -> bool {
        self.base_ids.contains(&label)
    }

    /// Training instances restricted to base classes (the base-to-new
    /// protocol never trains on new-class data).
    pub fn base_train(&self) -> Vec<Instance> {
        self.train
            .iter()
            .filter(|i| self.is_base(i.label))
            .cloned()
            .collect()
    }

    /// First `k` training instances of every class, in generation order.
    pub fn few_shot_train(&self, k: usize) -> Result<Vec<Instance>> {
        if k == 0 || k > self.spec.shots {
            return Err(MopdError::invalid(format!(
                "requested {k} shots but the task holds {} per class",
                self.spec.shots
            )));
        }
        let mut taken = vec![0usize; self.spec.classes];
        let mut out = Vec::with_capacity(k * self.spec.classes);
        for inst in &self.train {
            if taken[inst.label] < k {
                taken[inst.label] += 1;
                out.push(inst.clone());
            }
        }
        Ok(out)
    }

    pub fn test_base(&self) -> Vec<&Instance> {
        self.test.iter().filter(|i| self.is_base(i.label)).collect()
    }

    pub fn test_new(&self) -> Vec<&Instance> {
        self.test
            .iter()
            .filter(|i| !self.is_base(i.label))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let c = self.spec.classes;
        let mut covered = vec![false; c];
        for &b in &self.base_ids {
            covered[b] = true;
        }
        for &n in &self.new_ids {
            if covered[n] {
                return Err(MopdError::invalid(format!(
                    "label {n} appears in both base and new splits"
                )));
            }
            covered[n] = true;
        }
        if covered.iter().any(|&x| !x) {
            return Err(MopdError::invalid("base/new split does not cover all labels"));
        }
        for inst in self.train.iter().chain(self.test.iter()) {
            if inst.label >= c {
                return Err(MopdError::invalid(format!("label {} out of range", inst.label)));
            }
            if (inst.features.norm() - 1.0).abs() > 1e-9 {
                return Err(MopdError::invalid(format!(
                    "instance {} is not unit-norm",
                    inst.id
                )));
            }
        }
        Ok(())
    }
}

fn unit_gaussian(r: &mut rand_chacha::ChaCha8Rng, dim: usize) -> Result<Vector> {
    Vector::new(rng::gaussian_vec(r, dim, 1.0))?.normalized()
}

fn noisy_prototype(
    proto: &Vector,
    sigma: f64,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vector> {
    let mut v = proto.clone();
    if sigma > 0.0 {
        let noise = Vector::new(rng::gaussian_vec(r, proto.len(), sigma))?;
        v.add_scaled(&noise, 1.0);
    }
    v.normalized()
}

/// Generate a task from its spec. Deterministic per seed; prototypes are
/// rejection-sampled until pairwise cosine stays below
/// [`PROTOTYPE_COS_LIMIT`].
pub fn generate_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut proto_rng = rng::derive(spec.seed, "prototypes");
    let mut prototypes: Vec<Vector> = Vec::with_capacity(spec.classes);
    let mut draws = 0;
    while prototypes.len() < spec.classes {
        if draws >= MAX_PROTOTYPE_DRAWS {
            return Err(MopdError::GenerationFailed(format!(
                "could not place {} prototypes with pairwise cosine < {} in dimension {}",
                spec.classes, PROTOTYPE_COS_LIMIT, spec.dim
            )));
        }
        draws += 1;
        let candidate = unit_gaussian(&mut proto_rng, spec.dim)?;
        let ok = prototypes
            .iter()
            .all(|p| dot(p.as_slice(), candidate.as_slice()) < PROTOTYPE_COS_LIMIT);
        if ok {
            prototypes.push(candidate);
        }
    }

    let mut train_rng = rng::derive(spec.seed, "train-instances");
    let mut train = Vec::with_capacity(spec.classes * spec.shots);
    let mut next_id = 0;
    for label in 0..spec.classes {
        for _ in 0..spec.shots {
            let f = noisy_prototype(&prototypes[label], spec.sigma_x, &mut train_rng)?;
            train.push(Instance {
                id: next_id,
                features: f,
                label,
            });
            next_id += 1;
        }
    }

    let mut test_rng = rng::derive(spec.seed, "test-instances");
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    for label in 0..spec.classes {
        for _ in 0..spec.test_per_class {
            let f = noisy_prototype(&prototypes[label], spec.sigma_x, &mut test_rng)?;
            test.push(Instance {
                id: next_id,
                features: f,
                label,
            });
            next_id += 1;
        }
    }

    let n_base = ((spec.classes as f64) * spec.base_fraction).round() as usize;
    let n_base = n_base.clamp(1, spec.classes - 1);
    let base_ids: Vec<usize> = (0..n_base).collect();
    let new_ids: Vec<usize> = (n_base..spec.classes).collect();

    let task = SyntheticTask {
        spec: spec.clone(),
        domain_shift: 0.0,
        prototypes,
        train,
        test,
        base_ids,
        new_ids,
    };
    task.validate()?;
    Ok(task)
}

/// Composition of a teacher pool: angular-noise levels for the task-related
/// teachers and a count of noisy (prototype-independent) ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub related_sigmas: Vec<f64>,
    #[serde(default)]
    pub noisy: usize,
    pub seed: u64,
}

impl TeacherSpec {
    /// `related` teachers with sigmas cycled from the default ladder plus
    /// `noisy` random tables.
    pub fn mixture(related: usize, noisy: usize, seed: u64) -> Self {
        let related_sigmas = (0..related)
            .map(|i| DEFAULT_SIGMA_LADDER[i % DEFAULT_SIGMA_LADDER.len()])
            .collect();
        TeacherSpec {
            related_sigmas,
            noisy,
            seed,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.related_sigmas.len() + self.noisy
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size() == 0 {
            return Err(MopdError::invalid("teacher pool must not be empty"));
        }
        if self
            .related_sigmas
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(MopdError::invalid("teacher sigmas must be non-negative"));
        }
        Ok(())
    }

    /// Pool naming scheme used in robustness reports: "12T", "12N",
    /// "12T+12N".
    pub fn mixture_label(&self) -> String {
        let t = self.related_sigmas.len();
        let n = self.noisy;
        match (t, n) {
            (0, n) => format!("{n}N"),
            (t, 0) => format!("{t}T"),
            (t, n) => format!("{t}T+{n}N"),
        }
    }

    /// Indices of the noisy teachers inside the generated pool (related
    /// teachers come first).
    pub fn noisy_indices(&self) -> Vec<usize> {
        (self.related_sigmas.len()..self.pool_size()).collect()
    }
}

/// Parse a mixture label like "12T", "8N" or "12T+12N" into a spec.
pub fn parse_mixture(label: &str, seed: u64) -> Result<TeacherSpec> {
    let mut related = 0usize;
    let mut noisy = 0usize;
    for part in label.split('+') {
        let part = part.trim();
        let (count, kind) = part.split_at(part.len().saturating_sub(1));
        let count: usize = count
            .parse()
            .map_err(|_| MopdError::invalid(format!("bad mixture component '{part}'")))?;
        match kind {
            "T" | "t" => related += count,
            "N" | "n" => noisy += count,
            _ => {
                return Err(MopdError::invalid(format!(
                    "mixture component '{part}' must end in T or N"
                )))
            }
        }
    }
    let spec = TeacherSpec::mixture(related, noisy, seed);
    spec.validate()?;
    Ok(spec)
}

/// Build a frozen teacher pool for a task. Task-related teachers cover ALL
/// classes (base and new) so distillation can carry new-class structure the
/// way zero-shot hard prompts do.
pub fn generate_teacher_pool(task: &SyntheticTask, spec: &TeacherSpec) -> Result<TeacherPool> {
    spec.validate()?;
    let c = task.num_classes();
    let d = task.dim();
    let mut tables = Vec::with_capacity(spec.pool_size());
    let mut labels = Vec::with_capacity(spec.pool_size());

    let mut related_rng = rng::derive(spec.seed, "teachers-related");
    for (t, &sigma) in spec.related_sigmas.iter().enumerate() {
        let mut rows = Vec::with_capacity(c);
        for proto in &task.prototypes {
            rows.push(
                noisy_prototype(proto, sigma, &mut related_rng)?
                    .as_slice()
                    .to_vec(),
            );
        }
        tables.push(Matrix::from_rows(rows)?);
        labels.push(format!("T{t}(sigma={sigma})"));
    }

    let mut noisy_rng = rng::derive(spec.seed, "teachers-noisy");
    for t in 0..spec.noisy {
        let mut rows = Vec::with_capacity(c);
        for _ in 0..c {
            rows.push(unit_gaussian(&mut noisy_rng, d)?.as_slice().to_vec());
        }
        tables.push(Matrix::from_rows(rows)?);
        labels.push(format!("N{t}"));
    }

    TeacherPool::new(tables, labels)
}

/// Regenerate the test split under a rotated, noisier distribution. The
/// rotation plane depends only on the task seed, so shift magnitudes nest;
/// `shift = 0` returns the task unchanged.
pub fn apply_domain_shift(task: &SyntheticTask, shift: f64) -> Result<SyntheticTask> {
    if !(shift >= 0.0) || !shift.is_finite() {
        return Err(MopdError::invalid(format!(
            "shift must be non-negative: {shift}"
        )));
    }
    if shift == 0.0 {
        return Ok(task.clone());
    }
    let d = task.dim();
    let mut plane_rng = rng::derive(task.spec.seed, "domain-shift-plane");
    let u = unit_gaussian(&mut plane_rng, d)?;
    // Orthonormalize the second direction against the first.
    let mut v = rng::gaussian_vec(&mut plane_rng, d, 1.0);
    let overlap = dot(&v, u.as_slice());
    for (x, uu) in v.iter_mut().zip(u.as_slice()) {
        *x -= overlap * uu;
    }
    let v = Vector::new(v)?.normalized()?;

    let theta = shift;
    let rotate = |x: &Vector| -> Result<Vector> {
        let xu = dot(x.as_slice(), u.as_slice());
        let xv = dot(x.as_slice(), v.as_slice());
        let mut out = x.clone();
        out.add_scaled(&u, (theta.cos() - 1.0) * xu + theta.sin() * -xv);
        out.add_scaled(&v, (theta.cos() - 1.0) * xv + theta.sin() * xu);
        out.normalized()
    };

    let shifted_prototypes: Vec<Vector> = task
        .prototypes
        .iter()
        .map(|p| rotate(p))
        .collect::<Result<_>>()?;

    let sigma_shifted = task.spec.sigma_x * (1.0 + shift);
    let mut test_rng = rng::derive(task.spec.seed, "domain-shift-test");
    let test: Vec<Instance> = task
        .test
        .iter()
        .map(|inst| {
            Ok(Instance {
                id: inst.id,
                features: noisy_prototype(
                    &shifted_prototypes[inst.label],
                    sigma_shifted,
                    &mut test_rng,
                )?,
                label: inst.label,
            })
        })
        .collect::<Result<_>>()?;

    Ok(SyntheticTask {
        spec: task.spec.clone(),
        domain_shift: shift,
        prototypes: task.prototypes.clone(),
        train: task.train.clone(),
        test,
        base_ids: task.base_ids.clone(),
        new_ids: task.new_ids.clone(),
    })
}

/// Accuracy of a frozen table used directly as a classifier (argmax cosine)
/// on a set of instances.
pub fn table_accuracy(table: &Matrix, instances: &[&Instance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for inst in instances {
        let f = inst.features.as_slice();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..table.rows() {
            let row = table.row(c);
            let score = dot(row, f) / norm(row);
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        if best == inst.label {
            correct += 1;
        }
    }
    correct as f64 / instances.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> TaskSpec {
        TaskSpec {
            classes: 6,
            dim: 16,
            shots: 4,
            test_per_class: 10,
            sigma_x: 0.3,
            base_fraction: 0.5,
            seed,
        }
    }

    #[test]
    fn zero_noise_instances_equal_prototypes() {
        let mut spec = small_spec(1);
        spec.sigma_x = 0.0;
        let task = generate_task(&spec).unwrap();
        for inst in &task.train {
            for (a, b) in inst
                .features
                .as_slice()
                .iter()
                .zip(task.prototypes[inst.label].as_slice())
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(42);
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_balance_is_exact() {
        let spec = small_spec(7);
        let task = generate_task(&spec).unwrap();
        for label in 0..spec.classes {
            let n = task.train.iter().filter(|i| i.label == label).count();
            assert_eq!(n, spec.shots);
        }
    }

    #[test]
    fn train_and_test_ids_are_disjoint() {
        let task = generate_task(&small_spec(3)).unwrap();
        let train_ids: std::collections::BTreeSet<usize> =
            task.train.iter().map(|i| i.id).collect();
        let test_ids: std::collections::BTreeSet<usize> =
            task.test.iter().map(|i| i.id).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        assert_eq!(train_ids.len(), task.train.len());
        assert_eq!(test_ids.len(), task.test.len());
    }

    #[test]
    fn rejection_fails_in_tiny_dimension() {
        let spec = TaskSpec {
            classes: 50,
            dim: 2,
            shots: 1,
            test_per_class: 1,
            sigma_x: 0.1,
            base_fraction: 0.5,
            seed: 1,
        };
        assert!(matches!(
            generate_task(&spec),
            Err(MopdError::GenerationFailed(_))
        ));
    }

    #[test]
    fn noiseless_teacher_is_perfect_on_noiseless_data() {
        let mut spec = small_spec(5);
        spec.sigma_x = 0.0;
        let task = generate_task(&spec).unwrap();
        let pool = generate_teacher_pool(
            &task,
            &TeacherSpec {
                related_sigmas: vec![0.0],
                noisy: 0,
                seed: 5,
            },
        )
        .unwrap();
        let test: Vec<&Instance> = task.test.iter().collect();
        assert_eq!(table_accuracy(pool.table(0), &test), 1.0);
    }

    #[test]
    fn default_mixture_has_paper_pool_size() {
        let spec = TeacherSpec::mixture(12, 0, 9);
        assert_eq!(spec.pool_size(), 12);
        assert_eq!(spec.mixture_label(), "12T");
        let task = generate_task(&small_spec(9)).unwrap();
        let pool = generate_teacher_pool(&task, &spec).unwrap();
        assert_eq!(pool.size(), 12);
    }

    #[test]
    fn mixture_labels_match_naming_scheme() {
        assert_eq!(TeacherSpec::mixture(12, 12, 0).mixture_label(), "12T+12N");
        assert_eq!(TeacherSpec::mixture(0, 24, 0).mixture_label(), "24N");
        assert_eq!(parse_mixture("12T+12N", 0).unwrap().pool_size(), 24);
        assert_eq!(parse_mixture("24N", 0).unwrap().noisy, 24);
        assert!(parse_mixture("12X", 0).is_err());
    }

    #[test]
    fn domain_shift_zero_is_identity() {
        let task = generate_task(&small_spec(11)).unwrap();
        let shifted = apply_domain_shift(&task, 0.0).unwrap();
        assert_eq!(task, shifted);
    }

    #[test]
    fn domain_shift_preserves_norms_and_labels() {
        let task = generate_task(&small_spec(13)).unwrap();
        let shifted = apply_domain_shift(&task, 0.35).unwrap();
        assert_eq!(shifted.domain_shift, 0.35);
        for (orig, moved) in task.test.iter().zip(shifted.test.iter()) {
            assert_eq!(orig.label, moved.label);
            assert_eq!(orig.id, moved.id);
            assert!((moved.features.norm() - 1.0).abs() < 1e-9);
        }
        assert_eq!(task.train, shifted.train);
    }
}
