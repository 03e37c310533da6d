//! Command-line surface: task generation, training, evaluation protocols,
//! hyperparameter sweeps, and the ablation battery.
//!
//! Every command resolves its inputs to hashes, derives a deterministic run
//! id from them, writes artifacts under `<out>/`, and finishes with a
//! manifest tying outputs back to the exact inputs. Exit codes: 0 success,
//! 1 usage or configuration error, 2 numerical abort.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::TeacherPool;
use crate::error::{MopdError, Result};
use crate::eval::{
    evaluate_base_to_new, evaluate_domain_shift, evaluate_few_shot, evaluate_robustness,
    mean_std, run_base_to_new, EvalReport,
};
use crate::jsonio;
use crate::run::{default_out_root, prepare_dir, run_id, FileRef, RunManifest};
use crate::synthdata::{
    generate_task, generate_teacher_pool, parse_mixture, SyntheticTask, TaskSpec, TeacherSpec,
};
use crate::trainer::{Checkpoint, TrainConfig, Variant};

/// Teacher-pool artifact: the spec that produced it, the hash of the task
/// file it belongs to, and the frozen tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherFile {
    pub spec: TeacherSpec,
    pub task_hash: String,
    pub pool: TeacherPool,
}

/// Input to `gen-data`: a task spec plus an optional teacher-pool spec
/// (defaults to the 12-teacher mixed-quality pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub task: TaskSpec,
    #[serde(default)]
    pub teachers: Option<TeacherSpec>,
}

#[derive(Parser, Debug)]
#[command(
    name = "mopd",
    about = "Soft-prompt distillation lab: gated teacher mixtures on synthetic tasks",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic task and teacher pool.
    GenData(GenDataArgs),
    /// Train a soft prompt on a task.
    Train(TrainArgs),
    /// Evaluate a checkpoint or run an evaluation protocol.
    Eval(EvalArgs),
    /// Sweep one hyperparameter axis, training per value per seed.
    Sweep(SweepArgs),
    /// Run the full method-variant battery on one task.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Spec file (JSON with a `task` object and optional `teachers`).
    /// Defaults to the desk-scale task with a 12-teacher mixed pool.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Seed override (required when no spec file is given).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train config JSON; defaults resolve per field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: PathBuf,
    /// Teacher pool file; required for every variant except ce_only.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Which training split to use: the base classes (default) or all.
    #[arg(long, value_enum, default_value_t = TrainSplit::Base)]
    pub split: TrainSplit,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainSplit {
    Base,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    #[value(name = "base-to-new")]
    BaseToNew,
    #[value(name = "few-shot")]
    FewShot,
    #[value(name = "domain-shift")]
    DomainShift,
    Robustness,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::BaseToNew)]
    pub protocol: Protocol,
    /// Trained checkpoint (base-to-new and domain-shift protocols).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Train config (few-shot and robustness protocols train internally).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher pool for protocols that train internally.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Shot counts for the few-shot protocol.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    pub shots: Vec<usize>,
    /// Pool mixtures for the robustness protocol, e.g. 12T,12T+12N,12N.
    #[arg(long, value_delimiter = ',')]
    pub mixtures: Vec<String>,
    /// Rotation magnitude for the domain-shift protocol.
    #[arg(long, default_value_t = 0.2)]
    pub shift: f64,
    /// Replication count; seeds are config.seed, config.seed+1, ...
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Beta,
    #[value(name = "T")]
    T,
    #[value(name = "H_pool")]
    HPool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn out_dir(explicit: Option<PathBuf>, kind: &str, id: &str) -> PathBuf {
    explicit.unwrap_or_else(|| default_out_root().join(format!("{kind}-{id}")))
}

fn load_config(path: &Option<PathBuf>, seed_override: Option<u64>) -> Result<TrainConfig> {
    let mut config: TrainConfig = match path {
        Some(p) => jsonio::read_json(p)?,
        None => TrainConfig::desk_default(seed_override.unwrap_or(0)),
    };
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_task(path: &Path) -> Result<(SyntheticTask, String)> {
    let task: SyntheticTask = jsonio::read_json(path)?;
    task.validate()?;
    Ok((task, jsonio::file_sha256(path)?))
}

fn load_pool(path: &Path, task_hash: &str) -> Result<(TeacherFile, String)> {
    let file: TeacherFile = jsonio::read_json(path)?;
    if file.task_hash != task_hash {
        return Err(MopdError::HashMismatch(format!(
            "teacher pool {} was generated for a different task file",
            path.display()
        )));
    }
    Ok((file, jsonio::file_sha256(path)?))
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec: GenSpec = match &args.spec {
        Some(path) => jsonio::read_json(path)?,
        None => {
            let seed = args.seed.ok_or_else(|| {
                MopdError::invalid("either --spec or --seed is required for gen-data")
            })?;
            GenSpec {
                task: TaskSpec::desk_default(seed),
                teachers: None,
            }
        }
    };
    if let Some(seed) = args.seed {
        spec.task.seed = seed;
        if let Some(t) = spec.teachers.as_mut() {
            t.seed = seed;
        }
    }
    let teacher_spec = spec
        .teachers
        .clone()
        .unwrap_or_else(|| TeacherSpec::mixture(12, 0, spec.task.seed));
    teacher_spec.validate()?;

    let resolved = serde_json::json!({
        "task": spec.task,
        "teachers": teacher_spec,
    });
    let id = run_id("gen-data", &resolved, &[])?;
    let dir = out_dir(args.out, "gen", &id);
    prepare_dir(&dir, args.force)?;

    let task = generate_task(&spec.task)?;
    let task_path = dir.join("task.json");
    jsonio::write_json(&task_path, &task)?;
    let task_hash = jsonio::file_sha256(&task_path)?;

    let pool = generate_teacher_pool(&task, &teacher_spec)?;
    let teacher_file = TeacherFile {
        spec: teacher_spec.clone(),
        task_hash,
        pool,
    };
    let pool_path = dir.join("teachers.json");
    jsonio::write_json(&pool_path, &teacher_file)?;

    RunManifest {
        run_id: id.clone(),
        command: "gen-data".into(),
        resolved_config: resolved,
        inputs: args
            .spec
            .as_deref()
            .map(FileRef::capture)
            .transpose()?
            .into_iter()
            .collect(),
        outputs: vec![FileRef::capture(&task_path)?, FileRef::capture(&pool_path)?],
        duration_ms: started.elapsed().as_millis(),
    }
    .save(&dir)?;

    println!(
        "generated task: C={} d={} shots={} base={} new={}; pool: H={} ({})",
        task.num_classes(),
        task.dim(),
        task.spec.shots,
        task.base_ids.len(),
        task.new_ids.len(),
        teacher_file.pool.size(),
        teacher_spec.mixture_label()
    );
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let config = load_config(&args.config, args.seed)?;
    let (task, task_hash) = load_task(&args.task)?;

    let mut inputs = vec![FileRef::capture(&args.task)?];
    if let Some(cfg) = &args.config {
        inputs.push(FileRef::capture(cfg)?);
    }
    let pool_file = match &args.pool {
        Some(path) => {
            let (file, _hash) = load_pool(path, &task_hash)?;
            inputs.push(FileRef::capture(path)?);
            Some(file)
        }
        None => None,
    };
    if config.variant.uses_pool() && pool_file.is_none() {
        return Err(MopdError::invalid(format!(
            "variant {} requires --pool",
            config.variant.name()
        )));
    }

    let resolved = serde_json::to_value(&config)?;
    let input_hashes: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
    let id = run_id("train", &resolved, &input_hashes)?;
    let dir = out_dir(args.out, "train", &id);
    prepare_dir(&dir, args.force)?;

    let pool_ref = pool_file.as_ref().map(|f| &f.pool);
    let (state, mut checkpoint, _report) = match args.split {
        TrainSplit::Base => run_base_to_new(&config, &task, pool_ref)?,
        TrainSplit::All => {
            let backbone = std::sync::Arc::new(config.backbone_for(&task)?);
            let state = crate::trainer::train(&config, &task.train, backbone, pool_ref)?;
            let ck = Checkpoint::from_state(&state, &config)?;
            let report = evaluate_base_to_new(&ck, &task)?;
            (state, ck, report)
        }
    };
    checkpoint.task_hash = Some(task_hash);
    checkpoint.pool_hash = args.pool.as_deref().map(jsonio::file_sha256).transpose()?;

    let config_path = dir.join("config.json");
    jsonio::write_json(&config_path, &config)?;
    let checkpoint_path = dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;
    let log_path = dir.join("train_log.csv");
    crate::run::write_train_log(&log_path, &state.history)?;

    RunManifest {
        run_id: id.clone(),
        command: "train".into(),
        resolved_config: resolved,
        inputs,
        outputs: vec![
            FileRef::capture(&config_path)?,
            FileRef::capture(&checkpoint_path)?,
            FileRef::capture(&log_path)?,
        ],
        duration_ms: started.elapsed().as_millis(),
    }
    .save(&dir)?;

    match state.history.last() {
        Some(last) => println!(
            "trained {} for {} steps; final total loss {:.6}",
            config.variant.name(),
            state.step,
            last.breakdown.total
        ),
        None => println!("trained {} for 0 steps (zero-shot checkpoint)", config.variant.name()),
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_report_line(report: &EvalReport) {
    println!(
        "{}: base={} new={} H={}",
        report.protocol,
        pct(report.acc_base),
        pct(report.acc_new),
        pct(report.h)
    );
}

fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["protocol", "acc_base", "acc_new", "h"])?;
    w.write_record([
        report.protocol.as_str(),
        &format!("{:.17e}", report.acc_base),
        &format!("{:.17e}", report.acc_new),
        &format!("{:.17e}", report.h),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (task, task_hash) = load_task(&args.task)?;
    let mut inputs = vec![FileRef::capture(&args.task)?];

    match args.protocol {
        Protocol::BaseToNew | Protocol::DomainShift => {
            let ck_path = args.checkpoint.as_ref().ok_or_else(|| {
                MopdError::invalid("this protocol requires --checkpoint")
            })?;
            inputs.push(FileRef::capture(ck_path)?);
            let checkpoint = Checkpoint::load(ck_path)?;
            if let Some(expected) = &checkpoint.task_hash {
                if *expected != task_hash {
                    return Err(MopdError::HashMismatch(
                        "checkpoint was trained on a different task file".into(),
                    ));
                }
            }
            let report = match args.protocol {
                Protocol::BaseToNew => evaluate_base_to_new(&checkpoint, &task)?,
                _ => evaluate_domain_shift(&checkpoint, &task, args.shift)?,
            };
            let resolved = serde_json::json!({
                "protocol": report.protocol,
                "config_hash": report.config_hash,
                "shift": args.shift,
            });
            let input_hashes: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
            let id = run_id("eval", &resolved, &input_hashes)?;
            let dir = out_dir(args.out, "eval", &id);
            prepare_dir(&dir, args.force)?;
            let report_path = dir.join("report.json");
            jsonio::write_json(&report_path, &report)?;
            let csv_path = dir.join("report.csv");
            write_report_csv(&csv_path, &report)?;
            RunManifest {
                run_id: id,
                command: "eval".into(),
                resolved_config: resolved,
                inputs,
                outputs: vec![FileRef::capture(&report_path)?, FileRef::capture(&csv_path)?],
                duration_ms: started.elapsed().as_millis(),
            }
            .save(&dir)?;
            print_report_line(&report);
            println!("wrote {}", dir.display());
        }
        Protocol::FewShot => {
            let config = load_config(&args.config, args.seed)?;
            if let Some(cfg) = &args.config {
                inputs.push(FileRef::capture(cfg)?);
            }
            let pool_file = match &args.pool {
                Some(path) => {
                    let (file, _) = load_pool(path, &task_hash)?;
                    inputs.push(FileRef::capture(path)?);
                    Some(file)
                }
                None => None,
            };
            if config.variant.uses_pool() && pool_file.is_none() {
                return Err(MopdError::invalid(format!(
                    "variant {} requires --pool",
                    config.variant.name()
                )));
            }
            let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| config.seed + i).collect();
            let report = evaluate_few_shot(
                &config,
                &task,
                pool_file.as_ref().map(|f| &f.pool),
                &args.shots,
                &seeds,
            )?;
            let resolved = serde_json::to_value(&config)?;
            let input_hashes: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
            let id = run_id("eval-few-shot", &resolved, &input_hashes)?;
            let dir = out_dir(args.out, "eval", &id);
            prepare_dir(&dir, args.force)?;
            let report_path = dir.join("report.json");
            jsonio::write_json(&report_path, &report)?;
            // Plot data: x = shots, y = accuracy.
            let csv_path = dir.join("few_shot.csv");
            let mut w = csv::Writer::from_path(&csv_path)?;
            w.write_record(["shots", "mean_accuracy", "std_accuracy"])?;
            for row in &report.rows {
                w.write_record([
                    row.shots.to_string(),
                    format!("{:.17e}", row.mean_accuracy),
                    format!("{:.17e}", row.std_accuracy),
                ])?;
                println!(
                    "shots={:<3} accuracy={} +/- {}",
                    row.shots,
                    pct(row.mean_accuracy),
                    pct(row.std_accuracy)
                );
            }
            w.flush()?;
            RunManifest {
                run_id: id,
                command: "eval".into(),
                resolved_config: resolved,
                inputs,
                outputs: vec![FileRef::capture(&report_path)?, FileRef::capture(&csv_path)?],
                duration_ms: started.elapsed().as_millis(),
            }
            .save(&dir)?;
            println!("wrote {}", dir.display());
        }
        Protocol::Robustness => {
            let config = load_config(&args.config, args.seed)?;
            if let Some(cfg) = &args.config {
                inputs.push(FileRef::capture(cfg)?);
            }
            if args.mixtures.is_empty() {
                return Err(MopdError::invalid(
                    "robustness requires --mixtures, e.g. 12T,12T+12N,12N",
                ));
            }
            let mixtures: Vec<TeacherSpec> = args
                .mixtures
                .iter()
                .map(|m| parse_mixture(m, config.seed))
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| config.seed + i).collect();
            let report = evaluate_robustness(&config, &task, &mixtures, &seeds)?;
            let resolved = serde_json::to_value(&config)?;
            let input_hashes: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
            let id = run_id("eval-robustness", &resolved, &input_hashes)?;
            let dir = out_dir(args.out, "eval", &id);
            prepare_dir(&dir, args.force)?;
            let report_path = dir.join("report.json");
            jsonio::write_json(&report_path, &report)?;
            let csv_path = dir.join("robustness.csv");
            let mut w = csv::Writer::from_path(&csv_path)?;
            w.write_record([
                "mixture",
                "variant",
                "mean_h",
                "std_h",
                "noisy_mass_initial",
                "noisy_mass_final",
            ])?;
            for s in &report.summary {
                w.write_record([
                    s.mixture.as_str(),
                    s.variant.as_str(),
                    &format!("{:.17e}", s.mean_h),
                    &format!("{:.17e}", s.std_h),
                    &format!("{:.17e}", s.mean_noisy_mass_initial),
                    &format!("{:.17e}", s.mean_noisy_mass_final),
                ])?;
                println!(
                    "{:<10} {:<8} H={} noisy mass {} -> {}",
                    s.mixture,
                    s.variant,
                    pct(s.mean_h),
                    pct(s.mean_noisy_mass_initial),
                    pct(s.mean_noisy_mass_final)
                );
            }
            w.flush()?;
            RunManifest {
                run_id: id,
                command: "eval".into(),
                resolved_config: resolved,
                inputs,
                outputs: vec![FileRef::capture(&report_path)?, FileRef::capture(&csv_path)?],
                duration_ms: started.elapsed().as_millis(),
            }
            .save(&dir)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

/// Outcome of one (value, seed) sweep cell.
#[derive(Debug, Clone, Serialize)]
struct SweepRunRow {
    value: f64,
    seed: u64,
    status: String,
    acc_base: f64,
    acc_new: f64,
    h: f64,
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let started = Instant::now();
    let base_config = load_config(&args.config, args.seed)?;
    let (task, task_hash) = load_task(&args.task)?;
    let mut inputs = vec![FileRef::capture(&args.task)?];
    if let Some(cfg) = &args.config {
        inputs.push(FileRef::capture(cfg)?);
    }
    let pool_file = match &args.pool {
        Some(path) => {
            let (file, _) = load_pool(path, &task_hash)?;
            inputs.push(FileRef::capture(path)?);
            Some(file)
        }
        None => None,
    };

    // Validate values up front: a bad axis value is a usage error, not a
    // failed row.
    for &v in &args.values {
        match args.axis {
            SweepAxis::Alpha => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MopdError::invalid(format!("alpha value {v} out of [0,1]")));
                }
            }
            SweepAxis::Beta => {
                if v < 0.0 {
                    return Err(MopdError::invalid(format!("beta value {v} must be >= 0")));
                }
            }
            SweepAxis::T => {
                let h = pool_file
                    .as_ref()
                    .map_or(base_config.pool_size, |f| f.pool.size());
                if v.fract() != 0.0 || v < 1.0 || v as usize > h {
                    return Err(MopdError::invalid(format!(
                        "T value {v} out of 1..={h}"
                    )));
                }
            }
            SweepAxis::HPool => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(MopdError::invalid(format!("H value {v} must be a positive integer")));
                }
                if args.pool.is_some() {
                    return Err(MopdError::invalid(
                        "H_pool sweeps regenerate the pool per value; drop --pool",
                    ));
                }
            }
        }
    }
    if pool_file.is_none() && base_config.variant.uses_pool() && args.axis != SweepAxis::HPool {
        return Err(MopdError::invalid(format!(
            "variant {} requires --pool",
            base_config.variant.name()
        )));
    }

    let resolved = serde_json::json!({
        "axis": format!("{:?}", args.axis),
        "values": args.values,
        "seeds": args.seeds,
        "config": base_config,
    });
    let input_hashes: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
    let id = run_id("sweep", &resolved, &input_hashes)?;
    let dir = out_dir(args.out, "sweep", &id);
    prepare_dir(&dir, args.force)?;

    let seeds: Vec<u64> = (0..args.seeds as u64)
        .map(|i| base_config.seed + i)
        .collect();
    let mut runs: Vec<SweepRunRow> = Vec::new();
    for &value in &args.values {
        for &seed in &seeds {
            let mut config = base_config.clone();
            config.seed = seed;
            let pool_storage;
            let pool_ref: Option<&TeacherPool> = match args.axis {
                SweepAxis::Alpha => {
                    config.alpha = value;
                    pool_file.as_ref().map(|f| &f.pool)
                }
                SweepAxis::Beta => {
                    config.beta = value;
                    pool_file.as_ref().map(|f| &f.pool)
                }
                SweepAxis::T => {
                    config.top_t = value as usize;
                    pool_file.as_ref().map(|f| &f.pool)
                }
                SweepAxis::HPool => {
                    let h = value as usize;
                    config.pool_size = h;
                    config.top_t = config.top_t.min(h);
                    let spec = TeacherSpec::mixture(h, 0, base_config.seed.wrapping_add(seed));
                    pool_storage = generate_teacher_pool(&task, &spec)?;
                    Some(&pool_storage)
                }
            };
            match run_base_to_new(&config, &task, pool_ref) {
                Ok((_state, _ck, report)) => runs.push(SweepRunRow {
                    value,
                    seed,
                    status: "ok".into(),
                    acc_base: report.acc_base,
                    acc_new: report.acc_new,
                    h: report.h,
                }),
                Err(err) => runs.push(SweepRunRow {
                    value,
                    seed,
                    status: format!("error: {err}"),
                    acc_base: f64::NAN,
                    acc_new: f64::NAN,
                    h: f64::NAN,
                }),
            }
        }
    }

    let runs_path = dir.join("sweep_runs.csv");
    let mut w = csv::Writer::from_path(&runs_path)?;
    w.write_record(["value", "seed", "status", "acc_base", "acc_new", "h"])?;
    for r in &runs {
        w.write_record([
            format!("{}", r.value),
            r.seed.to_string(),
            r.status.clone(),
            format!("{:.17e}", r.acc_base),
            format!("{:.17e}", r.acc_new),
            format!("{:.17e}", r.h),
        ])?;
    }
    w.flush()?;

    let agg_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&agg_path)?;
    w.write_record(["value", "acc_base", "acc_new", "h"])?;
    for &value in &args.values {
        let ok_rows: Vec<&SweepRunRow> = runs
            .iter()
            .filter(|r| r.value == value && r.status == "ok")
            .collect();
        let (base, _) = mean_std(&ok_rows.iter().map(|r| r.acc_base).collect::<Vec<_>>());
        let (new, _) = mean_std(&ok_rows.iter().map(|r| r.acc_new).collect::<Vec<_>>());
        let (h, _) = mean_std(&ok_rows.iter().map(|r| r.h).collect::<Vec<_>>());
        w.write_record([
            format!("{value}"),
            format!("{:.17e}", base),
            format!("{:.17e}", new),
            format!("{:.17e}", h),
        ])?;
        println!(
            "{:?}={:<8} base={} new={} H={} ({} ok / {} runs)",
            args.axis,
            value,
            pct(base),
            pct(new),
            pct(h),
            ok_rows.len(),
            seeds.len()
        );
    }
    w.flush()?;

    RunManifest {
        run_id: id,
        command: "sweep".into(),
        resolved_config: resolved,
        inputs,
        outputs: vec![FileRef::capture(&runs_path)?, FileRef::capture(&agg_path)?],
        duration_ms: started.elapsed().as_millis(),
    }
    .save(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let started = Instant::now();
    let base_config = load_config(&args.config, args.seed)?;
    let (task, task_hash) = load_task(&args.task)?;
    let mut inputs = vec![FileRef::capture(&args.task)?];
    if let Some(cfg) = &args.config {
        inputs.push(FileRef::capture(cfg)?);
    }
    let pool_path = args
        .pool
        .as_ref()
        .ok_or_else(|| MopdError::invalid("ablate requires --pool"))?;
    let (pool_file, _) = load_pool(pool_path, &task_hash)?;
    inputs.push(FileRef::capture(pool_path)?);

    let resolved = serde_json::json!({ "config": base_config, "seeds": args.seeds });
    let input_hashes: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
    let id = run_id("ablate", &resolved, &input_hashes)?;
    let dir = out_dir(args.out, "ablate", &id);
    prepare_dir(&dir, args.force)?;

    let variants = [
        Variant::CeOnly,
        Variant::Sipd,
        Variant::MopdR,
        Variant::MopdNoMps,
        Variant::Mopd,
    ];
    let seeds: Vec<u64> = (0..args.seeds as u64)
        .map(|i| base_config.seed + i)
        .collect();

    let runs_path = dir.join("ablate_runs.csv");
    let mut w = csv::Writer::from_path(&runs_path)?;
    w.write_record(["variant", "seed", "acc_base", "acc_new", "h"])?;
    let mut results: Vec<(Variant, Vec<EvalReport>)> = Vec::new();
    for variant in variants {
        let mut reports = Vec::new();
        for &seed in &seeds {
            let mut config = base_config.clone();
            config.variant = variant;
            config.seed = seed;
            config.pool_size = pool_file.pool.size();
            config.top_t = base_config.top_t.min(pool_file.pool.size());
            let pool_ref = if variant.uses_pool() {
                Some(&pool_file.pool)
            } else {
                None
            };
            let (_state, _ck, report) = run_base_to_new(&config, &task, pool_ref)?;
            w.write_record([
                variant.name().to_string(),
                seed.to_string(),
                format!("{:.17e}", report.acc_base),
                format!("{:.17e}", report.acc_new),
                format!("{:.17e}", report.h),
            ])?;
            reports.push(report);
        }
        results.push((variant, reports));
    }
    w.flush()?;

    let agg_path = dir.join("ablate.csv");
    let mut w = csv::Writer::from_path(&agg_path)?;
    w.write_record(["variant", "acc_base", "acc_new", "h"])?;
    for (variant, reports) in &results {
        let (base, _) = mean_std(&reports.iter().map(|r| r.acc_base).collect::<Vec<_>>());
        let (new, _) = mean_std(&reports.iter().map(|r| r.acc_new).collect::<Vec<_>>());
        let (h, _) = mean_std(&reports.iter().map(|r| r.h).collect::<Vec<_>>());
        w.write_record([
            variant.name().to_string(),
            format!("{:.17e}", base),
            format!("{:.17e}", new),
            format!("{:.17e}", h),
        ])?;
        println!(
            "{:<12} base={} new={} H={}",
            variant.name(),
            pct(base),
            pct(new),
            pct(h)
        );
    }
    w.flush()?;

    RunManifest {
        run_id: id,
        command: "ablate".into(),
        resolved_config: resolved,
        inputs,
        outputs: vec![FileRef::capture(&runs_path)?, FileRef::capture(&agg_path)?],
        duration_ms: started.elapsed().as_millis(),
    }
    .save(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
