//! Executing an experiment configuration and writing its artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use staer_core::backbone::Backbone;
use staer_core::checkpoint::{save_buffer, save_model};
use staer_core::data::{
    data_root, load_cifar10, load_mnist, split_by_tasks, synthetic, DatasetKind, ImageDataset, Split, TaskSplit,
};
use staer_core::metrics::{summarize, AccuracyMatrix};
use staer_core::trainer::{run_task_sequence, EpochLog, Trainer, TrainerConfig};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::CliError;

/// Code version baked in at build time (`git describe` when available).
pub const VERSION: &str = env!("STAER_VERSION");

/// Task-split train and test data of one dataset configuration.
pub struct Prepared {
    pub split: TaskSplit,
    pub train: Vec<ImageDataset>,
    pub test: Vec<ImageDataset>,
    pub input: [usize; 3],
    pub classes: usize,
}

fn limit(ds: ImageDataset, n: Option<usize>) -> staer_core::Result<ImageDataset> {
    match n {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => Ok(ds),
    }
}

pub fn prepare_data(cfg: &DatasetConfig) -> Result<Prepared, CliError> {
    let root = cfg.root.clone().unwrap_or_else(data_root);
    let (train, test, classes) = match cfg.kind {
        DatasetKind::Mnist => (load_mnist(&root, Split::Train)?, load_mnist(&root, Split::Test)?, 10),
        DatasetKind::Cifar10 => (
            load_cifar10(&root, Split::Train)?,
            load_cifar10(&root, Split::Test)?,
            10,
        ),
        DatasetKind::Synthetic => (
            synthetic(&cfg.synthetic, Split::Train)?,
            synthetic(&cfg.synthetic, Split::Test)?,
            cfg.synthetic.classes,
        ),
    };
    let train = limit(train, cfg.train_limit)?;
    let test = limit(test, cfg.test_limit)?;
    let split = TaskSplit::standard(classes, cfg.tasks, cfg.class_order_seed)?;
    let input = train.image_shape();
    Ok(Prepared {
        train: split_by_tasks(&train, &split)?,
        test: split_by_tasks(&test, &split)?,
        split,
        input,
        classes,
    })
}

/// One evaluation protocol's accuracy matrix and its summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub matrix: AccuracyMatrix,
    pub faa: f64,
    pub frg: f64,
    pub frg_defined: bool,
}

impl ProtocolResult {
    fn new(matrix: AccuracyMatrix) -> Result<Self, CliError> {
        let s = summarize(&matrix)?;
        Ok(Self {
            matrix,
            faa: s.faa,
            frg: s.frg,
            frg_defined: s.frg_defined,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub cil: ProtocolResult,
    pub til: ProtocolResult,
    pub param_checksum: String,
    /// Test-split content hash before and after training.
    pub test_hash_before: String,
    pub test_hash_after: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub faa: MeanStd,
    /// Absent when forgetting is undefined (one task, or joint training).
    pub frg: Option<MeanStd>,
}

impl ProtocolSummary {
    fn of<'a>(results: impl Iterator<Item = &'a ProtocolResult> + Clone) -> Self {
        let faa: Vec<f64> = results.clone().map(|r| r.faa).collect();
        let defined = results.clone().all(|r| r.frg_defined);
        let frg: Vec<f64> = results.map(|r| r.frg).collect();
        Self {
            faa: MeanStd::of(&faa),
            frg: defined.then(|| MeanStd::of(&frg)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cil: ProtocolSummary,
    pub til: ProtocolSummary,
}

/// Wall-clock information, kept apart so results compare equal across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_clock_s: f64,
    pub seed_wall_clock_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Trainer settings after dataset-dependent defaults were resolved.
    pub trainer: TrainerConfig,
    pub tasks: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seeds: Vec<SeedResult>,
    pub summary: Summary,
    pub timing: Timing,
}

impl RunResult {
    /// The result as JSON without the `timing` section.
    pub fn without_timing(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("result serializes");
        if let Value::Object(m) = &mut v {
            m.remove("timing");
        }
        v
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Train and evaluate one seed. `log` receives every epoch record.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &Prepared,
    seed: u64,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(SeedResult, Trainer), CliError> {
    let model = Backbone::new(cfg.backbone.clone(), data.input, data.classes, seed)?;
    let mut trainer = Trainer::new(cfg.trainer(), model, cfg.dataset.kind, seed)?;
    let hash = |sets: &[ImageDataset]| {
        let joined: Vec<String> = sets.iter().map(|d| d.content_hash()).collect();
        crate::config::short_hash(&Value::from(joined))
    };
    let before = hash(&data.test);
    let out = run_task_sequence(&mut trainer, &data.split, &data.train, &data.test, log)?;
    let result = SeedResult {
        seed,
        cil: ProtocolResult::new(out.cil)?,
        til: ProtocolResult::new(out.til)?,
        param_checksum: out.param_checksum,
        test_hash_before: before,
        test_hash_after: hash(&data.test),
    };
    Ok((result, trainer))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Run every seed of `cfg`, write artifacts into its run directory and return both.
pub fn run(cfg: &ExperimentConfig, quiet: bool) -> Result<(RunResult, PathBuf), CliError> {
    cfg.validate()?;
    let started = unix_now();
    let clock = Instant::now();
    let data = prepare_data(&cfg.dataset)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    write(
        &dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes").as_bytes(),
    )?;

    let mut seeds = Vec::new();
    let mut seed_times = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let t0 = Instant::now();
        let log_path = dir.join(format!("train_log_seed{i}.jsonl"));
        let mut log_file =
            fs::File::create(&log_path).map_err(|e| CliError::io(format!("creating {}", log_path.display()), e))?;
        let mut log_err = None;
        let mut on_epoch = |e: &EpochLog| {
            let mut line = serde_json::to_value(e).expect("log serializes");
            line["seed"] = seed.into();
            if let Err(err) = writeln!(log_file, "{line}") {
                log_err.get_or_insert(err);
            }
            if !quiet {
                eprintln!(
                    "seed {seed} task {} epoch {}: loss {:.4} (ce {:.4}, aux {:.4}, ta {:.4}) lr {:.2e} buffer {}",
                    e.task, e.epoch, e.total, e.ce, e.aux, e.ta, e.lr_end, e.buffer_len
                );
            }
        };
        let (result, trainer) = run_seed(cfg, &data, seed, &mut on_epoch)?;
        if let Some(err) = log_err {
            return Err(CliError::io(format!("writing {}", log_path.display()), err));
        }
        write(
            &dir.join(format!("accuracy_matrix_seed{i}.csv")),
            result.cil.matrix.to_csv().as_bytes(),
        )?;
        write(
            &dir.join(format!("accuracy_matrix_til_seed{i}.csv")),
            result.til.matrix.to_csv().as_bytes(),
        )?;
        if cfg.save_checkpoints {
            write(&dir.join(format!("model_seed{i}.ckpt")), &save_model(trainer.model())?)?;
            write(
                &dir.join(format!("buffer_seed{i}.ckpt")),
                &save_buffer(trainer.buffer())?,
            )?;
        }
        if !quiet {
            eprintln!(
                "seed {seed}: CIL FAA {:.2} FRG {:.2} | TIL FAA {:.2}",
                result.cil.faa, result.cil.frg, result.til.faa
            );
        }
        seeds.push(result);
        seed_times.push(t0.elapsed().as_secs_f64());
    }

    let summary = Summary {
        cil: ProtocolSummary::of(seeds.iter().map(|s| &s.cil)),
        til: ProtocolSummary::of(seeds.iter().map(|s| &s.til)),
    };
    let result = RunResult {
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        trainer: cfg.trainer(),
        tasks: data.split.len(),
        train_samples: data.train.iter().map(|d| d.len()).sum(),
        test_samples: data.test.iter().map(|d| d.len()).sum(),
        seeds,
        summary,
        timing: Timing {
            started_unix: started,
            finished_unix: unix_now(),
            wall_clock_s: clock.elapsed().as_secs_f64(),
            seed_wall_clock_s: seed_times,
        },
    };
    write(
        &dir.join("result.json"),
        serde_json::to_string_pretty(&result)
            .expect("result serializes")
            .as_bytes(),
    )?;
    Ok((result, dir))
}

/// Read a `result.json` from a run directory (or the file itself).
pub fn read_result(path: &Path) -> Result<RunResult, CliError> {
    let file = if path.is_dir() {
        path.join("result.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| CliError::io(format!("reading {}", file.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("malformed {}: {e}", file.display())))
}
