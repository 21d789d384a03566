//! Acceptance gate: one PASS/FAIL line per criterion, failing at the end if any failed.
//!
//! The MNIST criteria read the data root from `STAER_DATA`, else `<workspace>/data`.

use std::path::PathBuf;

use staer_cli::checks::{self, CheckOutcome};
use staer_cli::config::{DatasetConfig, ExperimentConfig};
use staer_cli::run::{prepare_data, run, run_seed, Prepared};
use staer_core::backbone::{BackboneConfig, BackboneKind};
use staer_core::data::{DatasetKind, DATA_ROOT_ENV};
use staer_core::trainer::Method;

const SEEDS: [u64; 3] = [0, 1, 2];

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn mnist_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            kind: DatasetKind::Mnist,
            root: Some(data_root()),
            ..DatasetConfig::default()
        },
        backbone: BackboneConfig::preset(BackboneKind::Mlp),
        steps: 2,
        buffer_size: 200,
        epochs: Some(1),
        seeds: SEEDS.to_vec(),
        ..ExperimentConfig::default()
    }
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

/// Mean CIL (FAA, FRG) over the seeds.
fn mean_cil(cfg: &ExperimentConfig, data: &Prepared) -> Result<(f64, f64), String> {
    let mut faa = 0.0;
    let mut frg = 0.0;
    for &seed in &cfg.seeds {
        let (r, _) = run_seed(cfg, data, seed, &mut |_| {}).map_err(|e| e.to_string())?;
        eprintln!(
            "  {} seed {seed}: FAA {:.2} FRG {:.2}",
            cfg.method.name(),
            r.cil.faa,
            r.cil.frg
        );
        faa += r.cil.faa;
        frg += r.cil.frg;
    }
    let n = cfg.seeds.len() as f64;
    Ok((faa / n, frg / n))
}

fn surrogate_training() -> CheckOutcome {
    let name = "4 end-to-end surrogate training (MLP, T=2, 5000 MNIST, 3 epochs) >= 90%";
    let mut cfg = mnist_config();
    cfg.dataset.tasks = 1;
    cfg.dataset.train_limit = Some(5000);
    cfg.method = Method::Sgd;
    cfg.epochs = Some(3);
    let result = prepare_data(&cfg.dataset).and_then(|data| run_seed(&cfg, &data, 0, &mut |_| {}));
    match result {
        Ok((r, _)) => {
            let acc = r.cil.faa;
            outcome(name, acc >= 90.0, format!("test accuracy {acc:.2}%"))
        }
        Err(e) => outcome(name, false, e.to_string()),
    }
}

/// Criteria 5, 6 and 7 share the desk-scale sequential MNIST runs.
fn ranking() -> Vec<CheckOutcome> {
    let names = [
        "5 ranking: STAER > ER by >= 1.0 FAA, SGD <= 25%",
        "6 ablation: alpha1=alpha2=0 below alpha1=alpha2=0.5",
        "7 forgetting: FRG(STAER) < FRG(ER)",
    ];
    let base = mnist_config();
    let data = match prepare_data(&base.dataset) {
        Ok(d) => d,
        Err(e) => return names.iter().map(|&n| outcome(n, false, e.to_string())).collect(),
    };
    let with = |method: Method, alphas: Option<f64>| {
        let mut cfg = base.clone();
        cfg.method = method;
        if let Some(a) = alphas {
            cfg.staer.alpha1 = a;
            cfg.staer.alpha2 = a;
        }
        mean_cil(&cfg, &data)
    };
    let runs = (|| -> Result<_, String> {
        Ok((
            with(Method::Staer, None)?,
            with(Method::Er, None)?,
            with(Method::Sgd, None)?,
            with(Method::Staer, Some(0.0))?,
        ))
    })();
    let ((staer_faa, staer_frg), (er_faa, er_frg), (sgd_faa, _), (single_faa, _)) = match runs {
        Ok(r) => r,
        Err(e) => return names.iter().map(|&n| outcome(n, false, e.clone())).collect(),
    };
    let gap = staer_faa - er_faa;
    vec![
        outcome(
            names[0],
            gap >= 1.0 && sgd_faa <= 25.0,
            format!("STAER {staer_faa:.2}, ER {er_faa:.2} (gap {gap:+.2}), SGD {sgd_faa:.2}"),
        ),
        outcome(
            names[1],
            single_faa < staer_faa,
            format!("single-scale {single_faa:.2} vs multi-scale {staer_faa:.2}"),
        ),
        outcome(
            names[2],
            staer_frg < er_frg,
            format!("STAER {staer_frg:.2} vs ER {er_frg:.2}"),
        ),
    ]
}

fn determinism() -> CheckOutcome {
    let name = "10 determinism: identical result.json (minus timing) and checksums";
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = ExperimentConfig {
        backbone: BackboneConfig::preset(BackboneKind::Mlp),
        buffer_size: 50,
        seeds: vec![0, 1],
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.dataset.kind = DatasetKind::Synthetic;
    let read = |path: &PathBuf| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.join("result.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    let first = run(&cfg, true).map(|(r, d)| (r, read(&d)));
    let second = run(&cfg, true).map(|(r, d)| (r, read(&d)));
    match (first, second) {
        (Ok((a, fa)), Ok((b, fb))) => {
            let sums_a: Vec<_> = a.seeds.iter().map(|s| &s.param_checksum).collect();
            let sums_b: Vec<_> = b.seeds.iter().map(|s| &s.param_checksum).collect();
            outcome(
                name,
                fa == fb && sums_a == sums_b && a.without_timing() == b.without_timing(),
                format!(
                    "{} seeds, checksums {:?}",
                    sums_a.len(),
                    sums_a.iter().map(|s| &s[..12]).collect::<Vec<_>>()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(name, false, e.to_string()),
    }
}

fn named(name: &'static str, mut o: CheckOutcome) -> CheckOutcome {
    o.name = name;
    o
}

#[test]
fn acceptance() {
    let mut lines = vec![
        named("1 soft-DTW gradient correctness", checks::sdtw_gradient(50, 1)),
        named("2 soft-DTW hard-limit oracle", checks::sdtw_hard_limit(100, 2)),
        named("3 LIF recurrence oracle", checks::lif_bitwise(1000, 3)),
        surrogate_training(),
    ];
    lines.extend(ranking());
    lines.push(named("8 metric oracles", checks::metrics(20, 8)));
    lines.push(named("9 reservoir statistics", checks::reservoir(100_000, 42)));
    lines.push(determinism());
    lines.push(named("11 ResNet19 smoke (T=2, batch 4)", checks::resnet19_smoke(11)));

    for o in &lines {
        println!("{}", o.line());
    }
    let failed: Vec<_> = lines.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
