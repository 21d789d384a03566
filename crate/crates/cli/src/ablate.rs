//! Grid sweeps over the STAER loss weights.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use staer_core::trainer::Method;

use crate::config::{short_hash, ExperimentConfig};
use crate::error::CliError;
use crate::run::{prepare_data, run_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub base: ExperimentConfig,
    pub beta: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        let base = ExperimentConfig::default();
        Self {
            beta: vec![base.staer.beta],
            alpha1: vec![base.staer.alpha1],
            alpha2: vec![base.staer.alpha2],
            seeds: base.seeds.clone(),
            base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub beta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub seed: u64,
    pub faa: f64,
    pub frg: f64,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, len) in [
            ("beta", self.beta.len()),
            ("alpha1", self.alpha1.len()),
            ("alpha2", self.alpha2.len()),
            ("seeds", self.seeds.len()),
        ] {
            if len == 0 {
                return Err(CliError::Config(format!("ablation grid `{name}` is empty")));
            }
        }
        if self.base.method != Method::Staer {
            return Err(CliError::Config(format!(
                "ablation sweeps STAER weights but base.method is `{}`",
                self.base.method.name()
            )));
        }
        self.base.validate()
    }

    pub fn output_dir(&self) -> PathBuf {
        let v = serde_json::to_value(self).expect("grid serializes");
        self.base.output_dir.join(format!("ablation-{}", short_hash(&v)))
    }

    fn points(&self) -> Vec<(f64, f64, f64, u64)> {
        let mut out = Vec::new();
        for &beta in &self.beta {
            for &a1 in &self.alpha1 {
                for &a2 in &self.alpha2 {
                    for &seed in &self.seeds {
                        out.push((beta, a1, a2, seed));
                    }
                }
            }
        }
        out
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("beta,alpha1,alpha2,seed,faa,frg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.4},{:.4}\n",
            r.beta, r.alpha1, r.alpha2, r.seed, r.faa, r.frg
        ));
    }
    s
}

/// Run the full cartesian grid (CIL metrics) and write `ablation.csv`.
pub fn ablate(grid: &AblationGrid, quiet: bool) -> Result<(Vec<AblationRow>, PathBuf), CliError> {
    grid.validate()?;
    let data = prepare_data(&grid.base.dataset)?;
    let points = grid.points();
    let mut rows = Vec::with_capacity(points.len());
    for (i, &(beta, alpha1, alpha2, seed)) in points.iter().enumerate() {
        let mut cfg = grid.base.clone();
        cfg.staer.beta = beta;
        cfg.staer.alpha1 = alpha1;
        cfg.staer.alpha2 = alpha2;
        cfg.validate()?;
        let (result, _) = run_seed(&cfg, &data, seed, &mut |_| {})?;
        if !quiet {
            eprintln!(
                "[{}/{}] beta {beta} alpha1 {alpha1} alpha2 {alpha2} seed {seed}: FAA {:.2} FRG {:.2}",
                i + 1,
                points.len(),
                result.cil.faa,
                result.cil.frg
            );
        }
        rows.push(AblationRow {
            beta,
            alpha1,
            alpha2,
            seed,
            faa: result.cil.faa,
            frg: result.cil.frg,
        });
    }
    let dir = grid.output_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let grid_json = serde_json::to_string_pretty(grid).expect("grid serializes");
    fs::write(dir.join("grid.json"), grid_json).map_err(|e| CliError::io("writing grid.json", e))?;
    fs::write(dir.join("ablation.csv"), to_csv(&rows)).map_err(|e| CliError::io("writing ablation.csv", e))?;
    Ok((rows, dir))
}
