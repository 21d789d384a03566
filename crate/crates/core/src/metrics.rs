//! Accuracy matrices, class- and task-incremental evaluation, and the
//! final-average-accuracy and forgetting summaries.

use serde::{Deserialize, Serialize};

use crate::backbone::{predict, time_average, Backbone, Mode};
use crate::data::{static_encode, ImageDataset, TaskSplit};
use crate::error::{Error, Result};

/// `R[k][n]`: accuracy in percent on task `n` after training through task `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: vec![vec![None; tasks]; tasks],
        }
    }

    /// Build from a lower triangle: `rows[k]` holds tasks `0..=k`.
    pub fn from_lower(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::Metrics(format!(
                    "row {k} has {} entries, expected {}",
                    row.len(),
                    k + 1
                )));
            }
            m.set_row(k, row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, n: usize) -> Option<f64> {
        self.rows.get(k)?.get(n).copied().flatten()
    }

    pub fn set(&mut self, k: usize, n: usize, acc: f64) -> Result<()> {
        if n > k || k >= self.tasks() {
            return Err(Error::Metrics(format!("cell ({k}, {n}) outside the lower triangle")));
        }
        if !(0.0..=100.0).contains(&acc) {
            return Err(Error::Metrics(format!("accuracy {acc} outside [0, 100]")));
        }
        self.rows[k][n] = Some(acc);
        Ok(())
    }

    pub fn set_row(&mut self, k: usize, accs: &[f64]) -> Result<()> {
        for (n, &a) in accs.iter().enumerate() {
            self.set(k, n, a)?;
        }
        Ok(())
    }

    fn final_row(&self) -> Result<Vec<f64>> {
        let last = self
            .tasks()
            .checked_sub(1)
            .ok_or_else(|| Error::Metrics("empty accuracy matrix".into()))?;
        self.rows[last]
            .iter()
            .enumerate()
            .map(|(n, v)| v.ok_or_else(|| Error::Metrics(format!("final row missing task {n}"))))
            .collect()
    }

    /// Mean of the final row.
    pub fn faa(&self) -> Result<f64> {
        let row = self.final_row()?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean drop from each earlier task's best accuracy to its final accuracy.
    pub fn frg(&self) -> Result<f64> {
        let n_tasks = self.tasks();
        if n_tasks < 2 {
            return Err(Error::Metrics("forgetting needs at least two tasks".into()));
        }
        let last = self.final_row()?;
        let mut total = 0.0;
        for n in 0..n_tasks - 1 {
            let mut best = f64::NEG_INFINITY;
            for k in n..n_tasks {
                let v = self
                    .get(k, n)
                    .ok_or_else(|| Error::Metrics(format!("cell ({k}, {n}) not filled")))?;
                best = best.max(v);
            }
            total += best - last[n];
        }
        Ok(total / (n_tasks - 1) as f64)
    }

    /// Rows are after-task, columns are tasks; unfilled cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for n in 0..self.tasks() {
            out.push_str(&format!(",task{n}"));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.2}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Summary of a matrix whose final row is filled. Forgetting is undefined for
/// a single task or when earlier rows were never evaluated (joint training);
/// it is then reported as zero with `frg_defined = false`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub faa: f64,
    pub frg: f64,
    pub frg_defined: bool,
}

pub fn summarize(r: &AccuracyMatrix) -> Result<Summary> {
    let faa = r.faa()?;
    let complete = (0..r.tasks()).all(|k| (0..=k).all(|n| r.get(k, n).is_some()));
    Ok(if r.tasks() < 2 || !complete {
        Summary {
            faa,
            frg: 0.0,
            frg_defined: false,
        }
    } else {
        Summary {
            faa,
            frg: r.frg()?,
            frg_defined: true,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Argmax over all classes.
    Cil,
    /// Argmax over the task's own classes.
    Til,
}

/// Percent of `test` classified correctly at `steps` time steps.
pub fn accuracy(
    model: &Backbone<f32>,
    test: &ImageDataset,
    steps: usize,
    batch: usize,
    mask: Option<&[usize]>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let batch = batch.max(1);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = test.batch(chunk, None)?;
        let h = model.infer(&static_encode(&x, steps)?, Mode::Eval)?;
        let pred = predict(&time_average(&h)?, mask)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Accuracy on each of `tests[0..=through]` under `protocol`.
pub fn evaluate(
    model: &Backbone<f32>,
    split: &TaskSplit,
    tests: &[ImageDataset],
    through: usize,
    protocol: Protocol,
    steps: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    (0..=through)
        .map(|n| {
            let mask = match protocol {
                Protocol::Cil => None,
                Protocol::Til => Some(split.tasks[n].as_slice()),
            };
            accuracy(model, &tests[n], steps, batch, mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let r = AccuracyMatrix::from_lower(&[vec![100.0], vec![40.0, 90.0]]).unwrap();
        assert_eq!(r.frg().unwrap(), 60.0);
        assert_eq!(r.faa().unwrap(), 65.0);
        let r = AccuracyMatrix::from_lower(&[vec![90.0], vec![80.0, 80.0], vec![70.0, 80.0, 50.0]]).unwrap();
        assert_eq!(r.frg().unwrap(), 10.0);
        let mut r = AccuracyMatrix::new(5);
        for k in 0..5 {
            r.set_row(k, &vec![100.0; k + 1]).unwrap();
        }
        assert_eq!(r.faa().unwrap(), 100.0);
        assert_eq!(r.frg().unwrap(), 0.0);
    }

    #[test]
    fn single_task_forgetting_is_flagged() {
        let r = AccuracyMatrix::from_lower(&[vec![97.0]]).unwrap();
        assert!(r.frg().is_err());
        let s = summarize(&r).unwrap();
        assert_eq!((s.faa, s.frg, s.frg_defined), (97.0, 0.0, false));
    }

    #[test]
    fn incomplete_rows_rejected() {
        let mut r = AccuracyMatrix::new(2);
        r.set(0, 0, 50.0).unwrap();
        assert!(r.faa().is_err());
        assert!(r.set(0, 1, 50.0).is_err());
        assert!(r.set(1, 0, 101.0).is_err());
    }
}
