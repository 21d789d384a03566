//! Comparison tables over finished runs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::CliError;
use crate::run::{read_result, MeanStd, RunResult};

/// One run's CIL summary placed in a (method, buffer size) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dataset: String,
    pub steps: usize,
    pub tasks: usize,
    /// Row label: the method name, disambiguated by config hash on collisions.
    pub label: String,
    /// `None` for methods without a replay buffer.
    pub buffer: Option<usize>,
    pub seeds: usize,
    pub faa: MeanStd,
    pub frg: Option<MeanStd>,
    pub config_hash: String,
}

impl Entry {
    fn from_result(r: &RunResult) -> Self {
        let dataset = serde_json::to_value(r.config.dataset.kind).expect("serializes");
        Self {
            dataset: dataset.as_str().unwrap_or("?").to_string(),
            steps: r.config.steps,
            tasks: r.tasks,
            label: r.config.method.name().to_string(),
            buffer: r.config.method.uses_buffer().then_some(r.config.buffer_size),
            seeds: r.seeds.len(),
            faa: r.summary.cil.faa,
            frg: r.summary.cil.frg,
            config_hash: r.config_hash.clone(),
        }
    }
}

/// Entries of one dataset / time-step / task-count combination.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub dataset: String,
    pub steps: usize,
    pub tasks: usize,
    pub entries: Vec<Entry>,
}

impl Group {
    fn buffers(&self) -> Vec<Option<usize>> {
        let mut b: Vec<_> = self.entries.iter().map(|e| e.buffer).collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// Row labels ordered by their best FAA, highest first.
    fn rows(&self) -> Vec<String> {
        let mut best: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match best.iter_mut().find(|(l, _)| *l == e.label) {
                Some((_, v)) => *v = v.max(e.faa.mean),
                None => best.push((e.label.clone(), e.faa.mean)),
            }
        }
        best.sort_by(|a, b| b.1.total_cmp(&a.1));
        best.into_iter().map(|(l, _)| l).collect()
    }

    fn cell(&self, label: &str, buffer: Option<usize>) -> Option<&Entry> {
        self.entries.iter().find(|e| e.label == label && e.buffer == buffer)
    }
}

pub fn load(dirs: &[PathBuf]) -> Result<Vec<Group>, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one result directory".into()));
    }
    let mut groups: BTreeMap<(String, usize, usize), Vec<Entry>> = BTreeMap::new();
    for dir in dirs {
        let mut e = Entry::from_result(&read_result(dir)?);
        let entries = groups.entry((e.dataset.clone(), e.steps, e.tasks)).or_default();
        if entries.iter().any(|o| o.label == e.label && o.buffer == e.buffer) {
            e.label = format!("{} [{}]", e.label, e.config_hash);
        }
        entries.push(e);
    }
    Ok(groups
        .into_iter()
        .map(|((dataset, steps, tasks), entries)| Group {
            dataset,
            steps,
            tasks,
            entries,
        })
        .collect())
}

fn fmt(m: &MeanStd, seeds: usize) -> String {
    if seeds > 1 {
        format!("{:.2} ± {:.2}", m.mean, m.std)
    } else {
        format!("{:.2}", m.mean)
    }
}

/// Markdown tables, one per group. Forgetting columns appear only with two or more tasks.
pub fn render_text(groups: &[Group]) -> String {
    let mut out = String::new();
    for g in groups {
        let buffers = g.buffers();
        let with_frg = g.tasks >= 2;
        out.push_str(&format!(
            "## {} (T={}, {} tasks), CIL\n\n| Method |",
            g.dataset, g.steps, g.tasks
        ));
        let mut rule = String::from("|---|");
        for b in &buffers {
            let name = b.map_or_else(|| "no buffer".to_string(), |b| format!("B={b}"));
            out.push_str(&format!(" FAA {name} |"));
            rule.push_str("---|");
            if with_frg {
                out.push_str(&format!(" FRG {name} |"));
                rule.push_str("---|");
            }
        }
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        let best_faa = |b: Option<usize>| {
            g.entries
                .iter()
                .filter(|e| e.buffer == b)
                .map(|e| e.faa.mean)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let best_frg = |b: Option<usize>| {
            g.entries
                .iter()
                .filter(|e| e.buffer == b)
                .filter_map(|e| e.frg.map(|f| f.mean))
                .fold(f64::INFINITY, f64::min)
        };
        for label in g.rows() {
            out.push_str(&format!("| {label} |"));
            for &b in &buffers {
                let Some(e) = g.cell(&label, b) else {
                    out.push_str(if with_frg { " | |" } else { " |" });
                    continue;
                };
                let bold = |s: String, best: bool| if best { format!("**{s}**") } else { s };
                out.push_str(&format!(" {} |", bold(fmt(&e.faa, e.seeds), e.faa.mean == best_faa(b))));
                if with_frg {
                    let frg = match &e.frg {
                        Some(f) => bold(fmt(f, e.seeds), f.mean == best_frg(b)),
                        None => "n/a".to_string(),
                    };
                    out.push_str(&format!(" {frg} |"));
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(groups: &[Group]) -> String {
    let mut s =
        String::from("dataset,steps,tasks,method,buffer_size,seeds,faa_mean,faa_std,frg_mean,frg_std,config_hash\n");
    for g in groups {
        for label in g.rows() {
            for e in g.entries.iter().filter(|e| e.label == label) {
                let (fm, fs) = e.frg.map_or((String::new(), String::new()), |f| {
                    (format!("{:.4}", f.mean), format!("{:.4}", f.std))
                });
                s.push_str(&format!(
                    "{},{},{},{},{},{},{:.4},{:.4},{fm},{fs},{}\n",
                    g.dataset,
                    g.steps,
                    g.tasks,
                    e.label,
                    e.buffer.map_or(String::new(), |b| b.to_string()),
                    e.seeds,
                    e.faa.mean,
                    e.faa.std,
                    e.config_hash
                ));
            }
        }
    }
    s
}
