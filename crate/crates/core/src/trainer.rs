//! Continual-learning methods over a shared backbone and optimizer: plain
//! fine-tuning, joint training, experience replay, dark experience replay
//! (and its labelled variant), and replay with multi-resolution soft-DTW
//! temporal alignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, CosineSchedule, Graph, Var};
use crate::backbone::{Backbone, Mode};
use crate::data::{augment_pixels, static_encode, DatasetKind, ImageDataset, TaskSplit};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, AccuracyMatrix, Protocol};
use crate::replay::{multi_resolution_logits, sample_sequence, ReplayBuffer, ReplayEntry, StoredLogits};
use crate::sdtw::SdtwConfig;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Joint,
    Er,
    Der,
    Derpp,
    Staer,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Sgd,
        Method::Joint,
        Method::Er,
        Method::Der,
        Method::Derpp,
        Method::Staer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::Der => "der",
            Method::Derpp => "derpp",
            Method::Staer => "staer",
        }
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Er | Method::Der | Method::Derpp | Method::Staer)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(
                "method",
                format!("unknown method `{s}`; valid methods: {}", valid.join(", ")),
            )
        })
    }
}

/// Weights of the temporal-alignment objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaerWeights {
    /// Scale of the alignment loss relative to cross-entropy.
    pub beta: f64,
    /// Weight of the contracted (`T/2`) term.
    pub alpha1: f64,
    /// Weight of the dilated (`2T`) term.
    pub alpha2: f64,
}

impl Default for StaerWeights {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            alpha1: 0.5,
            alpha2: 0.5,
        }
    }
}

/// Distillation weights of the dark-replay baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerWeights {
    /// Logit-matching MSE weight.
    pub alpha: f64,
    /// Weight of the extra replayed-label cross-entropy (labelled variant only).
    pub beta: f64,
}

impl Default for DerWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub method: Method,
    /// Static-encoding length used for training and evaluation.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to `batch_size`.
    pub replay_batch_size: Option<usize>,
    pub buffer_size: usize,
    pub staer: StaerWeights,
    pub der: DerWeights,
    pub sdtw: SdtwConfig,
    /// Divide each soft-DTW value by the sum of the two sequence lengths.
    pub sdtw_length_normalize: bool,
    pub adam: AdamConfig,
    pub reset_optimizer_per_task: bool,
    /// Recompute stored logits of replayed entries after every step.
    pub refresh_logits: bool,
    /// Draw the contracted/dilated half of the replay batch at random instead of taking the first half.
    pub random_half: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::Staer,
            steps: 2,
            epochs: 1,
            batch_size: 10,
            replay_batch_size: None,
            buffer_size: 200,
            staer: StaerWeights::default(),
            der: DerWeights::default(),
            sdtw: SdtwConfig::default(),
            sdtw_length_normalize: true,
            adam: AdamConfig::default(),
            reset_optimizer_per_task: false,
            refresh_logits: false,
            random_half: false,
            eval_batch_size: 256,
        }
    }
}

impl TrainerConfig {
    pub fn replay_batch(&self) -> usize {
        self.replay_batch_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "T must be >= 1"));
        }
        if self.method == Method::Staer && !self.steps.is_multiple_of(2) {
            return Err(Error::invalid(
                "steps",
                format!("temporal alignment needs even T, got {}", self.steps),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs/batch_size", "must be > 0"));
        }
        if self.method.uses_buffer() && (self.buffer_size == 0 || self.replay_batch() == 0) {
            return Err(Error::invalid(
                "buffer_size",
                "replay methods need a non-empty buffer and replay batch",
            ));
        }
        let w = self.staer;
        for (name, v) in [
            ("staer.beta", w.beta),
            ("staer.alpha1", w.alpha1),
            ("staer.alpha2", w.alpha2),
            ("der.alpha", self.der.alpha),
            ("der.beta", self.der.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid {
                    what: "loss weight",
                    detail: format!("{name} = {v} must be finite and >= 0"),
                });
            }
        }
        self.sdtw.validate()?;
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("adam.lr", format!("{} must be > 0", self.adam.lr)));
        }
        Ok(())
    }
}

/// Batch-mean loss components of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f64,
    /// Distillation terms of the dark-replay baselines.
    pub aux: f64,
    /// Unweighted temporal-alignment loss.
    pub ta: f64,
    pub total: f64,
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub ce: f64,
    pub aux: f64,
    pub ta: f64,
    pub total: f64,
    pub buffer_len: usize,
}

/// Independent random streams so each consumer draws the same values
/// regardless of what the others do.
#[derive(Clone, Debug)]
struct Streams {
    shuffle: ChaCha8Rng,
    augment: ChaCha8Rng,
    replay: ChaCha8Rng,
    replay_extra: ChaCha8Rng,
    reservoir: ChaCha8Rng,
    half: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            shuffle: stream(11),
            augment: stream(12),
            replay: stream(13),
            replay_extra: stream(14),
            reservoir: stream(15),
            half: stream(16),
        }
    }
}

pub struct Trainer {
    config: TrainerConfig,
    model: Backbone<f32>,
    adam: AdamState<f32>,
    buffer: ReplayBuffer,
    kind: DatasetKind,
    rng: Streams,
    task: usize,
}

impl Trainer {
    pub fn new(config: TrainerConfig, model: Backbone<f32>, kind: DatasetKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params(), config.adam);
        let capacity = if config.method.uses_buffer() {
            config.buffer_size
        } else {
            0
        };
        Ok(Self {
            config,
            model,
            adam,
            buffer: ReplayBuffer::new(capacity),
            kind,
            rng: Streams::new(seed),
            task: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &Backbone<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Backbone<f32> {
        &mut self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut ReplayBuffer {
        &mut self.buffer
    }

    pub fn optimizer(&self) -> &AdamState<f32> {
        &self.adam
    }

    pub fn task(&self) -> usize {
        self.task
    }

    /// Start task `task`: later insertions are tagged with it.
    pub fn begin_task(&mut self, task: usize) {
        self.task = task;
        if self.config.reset_optimizer_per_task {
            self.adam.reset();
        }
    }

    /// Augment (training only) and normalize raw `[C, H, W]` images into a batch.
    fn prepare(&mut self, raw: &[&[f32]]) -> Result<Tensor<f32>> {
        let [c, h, w] = self.model.input_shape();
        let norm = self.kind.normalization();
        let mut data = Vec::with_capacity(raw.len() * c * h * w);
        for img in raw {
            if img.len() != c * h * w {
                return Err(Error::shape(
                    "training batch",
                    format!("image of {} values, model expects {:?}", img.len(), [c, h, w]),
                ));
            }
            let mut v = augment_pixels(img, [c, h, w], &mut self.rng.augment, self.kind);
            norm.apply(&mut v);
            data.extend_from_slice(&v);
        }
        Tensor::new(&[raw.len(), c, h, w], data)
    }

    fn buffer_batch(&mut self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let raw: Vec<Vec<f32>> = idx.iter().map(|&i| self.buffer.entry(i).x.clone()).collect();
        let refs: Vec<&[f32]> = raw.iter().map(|v| v.as_slice()).collect();
        let labels = idx.iter().map(|&i| self.buffer.entry(i).y).collect();
        Ok((self.prepare(&refs)?, labels))
    }

    /// One optimization step on raw images `raw` with labels `labels`, followed
    /// by reservoir insertion of the new samples.
    pub fn step(&mut self, raw: &[&[f32]], labels: &[usize], lr: f64) -> Result<StepLosses> {
        if raw.is_empty() || raw.len() != labels.len() {
            return Err(Error::shape(
                "training step",
                format!("{} images, {} labels", raw.len(), labels.len()),
            ));
        }
        let cfg = self.config.clone();
        let steps = cfg.steps;
        let x_new = self.prepare(raw)?;
        // DER with a zero logit-matching weight never looks at the buffer, so
        // it draws nothing from the replay or augmentation streams.
        let replay = !self.buffer.is_empty()
            && match cfg.method {
                Method::Er | Method::Staer => true,
                Method::Der | Method::Derpp => cfg.der.alpha > 0.0,
                Method::Sgd | Method::Joint => false,
            };
        let buf_idx = if replay {
            self.buffer.sample(cfg.replay_batch(), &mut self.rng.replay)?
        } else {
            Vec::new()
        };
        let (x_buf, y_buf) = if replay {
            self.buffer_batch(&buf_idx)?
        } else {
            (Tensor::zeros(&[0]), Vec::new())
        };

        let (halves, extra) = match cfg.method {
            Method::Staer if replay => {
                let k = (buf_idx.len() / 2).max(1);
                let mut cols: Vec<usize> = (0..buf_idx.len()).collect();
                if cfg.random_half {
                    cols.shuffle(&mut self.rng.half);
                }
                cols.truncate(k);
                (cols, None)
            }
            Method::Derpp if !self.buffer.is_empty() && cfg.der.beta > 0.0 => {
                let idx = self.buffer.sample(cfg.replay_batch(), &mut self.rng.replay_extra)?;
                (Vec::new(), Some(self.buffer_batch(&idx)?))
            }
            _ => (Vec::new(), None),
        };

        self.model.params_mut().zero_grad();
        let (grads, stats, losses, new_logits) = {
            let model = &self.model;
            let mut g = Graph::new(model.params());
            let mut stats = Vec::new();
            let mut losses = StepLosses::default();
            let (loss, new_logits) = match cfg.method {
                Method::Sgd | Method::Joint => {
                    let h = train_forward(model, &mut g, &x_new, steps, &mut stats)?;
                    let avg = g.mean_leading(h)?;
                    let ce = g.cross_entropy(avg, labels)?;
                    losses.ce = g.value(ce).item() as f64;
                    (ce, None)
                }
                Method::Er | Method::Staer => {
                    let x = if replay {
                        Tensor::concat_rows(&[&x_new, &x_buf])?
                    } else {
                        x_new.clone()
                    };
                    let mut y = labels.to_vec();
                    y.extend_from_slice(&y_buf);
                    let h = train_forward(model, &mut g, &x, steps, &mut stats)?;
                    let avg = g.mean_leading(h)?;
                    let ce = g.cross_entropy(avg, &y)?;
                    losses.ce = g.value(ce).item() as f64;
                    let mut loss = ce;
                    if cfg.method == Method::Staer && replay {
                        let ta = self.alignment_loss(&mut g, h, raw.len(), &buf_idx, &halves)?;
                        losses.ta = g.value(ta).item() as f64;
                        let weighted = g.scale(ta, cfg.staer.beta as f32)?;
                        loss = g.add(loss, weighted)?;
                    }
                    (loss, None)
                }
                Method::Der | Method::Derpp => {
                    let h = train_forward(model, &mut g, &x_new, steps, &mut stats)?;
                    let avg = g.mean_leading(h)?;
                    let ce = g.cross_entropy(avg, labels)?;
                    losses.ce = g.value(ce).item() as f64;
                    let new_logits = g.value(avg).clone();
                    let mut loss = ce;
                    if replay {
                        let hb = train_forward(model, &mut g, &x_buf, steps, &mut stats)?;
                        let avg_b = g.mean_leading(hb)?;
                        let stored = self.stored_averages(&buf_idx)?;
                        let mse = g.mse(avg_b, stored)?;
                        losses.aux += cfg.der.alpha * g.value(mse).item() as f64;
                        let w = g.scale(mse, cfg.der.alpha as f32)?;
                        loss = g.add(loss, w)?;
                    }
                    if let Some((x2, y2)) = &extra {
                        let h2 = train_forward(model, &mut g, x2, steps, &mut stats)?;
                        let avg2 = g.mean_leading(h2)?;
                        let ce2 = g.cross_entropy(avg2, y2)?;
                        losses.aux += cfg.der.beta * g.value(ce2).item() as f64;
                        let w = g.scale(ce2, cfg.der.beta as f32)?;
                        loss = g.add(loss, w)?;
                    }
                    (loss, Some(new_logits))
                }
            };
            losses.total = g.value(loss).item() as f64;
            if !losses.total.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            (g.backward(loss)?, stats, losses, new_logits)
        };
        self.model.params_mut().accumulate(&grads)?;
        self.model.update_running(&stats);
        self.adam.step(self.model.params_mut(), lr)?;

        self.insert(raw, labels, &x_new, new_logits.as_ref())?;
        if cfg.refresh_logits && replay && matches!(cfg.method, Method::Staer | Method::Der | Method::Derpp) {
            self.refresh(&buf_idx, &x_buf)?;
        }
        Ok(losses)
    }

    /// Normalized combination of soft-DTW terms aligning the current replay
    /// logits with the stored `T`, `T/2` and `2T` sequences.
    fn alignment_loss(
        &self,
        g: &mut Graph<'_, f32>,
        h: Var,
        offset: usize,
        buf_idx: &[usize],
        halves: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let w = cfg.staer;
        let stored: Vec<(&Tensor<f32>, &Tensor<f32>, &Tensor<f32>)> = buf_idx
            .iter()
            .map(|&i| match &self.buffer.entry(i).logits {
                StoredLogits::MultiRes { half, full, double } => {
                    if full.rows() != cfg.steps || half.rows() != cfg.steps / 2 || double.rows() != 2 * cfg.steps {
                        Err(Error::invalid(
                            "stored logits",
                            format!(
                                "resolutions {}/{}/{} do not match T = {}",
                                half.rows(),
                                full.rows(),
                                double.rows(),
                                cfg.steps
                            ),
                        ))
                    } else {
                        Ok((half, full, double))
                    }
                }
                _ => Err(Error::invalid("stored logits", "entry lacks multi-resolution logits")),
            })
            .collect::<Result<_>>()?;
        let cols: Vec<usize> = (0..buf_idx.len()).map(|k| offset + k).collect();
        temporal_alignment(g, h, &cols, &stored, halves, &w, &cfg.sdtw, cfg.sdtw_length_normalize)
    }

    fn stored_averages(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let rows: Vec<&Tensor<f32>> = idx
            .iter()
            .map(|&i| match &self.buffer.entry(i).logits {
                StoredLogits::Averaged(t) => Ok(t),
                _ => Err(Error::invalid("stored logits", "entry lacks averaged logits")),
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&rows)
    }

    fn logits_for(&self, x: &Tensor<f32>, cols: &[usize], averaged: Option<&Tensor<f32>>) -> Result<Vec<StoredLogits>> {
        match self.config.method {
            Method::Staer => {
                let (half, full, double) = multi_resolution_logits(&self.model, x, self.config.steps, Mode::Train)?;
                cols.iter()
                    .map(|&b| {
                        Ok(StoredLogits::MultiRes {
                            half: sample_sequence(&half, b)?,
                            full: sample_sequence(&full, b)?,
                            double: sample_sequence(&double, b)?,
                        })
                    })
                    .collect()
            }
            Method::Der | Method::Derpp => {
                let avg = match averaged {
                    Some(a) => a.clone(),
                    None => {
                        let h = self.model.infer(&static_encode(x, self.config.steps)?, Mode::Train)?;
                        crate::backbone::time_average(&h)?
                    }
                };
                cols.iter().map(|&b| Ok(StoredLogits::Averaged(avg.row(b)?))).collect()
            }
            _ => Ok(cols.iter().map(|_| StoredLogits::None).collect()),
        }
    }

    fn insert(
        &mut self,
        raw: &[&[f32]],
        labels: &[usize],
        x: &Tensor<f32>,
        averaged: Option<&Tensor<f32>>,
    ) -> Result<()> {
        if !self.config.method.uses_buffer() {
            return Ok(());
        }
        let mut accepted = Vec::new();
        for b in 0..raw.len() {
            if let Some(slot) = self.buffer.reserve(&mut self.rng.reservoir) {
                accepted.push((b, slot));
            }
        }
        if accepted.is_empty() {
            return Ok(());
        }
        let cols: Vec<usize> = accepted.iter().map(|a| a.0).collect();
        let logits = self.logits_for(x, &cols, averaged)?;
        for ((b, slot), logits) in accepted.into_iter().zip(logits) {
            let entry = ReplayEntry {
                x: raw[b].to_vec(),
                y: labels[b],
                logits,
                task: self.task,
            };
            self.buffer.place(slot, entry)?;
        }
        Ok(())
    }

    fn refresh(&mut self, buf_idx: &[usize], x_buf: &Tensor<f32>) -> Result<()> {
        let cols: Vec<usize> = (0..buf_idx.len()).collect();
        let logits = self.logits_for(x_buf, &cols, None)?;
        for (&slot, l) in buf_idx.iter().zip(logits) {
            self.buffer.refresh_logits(slot, l);
        }
        Ok(())
    }

    /// Train on `data` for the configured epochs with a fresh cosine schedule.
    pub fn train_task(&mut self, task: usize, data: &ImageDataset, log: &mut dyn FnMut(&EpochLog)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset(format!("task {task} has no training samples")));
        }
        self.begin_task(task);
        let bs = self.config.batch_size;
        let per_epoch = data.len().div_ceil(bs);
        let schedule = CosineSchedule::new(self.config.adam.lr, self.config.epochs * per_epoch)?;
        let mut step = 0;
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng.shuffle);
            let mut sums = StepLosses::default();
            let lr_start = schedule.lr(step)?;
            let mut lr = lr_start;
            for chunk in order.chunks(bs) {
                lr = schedule.lr(step)?;
                let raw: Vec<&[f32]> = chunk.iter().map(|&i| data.image(i)).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let l = self.step(&raw, &labels, lr)?;
                sums.ce += l.ce;
                sums.aux += l.aux;
                sums.ta += l.ta;
                sums.total += l.total;
                step += 1;
            }
            let n = per_epoch as f64;
            log(&EpochLog {
                task,
                epoch,
                steps: per_epoch,
                lr_start,
                lr_end: lr,
                ce: sums.ce / n,
                aux: sums.aux / n,
                ta: sums.ta / n,
                total: sums.total / n,
                buffer_len: self.buffer.len(),
            });
        }
        Ok(())
    }
}

/// Stored `(T/2, T, 2T)` logit sequences of one replayed sample.
pub type MultiResTargets<'a, R> = (&'a Tensor<R>, &'a Tensor<R>, &'a Tensor<R>);

/// `(L_T + alpha1 * L_half + alpha2 * L_double) / (1 + alpha1 + alpha2)`.
///
/// Each term is the mean soft-DTW between columns of the `[T, N, C]` logits
/// `h` and one resolution of the stored sequences. `cols[k]` is the column of
/// replayed sample `k`; the `T/2` and `2T` terms use only the samples listed
/// in `halves`.
#[allow(clippy::too_many_arguments)]
pub fn temporal_alignment<R: Real>(
    g: &mut Graph<'_, R>,
    h: Var,
    cols: &[usize],
    stored: &[MultiResTargets<'_, R>],
    halves: &[usize],
    weights: &StaerWeights,
    sdtw: &SdtwConfig,
    length_normalize: bool,
) -> Result<Var> {
    if cols.len() != stored.len() || halves.iter().any(|&k| k >= cols.len()) {
        return Err(Error::shape(
            "temporal alignment",
            format!("{} columns, {} stored, halves {halves:?}", cols.len(), stored.len()),
        ));
    }
    let fulls: Vec<&Tensor<R>> = stored.iter().map(|s| s.1).collect();
    let mut total = g.soft_dtw(h, cols, &fulls, sdtw, length_normalize)?;
    let half_cols: Vec<usize> = halves.iter().map(|&k| cols[k]).collect();
    for (weight, pick) in [(weights.alpha1, 0usize), (weights.alpha2, 2)] {
        if weight == 0.0 || halves.is_empty() {
            continue;
        }
        let targets: Vec<&Tensor<R>> = halves
            .iter()
            .map(|&k| if pick == 0 { stored[k].0 } else { stored[k].2 })
            .collect();
        let term = g.soft_dtw(h, &half_cols, &targets, sdtw, length_normalize)?;
        let term = g.scale(term, R::lit(weight))?;
        total = g.add(total, term)?;
    }
    g.scale(total, R::lit(1.0 / (1.0 + weights.alpha1 + weights.alpha2)))
}

fn train_forward<'p>(
    model: &'p Backbone<f32>,
    g: &mut Graph<'p, f32>,
    x: &Tensor<f32>,
    steps: usize,
    stats: &mut Vec<(usize, crate::autodiff::BatchStats<f32>)>,
) -> Result<Var> {
    let out = model.forward(g, &static_encode(x, steps)?, Mode::Train)?;
    stats.extend(out.stats);
    Ok(out.logits)
}

/// Accuracy matrices of one run under both evaluation protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub cil: AccuracyMatrix,
    pub til: AccuracyMatrix,
    pub param_checksum: String,
}

/// Train through every task in order, evaluating all seen tasks after each.
/// Joint training instead fits the union of all tasks once and fills only the
/// final row.
pub fn run_task_sequence(
    trainer: &mut Trainer,
    split: &TaskSplit,
    train: &[ImageDataset],
    test: &[ImageDataset],
    log: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutput> {
    let n = split.len();
    if train.len() != n || test.len() != n || n == 0 {
        return Err(Error::Dataset(format!(
            "{n} tasks but {} train and {} test splits",
            train.len(),
            test.len()
        )));
    }
    let mut cil = AccuracyMatrix::new(n);
    let mut til = AccuracyMatrix::new(n);
    let (steps, eb) = (trainer.config.steps, trainer.config.eval_batch_size);
    let mut record = |trainer: &Trainer, k: usize| -> Result<()> {
        cil.set_row(k, &evaluate(&trainer.model, split, test, k, Protocol::Cil, steps, eb)?)?;
        til.set_row(k, &evaluate(&trainer.model, split, test, k, Protocol::Til, steps, eb)?)?;
        Ok(())
    };
    if trainer.config.method == Method::Joint {
        let union = ImageDataset::concat(train)?;
        trainer.train_task(0, &union, log)?;
        record(trainer, n - 1)?;
    } else {
        for (k, data) in train.iter().enumerate() {
            trainer.train_task(k, data, log)?;
            record(trainer, k)?;
        }
    }
    Ok(RunOutput {
        cil,
        til,
        param_checksum: trainer.model.params().checksum(),
    })
}
