//! Spiking backbones that emit real-valued logits at every time step.
//!
//! Inputs are time-major `[T, B, C, H, W]`. Internally time is merged into
//! the batch axis (`[T * B, ...]`, time outermost) so convolutions and batch
//! norm see an effective batch of `T * B`, and each LIF layer unrolls over the
//! leading `T` blocks. The classification head is a plain linear map, so the
//! output `[T, B, classes]` holds real logits rather than spikes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::lif::LifParams;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    MiniResnet,
    Resnet19,
}

/// Nonlinearity between layers. `Relu` with `T = 1` gives the non-spiking network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neuron {
    #[default]
    Lif,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default)]
    pub neuron: Neuron,
    /// Overrides of the preset widths; `None` keeps the preset.
    #[serde(default)]
    pub stem_channels: Option<usize>,
    #[serde(default)]
    pub stage_blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub stage_widths: Option<Vec<usize>>,
    /// Hidden layer sizes of the MLP.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    /// Whether the stem ends in a spiking layer (otherwise it passes currents on).
    #[serde(default = "yes")]
    pub stem_spiking: bool,
    /// Zero the scale of the last batch norm on every residual main branch.
    #[serde(default)]
    pub zero_init_residual: bool,
}

fn yes() -> bool {
    true
}

impl BackboneConfig {
    pub fn preset(kind: BackboneKind) -> Self {
        Self {
            kind,
            lif: LifParams::default(),
            neuron: Neuron::Lif,
            stem_channels: None,
            stage_blocks: None,
            stage_widths: None,
            hidden: None,
            stem_spiking: true,
            zero_init_residual: false,
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.stem_channels.unwrap_or(match self.kind {
            BackboneKind::Resnet19 => 128,
            _ => 16,
        })
    }

    pub fn stage_blocks(&self) -> Vec<usize> {
        self.stage_blocks.clone().unwrap_or(match self.kind {
            BackboneKind::Resnet19 => vec![3, 3, 2],
            _ => vec![1, 1, 1],
        })
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.stage_widths.clone().unwrap_or(match self.kind {
            BackboneKind::Resnet19 => vec![128, 256, 512],
            _ => vec![16, 32, 64],
        })
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| vec![256, 256])
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        match self.kind {
            BackboneKind::Mlp => {
                if self.hidden().contains(&0) {
                    return Err(Error::invalid("backbone.hidden", "zero-width layer"));
                }
            }
            _ => {
                let (b, w) = (self.stage_blocks(), self.stage_widths());
                if b.is_empty() || b.len() != w.len() || b.contains(&0) || w.contains(&0) {
                    return Err(Error::invalid(
                        "backbone stages",
                        format!("blocks {b:?} vs widths {w:?}"),
                    ));
                }
                if self.stem_channels() == 0 {
                    return Err(Error::invalid("backbone.stem_channels", "must be > 0"));
                }
            }
        }
        Ok(())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    stride: usize,
    pad: usize,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum Layers {
    Mlp { hidden: Vec<Dense> },
    Resnet { stem: ConvBn, blocks: Vec<BasicBlock> },
}

/// Running mean / variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// How batch norm normalizes during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the returned [`Forward::stats`] can update running averages.
    Train,
    /// Running statistics.
    Eval,
}

/// Result of [`Backbone::forward`].
pub struct Forward<R> {
    /// Logits `[T, B, classes]`.
    pub logits: Var,
    /// Batch statistics per batch-norm layer (train mode only).
    pub stats: Vec<(usize, BatchStats<R>)>,
    /// `(main + shortcut, shortcut)` before the activation of every residual block.
    pub residuals: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Backbone<R> {
    config: BackboneConfig,
    input: [usize; 3],
    classes: usize,
    params: ParamStore<R>,
    running: Vec<RunningStats<R>>,
    layers: Layers,
    head: Dense,
}

struct Builder<'a, R> {
    params: &'a mut ParamStore<R>,
    running: &'a mut Vec<RunningStats<R>>,
    rng: ChaCha8Rng,
}

impl<R: Real> Builder<'_, R> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                R::lit(z * std)
            })
            .collect();
        self.params.add(name, Tensor::new(shape, data)?)
    }

    fn batch_norm(&mut self, prefix: &str, channels: usize, zero_scale: bool) -> Result<BatchNorm> {
        let scale = if zero_scale { R::zero() } else { R::one() };
        let gamma = self
            .params
            .add(format!("{prefix}.weight"), Tensor::full(&[channels], scale))?;
        let beta = self.params.add(format!("{prefix}.bias"), Tensor::zeros(&[channels]))?;
        self.running.push(RunningStats {
            mean: vec![R::zero(); channels],
            var: vec![R::one(); channels],
        });
        Ok(BatchNorm {
            gamma,
            beta,
            stats: self.running.len() - 1,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero_scale: bool,
    ) -> Result<ConvBn> {
        let weight = self.kaiming(format!("{prefix}.conv.weight"), &[cout, cin, k, k], cin * k * k)?;
        let bn = self.batch_norm(&format!("{prefix}.bn"), cout, zero_scale)?;
        Ok(ConvBn {
            weight,
            stride,
            pad: k / 2,
            bn,
        })
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, out: usize) -> Result<Dense> {
        let weight = self.kaiming(format!("{prefix}.weight"), &[out, fan_in], fan_in)?;
        let bias = self.params.add(format!("{prefix}.bias"), Tensor::zeros(&[out]))?;
        Ok(Dense { weight, bias })
    }
}

impl<R: Real> Backbone<R> {
    /// Build a network for `[C, H, W]` inputs with weights drawn from `seed`.
    pub fn new(config: BackboneConfig, input: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes == 0 || input.contains(&0) {
            return Err(Error::invalid("backbone input", format!("{input:?} -> {classes}")));
        }
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut b = Builder {
            params: &mut params,
            running: &mut running,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (layers, features) = match config.kind {
            BackboneKind::Mlp => {
                let mut fan_in = input.iter().product();
                let mut hidden = Vec::new();
                for (i, &h) in config.hidden().iter().enumerate() {
                    hidden.push(b.dense(&format!("fc{i}"), fan_in, h)?);
                    fan_in = h;
                }
                (Layers::Mlp { hidden }, fan_in)
            }
            BackboneKind::MiniResnet | BackboneKind::Resnet19 => {
                let stem_c = config.stem_channels();
                let stem = b.conv_bn("stem", input[0], stem_c, 3, 1, false)?;
                let mut blocks = Vec::new();
                let mut cin = stem_c;
                for (s, (&n, &width)) in config
                    .stage_blocks()
                    .iter()
                    .zip(config.stage_widths().iter())
                    .enumerate()
                {
                    for i in 0..n {
                        let stride = if s > 0 && i == 0 { 2 } else { 1 };
                        let p = format!("stage{}.block{i}", s + 1);
                        let conv1 = b.conv_bn(&format!("{p}.conv1"), cin, width, 3, stride, false)?;
                        let conv2 = b.conv_bn(&format!("{p}.conv2"), width, width, 3, 1, config.zero_init_residual)?;
                        let shortcut = if stride != 1 || cin != width {
                            Some(b.conv_bn(&format!("{p}.shortcut"), cin, width, 1, stride, false)?)
                        } else {
                            None
                        };
                        blocks.push(BasicBlock { conv1, conv2, shortcut });
                        cin = width;
                    }
                }
                (Layers::Resnet { stem, blocks }, cin)
            }
        };
        let head = b.dense("head", features, classes)?;
        Ok(Self {
            config,
            input,
            classes,
            params,
            running,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<R>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<R>] {
        &mut self.running
    }

    pub fn head_bias(&self) -> &Tensor<R> {
        self.params.value(self.head.bias)
    }

    /// Fold observed batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats<R>)]) {
        let m = R::lit(BN_MOMENTUM);
        for (idx, s) in stats {
            let r = &mut self.running[*idx];
            let unbias = if s.count > 1 {
                R::from_usize(s.count).unwrap() / R::from_usize(s.count - 1).unwrap()
            } else {
                R::one()
            };
            for c in 0..r.mean.len() {
                r.mean[c] = (R::one() - m) * r.mean[c] + m * s.mean[c];
                r.var[c] = (R::one() - m) * r.var[c] + m * s.var[c] * unbias;
            }
        }
    }

    fn activate(&self, g: &mut Graph<'_, R>, x: Var, steps: usize) -> Result<Var> {
        match self.config.neuron {
            Neuron::Lif => g.lif(x, steps, &self.config.lif),
            Neuron::Relu => g.relu(x),
        }
    }

    fn conv_bn(
        &self,
        g: &mut Graph<'_, R>,
        x: Var,
        layer: &ConvBn,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats<R>)>,
    ) -> Result<Var> {
        let w = g.param(layer.weight);
        let y = g.conv2d(x, w, layer.stride, layer.pad)?;
        let (gamma, beta) = (g.param(layer.bn.gamma), g.param(layer.bn.beta));
        match mode {
            Mode::Train => {
                let (out, s) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                stats.push((layer.bn.stats, s));
                Ok(out)
            }
            Mode::Eval => {
                let r = &self.running[layer.bn.stats];
                g.batch_norm_eval(y, gamma, beta, &r.mean, &r.var, BN_EPS)
            }
        }
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 5 || s[2..] != self.input {
            return Err(Error::shape(
                "backbone forward",
                format!("expected [T, B, {:?}], got {s:?}", self.input),
            ));
        }
        if s[0] < 1 {
            return Err(Error::invalid("time steps", "T must be >= 1"));
        }
        if s[1] < 1 {
            return Err(Error::shape("backbone forward", "empty batch"));
        }
        Ok((s[0], s[1]))
    }

    /// Record the network on `g` for a `[T, B, C, H, W]` input.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, R>, x: &Tensor<R>, mode: Mode) -> Result<Forward<R>> {
        let (steps, batch) = self.check_input(x)?;
        let merged = steps * batch;
        let [c, h, w] = self.input;
        let mut stats = Vec::new();
        let mut residuals = Vec::new();
        let features = match &self.layers {
            Layers::Mlp { hidden } => {
                let mut cur = g.constant(x.clone().reshape(&[merged, c * h * w])?);
                for layer in hidden {
                    let (wv, bv) = (g.param(layer.weight), g.param(layer.bias));
                    let z = g.linear(cur, wv, Some(bv))?;
                    cur = self.activate(g, z, steps)?;
                }
                cur
            }
            Layers::Resnet { stem, blocks } => {
                let input = g.constant(x.clone().reshape(&[merged, c, h, w])?);
                let mut cur = self.conv_bn(g, input, stem, mode, &mut stats)?;
                if self.config.stem_spiking {
                    cur = self.activate(g, cur, steps)?;
                }
                for block in blocks {
                    let a = self.conv_bn(g, cur, &block.conv1, mode, &mut stats)?;
                    let a = self.activate(g, a, steps)?;
                    let main = self.conv_bn(g, a, &block.conv2, mode, &mut stats)?;
                    let shortcut = match &block.shortcut {
                        Some(sc) => self.conv_bn(g, cur, sc, mode, &mut stats)?,
                        None => cur,
                    };
                    let sum = g.add(main, shortcut)?;
                    residuals.push((sum, shortcut));
                    cur = self.activate(g, sum, steps)?;
                }
                g.global_avg_pool(cur)?
            }
        };
        let (wv, bv) = (g.param(self.head.weight), g.param(self.head.bias));
        let logits = g.linear(features, wv, Some(bv))?;
        let logits = g.reshape(logits, &[steps, batch, self.classes])?;
        Ok(Forward {
            logits,
            stats,
            residuals,
        })
    }

    /// Logits `[T, B, classes]` without recording gradients or touching running stats.
    pub fn infer(&self, x: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, x, mode)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Mean over the time axis: `[T, B, C] -> [B, C]`.
pub fn time_average<R: Real>(h: &Tensor<R>) -> Result<Tensor<R>> {
    if h.ndim() != 3 || h.rows() == 0 {
        return Err(Error::shape("time_average", format!("{:?}", h.shape())));
    }
    let (t, rl) = (h.rows(), h.row_len());
    let mut acc = vec![R::zero(); rl];
    for row in h.data().chunks(rl) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a = *a + *v;
        }
    }
    let denom = R::from_usize(t).unwrap();
    acc.iter_mut().for_each(|a| *a = *a / denom);
    Tensor::new(&h.shape()[1..], acc)
}

/// Arg-max class per row of `[B, C]` scores, optionally restricted to `mask`.
/// Ties go to the lowest class index.
pub fn predict<R: Real>(scores: &Tensor<R>, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    if scores.ndim() != 2 {
        return Err(Error::shape("predict", format!("{:?}", scores.shape())));
    }
    let c = scores.shape()[1];
    let all: Vec<usize>;
    let candidates = match mask {
        Some([]) => return Err(Error::invalid("class mask", "empty")),
        Some(m) => {
            if let Some(bad) = m.iter().find(|&&k| k >= c) {
                return Err(Error::invalid("class mask", format!("class {bad} >= {c}")));
            }
            let mut m = m.to_vec();
            m.sort_unstable();
            all = m;
            &all[..]
        }
        None => {
            all = (0..c).collect();
            &all[..]
        }
    };
    Ok(scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = candidates[0];
            for &k in &candidates[1..] {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_rules() {
        let s = Tensor::<f64>::from_f64(&[1, 2], &[0.1, 0.9]).unwrap();
        assert_eq!(predict(&s, None).unwrap(), vec![1]);
        let tie = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert_eq!(predict(&tie, None).unwrap(), vec![0]);
        let mut v = vec![0.0; 10];
        v[7] = 5.0;
        v[1] = 0.2;
        let s = Tensor::<f64>::from_f64(&[1, 10], &v).unwrap();
        assert_eq!(predict(&s, None).unwrap(), vec![7]);
        assert_eq!(predict(&s, Some(&[0, 1])).unwrap(), vec![1]);
        assert!(predict(&s, Some(&[])).is_err());
    }

    #[test]
    fn time_average_cases() {
        let h = Tensor::<f64>::from_f64(&[2, 1, 2], &[1., 3., 3., 1.]).unwrap();
        assert_eq!(time_average(&h).unwrap().to_f64_vec(), vec![2., 2.]);
        let one = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(time_average(&one).unwrap(), one.clone().reshape(&[2, 2]).unwrap());
    }

    #[test]
    fn output_shape_contract() {
        for kind in [BackboneKind::Mlp, BackboneKind::MiniResnet] {
            let net = Backbone::<f32>::new(BackboneConfig::preset(kind), [1, 8, 8], 10, 3).unwrap();
            let x = Tensor::<f32>::full(&[3, 2, 1, 8, 8], 0.5);
            let h = net.infer(&x, Mode::Train).unwrap();
            assert_eq!(h.shape(), &[3, 2, 10]);
            let bad = Tensor::<f32>::zeros(&[3, 2, 1, 8, 7]);
            assert!(net.infer(&bad, Mode::Train).is_err());
        }
    }
}
