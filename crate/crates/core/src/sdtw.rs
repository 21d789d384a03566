//! Soft dynamic time warping between sequences of feature frames.
//!
//! Frame cost is the squared Euclidean distance. The recursion is
//!
//! ```text
//! r[i][j] = d(a_i, b_j) + softmin_g(r[i-1][j], r[i][j-1], r[i-1][j-1])
//! ```
//!
//! with `r[0][0] = 0` and `+inf` on the rest of the border, and the value is
//! `r[Ta][Tb]`. The gradient with respect to `a` comes from the reverse
//! recursion over soft-min weights: `e[i][j] = d r[Ta][Tb] / d r[i][j]`.
//! The second sequence is treated as a constant.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdtwConfig {
    /// Soft-min temperature, > 0.
    pub smoothing: f64,
    /// Optional Sakoe-Chiba band, measured in frames of the longer sequence.
    pub band: Option<usize>,
}

impl Default for SdtwConfig {
    fn default() -> Self {
        Self {
            smoothing: 1.0,
            band: None,
        }
    }
}

impl SdtwConfig {
    pub fn with_smoothing(smoothing: f64) -> Self {
        Self { smoothing, band: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::invalid(
                "sdtw.smoothing",
                format!("{} must be > 0", self.smoothing),
            ));
        }
        if self.band == Some(0) {
            return Err(Error::invalid("sdtw.band", "band width must be >= 1"));
        }
        Ok(())
    }
}

/// `-g * ln(exp(-a/g) + exp(-b/g) + exp(-c/g))`, shifted by the minimum for stability.
pub fn soft_min<R: Real>(a: R, b: R, c: R, smoothing: R) -> R {
    let m = a.min(b).min(c);
    if m == R::infinity() {
        return m;
    }
    let s = (-(a - m) / smoothing).exp() + (-(b - m) / smoothing).exp() + (-(c - m) / smoothing).exp();
    m - smoothing * s.ln()
}

fn check_pair<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::Sdtw(format!(
            "sequences must be [time, features], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ta, tb) = (a.shape()[0], b.shape()[0]);
    if ta == 0 || tb == 0 {
        return Err(Error::Sdtw("empty sequence".into()));
    }
    if a.shape()[1] != b.shape()[1] {
        return Err(Error::Sdtw(format!(
            "feature dimension mismatch: {} vs {}",
            a.shape()[1],
            b.shape()[1]
        )));
    }
    Ok((ta, tb, a.shape()[1]))
}

/// Pairwise squared Euclidean costs, `[Ta, Tb]`.
pub fn cost_matrix<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (ta, tb, c) = check_pair(a, b)?;
    let mut d = Vec::with_capacity(ta * tb);
    for i in 0..ta {
        let ai = &a.data()[i * c..(i + 1) * c];
        for j in 0..tb {
            let bj = &b.data()[j * c..(j + 1) * c];
            d.push(ai.iter().zip(bj).map(|(x, y)| (*x - *y) * (*x - *y)).sum());
        }
    }
    Tensor::new(&[ta, tb], d)
}

fn fingerprint<R: Real>(a: &Tensor<R>, b: &Tensor<R>, cfg: &SdtwConfig) -> u64 {
    let mut h = DefaultHasher::new();
    a.shape().hash(&mut h);
    b.shape().hash(&mut h);
    let mut bytes = Vec::with_capacity((a.numel() + b.numel()) * R::BYTES);
    for v in a.data().iter().chain(b.data()) {
        v.to_le(&mut bytes);
    }
    bytes.hash(&mut h);
    cfg.smoothing.to_bits().hash(&mut h);
    cfg.band.hash(&mut h);
    h.finish()
}

fn in_band(i: usize, j: usize, ta: usize, tb: usize, band: Option<usize>) -> bool {
    match band {
        None => true,
        Some(w) => (i * tb).abs_diff(j * ta) <= w * ta.max(tb),
    }
}

/// Forward DP state, needed by [`sdtw_backward`].
#[derive(Clone, Debug)]
pub struct SdtwTable<R> {
    ta: usize,
    tb: usize,
    /// `r[i][j]` for 1-based `i, j`, stored `[Ta, Tb]`.
    r: Vec<R>,
    d: Vec<R>,
    fingerprint: u64,
}

impl<R: Real> SdtwTable<R> {
    pub fn value(&self) -> R {
        self.r[self.ta * self.tb - 1]
    }

    /// Accumulated costs `r[1..=Ta][1..=Tb]`.
    pub fn accumulated(&self) -> &[R] {
        &self.r
    }

    pub fn costs(&self) -> &[R] {
        &self.d
    }
}

pub fn sdtw_forward<R: Real>(a: &Tensor<R>, b: &Tensor<R>, cfg: &SdtwConfig) -> Result<(R, SdtwTable<R>)> {
    cfg.validate()?;
    let (ta, tb, _) = check_pair(a, b)?;
    let d = cost_matrix(a, b)?.into_data();
    let g = R::lit(cfg.smoothing);
    let inf = R::infinity();
    let mut r = vec![inf; ta * tb];
    for i in 0..ta {
        for j in 0..tb {
            if !in_band(i + 1, j + 1, ta, tb, cfg.band) {
                continue;
            }
            let prev = if i == 0 && j == 0 {
                R::zero()
            } else {
                let up = if i > 0 { r[(i - 1) * tb + j] } else { inf };
                let left = if j > 0 { r[i * tb + j - 1] } else { inf };
                let diag = if i > 0 && j > 0 { r[(i - 1) * tb + j - 1] } else { inf };
                soft_min(up, left, diag, g)
            };
            r[i * tb + j] = d[i * tb + j] + prev;
        }
    }
    let value = r[ta * tb - 1];
    if !value.is_finite() {
        return Err(Error::Sdtw(format!(
            "non-finite value {value} (band {:?} too narrow or inputs non-finite)",
            cfg.band
        )));
    }
    let fp = fingerprint(a, b, cfg);
    Ok((
        value,
        SdtwTable {
            ta,
            tb,
            r,
            d,
            fingerprint: fp,
        },
    ))
}

/// Soft-alignment matrix `e[i][j] = d value / d cost[i][j]`, `[Ta, Tb]`.
pub fn alignment_weights<R: Real>(table: &SdtwTable<R>, smoothing: f64) -> Vec<R> {
    let (ta, tb) = (table.ta, table.tb);
    let g = R::lit(smoothing);
    let (r, d) = (&table.r, &table.d);
    let mut e = vec![R::zero(); ta * tb];
    e[ta * tb - 1] = R::one();
    for i in (0..ta).rev() {
        for j in (0..tb).rev() {
            if i == ta - 1 && j == tb - 1 {
                continue;
            }
            let here = r[i * tb + j];
            if !here.is_finite() {
                continue;
            }
            let mut acc = R::zero();
            for (si, sj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                if si >= ta || sj >= tb {
                    continue;
                }
                let k = si * tb + sj;
                if !r[k].is_finite() || e[k] == R::zero() {
                    continue;
                }
                acc = acc + e[k] * ((r[k] - d[k] - here) / g).exp();
            }
            e[i * tb + j] = acc;
        }
    }
    e
}

/// Gradient of the soft-DTW value with respect to every frame of `a`.
pub fn sdtw_backward<R: Real>(
    table: &SdtwTable<R>,
    a: &Tensor<R>,
    b: &Tensor<R>,
    cfg: &SdtwConfig,
) -> Result<Tensor<R>> {
    let (ta, tb, c) = check_pair(a, b)?;
    if ta != table.ta || tb != table.tb || fingerprint(a, b, cfg) != table.fingerprint {
        return Err(Error::Sdtw(
            "stale table: inputs or config differ from the forward call".into(),
        ));
    }
    let e = alignment_weights(table, cfg.smoothing);
    let two = R::lit(2.0);
    let mut grad = vec![R::zero(); ta * c];
    for i in 0..ta {
        let ai = &a.data()[i * c..(i + 1) * c];
        let gi = &mut grad[i * c..(i + 1) * c];
        for j in 0..tb {
            let w = e[i * tb + j];
            if w == R::zero() {
                continue;
            }
            let bj = &b.data()[j * c..(j + 1) * c];
            for k in 0..c {
                gi[k] = gi[k] + w * two * (ai[k] - bj[k]);
            }
        }
    }
    Tensor::new(&[ta, c], grad)
}

/// Value and gradient with respect to `a` in one call.
pub fn sdtw_value_and_grad<R: Real>(a: &Tensor<R>, b: &Tensor<R>, cfg: &SdtwConfig) -> Result<(R, Tensor<R>)> {
    let (v, table) = sdtw_forward(a, b, cfg)?;
    Ok((v, sdtw_backward(&table, a, b, cfg)?))
}

/// Independent per-pair evaluation over two equally sized batches.
pub fn sdtw_batched<R: Real>(
    a_batch: &[Tensor<R>],
    b_batch: &[Tensor<R>],
    cfg: &SdtwConfig,
) -> Result<Vec<(R, Tensor<R>)>> {
    if a_batch.len() != b_batch.len() {
        return Err(Error::Sdtw(format!(
            "batch size mismatch: {} vs {}",
            a_batch.len(),
            b_batch.len()
        )));
    }
    a_batch
        .iter()
        .zip(b_batch)
        .map(|(a, b)| sdtw_value_and_grad(a, b, cfg))
        .collect()
}
