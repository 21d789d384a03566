//! Reference implementations used to check the engine.
//!
//! Everything here is written from the defining formulas with plain loops over
//! `f64` and shares no code with `staer-core`: exhaustive alignment-path
//! search, central finite differences, a scalar neuron simulator, direct
//! metric formulas, direct convolution, and sampling statistics.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Squared Euclidean distance between two frames.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum total frame cost over every monotone alignment path from the
/// first frame pair to the last, found by exhaustive enumeration.
pub fn dtw_bruteforce(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + sq_dist(&a[i], &b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

/// Number of monotone alignment paths between sequences of these lengths.
pub fn alignment_path_count(ta: usize, tb: usize) -> u64 {
    let mut d = vec![vec![0u64; tb]; ta];
    for i in 0..ta {
        for j in 0..tb {
            d[i][j] = if i == 0 || j == 0 {
                1
            } else {
                d[i - 1][j] + d[i][j - 1] + d[i - 1][j - 1]
            };
        }
    }
    d[ta - 1][tb - 1]
}

/// `-gamma * ln(sum(exp(-v / gamma)))` evaluated term by term in extended form.
pub fn soft_min_direct(values: &[f64], gamma: f64) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = values.iter().map(|v| (-(v - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |a|, max |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

/// Trajectory of one leaky integrate-and-fire neuron with soft reset.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronTrace {
    pub u: Vec<f64>,
    pub spikes: Vec<f64>,
}

/// `u[t] = gamma * u[t-1] + I[t] - s[t-1] * v_th`, `s[t] = 1 if u[t] >= v_th`.
pub fn lif_scalar(gamma: f64, v_th: f64, currents: &[f64], u0: f64, s0: f64) -> NeuronTrace {
    let (mut u, mut s) = (u0, s0);
    let mut trace = NeuronTrace {
        u: Vec::with_capacity(currents.len()),
        spikes: Vec::with_capacity(currents.len()),
    };
    for &i in currents {
        u = gamma * u + i - s * v_th;
        s = if u >= v_th { 1.0 } else { 0.0 };
        trace.u.push(u);
        trace.spikes.push(s);
    }
    trace
}

/// Arctan surrogate derivative `(alpha / 2) / (1 + (pi * alpha * z / 2)^2)`.
pub fn arctan_surrogate(z: f64, alpha: f64) -> f64 {
    let q = std::f64::consts::PI * alpha * z / 2.0;
    (alpha / 2.0) / (1.0 + q * q)
}

/// Mean of the last row of a lower-triangular accuracy matrix.
pub fn final_average_accuracy(rows: &[Vec<f64>]) -> f64 {
    let last = rows.last().expect("non-empty matrix");
    last.iter().sum::<f64>() / last.len() as f64
}

/// Average over earlier tasks of (best accuracy ever seen - final accuracy).
pub fn forgetting(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    assert!(n >= 2, "forgetting needs two tasks");
    let mut total = 0.0;
    for task in 0..n - 1 {
        let column: Vec<f64> = rows[task..].iter().map(|r| r[task]).collect();
        let best = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += best - rows[n - 1][task];
    }
    total / (n - 1) as f64
}

/// Direct cross-correlation `[N, Cin, H, W] * [Cout, Cin, kh, kw]` by the definition.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    k: &[f64],
    [cout, _, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * cin + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((o * cin + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((s * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo])
}

/// Row-major `[m, k] x [k, n]`.
pub fn matmul_direct(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Standard deviation of a proportion estimated from `trials` Bernoulli(p) draws.
pub fn proportion_sigma(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Per-test z threshold that keeps the chance of any of `tests` independent
/// two-sided checks failing equal to that of one check at `sigmas` (Sidak).
pub fn family_z_threshold(sigmas: f64, tests: usize) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let family_alpha = 2.0 * (1.0 - std.cdf(sigmas));
    let alpha = 1.0 - (1.0 - family_alpha).powf(1.0 / tests as f64);
    std.inverse_cdf(1.0 - alpha / 2.0)
}

/// Pearson chi-square statistic and its upper-tail p-value against equal expected counts.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}
