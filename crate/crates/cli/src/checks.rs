//! Numerical self-checks against the independent reference implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use staer_core::autodiff::{AdamConfig, AdamState, Graph};
use staer_core::backbone::{Backbone, BackboneConfig, BackboneKind, Mode};
use staer_core::lif::{lif_step, LifParams, LifState};
use staer_core::metrics::AccuracyMatrix;
use staer_core::replay::{ReplayBuffer, ReplayEntry, StoredLogits};
use staer_core::sdtw::{sdtw_forward, sdtw_value_and_grad, SdtwConfig};
use staer_core::Tensor;
use staer_oracles::{
    central_difference, chi_square_uniform, dtw_bruteforce, family_z_threshold, final_average_accuracy, forgetting,
    lif_scalar, proportion_sigma, relative_error,
};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Vec<f64> {
    (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn tensor(t: usize, c: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[t, c], v.to_vec()).expect("shape matches")
}

/// Soft-DTW gradient against central differences on random pairs.
pub fn sdtw_gradient(pairs: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let (ta, tb, c) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=5),
        );
        let smoothing = [0.1, 1.0, 10.0][i % 3];
        let cfg = SdtwConfig::with_smoothing(smoothing);
        let a = random_seq(&mut rng, ta, c);
        let b = tensor(tb, c, &random_seq(&mut rng, tb, c));
        let (_, grad) = sdtw_value_and_grad(&tensor(ta, c, &a), &b, &cfg).expect("valid inputs");
        let numeric = central_difference(
            |x| sdtw_forward(&tensor(ta, c, x), &b, &cfg).expect("valid inputs").0,
            &a,
            1e-6,
        );
        worst = worst.max(relative_error(&grad.to_f64_vec(), &numeric, 1e-8));
    }
    CheckOutcome {
        name: "soft-DTW gradient vs finite differences",
        passed: worst < 1e-4,
        detail: format!("{pairs} pairs, max relative error {worst:.2e} (< 1e-4)"),
    }
}

/// Soft-DTW at smoothing 1e-6 against exhaustive hard DTW.
pub fn sdtw_hard_limit(trials: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SdtwConfig::with_smoothing(1e-6);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (ta, c) = (rng.random_range(1..=7), rng.random_range(1..=4));
        let tb = rng.random_range(1..=49 / ta).min(7);
        let (a, b) = (random_seq(&mut rng, ta, c), random_seq(&mut rng, tb, c));
        let frames = |v: &[f64]| v.chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let hard = dtw_bruteforce(&frames(&a), &frames(&b));
        let soft = sdtw_forward(&tensor(ta, c, &a), &tensor(tb, c, &b), &cfg)
            .expect("valid inputs")
            .0;
        worst = worst.max((hard - soft).abs());
    }
    CheckOutcome {
        name: "soft-DTW hard limit vs brute-force DTW",
        passed: worst < 1e-4,
        detail: format!("{trials} trials, max |soft - hard| {worst:.2e} (< 1e-4)"),
    }
}

fn neuron_trajectory(params: &LifParams, currents: &[f64]) -> Vec<f64> {
    let mut state = LifState::<f64>::zeros(1, 1);
    currents
        .iter()
        .map(|&i| {
            let input = Tensor::from_f64(&[1, 1], &[i]).expect("scalar");
            let (_, next) = lif_step(&state, &input, params).expect("valid state");
            state = next;
            state.u.data()[0]
        })
        .collect()
}

/// Membrane trajectories bit for bit against the scalar recurrence, plus the worked example.
pub fn lif_bitwise(trajectories: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..trajectories {
        let params = LifParams {
            gamma: rng.random_range(0.05..0.95),
            v_th: rng.random_range(0.2..2.0),
            ..LifParams::default()
        };
        let currents: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..3.0)).collect();
        let got = neuron_trajectory(&params, &currents);
        let want = lif_scalar(params.gamma, params.v_th, &currents, 0.0, 0.0);
        if got.iter().zip(&want.u).any(|(g, w)| g.to_bits() != w.to_bits()) {
            mismatches += 1;
        }
    }
    let example = neuron_trajectory(&LifParams::default(), &[0.6; 4]);
    let u4 = example[3];
    CheckOutcome {
        name: "LIF trajectories vs scalar recurrence",
        passed: mismatches == 0 && (u4 - 0.125).abs() < 1e-12,
        detail: format!("{trajectories} trajectories, {mismatches} mismatches; worked example u4 = {u4}"),
    }
}

/// FAA and forgetting against the reference formulas and two hand-computed matrices.
pub fn metrics(matrices: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..matrices {
        let n = rng.random_range(2..=8);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|k| (0..=k).map(|_| rng.random_range(0.0..=100.0)).collect())
            .collect();
        let m = AccuracyMatrix::from_lower(&rows).expect("lower triangle");
        worst = worst
            .max((m.faa().expect("complete") - final_average_accuracy(&rows)).abs())
            .max((m.frg().expect("complete") - forgetting(&rows)).abs());
    }
    let hand = |rows: &[Vec<f64>]| AccuracyMatrix::from_lower(rows).and_then(|m| m.frg()).ok();
    let a = hand(&[vec![100.0], vec![40.0, 90.0]]);
    let b = hand(&[vec![90.0], vec![80.0, 80.0], vec![70.0, 80.0, 50.0]]);
    CheckOutcome {
        name: "metrics vs reference formulas",
        passed: worst < 1e-9 && a == Some(60.0) && b == Some(10.0),
        detail: format!("{matrices} matrices, max deviation {worst:.1e}; hand examples FRG {a:?} and {b:?}"),
    }
}

/// Monte Carlo retention probability of reservoir sampling.
pub fn reservoir(streams: u64, seed: u64) -> CheckOutcome {
    let mut worst_z = 0.0f64;
    let mut min_p = 1.0f64;
    let mut passed = true;
    for (b, m) in [(1usize, 10usize), (5, 50), (20, 100)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + b as u64);
        let mut counts = vec![0u64; m];
        for _ in 0..streams {
            let mut buf = ReplayBuffer::new(b);
            for i in 0..m {
                let entry = ReplayEntry {
                    x: Vec::new(),
                    y: i,
                    logits: StoredLogits::None,
                    task: 0,
                };
                buf.insert(entry, &mut rng);
            }
            for e in buf.entries() {
                counts[e.y] += 1;
            }
        }
        let p = b as f64 / m as f64;
        let sigma = proportion_sigma(p, streams);
        let limit = family_z_threshold(3.0, m);
        for &c in &counts {
            let z = (c as f64 / streams as f64 - p).abs() / sigma;
            worst_z = worst_z.max(z);
            passed &= z <= limit;
        }
        let (_, pvalue) = chi_square_uniform(&counts);
        min_p = min_p.min(pvalue);
        passed &= pvalue > 1e-3;
    }
    CheckOutcome {
        name: "reservoir retention probability B/M",
        passed,
        detail: format!("{streams} streams per (B, M), max |z| {worst_z:.2}, min chi-square p {min_p:.3}"),
    }
}

/// ResNet19 preset at T=2, batch 4: finite loss, a gradient on every parameter, one Adam step.
pub fn resnet19_smoke(seed: u64) -> CheckOutcome {
    let outcome = |passed, detail| CheckOutcome {
        name: "ResNet19 forward/backward smoke",
        passed,
        detail,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = match Backbone::<f32>::new(BackboneConfig::preset(BackboneKind::Resnet19), [3, 32, 32], 10, seed) {
        Ok(m) => m,
        Err(e) => return outcome(false, e.to_string()),
    };
    let shape = [2, 4, 3, 32, 32];
    let x = Tensor::new(
        &shape,
        (0..shape.iter().product())
            .map(|_| rng.random_range(-1.5f32..2.5))
            .collect(),
    )
    .expect("shape matches");
    let before = model.params().checksum();
    let mut step = || -> staer_core::Result<(f64, usize)> {
        let (value, grads) = {
            let mut g = Graph::new(model.params());
            let out = model.forward(&mut g, &x, Mode::Train)?;
            let avg = g.mean_leading(out.logits)?;
            let loss = g.cross_entropy(avg, &[1, 3, 5, 7])?;
            (g.value(loss).item() as f64, g.backward(loss)?)
        };
        let nonzero = grads.iter().filter(|(_, t)| t.data().iter().any(|&v| v != 0.0)).count();
        let mut adam = AdamState::new(model.params(), AdamConfig::default());
        model.params_mut().accumulate(&grads)?;
        adam.step(model.params_mut(), AdamConfig::default().lr)?;
        Ok((value, nonzero))
    };
    match step() {
        Ok((loss, nonzero)) => {
            let total = model.params().len();
            let moved = model.params().checksum() != before;
            outcome(
                loss.is_finite() && nonzero == total && moved,
                format!("loss {loss:.4}, {nonzero}/{total} parameters with nonzero gradient, updated: {moved}"),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

/// Every check with its default sizes.
pub fn all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        sdtw_gradient(50, seed),
        sdtw_hard_limit(100, seed + 1),
        lif_bitwise(1000, seed + 2),
        metrics(20, seed + 3),
        reservoir(100_000, 42),
        resnet19_smoke(seed + 4),
    ]
}
