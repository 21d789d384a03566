//! Property tests for neuron dynamics, soft-DTW, metrics and data encoding.

use proptest::prelude::*;
use staer_core::data::{static_encode, TaskSplit};
use staer_core::lif::{self, lif_step, surrogate, Firing, LifParams, LifState};
use staer_core::metrics::{summarize, AccuracyMatrix};
use staer_core::sdtw::{sdtw_forward, sdtw_value_and_grad, SdtwConfig};
use staer_core::Tensor;
use staer_oracles::{dtw_bruteforce, final_average_accuracy, forgetting, lif_scalar};

fn seq(t: usize, c: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[t, c], v).unwrap()
}

fn frames(t: usize, c: usize, v: &[f64]) -> Vec<Vec<f64>> {
    v.chunks(c).take(t).map(|f| f.to_vec()).collect()
}

prop_compose! {
    fn pair(max_t: usize)(ta in 1..=max_t, tb in 1..=max_t, c in 1usize..=4)
        (a in prop::collection::vec(-2.0..2.0f64, ta * c),
         b in prop::collection::vec(-2.0..2.0f64, tb * c),
         ta in Just(ta), tb in Just(tb), c in Just(c)) -> (usize, usize, usize, Vec<f64>, Vec<f64>) {
        (ta, tb, c, a, b)
    }
}

prop_compose! {
    fn lower_triangle()(n in 1usize..=6)
        (rows in prop::collection::vec(prop::collection::vec(0.0..=100.0f64, 6), n)) -> Vec<Vec<f64>> {
        rows.into_iter().enumerate().map(|(k, r)| r[..=k].to_vec()).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lif_matches_scalar_reference(
        gamma in 0.01..0.99f64,
        v_th in 0.1..3.0f64,
        currents in prop::collection::vec(-2.0..4.0f64, 1..24),
    ) {
        let params = LifParams { gamma, v_th, ..LifParams::default() };
        let want = lif_scalar(gamma, v_th, &currents, 0.0, 0.0);
        let mut state = LifState::<f64>::zeros(1, 1);
        for (t, &i) in currents.iter().enumerate() {
            let (s, next) = lif_step(&state, &Tensor::from_f64(&[1, 1], &[i]).unwrap(), &params).unwrap();
            prop_assert_eq!(next.u.data()[0].to_bits(), want.u[t].to_bits());
            prop_assert_eq!(s.data()[0], want.spikes[t]);
            state = next;
        }
    }

    #[test]
    fn spikes_are_binary_and_reset_is_soft(
        currents in prop::collection::vec(-3.0..5.0f64, 4..40),
    ) {
        let params = LifParams::default();
        let trace = lif::unroll(&currents, currents.len(), &params, Firing::Heaviside, None).unwrap();
        prop_assert!(trace.spikes.iter().all(|&s| s == 0.0 || s == 1.0));
        // Against the trajectory without reset, every emitted spike lowers the
        // later potentials by v_th times the decayed spike count.
        let mut free = 0.0;
        let mut debt = 0.0;
        for (t, &i) in currents.iter().enumerate() {
            free = params.gamma * free + i;
            if t > 0 {
                debt = params.gamma * debt + trace.spikes[t - 1] * params.v_th;
            }
            prop_assert!((trace.u[t] - (free - debt)).abs() < 1e-9);
            if t > 0 && trace.spikes[t - 1] == 1.0 {
                prop_assert!(trace.u[t] < free);
            }
        }
    }

    #[test]
    fn huge_threshold_silences_and_flattens_surrogate(
        currents in prop::collection::vec(-3.0..5.0f64, 1..20),
        scale in 1.0..10.0f64,
    ) {
        let v_th = 1e4 * scale;
        let params = LifParams { v_th, ..LifParams::default() };
        let trace = lif::unroll(&currents, currents.len(), &params, Firing::Heaviside, None).unwrap();
        prop_assert!(trace.spikes.iter().all(|&s| s == 0.0));
        // g(z) ~ 2 / (pi^2 alpha z^2) for large |z|.
        for &u in &trace.u {
            let g = surrogate(u - v_th, params.alpha);
            let bound = 2.0 / (std::f64::consts::PI.powi(2) * params.alpha * (v_th - 10.0).powi(2));
            prop_assert!(g <= bound * 1.001);
        }
    }

    #[test]
    fn sdtw_is_symmetric((ta, tb, c, a, b) in pair(6), gamma in 0.05..5.0f64) {
        let cfg = SdtwConfig::with_smoothing(gamma);
        let ab = sdtw_forward(&seq(ta, c, &a), &seq(tb, c, &b), &cfg).unwrap().0;
        let ba = sdtw_forward(&seq(tb, c, &b), &seq(ta, c, &a), &cfg).unwrap().0;
        prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab.abs()));
    }

    #[test]
    fn sdtw_lower_bounds_dtw((ta, tb, c, a, b) in pair(5), gamma in 0.01..3.0f64) {
        let hard = dtw_bruteforce(&frames(ta, c, &a), &frames(tb, c, &b));
        let soft = sdtw_forward(&seq(ta, c, &a), &seq(tb, c, &b), &SdtwConfig::with_smoothing(gamma)).unwrap().0;
        prop_assert!(soft <= hard + 1e-9);
        prop_assert!(hard - soft <= gamma * 3f64.ln() * (ta + tb) as f64 + 1e-9);
    }

    #[test]
    fn sdtw_hard_limit((ta, tb, c, a, b) in pair(7)) {
        prop_assume!(ta * tb <= 49);
        let hard = dtw_bruteforce(&frames(ta, c, &a), &frames(tb, c, &b));
        let soft = sdtw_forward(&seq(ta, c, &a), &seq(tb, c, &b), &SdtwConfig::with_smoothing(1e-6)).unwrap().0;
        prop_assert!((hard - soft).abs() < 1e-4);
    }

    #[test]
    fn sdtw_gradient_is_translation_equivariant(
        (ta, tb, c, a, b) in pair(6),
        shift in prop::collection::vec(-3.0..3.0f64, 4),
    ) {
        let cfg = SdtwConfig::with_smoothing(1.0);
        let (_, g0) = sdtw_value_and_grad(&seq(ta, c, &a), &seq(tb, c, &b), &cfg).unwrap();
        let moved = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x + shift[i % c]).collect() };
        let (_, g1) = sdtw_value_and_grad(&seq(ta, c, &moved(&a)), &seq(tb, c, &moved(&b)), &cfg).unwrap();
        prop_assert!(g0.max_abs_diff(&g1) < 1e-9);
    }

    #[test]
    fn metrics_match_reference(rows in lower_triangle()) {
        let r = AccuracyMatrix::from_lower(&rows).unwrap();
        prop_assert!((r.faa().unwrap() - final_average_accuracy(&rows)).abs() < 1e-9);
        if rows.len() >= 2 {
            let frg = r.frg().unwrap();
            prop_assert!((frg - forgetting(&rows)).abs() < 1e-9);
            prop_assert!(frg >= 0.0);
            prop_assert!(summarize(&r).unwrap().frg_defined);
        } else {
            prop_assert!(!summarize(&r).unwrap().frg_defined);
        }
    }

    #[test]
    fn faa_is_permutation_equivariant(rows in lower_triangle(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let n = rows.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let last: Vec<f64> = perm.iter().map(|&p| rows[n - 1][p]).collect();
        let mut permuted = rows.clone();
        permuted[n - 1] = last;
        let a = AccuracyMatrix::from_lower(&rows).unwrap().faa().unwrap();
        let b = AccuracyMatrix::from_lower(&permuted).unwrap().faa().unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn static_encoding_commutes_with_concat(
        b1 in 1usize..4, b2 in 1usize..4, steps in 1usize..5, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut make = |b: usize| {
            let v: Vec<f32> = (0..b * 2 * 3).map(|_| rng.random()).collect();
            Tensor::new(&[b, 2, 3], v).unwrap()
        };
        let (x1, x2) = (make(b1), make(b2));
        let joined = Tensor::concat_rows(&[&x1, &x2]).unwrap();
        let whole = static_encode(&joined, steps).unwrap();
        let (e1, e2) = (static_encode(&x1, steps).unwrap(), static_encode(&x2, steps).unwrap());
        for t in 0..steps {
            let row = whole.row(t).unwrap();
            let parts = Tensor::concat_rows(&[&e1.row(t).unwrap(), &e2.row(t).unwrap()]).unwrap();
            prop_assert_eq!(row, parts);
        }
    }

    #[test]
    fn task_splits_partition_classes(tasks in 1usize..=5, seed in proptest::option::of(any::<u64>())) {
        let classes = tasks * 2;
        let split = TaskSplit::standard(classes, tasks, seed).unwrap();
        let mut all: Vec<usize> = split.tasks.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
        for c in 0..classes {
            prop_assert!(split.task_of(c).is_some());
        }
    }
}

#[test]
fn worked_neuron_example() {
    let params = LifParams::default();
    let mut state = LifState::<f64>::zeros(1, 1);
    let mut us = Vec::new();
    for _ in 0..4 {
        let (_, next) = lif_step(&state, &Tensor::from_f64(&[1, 1], &[0.6]).unwrap(), &params).unwrap();
        us.push(next.u.data()[0]);
        state = next;
    }
    let want = lif_scalar(0.5, 1.0, &[0.6; 4], 0.0, 0.0);
    assert_eq!(us, want.u);
    assert!((us[3] - 0.125).abs() < 1e-12);
}

#[test]
fn metric_hand_examples() {
    let r = AccuracyMatrix::from_lower(&[vec![100.0], vec![40.0, 90.0]]).unwrap();
    assert_eq!(r.frg().unwrap(), 60.0);
    let r = AccuracyMatrix::from_lower(&[vec![90.0], vec![80.0, 80.0], vec![70.0, 80.0, 50.0]]).unwrap();
    assert_eq!(r.frg().unwrap(), 10.0);
}
