//! Analytic vector-Jacobian products against central finite differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use staer_core::autodiff::{Graph, ParamId, ParamStore, Var};
use staer_core::backbone::{Backbone, BackboneConfig, BackboneKind, Mode, Neuron};
use staer_core::lif::{self, Firing, LifParams};
use staer_core::sdtw::{sdtw_forward, sdtw_value_and_grad, SdtwConfig};
use staer_core::{Result, Tensor};
use staer_oracles::{central_difference, conv2d_direct, matmul_direct, relative_error};

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Contract `out` with a fixed random tensor so every output element matters.
fn readout(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Compare every parameter's analytic gradient with central differences.
fn grad_check<F>(params: Vec<(&str, Tensor<f64>)>, f: F) -> f64
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &[ParamId]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params.iter().map(|(n, t)| store.add(*n, t.clone()).unwrap()).collect();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let loss = f(&mut g, &ids).unwrap();
        g.value(loss).item()
    };
    let grads = {
        let mut g = Graph::new(&store);
        let loss = f(&mut g, &ids).unwrap();
        g.backward(loss).unwrap()
    };
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let value = store.value(id).clone();
        let analytic = grads
            .get(id)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        let numeric = central_difference(
            |x| {
                let mut s = store.clone();
                *s.value_mut(id) = Tensor::new(value.shape(), x.to_vec()).unwrap();
                eval(&s)
            },
            value.data(),
            1e-6,
        );
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(
            err < TOL,
            "{}: relative error {err:e}\nanalytic {analytic:?}\nnumeric  {numeric:?}",
            store.get(id).name
        );
        worst = worst.max(err);
    }
    worst
}

#[test]
fn matmul_matches_direct_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(1, 1, 1), (3, 4, 2), (5, 2, 7)] {
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let direct = matmul_direct(a.data(), b.data(), m, k, n);
        assert!(relative_error(&g.value(c).to_f64_vec(), &direct, 1e-12) < 1e-12);
        grad_check(vec![("a", a), ("b", b)], |g, ids| {
            let (a, b) = (g.param(ids[0]), g.param(ids[1]));
            let c = g.matmul(a, b)?;
            readout(g, c, 9)
        });
    }
}

#[test]
fn linear_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[4, 3]);
    let w = random(&mut rng, &[5, 3]);
    let b = random(&mut rng, &[5]);
    grad_check(vec![("x", x), ("w", w), ("b", b)], |g, ids| {
        let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.linear(x, w, Some(b))?;
        readout(g, y, 3)
    });
}

#[test]
fn conv2d_matches_direct_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2)] {
        let xs = [2, 3, 5, 5];
        let ks = [4, 3, k, k];
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &ks);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(vx, vw, stride, pad).unwrap();
        let (direct, shape) = conv2d_direct(x.data(), xs, w.data(), ks, stride, pad);
        assert_eq!(g.shape(y), shape);
        assert!(relative_error(&g.value(y).to_f64_vec(), &direct, 1e-12) < 1e-12);
        grad_check(vec![("x", x), ("w", w)], move |g, ids| {
            let (x, w) = (g.param(ids[0]), g.param(ids[1]));
            let y = g.conv2d(x, w, stride, pad)?;
            readout(g, y, 4)
        });
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for shape in [vec![6, 3], vec![3, 2, 2, 3]] {
        let c = shape[1];
        let x = random(&mut rng, &shape);
        let gamma = random(&mut rng, &[c]);
        let beta = random(&mut rng, &[c]);
        grad_check(
            vec![("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
            |g, ids| {
                let (x, ga, be) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
                readout(g, y, 5)
            },
        );
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        grad_check(vec![("x", x), ("gamma", gamma), ("beta", beta)], move |g, ids| {
            let (x, ga, be) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            let y = g.batch_norm_eval(x, ga, be, &mean, &var, 1e-5)?;
            readout(g, y, 6)
        });
    }
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    grad_check(vec![("a", a.clone()), ("b", b.clone())], |g, ids| {
        let (a, b) = (g.param(ids[0]), g.param(ids[1]));
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let t = g.tanh(m)?;
        let k = g.scale(t, 1.7)?;
        readout(g, k, 7)
    });
    grad_check(vec![("a", a)], |g, ids| {
        let a = g.param(ids[0]);
        let m = g.mean(a)?;
        let sq = g.mul(m, m)?;
        g.sum(sq)
    });
    let seq = random(&mut rng, &[4, 3, 2]);
    grad_check(vec![("seq", seq)], |g, ids| {
        let s = g.param(ids[0]);
        let avg = g.mean_leading(s)?;
        let n = g.narrow(avg, 0, 1, 2)?;
        let r = g.reshape(n, &[4])?;
        readout(g, r, 8)
    });
    let maps = random(&mut rng, &[2, 3, 4, 4]);
    grad_check(vec![("maps", maps)], |g, ids| {
        let m = g.param(ids[0]);
        let p = g.global_avg_pool(m)?;
        readout(g, p, 10)
    });
}

#[test]
fn cross_entropy_and_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&mut rng, &[5, 4]).map(|v| 3.0 * v);
    let target = random(&mut rng, &[5, 4]);
    grad_check(vec![("logits", logits.clone())], |g, ids| {
        let l = g.param(ids[0]);
        g.cross_entropy(l, &[0, 3, 1, 1, 2])
    });
    grad_check(vec![("logits", logits)], move |g, ids| {
        let l = g.param(ids[0]);
        g.mse(l, target.clone())
    });
}

#[test]
fn soft_dtw_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seq = random(&mut rng, &[4, 3, 2]);
    let t1 = random(&mut rng, &[2, 2]);
    let t2 = random(&mut rng, &[8, 2]);
    for normalize in [false, true] {
        let (t1, t2) = (t1.clone(), t2.clone());
        grad_check(vec![("seq", seq.clone())], move |g, ids| {
            let s = g.param(ids[0]);
            g.soft_dtw(s, &[0, 2], &[&t1, &t2], &SdtwConfig::with_smoothing(0.5), normalize)
        });
    }
}

#[test]
fn soft_dtw_direct_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (ta, tb, c, gamma) in [(1, 1, 1, 1.0), (3, 5, 2, 0.1), (6, 4, 3, 10.0), (8, 8, 5, 1.0)] {
        let a = random(&mut rng, &[ta, c]);
        let b = random(&mut rng, &[tb, c]);
        let cfg = SdtwConfig::with_smoothing(gamma);
        let (_, grad) = sdtw_value_and_grad(&a, &b, &cfg).unwrap();
        let numeric = central_difference(
            |x| {
                sdtw_forward(&Tensor::new(&[ta, c], x.to_vec()).unwrap(), &b, &cfg)
                    .unwrap()
                    .0
            },
            a.data(),
            1e-6,
        );
        assert!(relative_error(&grad.to_f64_vec(), &numeric, 1e-8) < TOL);
    }
}

/// BPTT with the smooth firing function, for which the surrogate is the exact derivative.
#[test]
fn lif_bptt_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for detach_reset in [false, true] {
        let params = LifParams {
            detach_reset,
            ..LifParams::default()
        };
        let (steps, width) = (6, 4);
        let currents: Vec<f64> = (0..steps * width).map(|_| rng.random_range(-0.5..2.0)).collect();
        let w: Vec<f64> = (0..steps * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = lif::unroll(&currents, steps, &params, Firing::SmoothArctan, None).unwrap();
        let grads = lif::backward(&trace, &w, &params).unwrap();
        if detach_reset {
            // Detaching is not the derivative of the forward map; only check it differs.
            continue;
        }
        let numeric = central_difference(
            |x| {
                let t = lif::unroll(x, steps, &params, Firing::SmoothArctan, None).unwrap();
                t.spikes.iter().zip(&w).map(|(s, w)| s * w).sum()
            },
            &currents,
            1e-6,
        );
        assert!(relative_error(&grads.currents, &numeric, 1e-8) < TOL);
    }
}

#[test]
fn mlp_end_to_end() {
    // Spiking layers are piecewise constant, so check the non-spiking variant
    // of the same graph for end-to-end wiring.
    let cfg = BackboneConfig {
        neuron: Neuron::Relu,
        hidden: Some(vec![6, 5]),
        ..BackboneConfig::preset(BackboneKind::Mlp)
    };
    let mut model = Backbone::<f64>::new(cfg, [1, 3, 3], 4, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Zero biases put rows with all-dead inputs exactly on the ReLU kink.
    for id in model.params().ids().collect::<Vec<_>>() {
        let shape = model.params().value(id).shape().to_vec();
        *model.params_mut().value_mut(id) = random(&mut rng, &shape);
    }
    let x = random(&mut rng, &[2, 3, 1, 3, 3]);
    let labels = [0, 3, 2];
    fn loss<'p>(m: &'p Backbone<f64>, g: &mut Graph<'p, f64>, x: &Tensor<f64>, labels: &[usize]) -> Var {
        let f = m.forward(g, x, Mode::Eval).unwrap();
        let avg = g.mean_leading(f.logits).unwrap();
        g.cross_entropy(avg, labels).unwrap()
    }
    let eval = |m: &Backbone<f64>| {
        let mut g = Graph::new(m.params());
        let l = loss(m, &mut g, &x, &labels);
        g.value(l).item()
    };
    let grads = {
        let mut g = Graph::new(model.params());
        let l = loss(&model, &mut g, &x, &labels);
        g.backward(l).unwrap()
    };
    for id in model.params().ids() {
        let value = model.params().value(id).clone();
        let analytic = grads.get(id).unwrap().to_f64_vec();
        let numeric = central_difference(
            |v| {
                let mut m = model.clone();
                *m.params_mut().value_mut(id) = Tensor::new(value.shape(), v.to_vec()).unwrap();
                eval(&m)
            },
            value.data(),
            1e-6,
        );
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < TOL, "{}: {err:e}", model.params().get(id).name);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let _ = g.param(id);
    let c = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}
