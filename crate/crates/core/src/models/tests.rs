use super::*;
use crate::rng::{seeded, Rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn small(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        d_z: 8,
        layers: 2,
        heads: 2,
        d_v: 4,
        d_qk: 4,
        m: 3,
        m_ic: 2,
        cnp_encoder_layers: 3,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn all_configs() -> Vec<ModelConfig> {
    vec![
        small(ModelKind::Cnp),
        small(ModelKind::IciclCnp),
        small(ModelKind::PtTnp),
        ModelConfig {
            style: PtStyle::Ist,
            ..small(ModelKind::PtTnp)
        },
        small(ModelKind::IciclTnp),
        ModelConfig {
            variant: IciclVariant::Alt,
            ..small(ModelKind::IciclTnp)
        },
    ]
}

fn dataset(rng: &mut Rng, n: usize, d_x: usize) -> Dataset {
    let x: Vec<f64> = (0..n * d_x).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Dataset::new(Tensor::matrix(n, d_x, x).unwrap(), Tensor::matrix(n, 1, y).unwrap()).unwrap()
}

fn task(rng: &mut Rng, n_c: usize, n_ic: &[usize], n_t: usize) -> Task {
    let target = dataset(rng, n_t, 1);
    Task {
        context: dataset(rng, n_c, 1),
        in_context: n_ic.iter().map(|&n| dataset(rng, n, 1)).collect(),
        target_x: target.x,
        target_y: Some(target.y),
    }
}

fn shuffled(rng: &mut Rng, d: &Dataset) -> Dataset {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(rng);
    d.select(&idx)
}

fn max_diff(a: &GaussianPrediction, b: &GaussianPrediction) -> f64 {
    a.mean.max_abs_diff(&b.mean).max(a.var.max_abs_diff(&b.var))
}

#[test]
fn config_round_trips_through_toml_names() {
    for kind in [
        ModelKind::Cnp,
        ModelKind::IciclCnp,
        ModelKind::PtTnp,
        ModelKind::IciclTnp,
    ] {
        assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
    }
    assert!("tnp".parse::<ModelKind>().is_err());
    let bad = ModelConfig {
        m: 0,
        ..ModelConfig::default()
    };
    assert!(matches!(NeuralProcess::new(bad), Err(Error::Config(_))));
}

#[test]
fn embedding_examples() {
    let model = NeuralProcess::new(ModelConfig {
        layers: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut g = Graph::inference(&model.params);
    let empty = model.embed_context(&mut g, &Dataset::empty(1, 1)).unwrap();
    assert_eq!(g.value(empty).shape(), &[0, 128]);

    let d = Dataset::from_1d(&[0.3, 0.3, -1.0], &[1.0, 1.0, 2.0]).unwrap();
    let z = model.embed_context(&mut g, &d).unwrap();
    assert_eq!(g.value(z).shape(), &[3, 128]);
    assert_eq!(g.value(z).row(0), g.value(z).row(1));
    assert_ne!(g.value(z).row(0), g.value(z).row(2));

    let zt = model
        .embed_targets(&mut g, &Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap())
        .unwrap();
    assert_eq!(g.value(zt).row(0), g.value(zt).row(1));
}

#[test]
fn analytic_count_matches_tape() {
    let mut rng = seeded(1);
    let shapes: [(usize, &[usize], usize); 5] = [
        (5, &[4, 6], 3),
        (0, &[3], 2),
        (7, &[], 4),
        (0, &[], 1),
        (2, &[1, 1, 5], 6),
    ];
    for cfg in all_configs() {
        let model = NeuralProcess::new(cfg.clone()).unwrap();
        for &(n_c, n_ic, n_t) in &shapes {
            let t = task(&mut rng, n_c, n_ic, n_t);
            let mut g = Graph::inference(&model.params);
            model.forward(&mut g, &t).unwrap();
            assert_eq!(
                model.count_flops(&t),
                g.tape.macs(),
                "{:?} {:?} on {n_c}/{n_ic:?}/{n_t}",
                cfg.kind,
                cfg.style
            );
        }
    }
}

#[test]
fn variance_respects_floor_and_outputs_are_finite() {
    let mut rng = seeded(2);
    for cfg in all_configs() {
        let model = NeuralProcess::new(cfg).unwrap();
        for (n_c, n_ic) in [(0, vec![]), (4, vec![]), (0, vec![3]), (6, vec![2, 5])] {
            let p = model.predict(&task(&mut rng, n_c, &n_ic, 5)).unwrap();
            assert!(p.mean.all_finite() && p.var.all_finite());
            assert!(p.var.data().iter().all(|&v| v >= 1e-6));
            assert_eq!(p.mean.shape(), &[5, 1]);
        }
    }
}

#[test]
fn empty_in_context_dataset_is_rejected() {
    let mut rng = seeded(3);
    let mut t = task(&mut rng, 3, &[2], 2);
    t.in_context.push(Dataset::empty(1, 1));
    for cfg in all_configs() {
        let model = NeuralProcess::new(cfg).unwrap();
        assert!(matches!(model.predict(&t), Err(Error::InvalidTask(_))));
    }
}

#[test]
fn context_outputs_matter() {
    let mut rng = seeded(4);
    let t = task(&mut rng, 6, &[4], 5);
    let mut doubled = t.clone();
    doubled.context.y.data_mut().iter_mut().for_each(|y| *y *= 2.0);
    for cfg in all_configs() {
        let model = NeuralProcess::new(cfg).unwrap();
        let diff = max_diff(&model.predict(&t).unwrap(), &model.predict(&doubled).unwrap());
        assert!(diff > 1e-6, "{diff}");
    }
}

#[test]
fn cnp_duplicated_context_and_prior_behaviour() {
    let mut rng = seeded(5);
    let model = NeuralProcess::new(small(ModelKind::Cnp)).unwrap();
    let t = task(&mut rng, 6, &[], 4);
    let mut twice = t.clone();
    twice.context = t.context.concat(&t.context).unwrap();
    assert!(max_diff(&model.predict(&t).unwrap(), &model.predict(&twice).unwrap()) <= 1e-12);

    // Without context each target depends on its own input only.
    let mut prior = t.clone();
    prior.context = Dataset::empty(1, 1);
    prior.target_x = Tensor::matrix(3, 1, vec![0.4, -1.0, 0.4]).unwrap();
    prior.target_y = None;
    let p = model.predict(&prior).unwrap();
    assert_eq!(p.mean.row(0), p.mean.row(2));
    let mut other = prior.clone();
    other.in_context = vec![dataset(&mut rng, 3, 1)];
    assert_eq!(model.predict(&other).unwrap(), p);
}

#[test]
fn icicl_tnp_without_in_context_reduces_to_perceiver() {
    let mut rng = seeded(6);
    let icicl = NeuralProcess::new(small(ModelKind::IciclTnp)).unwrap();
    let mut pt = NeuralProcess::new(ModelConfig {
        seed: 99,
        ..small(ModelKind::PtTnp)
    })
    .unwrap();
    let shared: Vec<(String, Tensor)> = pt
        .params
        .names()
        .iter()
        .map(|name| {
            let id = icicl.params.find(name).expect("shared parameter name");
            (name.clone(), icicl.params.get(id).clone())
        })
        .collect();
    pt.params.load_from(&shared).unwrap();
    for n_c in [0, 5] {
        let t = task(&mut rng, n_c, &[], 4);
        assert_eq!(icicl.predict(&t).unwrap(), pt.predict(&t).unwrap());
    }
}

#[test]
fn icicl_tnp_in_context_pseudo_tokens_get_zero_gradient_without_in_context() {
    let mut rng = seeded(7);
    for variant in [IciclVariant::Main, IciclVariant::Alt] {
        let model = NeuralProcess::new(ModelConfig {
            variant,
            ..small(ModelKind::IciclTnp)
        })
        .unwrap();
        let t = task(&mut rng, 4, &[], 3);
        let mut g = Graph::new(&model.params);
        let p = model.forward(&mut g, &t).unwrap();
        let y = g.constant(t.target_y.clone().unwrap());
        let ll = g.tape.gaussian_log_likelihood(y, p.mean, p.var).unwrap();
        g.tape.backward(ll).unwrap();
        let grads = g.param_grads();
        assert!(grads.iter().all(|t| t.all_finite()));
        let u_ic = model.params.find("u_ic").unwrap();
        assert!(grads[u_ic.index()].data().iter().all(|&v| v == 0.0));
        let u = model.params.find("u").unwrap();
        assert!(grads[u.index()].data().iter().any(|&v| v != 0.0));
    }
}

fn loss_and_grads(model: &NeuralProcess, params: &ParamStore, t: &Task) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new(params);
    let p = model.forward(&mut g, t).unwrap();
    let y = g.constant(t.target_y.clone().unwrap());
    let ll = g.tape.gaussian_log_likelihood(y, p.mean, p.var).unwrap();
    let loss = g.tape.scale(ll, -1.0 / t.n_t() as f64);
    g.tape.backward(loss).unwrap();
    (g.value(loss).item(), g.param_grads())
}

#[test]
fn batched_forward_equals_separate_tasks() {
    let mut rng = seeded(41);
    let tasks = vec![
        task(&mut rng, 4, &[3, 5], 3),
        task(&mut rng, 0, &[2], 2),
        task(&mut rng, 2, &[], 4),
        task(&mut rng, 0, &[], 1),
        task(&mut rng, 5, &[1, 1, 4], 2),
    ];
    for cfg in all_configs() {
        let model = NeuralProcess::new(cfg.clone()).unwrap();
        let mut g = Graph::new(&model.params);
        let batch = model.forward_batch(&mut g, &tasks).unwrap();
        let (mean, var) = (g.value(batch.mean).clone(), g.value(batch.var).clone());
        let mut row = 0;
        for t in &tasks {
            let single = model.predict(t).unwrap();
            for r in 0..t.n_t() {
                for (a, b) in single.mean.row(r).iter().zip(mean.row(row + r)) {
                    assert!((a - b).abs() < 1e-12, "{:?}", cfg.kind);
                }
                for (a, b) in single.var.row(r).iter().zip(var.row(row + r)) {
                    assert!((a - b).abs() < 1e-12, "{:?}", cfg.kind);
                }
            }
            row += t.n_t();
        }

        // Gradients of a summed batch loss add up over tasks.
        let ys: Vec<&Tensor> = tasks.iter().map(|t| t.target_y.as_ref().unwrap()).collect();
        let y = g.constant(Tensor::stack_rows(&ys).unwrap());
        let weights: Vec<f64> = tasks
            .iter()
            .flat_map(|t| std::iter::repeat_n(-1.0 / t.n_t() as f64, t.n_t()))
            .collect();
        let loss = g
            .tape
            .weighted_gaussian_log_likelihood(y, batch.mean, batch.var, &weights)
            .unwrap();
        g.tape.backward(loss).unwrap();
        let batch_grads = g.param_grads();
        let mut summed: Vec<Tensor> = batch_grads.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        for t in &tasks {
            let (l, grads) = loss_and_grads(&model, &model.params, t);
            total += l;
            for (s, g) in summed.iter_mut().zip(&grads) {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        assert!((g.value(loss).item() - total).abs() < 1e-10);
        for (a, b) in batch_grads.iter().zip(&summed) {
            assert!(a.max_abs_diff(b) < 1e-10, "{:?}", cfg.kind);
        }
    }
}

#[test]
fn every_model_gradient_matches_finite_differences() {
    let mut rng = seeded(8);
    let t = task(&mut rng, 3, &[2, 3], 2);
    for cfg in all_configs() {
        let cfg = ModelConfig {
            layers: 1,
            d_z: 4,
            d_v: 2,
            d_qk: 2,
            ..cfg
        };
        let mut model = NeuralProcess::new(cfg.clone()).unwrap();
        // Move biases off zero so no ReLU input sits on its kink.
        for p in model.params.values_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let (_, grads) = loss_and_grads(&model, &model.params, &t);
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        let mut params = model.params.clone();
        for p in 0..params.len() {
            for i in 0..params.values()[p].len() {
                let orig = params.values()[p].data()[i];
                params.values_mut()[p].data_mut()[i] = orig + h;
                let up = loss_and_grads(&model, &params, &t).0;
                params.values_mut()[p].data_mut()[i] = orig - h;
                let down = loss_and_grads(&model, &params, &t).0;
                params.values_mut()[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[p].data()[i];
                // Central differences carry ~1e-11 absolute round-off here.
                let scale = numeric.abs().max(analytic.abs()).max(1e-5);
                worst = worst.max((numeric - analytic).abs() / scale);
            }
        }
        assert!(
            worst <= 1e-5,
            "{:?}/{:?}/{:?}: {worst}",
            cfg.kind,
            cfg.style,
            cfg.variant
        );
    }
}

fn affine_residual(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| ((my + slope * (x - mx)) - y).abs() / y.abs())
        .fold(0.0, f64::max)
}

#[test]
fn flop_counts_scale_as_claimed() {
    let pt = ModelConfig {
        kind: ModelKind::PtTnp,
        ..ModelConfig::default()
    };
    let ncs = [64.0, 128.0, 256.0, 512.0];
    let counts: Vec<f64> = ncs
        .iter()
        .map(|&n| {
            let sizes = TaskSizes {
                n_c: n as usize,
                n_t: 128,
                n_ic: vec![],
            };
            count_flops(&pt, &sizes) as f64
        })
        .collect();
    assert!(affine_residual(&ncs, &counts) <= 1e-9);

    let icicl = ModelConfig::default();
    let nics = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let counts: Vec<f64> = nics
        .iter()
        .map(|&k| {
            let sizes = TaskSizes {
                n_c: 32,
                n_t: 128,
                n_ic: vec![100; k as usize],
            };
            count_flops(&icicl, &sizes) as f64
        })
        .collect();
    // Zero in-context datasets skip the modulation step entirely.
    assert!(affine_residual(&nics[1..], &counts[1..]) <= 1e-9);

    // Second differences of the full-attention count are constant and positive.
    let full: Vec<u64> = [256u64, 512, 768, 1024]
        .iter()
        .map(|&n| full_attention_tnp_flops(&pt, n as usize, 128))
        .collect();
    let d1: Vec<i128> = full.windows(2).map(|w| w[1] as i128 - w[0] as i128).collect();
    let d2: Vec<i128> = d1.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(d2[0] > 0 && d2[0] == d2[1]);
    for n_c in [4 * pt.m, 8 * pt.m, 2048] {
        let sizes = TaskSizes {
            n_c,
            n_t: 128,
            n_ic: vec![],
        };
        assert!(full_attention_tnp_flops(&pt, n_c, 128) > count_flops(&pt, &sizes));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn set_of_sets_invariance(seed in 0u64..100_000, n_c in 0usize..8, n_ic in proptest::collection::vec(1usize..6, 0..4)) {
        let mut rng = seeded(seed);
        let t = task(&mut rng, n_c, &n_ic, 3);
        for cfg in all_configs() {
            let model = NeuralProcess::new(cfg).unwrap();
            let base = model.predict(&t).unwrap();

            let mut a = t.clone();
            a.context = shuffled(&mut rng, &t.context);
            prop_assert!(max_diff(&base, &model.predict(&a).unwrap()) <= 1e-12);

            let mut b = t.clone();
            b.in_context.shuffle(&mut rng);
            prop_assert!(max_diff(&base, &model.predict(&b).unwrap()) <= 1e-12);

            let mut c = t.clone();
            for d in c.in_context.iter_mut() {
                *d = shuffled(&mut rng, d);
            }
            prop_assert!(max_diff(&base, &model.predict(&c).unwrap()) <= 1e-12);
        }
    }
}
