use rand::Rng;

use super::*;
use crate::error::Error;
use crate::seed;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn random_tensor(rng: &mut seed::Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn params_for(spec_shapes: &[(String, Vec<usize>)], rng: &mut seed::Rng, scale: f64) -> ParameterVector {
    ParameterVector::flatten(
        spec_shapes
            .iter()
            .map(|(n, s)| (n.clone(), random_tensor(rng, s.clone(), scale)))
            .collect(),
    )
    .unwrap()
}

/// Central differences of a scalar tape function over `count` random coordinates.
fn fd_max_rel_error(
    params: &ParameterVector,
    count: usize,
    eps: f64,
    build: impl Fn(&mut Tape, &ParameterVector) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let analytic = tape.backward(loss).unwrap();
    let eval = |p: &ParameterVector| {
        let mut t = Tape::new();
        let l = build(&mut t, p);
        t.value(l)[0]
    };
    let mut rng = seed::rng(99);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let i = rng.gen_range(0..params.len());
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = eval(&probe);
        probe.values_mut()[i] = orig - eps;
        let down = eval(&probe);
        probe.values_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.values()[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Reduces any node to a scalar through a fixed random linear functional.
fn project(tape: &mut Tape, v: Var, seed_value: u64) -> Var {
    let mut rng = seed::rng(seed_value);
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&mut rng, shape, 1.0);
    let wv = tape.input(&w);
    let m = tape.mul(v, wv).unwrap();
    tape.sum(m)
}

fn linear_spec(input: usize, output: usize) -> ComputationSpec {
    ComputationSpec {
        timesteps: 1,
        features: input,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                name: "fc".into(),
                input,
                output,
            },
        ],
    }
}

#[test]
fn identity_linear_layer_passes_input_through() {
    let spec = linear_spec(2, 2);
    let params = ParameterVector::flatten(vec![
        ("fc.weight".into(), tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])),
        ("fc.bias".into(), tensor(vec![2], vec![0.0, 0.0])),
    ])
    .unwrap();
    let x = tensor(vec![3, 2], vec![0.5, -1.0, 2.0, 3.5, -0.25, 0.0]);
    let mut g = Graph::new(&spec);
    let logits = g.forward(&params, &x).unwrap();
    assert_eq!(logits.shape(), &[3, 2]);
    assert_eq!(logits.data(), x.data());
}

#[test]
fn zero_weights_give_zero_logits() {
    let spec = linear_spec(4, 2);
    let params = ParameterVector::flatten(
        spec.param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s).unwrap()))
            .collect(),
    )
    .unwrap();
    let mut rng = seed::rng(1);
    let x = random_tensor(&mut rng, vec![5, 1, 4], 3.0);
    let logits = Graph::new(&spec).forward(&params, &x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_layer_mlp_matches_hand_arithmetic() {
    let spec = ComputationSpec {
        timesteps: 1,
        features: 3,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "l1".into(), input: 3, output: 2 },
            LayerSpec::Activation { function: Nonlinearity::Tanh },
            LayerSpec::Dense { name: "l2".into(), input: 2, output: 2 },
        ],
    };
    let w1 = [[0.5, -1.0, 0.25], [1.5, 0.0, -0.5]];
    let b1 = [0.1, -0.2];
    let w2 = [[1.0, 2.0], [-1.0, 0.5]];
    let b2 = [0.0, 0.3];
    let params = ParameterVector::flatten(vec![
        ("l1.weight".into(), tensor(vec![2, 3], w1.concat())),
        ("l1.bias".into(), tensor(vec![2], b1.to_vec())),
        ("l2.weight".into(), tensor(vec![2, 2], w2.concat())),
        ("l2.bias".into(), tensor(vec![2], b2.to_vec())),
    ])
    .unwrap();
    let x = [1.0, 2.0, -3.0];
    let logits = Graph::new(&spec)
        .forward(&params, &tensor(vec![1, 3], x.to_vec()))
        .unwrap();
    // hand evaluation
    let h: Vec<f64> = (0..2)
        .map(|o| (b1[o] + (0..3).map(|i| w1[o][i] * x[i]).sum::<f64>()).tanh())
        .collect();
    let expected: Vec<f64> = (0..2)
        .map(|o| b2[o] + (0..2).map(|i| w2[o][i] * h[i]).sum::<f64>())
        .collect();
    for (a, e) in logits.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-14, "{a} vs {e}");
    }
}

#[test]
fn forward_rejects_wrong_input_shape_naming_the_input() {
    let spec = linear_spec(3, 2);
    let mut rng = seed::rng(2);
    let params = params_for(&spec.param_shapes(), &mut rng, 1.0);
    let err = Graph::new(&spec)
        .forward(&params, &tensor(vec![2, 4], vec![0.0; 8]))
        .unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("input")), "{err}");
}

#[test]
fn square_has_derivative_six_at_three() {
    let params = ParameterVector::flatten(vec![
        ("theta".into(), tensor(vec![1], vec![3.0])),
        ("unused".into(), tensor(vec![2], vec![1.0, -1.0])),
    ])
    .unwrap();
    let mut tape = Tape::new();
    let th = tape.param(&params, "theta").unwrap();
    let _unused = tape.param(&params, "unused").unwrap();
    let sq = tape.mul(th, th).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.values(), &[6.0, 0.0, 0.0]);
}

#[test]
fn backward_before_forward_is_a_usage_error() {
    let spec = linear_spec(2, 2);
    let g = Graph::new(&spec);
    let mut tape = Tape::new();
    let dummy = tape.input(&Tensor::scalar(0.0));
    assert!(matches!(g.backward(dummy), Err(Error::Usage(_))));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let spec = ComputationSpec {
        timesteps: 6,
        features: 3,
        layers: vec![
            LayerSpec::Lstm { name: "rnn".into(), input: 3, hidden: 4, bidirectional: false },
            LayerSpec::LstmReadout { hidden: 4, bidirectional: false },
            LayerSpec::Dense { name: "out".into(), input: 4, output: 2 },
        ],
    };
    let mut rng = seed::rng(3);
    let params = params_for(&spec.param_shapes(), &mut rng, 0.5);
    let x = random_tensor(&mut rng, vec![4, 6, 3], 1.0);
    let a = Graph::new(&spec).forward(&params, &x).unwrap();
    let b = Graph::new(&spec).forward(&params, &x).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn small_lstm_matches_finite_differences() {
    for bidirectional in [false, true] {
        let h = 3;
        let out_in = if bidirectional { 2 * h } else { h };
        let spec = ComputationSpec {
            timesteps: 5,
            features: 2,
            layers: vec![
                LayerSpec::Lstm { name: "a".into(), input: 2, hidden: h, bidirectional },
                LayerSpec::Lstm { name: "b".into(), input: out_in, hidden: h, bidirectional },
                LayerSpec::LstmReadout { hidden: h, bidirectional },
                LayerSpec::Dense { name: "out".into(), input: out_in, output: 2 },
            ],
        };
        let mut rng = seed::rng(4);
        let params = params_for(&spec.param_shapes(), &mut rng, 0.6);
        let x = random_tensor(&mut rng, vec![3, 5, 2], 1.0);
        let err = grad_check(
            &spec,
            &params,
            &x,
            &[0, 1, 1],
            &[0.7, 1.9],
            1e-5,
            Coordinates::All,
        )
        .unwrap();
        assert!(err < 1e-4, "bidirectional={bidirectional}: {err}");
    }
}

#[test]
fn grad_check_on_linear_model_is_exact() {
    let spec = linear_spec(5, 2);
    let mut rng = seed::rng(5);
    let params = params_for(&spec.param_shapes(), &mut rng, 0.5);
    let x = random_tensor(&mut rng, vec![6, 5], 1.0);
    // loss is not affine in θ, but logits are; the residual is truncation only
    let err = grad_check(&spec, &params, &x, &[0, 1, 0, 1, 1, 0], &[1.0, 1.0], 1e-5, Coordinates::All)
        .unwrap();
    assert!(err < 1e-8, "{err}");
    assert!(grad_check(&spec, &params, &x, &[0; 6], &[1.0, 1.0], 0.1, Coordinates::All).is_err());
}

#[test]
fn grad_check_on_tanh_mlp() {
    let spec = ComputationSpec {
        timesteps: 4,
        features: 3,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "l1".into(), input: 12, output: 6 },
            LayerSpec::Activation { function: Nonlinearity::Tanh },
            LayerSpec::Dense { name: "l2".into(), input: 6, output: 2 },
        ],
    };
    let mut rng = seed::rng(6);
    let params = params_for(&spec.param_shapes(), &mut rng, 0.5);
    let x = random_tensor(&mut rng, vec![5, 4, 3], 1.0);
    let err = grad_check(&spec, &params, &x, &[1, 0, 0, 1, 0], &[1.0, 3.0], 1e-5, Coordinates::All).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_on_relu_cnn_away_from_kinks() {
    let spec = ComputationSpec {
        timesteps: 8,
        features: 2,
        layers: vec![
            LayerSpec::Conv1d { name: "c1".into(), in_channels: 2, out_channels: 3, kernel: 3 },
            LayerSpec::Activation { function: Nonlinearity::Relu },
            LayerSpec::Conv1d { name: "c2".into(), in_channels: 3, out_channels: 3, kernel: 3 },
            LayerSpec::Activation { function: Nonlinearity::Relu },
            LayerSpec::MeanPoolTime,
            LayerSpec::Dense { name: "out".into(), input: 3, output: 2 },
        ],
    };
    let mut rng = seed::rng(7);
    let params = params_for(&spec.param_shapes(), &mut rng, 0.5);
    let x = loop {
        let x = random_tensor(&mut rng, vec![3, 8, 2], 1.0);
        let mut tape = Tape::new();
        spec.record(&mut tape, &params, &x).unwrap();
        if tape.relu_margin().unwrap() >= 1e-3 {
            break x;
        }
    };
    let err = grad_check(&spec, &params, &x, &[1, 0, 1], &[1.0, 1.0], 1e-5, Coordinates::All).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_kernel_matches_finite_differences() {
    let mut rng = seed::rng(8);
    let eps = 1e-5;

    // dense
    let p = params_for(
        &[("w".into(), vec![4, 5]), ("b".into(), vec![4]), ("x".into(), vec![3, 5])],
        &mut rng,
        1.0,
    );
    let e = fd_max_rel_error(&p, 100, eps, |t, p| {
        let (w, b, x) = (t.param(p, "w").unwrap(), t.param(p, "b").unwrap(), t.param(p, "x").unwrap());
        let y = t.dense(x, w, b).unwrap();
        project(t, y, 1)
    });
    assert!(e < 1e-4, "dense {e}");

    // conv1d
    let p = params_for(
        &[("w".into(), vec![3, 2, 4]), ("b".into(), vec![3]), ("x".into(), vec![2, 6, 4])],
        &mut rng,
        1.0,
    );
    let e = fd_max_rel_error(&p, 100, eps, |t, p| {
        let (w, b, x) = (t.param(p, "w").unwrap(), t.param(p, "b").unwrap(), t.param(p, "x").unwrap());
        let y = t.conv1d(x, w, b).unwrap();
        project(t, y, 2)
    });
    assert!(e < 1e-4, "conv1d {e}");

    // lstm
    let p = params_for(
        &[
            ("wi".into(), vec![12, 2]),
            ("wh".into(), vec![12, 3]),
            ("b".into(), vec![12]),
            ("x".into(), vec![2, 7, 2]),
        ],
        &mut rng,
        0.8,
    );
    let e = fd_max_rel_error(&p, 100, eps, |t, p| {
        let wi = t.param(p, "wi").unwrap();
        let wh = t.param(p, "wh").unwrap();
        let b = t.param(p, "b").unwrap();
        let x = t.param(p, "x").unwrap();
        let y = t.lstm(x, wi, wh, b).unwrap();
        project(t, y, 3)
    });
    assert!(e < 1e-4, "lstm {e}");

    // relu with inputs bounded away from 0
    let vals: Vec<f64> = (0..40)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    let p = ParameterVector::flatten(vec![("x".into(), tensor(vec![8, 5], vals))]).unwrap();
    let e = fd_max_rel_error(&p, 100, eps, |t, p| {
        let x = t.param(p, "x").unwrap();
        let y = t.relu(x);
        project(t, y, 4)
    });
    assert!(e < 1e-4, "relu {e}");

    let p = params_for(&[("x".into(), vec![6, 5])], &mut rng, 2.0);
    for (name, which) in [("tanh", 0), ("sigmoid", 1), ("softmax", 2), ("mean_time", 3), ("reverse", 4)] {
        let e = fd_max_rel_error(&p, 100, eps, |t, p| {
            let x = t.param(p, "x").unwrap();
            let y = match which {
                0 => t.tanh(x),
                1 => t.sigmoid(x),
                2 => t.softmax(x),
                3 => {
                    let r = t.reshape(x, vec![2, 3, 5]).unwrap();
                    t.mean_time(r).unwrap()
                }
                _ => {
                    let r = t.reshape(x, vec![2, 3, 5]).unwrap();
                    t.reverse_time(r).unwrap()
                }
            };
            project(t, y, 5)
        });
        assert!(e < 1e-4, "{name} {e}");
    }

    // weighted cross-entropy
    let p = params_for(&[("z".into(), vec![7, 2])], &mut rng, 3.0);
    let labels = [0, 1, 1, 0, 1, 0, 0];
    let e = fd_max_rel_error(&p, 100, eps, |t, p| {
        let z = t.param(p, "z").unwrap();
        t.weighted_cross_entropy(z, &labels, &[0.6, 2.5]).unwrap()
    });
    assert!(e < 1e-4, "weighted ce {e}");

    // distillation KL
    let teacher = softmax_rows(&random_tensor(&mut rng, vec![7, 2], 2.0), 1.5).unwrap();
    let e = fd_max_rel_error(&p, 100, eps, |t, p| {
        let z = t.param(p, "z").unwrap();
        t.distill_kl(z, teacher.data(), 1.5).unwrap()
    });
    assert!(e < 1e-4, "distill {e}");
}

#[test]
fn unit_weights_reduce_to_plain_cross_entropy_gradient() {
    let mut rng = seed::rng(9);
    let p = params_for(&[("z".into(), vec![5, 2])], &mut rng, 2.0);
    let labels = [1, 0, 0, 1, 1];
    let mut tape = Tape::new();
    let z = tape.param(&p, "z").unwrap();
    let l = tape.weighted_cross_entropy(z, &labels, &[1.0, 1.0]).unwrap();
    let g = tape.backward(l).unwrap();
    // closed form of the unweighted mean CE: (softmax - onehot) / N
    let probs = softmax_rows(&tensor(vec![5, 2], p.values().to_vec()), 1.0).unwrap();
    for (n, &y) in labels.iter().enumerate() {
        for c in 0..2 {
            let expected = (probs.data()[n * 2 + c] - if c == y { 1.0 } else { 0.0 }) / 5.0;
            assert!((g.values()[n * 2 + c] - expected).abs() < 1e-15);
        }
    }
}
