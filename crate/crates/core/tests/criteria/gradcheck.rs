//! Analytic gradients against central finite differences.
//!
//! The finite differences are taken on a separate scalar implementation of
//! the forward pass written directly from the layer definitions, so neither
//! side of the comparison shares code with `Network::backward`.

#![allow(dead_code)]

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use forge_core::compute::{
    dropout_seed, loss_and_grad, prng, LambdaRegistry, LayerKind, LayerSpec, Loss, Mode,
    Network, NetworkSpec, NetworkState, Targets, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;
/// Pre-activations closer than this to a ReLU kink make the difference
/// quotient meaningless.
const KINK: f64 = 1e-3;

pub fn lambdas() -> LambdaRegistry {
    let reg = LambdaRegistry::new();
    reg.register_elementwise("softplus", |x| x.exp().ln_1p(), |x| 1.0 / (1.0 + (-x).exp()))
        .unwrap();
    reg.register_elementwise("square", |x| x * x, |x| 2.0 * x).unwrap();
    // Not elementwise: each output mixes in its right neighbour.
    reg.register(
        "mix",
        Some(Arc::new(|x: &[f64]| {
            let w = x.len();
            (0..w).map(|i| x[i] + 0.5 * x[(i + 1) % w]).collect()
        })),
        Some(Arc::new(|x: &[f64], g: &[f64]| {
            let w = x.len();
            (0..w).map(|i| g[i] + 0.5 * g[(i + w - 1) % w]).collect()
        })),
    )
    .unwrap();
    reg
}

// ---- oracle -------------------------------------------------------------

#[derive(Clone)]
struct Params {
    fan_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

struct Oracle<'a> {
    spec: &'a NetworkSpec,
    /// Dropout masks, one per layer, drawn the way the trainer draws them.
    masks: Vec<Option<Vec<f64>>>,
}

impl<'a> Oracle<'a> {
    fn new(spec: &'a NetworkSpec, seed: u64, step: u64, batch: usize) -> Self {
        let mut width = spec.input_width();
        let mut masks = Vec::new();
        for l in &spec.layers {
            match &l.kind {
                LayerKind::Dense { out_units } => {
                    masks.push(None);
                    width = *out_units;
                }
                LayerKind::Dropout { keep_prob } if *keep_prob < 1.0 => {
                    let mut rng = prng(dropout_seed(seed, step, &l.name));
                    let m = (0..batch * width)
                        .map(|_| {
                            if rng.random::<f64>() < *keep_prob {
                                1.0 / keep_prob
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    masks.push(Some(m));
                }
                _ => masks.push(None),
            }
        }
        Oracle { spec, masks }
    }

    /// Row-by-row forward pass. Also returns every ReLU pre-activation.
    fn forward(&self, params: &BTreeMap<String, Params>, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut relu_in = Vec::new();
        let mut rows: Vec<Vec<f64>> = x.to_vec();
        for (li, l) in self.spec.layers.iter().enumerate() {
            for (r, row) in rows.iter_mut().enumerate() {
                *row = match &l.kind {
                    LayerKind::Dense { .. } => {
                        let p = &params[l.param_key().unwrap()];
                        (0..p.fan_out)
                            .map(|j| {
                                let mut s = p.b[j];
                                for (i, xi) in row.iter().enumerate() {
                                    s += xi * p.w[i * p.fan_out + j];
                                }
                                s
                            })
                            .collect()
                    }
                    LayerKind::Relu => {
                        relu_in.extend(row.iter().copied());
                        row.iter().map(|v| v.max(0.0)).collect()
                    }
                    LayerKind::Sigmoid => row.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
                    LayerKind::Tanh => row.iter().map(|v| v.tanh()).collect(),
                    LayerKind::Dropout { .. } => match &self.masks[li] {
                        Some(m) => {
                            let w = row.len();
                            row.iter().enumerate().map(|(i, v)| v * m[r * w + i]).collect()
                        }
                        None => row.clone(),
                    },
                    LayerKind::Lambda { registry_name } => match registry_name.as_str() {
                        "softplus" => row.iter().map(|v| (1.0 + v.exp()).ln()).collect(),
                        "square" => row.iter().map(|v| v * v).collect(),
                        "mix" => {
                            let w = row.len();
                            (0..w).map(|i| row[i] + 0.5 * row[(i + 1) % w]).collect()
                        }
                        other => panic!("oracle has no lambda {other}"),
                    },
                };
            }
        }
        (rows, relu_in)
    }
}

fn oracle_loss(loss: Loss, out: &[Vec<f64>], target: &Target) -> f64 {
    let n = out.len() as f64;
    match (loss, target) {
        (Loss::Mse, Target::Values(t)) => {
            let mut s = 0.0;
            for (o, t) in out.iter().zip(t) {
                for (a, b) in o.iter().zip(t) {
                    s += (a - b) * (a - b);
                }
            }
            s / (2.0 * n)
        }
        (Loss::SoftmaxXent, Target::Classes(c)) => {
            let mut s = 0.0;
            for (o, &k) in out.iter().zip(c) {
                let z: f64 = o.iter().map(|v| v.exp()).sum();
                s += z.ln() - o[k];
            }
            s / n
        }
        _ => unreachable!(),
    }
}

#[derive(Debug, Clone)]
enum Target {
    Values(Vec<Vec<f64>>),
    Classes(Vec<usize>),
}

// ---- generation ---------------------------------------------------------

#[derive(Debug, Clone)]
enum Tok {
    Dense(usize, bool),
    Relu,
    Sigmoid,
    Tanh,
    Dropout(f64),
    Lambda(&'static str),
}

fn tok() -> impl Strategy<Value = Tok> {
    prop_oneof![
        4 => (1usize..=5, any::<bool>()).prop_map(|(n, s)| Tok::Dense(n, s)),
        1 => Just(Tok::Relu),
        1 => Just(Tok::Sigmoid),
        1 => Just(Tok::Tanh),
        1 => (0.5f64..1.0).prop_map(Tok::Dropout),
        1 => prop_oneof![Just("softplus"), Just("square"), Just("mix")].prop_map(Tok::Lambda),
    ]
}

/// Builds a valid spec. A `Dense(_, true)` token reuses the first earlier
/// dense key whose fan-in equals the current width, taking its width too.
fn build_spec(dims: Vec<usize>, toks: &[Tok]) -> NetworkSpec {
    let mut width: usize = dims.iter().product();
    let mut keys: Vec<(String, usize, usize)> = Vec::new();
    let mut layers = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        let name = format!("l{i}");
        let layer = match t {
            Tok::Dense(n, share) => {
                let reuse = share
                    .then(|| keys.iter().find(|(_, fi, _)| *fi == width).cloned())
                    .flatten();
                match reuse {
                    Some((key, _, out)) => {
                        width = out;
                        LayerSpec::dense(name, out).shared(key)
                    }
                    None => {
                        keys.push((name.clone(), width, *n));
                        width = *n;
                        LayerSpec::dense(name, *n)
                    }
                }
            }
            Tok::Relu => LayerSpec::new(name, LayerKind::Relu),
            Tok::Sigmoid => LayerSpec::new(name, LayerKind::Sigmoid),
            Tok::Tanh => LayerSpec::new(name, LayerKind::Tanh),
            Tok::Dropout(k) => LayerSpec::new(name, LayerKind::Dropout { keep_prob: *k }),
            Tok::Lambda(f) => LayerSpec::new(
                name,
                LayerKind::Lambda {
                    registry_name: (*f).to_owned(),
                },
            ),
        };
        layers.push(layer);
    }
    NetworkSpec::new(dims, layers)
}

#[derive(Debug, Clone)]
struct Case {
    spec: NetworkSpec,
    batch: usize,
    seed: u64,
    step: u64,
    xent: bool,
    data_seed: u64,
}

fn case() -> impl Strategy<Value = Case> {
    (
        prop_oneof![
            (1usize..=4).prop_map(|w| vec![w]),
            (1usize..=2, 1usize..=3).prop_map(|(a, b)| vec![a, b]),
        ],
        prop::collection::vec(tok(), 1..=6),
        1usize..=4,
        any::<u64>(),
        0u64..100,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(dims, toks, batch, seed, step, xent, data_seed)| Case {
            spec: build_spec(dims, &toks),
            batch,
            seed,
            step,
            xent,
            data_seed,
        })
}

// ---- check --------------------------------------------------------------

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a) + norm(n)).max(1e-300)
}

/// Returns `None` when a ReLU input sits on the kink.
fn check(c: &Case, lambdas: &LambdaRegistry) -> Option<f64> {
    let net = Network::build(&c.spec, lambdas).expect("generated spec builds");
    let mut state: NetworkState<f64> = net.init(c.seed);
    state.step = c.step;
    let mut rng = prng(c.data_seed);
    for p in state.params.values_mut() {
        for b in p.bias.data_mut() {
            *b = rng.random::<f64>() - 0.5;
        }
    }
    let width = c.spec.input_width();
    let out_w = net.output_width();
    let x: Vec<Vec<f64>> = (0..c.batch)
        .map(|_| (0..width).map(|_| rng.random::<f64>() * 3.0 - 1.5).collect())
        .collect();
    let (loss, target) = if c.xent && out_w >= 2 {
        let cls = (0..c.batch).map(|_| rng.random_range(0..out_w)).collect();
        (Loss::SoftmaxXent, Target::Classes(cls))
    } else {
        let t = (0..c.batch)
            .map(|_| (0..out_w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        (Loss::Mse, Target::Values(t))
    };

    // Analytic side.
    let mut in_dims = vec![c.batch];
    in_dims.extend(&c.spec.input_dims);
    let xt = Tensor::new(in_dims, x.concat()).unwrap();
    let (out, tape) = net.forward(&state, &xt, Mode::Train).unwrap();
    let targets = match &target {
        Target::Values(t) => Targets::Values(Tensor::from_rows(t).unwrap()),
        Target::Classes(c) => Targets::Classes(c.clone()),
    };
    let (lv, lg) = loss_and_grad(loss, &out, &targets).unwrap();
    let grads = net.backward(&state, &tape, &lg).unwrap();

    // Oracle side.
    let oracle = Oracle::new(&c.spec, c.seed, c.step, c.batch);
    let mut params: BTreeMap<String, Params> = state
        .params
        .iter()
        .map(|(k, p)| {
            let d = p.weight.dims();
            (
                k.clone(),
                Params {
                    fan_out: d[1],
                    w: p.weight.data().to_vec(),
                    b: p.bias.data().to_vec(),
                },
            )
        })
        .collect();
    let (o_out, relu_in) = oracle.forward(&params, &x);
    if relu_in.iter().any(|v| v.abs() < KINK) {
        return None;
    }
    for (a, b) in o_out.concat().iter().zip(out.data()) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "forward mismatch {a} vs {b}");
    }
    let o_loss = oracle_loss(loss, &o_out, &target);
    assert!((o_loss - lv).abs() <= 1e-9 * (1.0 + lv.abs()), "loss {o_loss} vs {lv}");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let keys: Vec<String> = params.keys().cloned().collect();
    for k in &keys {
        let g = &grads.params[k];
        analytic.extend(g.weight.data());
        analytic.extend(g.bias.data());
        let (nw, nb) = (params[k].w.len(), params[k].b.len());
        for i in 0..nw + nb {
            let mut eval = |delta: f64| {
                let p = params.get_mut(k).unwrap();
                let slot = if i < nw { &mut p.w[i] } else { &mut p.b[i - nw] };
                let orig = *slot;
                *slot = orig + delta;
                let l = oracle_loss(loss, &oracle.forward(&params, &x).0, &target);
                let p = params.get_mut(k).unwrap();
                let slot = if i < nw { &mut p.w[i] } else { &mut p.b[i - nw] };
                *slot = orig;
                l
            };
            numeric.push((eval(H) - eval(-H)) / (2.0 * H));
        }
    }
    analytic.extend(grads.input.data());
    for r in 0..c.batch {
        for i in 0..width {
            let mut xp = x.clone();
            xp[r][i] += H;
            let lp = oracle_loss(loss, &oracle.forward(&params, &xp).0, &target);
            xp[r][i] -= 2.0 * H;
            let lm = oracle_loss(loss, &oracle.forward(&params, &xp).0, &target);
            numeric.push((lp - lm) / (2.0 * H));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    Some(rel_err(&analytic, &numeric))
}

pub fn analytic_gradients_match_finite_differences() -> String {
    let reg = lambdas();
    let started = Instant::now();
    let checked = Cell::new(0usize);
    let worst = Cell::new(0.0f64);
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 400,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&case(), |c| {
            if let Some(err) = check(&c, &reg) {
                checked.set(checked.get() + 1);
                worst.set(worst.get().max(err));
                prop_assert!(err < TOL, "rel err {err:e} for {:?}", c.spec);
            }
            Ok(())
        })
        .unwrap();
    let elapsed = started.elapsed();
    let (checked, worst) = (checked.get(), worst.get());
    assert!(checked >= 200, "only {checked} pairs were checkable");
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}");
    format!("{checked} pairs, worst rel err {worst:.1e}, {elapsed:.1?}")
}

pub fn shared_dense_sums_site_gradients() {
    // Two sites of one 2x2 layer: the shared gradient must equal the sum
    // of the gradients the same network gets with the sites untied.
    let reg = lambdas();
    let tied = NetworkSpec::new(
        vec![2],
        vec![
            LayerSpec::dense("a", 2),
            LayerSpec::new("t", LayerKind::Tanh),
            LayerSpec::dense("b", 2).shared("a"),
        ],
    );
    let untied = NetworkSpec::new(
        vec![2],
        vec![
            LayerSpec::dense("a", 2),
            LayerSpec::new("t", LayerKind::Tanh),
            LayerSpec::dense("b", 2),
        ],
    );
    let tn = Network::build(&tied, &reg).unwrap();
    let un = Network::build(&untied, &reg).unwrap();
    let ts: NetworkState<f64> = tn.init(7);
    let mut us: NetworkState<f64> = un.init(7);
    let a = ts.params["a"].clone();
    us.params.insert("a".into(), a.clone());
    us.params.insert("b".into(), a);
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap();
    let t = Targets::Values(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let run = |net: &Network, s: &NetworkState<f64>| {
        let (o, tape) = net.forward(s, &x, Mode::Eval).unwrap();
        let (_, g) = loss_and_grad(Loss::Mse, &o, &t).unwrap();
        net.backward(s, &tape, &g).unwrap()
    };
    let tg = run(&tn, &ts);
    let ug = run(&un, &us);
    assert_eq!(tg.params.len(), 1);
    for (i, v) in tg.params["a"].weight.data().iter().enumerate() {
        let sum = ug.params["a"].weight.data()[i] + ug.params["b"].weight.data()[i];
        assert!((v - sum).abs() < 1e-12);
    }
}
