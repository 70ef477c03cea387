//! Random gradcheck instances shared by the integration tests.

#![allow(dead_code)]

use repromia::models::{
    Activation, Classifier, LanguageModel, LmConfig, MlpClassifier, NoiseModel, Parametrized, TinyCausalLm,
    DiffusionConfig, EpsMlpDiffusion,
};
use repromia::tensor::gradcheck;
use repromia::{Graph, Result, Rng, Tensor, Var};

pub type Fx = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: Fx,
}

pub const H: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

/// Deterministic, non-constant weights so the scalar reduction exercises
/// every output component differently.
pub fn wsum(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.37 * i as f64 + 0.4).sin() + 0.3).collect();
    let w = g.constant(Tensor::new(&shape, w)?)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Values in `[-2, 2]` at least `gap` away from every point in `kinks`.
fn avoiding(rng: &mut Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let x = rng.uniform_in(-2.0, 2.0);
        if kinks.iter().all(|k| (x - k).abs() >= gap) {
            v.push(x);
        }
    }
    Tensor::new(shape, v).unwrap()
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4))
}

fn unary(rng: &mut Rng, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![uniform(rng, &[r, c], lo, hi)],
        f: Box::new(move |g, v| {
            let o = op(g, v[0])?;
            wsum(g, o)
        }),
    }
}

fn binary(rng: &mut Rng, b_away: bool, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    let (r, c) = dims(rng);
    let a = uniform(rng, &[r, c], -2.0, 2.0);
    let b = if b_away {
        let t = uniform(rng, &[r, c], 0.5, 2.0);
        let s: Vec<f64> = t.data().iter().map(|x| if rng.below(2) == 0 { *x } else { -x }).collect();
        Tensor::new(&[r, c], s).unwrap()
    } else {
        uniform(rng, &[r, c], -2.0, 2.0)
    };
    Case {
        inputs: vec![a, b],
        f: Box::new(move |g, v| {
            let o = op(g, v[0], v[1])?;
            wsum(g, o)
        }),
    }
}

/// Every differentiable graph op, by name.
pub const OPS: [&str; 38] = [
    "add", "sub", "mul", "div", "scale", "neg", "shift", "matmul", "transpose", "relu", "tanh", "sigmoid",
    "softplus", "exp", "log", "sqrt", "square", "abs", "clamp", "softmax", "log_softmax", "embedding",
    "concat_rows", "concat_cols", "concat_flat", "slice_rows", "slice_cols", "tile_rows", "tile_cols", "reshape",
    "sum", "mean", "sum_rows", "mean_rows", "var_rows", "gather", "causal_mask", "lp_norm",
];

pub fn op_case(name: &str, rng: &mut Rng) -> Case {
    match name {
        "add" => binary(rng, false, Graph::add),
        "sub" => binary(rng, false, Graph::sub),
        "mul" => binary(rng, false, Graph::mul),
        "div" => binary(rng, true, Graph::div),
        "scale" => {
            let c = rng.uniform_in(-3.0, 3.0);
            let (r, k) = dims(rng);
            Case {
                inputs: vec![uniform(rng, &[r, k], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.scale(v[0], c)?;
                    wsum(g, o)
                }),
            }
        }
        "neg" => unary(rng, -2.0, 2.0, Graph::neg),
        "shift" => {
            let c = rng.uniform_in(-3.0, 3.0);
            let (r, k) = dims(rng);
            Case {
                inputs: vec![uniform(rng, &[r, k], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.shift(v[0], c)?;
                    let o = g.square(o)?;
                    wsum(g, o)
                }),
            }
        }
        "matmul" => {
            let (m, k) = dims(rng);
            let n = 1 + rng.below(4);
            Case {
                inputs: vec![uniform(rng, &[m, k], -2.0, 2.0), uniform(rng, &[k, n], -2.0, 2.0)],
                f: Box::new(|g, v| {
                    let o = g.matmul(v[0], v[1])?;
                    wsum(g, o)
                }),
            }
        }
        "transpose" => unary(rng, -2.0, 2.0, Graph::transpose),
        "relu" => {
            let (r, c) = dims(rng);
            Case {
                inputs: vec![avoiding(rng, &[r, c], &[0.0], 0.05)],
                f: Box::new(|g, v| {
                    let o = g.relu(v[0])?;
                    wsum(g, o)
                }),
            }
        }
        "tanh" => unary(rng, -2.0, 2.0, Graph::tanh),
        "sigmoid" => unary(rng, -3.0, 3.0, Graph::sigmoid),
        "softplus" => unary(rng, -3.0, 3.0, Graph::softplus),
        "exp" => unary(rng, -2.0, 2.0, Graph::exp),
        "log" => unary(rng, 0.2, 3.0, Graph::log),
        "sqrt" => unary(rng, 0.2, 3.0, Graph::sqrt),
        "square" => unary(rng, -2.0, 2.0, Graph::square),
        "abs" => {
            let (r, c) = dims(rng);
            Case {
                inputs: vec![avoiding(rng, &[r, c], &[0.0], 0.05)],
                f: Box::new(|g, v| {
                    let o = g.abs(v[0])?;
                    wsum(g, o)
                }),
            }
        }
        "clamp" => {
            let (r, c) = dims(rng);
            Case {
                inputs: vec![avoiding(rng, &[r, c], &[-0.5, 0.5], 0.05)],
                f: Box::new(|g, v| {
                    let o = g.clamp(v[0], -0.5, 0.5)?;
                    wsum(g, o)
                }),
            }
        }
        "softmax" => unary(rng, -3.0, 3.0, Graph::softmax),
        "log_softmax" => unary(rng, -3.0, 3.0, Graph::log_softmax),
        "embedding" => {
            let (vocab, d) = (2 + rng.below(4), 1 + rng.below(4));
            let ids: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(vocab)).collect();
            Case {
                inputs: vec![uniform(rng, &[vocab, d], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.embedding(v[0], &ids)?;
                    let o = g.tanh(o)?;
                    wsum(g, o)
                }),
            }
        }
        "concat_rows" | "concat_cols" => {
            let axis = usize::from(name == "concat_cols");
            let (r, c) = dims(rng);
            let e = 1 + rng.below(3);
            let (s1, s2) = if axis == 0 { ([r, c], [e, c]) } else { ([r, c], [r, e]) };
            Case {
                inputs: vec![uniform(rng, &s1, -2.0, 2.0), uniform(rng, &s2, -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.concat(&[v[0], v[1]], axis)?;
                    let o = g.tanh(o)?;
                    wsum(g, o)
                }),
            }
        }
        "concat_flat" => {
            let (a, b) = dims(rng);
            Case {
                inputs: vec![uniform(rng, &[a], -2.0, 2.0), uniform(rng, &[b], -2.0, 2.0)],
                f: Box::new(|g, v| {
                    let o = g.concat(&[v[0], v[1]], 0)?;
                    let o = g.square(o)?;
                    wsum(g, o)
                }),
            }
        }
        "slice_rows" | "slice_cols" => {
            let axis = usize::from(name == "slice_cols");
            let (r, c) = (2 + rng.below(3), 2 + rng.below(3));
            let n = if axis == 0 { r } else { c };
            let start = rng.below(n);
            let len = 1 + rng.below(n - start);
            Case {
                inputs: vec![uniform(rng, &[r, c], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.slice(v[0], axis, start, len)?;
                    let o = g.square(o)?;
                    wsum(g, o)
                }),
            }
        }
        "tile_rows" => {
            let (n, rows) = dims(rng);
            Case {
                inputs: vec![uniform(rng, &[n], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.tile_rows(v[0], rows)?;
                    let o = g.tanh(o)?;
                    wsum(g, o)
                }),
            }
        }
        "tile_cols" => {
            let (m, cols) = dims(rng);
            Case {
                inputs: vec![uniform(rng, &[m], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.tile_cols(v[0], cols)?;
                    let o = g.tanh(o)?;
                    wsum(g, o)
                }),
            }
        }
        "reshape" => {
            let (r, c) = dims(rng);
            Case {
                inputs: vec![uniform(rng, &[r, c], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.reshape(v[0], &[c, r])?;
                    let o = g.square(o)?;
                    wsum(g, o)
                }),
            }
        }
        "sum" => unary(rng, -2.0, 2.0, |g, a| {
            let s = g.sum(a)?;
            g.square(s)
        }),
        "mean" => unary(rng, -2.0, 2.0, |g, a| {
            let s = g.mean(a)?;
            g.square(s)
        }),
        "sum_rows" => unary(rng, -2.0, 2.0, Graph::sum_rows),
        "mean_rows" => unary(rng, -2.0, 2.0, Graph::mean_rows),
        "var_rows" => unary(rng, -2.0, 2.0, Graph::var_rows),
        "gather" => {
            let (r, c) = dims(rng);
            let idx: Vec<usize> = (0..1 + rng.below(6)).map(|_| rng.below(r * c)).collect();
            Case {
                inputs: vec![uniform(rng, &[r, c], -2.0, 2.0)],
                f: Box::new(move |g, v| {
                    let o = g.gather(v[0], &idx)?;
                    let o = g.tanh(o)?;
                    wsum(g, o)
                }),
            }
        }
        "causal_mask" => {
            let n = 1 + rng.below(4);
            Case {
                inputs: vec![uniform(rng, &[n, n], -2.0, 2.0)],
                f: Box::new(|g, v| {
                    let o = g.causal_mask(v[0])?;
                    let o = g.softmax(o)?;
                    wsum(g, o)
                }),
            }
        }
        "lp_norm" => {
            let p = [1.0, 1.5, 2.0, 3.0][rng.below(4)];
            let (r, c) = dims(rng);
            Case {
                inputs: vec![avoiding(rng, &[r, c], &[0.0], 0.05)],
                f: Box::new(move |g, v| g.lp_norm(v[0], p)),
            }
        }
        other => panic!("unknown op {other}"),
    }
}

pub const FAMILIES: [&str; 3] = ["classifier", "lm", "diffusion"];

/// A small random model of `family` with loss over its parameters and its
/// attack-side input (features, soft prompt or noisy point).
pub fn family_case(family: &str, rng: &mut Rng) -> Result<Case> {
    match family {
        "classifier" => {
            let (d, h, k) = (1 + rng.below(4), 2 + rng.below(5), 2 + rng.below(3));
            let act = if rng.below(2) == 0 { Activation::Tanh } else { Activation::Relu };
            let mut m = MlpClassifier::new(&[d, h, k], act, rng)?;
            for p in m.params_mut() {
                for v in p.data_mut() {
                    *v += rng.uniform_in(-0.3, 0.3);
                }
            }
            let n = 1 + rng.below(4);
            let y: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let mut inputs = m.params().to_vec();
            inputs.push(uniform(rng, &[n, d], -1.5, 1.5));
            let np = m.params().len();
            Ok(Case {
                inputs,
                f: Box::new(move |g, v| {
                    let l = m.logits_var(g, &v[..np], v[np])?;
                    let ls = g.log_softmax(l)?;
                    let idx: Vec<usize> = y.iter().enumerate().map(|(i, c)| i * k + c).collect();
                    let s = g.gather(ls, &idx)?;
                    g.mean(s)
                }),
            })
        }
        "lm" => {
            let cfg = LmConfig {
                vocab_size: 3 + rng.below(4),
                d_model: 4,
                n_heads: 2,
                d_hidden: 6,
                max_len: 6,
            };
            let m = TinyCausalLm::new(cfg.clone(), rng)?;
            let tokens: Vec<usize> = (0..2 + rng.below(4)).map(|_| rng.below(cfg.vocab_size)).collect();
            let l = 1 + rng.below(3);
            let mut inputs = m.params().to_vec();
            inputs.push(Tensor::randn(&[l, cfg.d_model], 0.5, rng));
            let np = m.params().len();
            Ok(Case {
                inputs,
                f: Box::new(move |g, v| {
                    let o = m.logits_var(g, &v[..np], &tokens, Some(v[np]))?;
                    let o = g.log_softmax(o)?;
                    wsum(g, o)
                }),
            })
        }
        "diffusion" => {
            let cfg = DiffusionConfig {
                dim: 1 + rng.below(3),
                hidden: 3 + rng.below(4),
                t_max: 20,
                beta_1: 1e-4,
                beta_t: 0.02,
            };
            let mut m = EpsMlpDiffusion::new(cfg.clone(), rng)?;
            for p in m.params_mut() {
                for v in p.data_mut() {
                    *v += rng.uniform_in(-0.2, 0.2);
                }
            }
            let n = 1 + rng.below(3);
            let t: Vec<usize> = (0..n).map(|_| 1 + rng.below(cfg.t_max)).collect();
            let mut inputs = m.params().to_vec();
            inputs.push(uniform(rng, &[n, cfg.dim], 0.0, 1.0));
            let np = m.params().len();
            Ok(Case {
                inputs,
                f: Box::new(move |g, v| {
                    let o = m.eps_var(g, &v[..np], v[np], &t)?;
                    let o = g.square(o)?;
                    wsum(g, o)
                }),
            })
        }
        other => panic!("unknown family {other}"),
    }
}

/// Failures and worst tolerance ratio over `n` seeded instances.
pub fn check_many(n: usize, seed: u64, mut make: impl FnMut(&mut Rng) -> Result<Case>) -> Result<(usize, f64)> {
    let root = Rng::new(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for i in 0..n {
        let mut rng = root.fork(i as u64);
        let case = make(&mut rng)?;
        let r = gradcheck(&case.inputs, |g, v| (case.f)(g, v), H, ABS_TOL, REL_TOL)?;
        worst = worst.max(r.worst_ratio);
        failures += usize::from(!r.passes());
    }
    Ok((failures, worst))
}
