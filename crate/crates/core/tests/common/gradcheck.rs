//! Central finite differences against independent f64 forward passes.
//!
//! Each case builds `Σ w ⊙ op(inputs)` on the tape with a random constant `w`,
//! takes the analytic gradient, and compares it with `(L(x+h) − L(x−h)) / 2h`
//! where `L` is evaluated by a plain f64 reimplementation of the op.

use grad_transformer::graph::{AttnSegment, Graph, Var};
use grad_transformer::rng::Rng;
use grad_transformer::tensor::Tensor;

pub const H: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Denominator floor so that near-zero gradient entries are compared absolutely.
const FLOOR: f64 = 1e-2;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
    pub reference: Reference,
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub max_grad_err: f64,
    pub max_forward_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_grad_err < REL_TOL && self.max_forward_err < REL_TOL
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Returns (max gradient error, max forward error) for one case.
pub fn check(case: &Case, rng: &mut Rng) -> (f64, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    let out_val = g.value(out).clone();
    let w = rng.gaussian(out_val.shape(), 1.0);
    let w64: Vec<f64> = w.data().iter().map(|&x| x as f64).collect();
    let wv = g.constant(w);
    let prod = g.mul(out, wv).expect("same shape");
    let loss = g.sum(prod);
    g.backward(loss).expect("backward");

    let x64: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&x| x as f64).collect())
        .collect();
    let fwd = (case.reference)(&x64);
    assert_eq!(fwd.len(), out_val.numel(), "reference output size");
    let fwd_err = fwd
        .iter()
        .zip(out_val.data())
        .map(|(&r, &a)| rel(a as f64, r))
        .fold(0.0, f64::max);

    let objective = |x: &[Vec<f64>]| -> f64 {
        (case.reference)(x).iter().zip(&w64).map(|(a, b)| a * b).sum()
    };
    let mut grad_err = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f32> = match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; case.inputs[i].numel()],
        };
        for j in 0..x64[i].len() {
            let mut xp = x64.clone();
            xp[i][j] += H;
            let mut xm = x64.clone();
            xm[i][j] -= H;
            let numeric = (objective(&xp) - objective(&xm)) / (2.0 * H);
            grad_err = grad_err.max(rel(analytic[j] as f64, numeric));
        }
    }
    (grad_err, fwd_err)
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.gaussian(shape, 1.0)
}

/// Normal entries pushed away from zero so relu's kink is never inside ±h.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for x in t.data_mut() {
        if x.abs() < 0.05 {
            *x = if *x < 0.0 { -0.05 - x.abs() } else { 0.05 + x.abs() };
        }
    }
    t
}

/// Rows with variance at least 0.25. Near-constant rows put layer norm in the
/// regime where `var ≈ eps` and the curvature scale drops to about `h`.
fn spread_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    while data.len() < n * d {
        let row: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / d as f32;
        if var >= 0.25 {
            data.extend(row);
        }
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn softmax64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

#[allow(clippy::too_many_arguments)]
fn attention64(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    segs: &[AttnSegment],
    causal: bool,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for s in segs {
        for h in 0..heads {
            for i in 0..s.q_len {
                let qi = (s.q_start + i) * d + h * dh;
                let visible = if causal { i + 1 } else { s.kv_len };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| {
                        let kj = (s.kv_start + j) * d + h * dh;
                        (0..dh).map(|c| q[qi + c] * k[kj + c]).sum::<f64>() * scale
                    })
                    .collect();
                let p = softmax64(&scores);
                for (j, pj) in p.iter().enumerate() {
                    let vj = (s.kv_start + j) * d + h * dh;
                    for c in 0..dh {
                        out[qi + c] += pj * v[vj + c];
                    }
                }
            }
        }
    }
    out
}

/// Random instance generators, one per differentiable op.
pub fn cases(op: &str, rng: &mut Rng) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            Case {
                inputs: vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
                build: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
                reference: Box::new(move |x| matmul64(&x[0], &x[1], m, k, n)),
            }
        }
        "add" | "sub" | "mul" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let op = op.to_string();
            let op2 = op.clone();
            Case {
                inputs: vec![randn(rng, &shape), randn(rng, &shape)],
                build: Box::new(move |g, v| match op.as_str() {
                    "add" => g.add(v[0], v[1]).unwrap(),
                    "sub" => g.sub(v[0], v[1]).unwrap(),
                    _ => g.mul(v[0], v[1]).unwrap(),
                }),
                reference: Box::new(move |x| {
                    x[0].iter()
                        .zip(&x[1])
                        .map(|(a, b)| match op2.as_str() {
                            "add" => a + b,
                            "sub" => a - b,
                            _ => a * b,
                        })
                        .collect()
                }),
            }
        }
        "scale" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let s = rng.normal() as f32;
            Case {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| g.scale(v[0], s)),
                reference: Box::new(move |x| x[0].iter().map(|a| a * s as f64).collect()),
            }
        }
        "add_bias" => {
            let (n, d) = (dims(rng, 1, 4), dims(rng, 1, 5));
            Case {
                inputs: vec![randn(rng, &[n, d]), randn(rng, &[d])],
                build: Box::new(|g, v| g.add_bias(v[0], v[1]).unwrap()),
                reference: Box::new(move |x| (0..n * d).map(|i| x[0][i] + x[1][i % d]).collect()),
            }
        }
        "relu" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            Case {
                inputs: vec![away_from_zero(rng, &shape)],
                build: Box::new(|g, v| g.relu(v[0])),
                reference: Box::new(|x| x[0].iter().map(|a| a.max(0.0)).collect()),
            }
        }
        "gelu" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            Case {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(|g, v| g.gelu(v[0])),
                reference: Box::new(|x| x[0].iter().map(|&a| gelu64(a)).collect()),
            }
        }
        "softmax" => {
            let (n, d) = (dims(rng, 1, 4), dims(rng, 2, 6));
            Case {
                inputs: vec![randn(rng, &[n, d])],
                build: Box::new(|g, v| g.softmax(v[0])),
                reference: Box::new(move |x| x[0].chunks(d).flat_map(softmax64).collect()),
            }
        }
        "layer_norm" => {
            let (n, d) = (dims(rng, 1, 4), dims(rng, 2, 6));
            Case {
                inputs: vec![spread_rows(rng, n, d), randn(rng, &[d]), randn(rng, &[d])],
                build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
                reference: Box::new(move |x| {
                    let mut out = Vec::with_capacity(n * d);
                    for row in x[0].chunks(d) {
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
                        let rs = 1.0 / (var + 1e-5).sqrt();
                        for c in 0..d {
                            out.push((row[c] - mean) * rs * x[1][c] + x[2][c]);
                        }
                    }
                    out
                }),
            }
        }
        "gather_rows" => {
            let (rows, d) = (dims(rng, 2, 6), dims(rng, 1, 4));
            let idx: Vec<usize> = (0..dims(rng, 1, 8)).map(|_| rng.below(rows)).collect();
            let idx2 = idx.clone();
            Case {
                inputs: vec![randn(rng, &[rows, d])],
                build: Box::new(move |g, v| g.embedding(v[0], &idx).unwrap()),
                reference: Box::new(move |x| {
                    idx2.iter().flat_map(|&i| x[0][i * d..(i + 1) * d].to_vec()).collect()
                }),
            }
        }
        "concat_cols" => {
            let n = dims(rng, 1, 4);
            let widths: Vec<usize> = (0..dims(rng, 1, 3)).map(|_| dims(rng, 1, 4)).collect();
            let inputs = widths.iter().map(|&w| randn(rng, &[n, w])).collect();
            Case {
                inputs,
                build: Box::new(|g, v| g.concat_cols(v).unwrap()),
                reference: Box::new(move |x| {
                    let mut out = Vec::new();
                    for r in 0..n {
                        for (p, &w) in x.iter().zip(&widths) {
                            out.extend_from_slice(&p[r * w..(r + 1) * w]);
                        }
                    }
                    out
                }),
            }
        }
        "concat_rows" => {
            let d = dims(rng, 1, 4);
            let inputs = (0..dims(rng, 1, 3))
                .map(|_| {
                    let r = dims(rng, 1, 4);
                    randn(rng, &[r, d])
                })
                .collect();
            Case {
                inputs,
                build: Box::new(|g, v| g.concat_rows(v).unwrap()),
                reference: Box::new(|x| x.concat()),
            }
        }
        "slice_rows" => {
            let (n, d) = (dims(rng, 1, 6), dims(rng, 1, 4));
            let start = rng.below(n);
            let len = dims(rng, 1, n - start);
            Case {
                inputs: vec![randn(rng, &[n, d])],
                build: Box::new(move |g, v| g.slice_rows(v[0], start, len).unwrap()),
                reference: Box::new(move |x| x[0][start * d..(start + len) * d].to_vec()),
            }
        }
        "slice_cols" => {
            let (n, d) = (dims(rng, 1, 4), dims(rng, 1, 6));
            let start = rng.below(d);
            let len = dims(rng, 1, d - start);
            Case {
                inputs: vec![randn(rng, &[n, d])],
                build: Box::new(move |g, v| g.slice_cols(v[0], start, len).unwrap()),
                reference: Box::new(move |x| {
                    (0..n).flat_map(|r| x[0][r * d + start..r * d + start + len].to_vec()).collect()
                }),
            }
        }
        "reshape" => {
            let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
            Case {
                inputs: vec![randn(rng, &[a, b])],
                build: Box::new(move |g, v| {
                    let r = g.reshape(v[0], &[b, a]).unwrap();
                    // A non-elementwise op after the reshape makes the row layout matter.
                    g.softmax(r)
                }),
                reference: Box::new(move |x| x[0].chunks(a).flat_map(softmax64).collect()),
            }
        }
        "attention" | "attention_causal" | "attention_cross" => {
            let heads = dims(rng, 1, 2);
            let d = heads * dims(rng, 1, 3);
            let causal = op == "attention_causal";
            let (n, m, segs) = if op == "attention_cross" {
                let (q1, q2, k1, k2) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
                let segs = vec![
                    AttnSegment { q_start: 0, q_len: q1, kv_start: 0, kv_len: k1 },
                    AttnSegment { q_start: q1, q_len: q2, kv_start: k1, kv_len: k2 },
                ];
                (q1 + q2, k1 + k2, segs)
            } else {
                let (l1, l2) = (dims(rng, 1, 4), dims(rng, 1, 4));
                (l1 + l2, l1 + l2, vec![AttnSegment::square(0, l1), AttnSegment::square(l1, l2)])
            };
            let segs2 = segs.clone();
            Case {
                inputs: vec![randn(rng, &[n, d]), randn(rng, &[m, d]), randn(rng, &[m, d])],
                build: Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads, &segs, causal).unwrap()),
                reference: Box::new(move |x| attention64(&x[0], &x[1], &x[2], n, d, heads, &segs2, causal)),
            }
        }
        "cross_entropy" => {
            let (n, vocab) = (dims(rng, 1, 5), dims(rng, 2, 6));
            let mut targets: Vec<Option<usize>> =
                (0..n).map(|_| (rng.uniform() < 0.7).then(|| rng.below(vocab))).collect();
            if targets.iter().all(Option::is_none) {
                targets[0] = Some(rng.below(vocab));
            }
            let t2 = targets.clone();
            Case {
                inputs: vec![randn(rng, &[n, vocab])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &targets).unwrap()),
                reference: Box::new(move |x| {
                    let count = t2.iter().flatten().count() as f64;
                    let mut total = 0.0;
                    for (r, t) in t2.iter().enumerate() {
                        if let Some(t) = *t {
                            let p = softmax64(&x[0][r * vocab..(r + 1) * vocab]);
                            total -= p[t].ln();
                        }
                    }
                    vec![total / count]
                }),
            }
        }
        "mse" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let truth = randn(rng, &shape);
            let t64: Vec<f64> = truth.data().iter().map(|&x| x as f64).collect();
            Case {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| g.mse(v[0], &truth).unwrap()),
                reference: Box::new(move |x| {
                    let s: f64 = x[0].iter().zip(&t64).map(|(a, b)| (a - b).powi(2)).sum();
                    vec![s / t64.len() as f64]
                }),
            }
        }
        "sum" | "mean" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let is_mean = op == "mean";
            Case {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| if is_mean { g.mean(v[0]) } else { g.sum(v[0]) }),
                reference: Box::new(move |x| {
                    let s: f64 = x[0].iter().sum();
                    vec![if is_mean { s / x[0].len() as f64 } else { s }]
                }),
            }
        }
        "dropout" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let seed = rng.next_u64();
            let p = 0.3f32;
            // Recover the mask the op draws by running it on an all-ones input.
            let mut mg = Graph::new();
            let ones = mg.constant(Tensor::full(&shape, 1.0));
            let masked = mg.dropout(ones, p, &mut Rng::new(seed));
            let mask: Vec<f64> = mg.value(masked).data().iter().map(|&m| m as f64).collect();
            Case {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| g.dropout(v[0], p, &mut Rng::new(seed))),
                reference: Box::new(move |x| x[0].iter().zip(&mask).map(|(a, m)| a * m).collect()),
            }
        }
        other => panic!("no gradcheck case for {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "gather_rows",
    "concat_cols",
    "concat_rows",
    "slice_rows",
    "slice_cols",
    "reshape",
    "attention",
    "attention_causal",
    "attention_cross",
    "cross_entropy",
    "mse",
    "sum",
    "mean",
    "dropout",
];

pub fn check_op(op: &'static str, seed: u64) -> OpReport {
    let mut rng = Rng::new(seed).derive_named(op);
    let mut report = OpReport {
        op,
        max_grad_err: 0.0,
        max_forward_err: 0.0,
    };
    for _ in 0..INSTANCES {
        let case = cases(op, &mut rng);
        let (ge, fe) = check(&case, &mut rng);
        report.max_grad_err = report.max_grad_err.max(ge);
        report.max_forward_err = report.max_forward_err.max(fe);
    }
    report
}

pub fn check_all(seed: u64) -> Vec<OpReport> {
    OPS.iter().map(|op| check_op(op, seed)).collect()
}
