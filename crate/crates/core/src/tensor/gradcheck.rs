//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` per
/// input, computed on `Σ w ⊙ f(inputs)` with fixed random weights `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn weighted_loss<F>(g: &mut Graph<f64>, vars: &[Var], f: &F) -> Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, vars)?;
    let shape = g.value(out).shape().to_vec();
    let n = g.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = weighted_loss(&mut g, &vars, f)?;
    Ok(g.value(loss).item())
}

/// Compare backprop gradients of `f` against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad(true)))
        .collect();
    let loss = weighted_loss(&mut g, &vars, &f)?;
    g.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(j).copied().unwrap_or(0.0);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt() + nn.sqrt();
        per_input.push(if denom > 0.0 { diff.sqrt() / denom } else { 0.0 });
    }
    Ok(GradCheck { per_input })
}

/// Worst relative error of one operation over its random cases.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

/// Names of the operations covered by [`check_all_ops`].
pub const CHECKED_OPS: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "add_row",
    "scale",
    "gelu",
    "softmax",
    "layer_norm",
    "causal_attention",
    "gather",
    "cross_entropy",
    "mean_pool",
    "select_rows",
    "sum",
    "reshape",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("valid shape")
}

/// Gradient-check every differentiable operation on `cases` random shapes.
pub fn check_all_ops(cases: usize, h: f64, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for &op in CHECKED_OPS {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let err = check_one(op, &mut rng, h)?.max_rel_error();
            worst = worst.max(err);
        }
        reports.push(OpReport {
            op,
            cases,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

fn check_one(op: &str, rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck> {
    let mut d = || rng.gen_range(1..=4usize);
    let (m, k, n) = (d(), d(), d());
    match op {
        "matmul" => {
            let batched = rng.gen_bool(0.3);
            let a = if batched { vec![2, m, k] } else { vec![m, k] };
            let ins = [rand_tensor(rng, &a), rand_tensor(rng, &[k, n])];
            check_gradients(&ins, h, |g, v| g.matmul(v[0], v[1]))
        }
        "add" | "mul" => {
            let s = [m, n];
            let ins = [rand_tensor(rng, &s), rand_tensor(rng, &s)];
            let is_add = op == "add";
            check_gradients(&ins, h, move |g, v| {
                if is_add {
                    g.add(v[0], v[1])
                } else {
                    g.mul(v[0], v[1])
                }
            })
        }
        "add_row" => {
            let ins = [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])];
            check_gradients(&ins, h, |g, v| g.add_row(v[0], v[1]))
        }
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            let ins = [rand_tensor(rng, &[m, n])];
            check_gradients(&ins, h, move |g, v| Ok(g.scale(v[0], f)))
        }
        "gelu" => {
            let ins = [rand_tensor(rng, &[m, n])];
            check_gradients(&ins, h, |g, v| Ok(g.gelu(v[0])))
        }
        "softmax" => {
            let shape = [m, k, n + 1];
            let axis = rng.gen_range(0..3);
            let ins = [rand_tensor(rng, &shape)];
            check_gradients(&ins, h, move |g, v| g.softmax(v[0], axis))
        }
        "layer_norm" => {
            // Width 2 normalises every row to ±1, leaving a gradient of
            // order eps that finite differences cannot resolve.
            let w = n + 2;
            let ins = [
                rand_tensor(rng, &[m, w]),
                rand_tensor(rng, &[w]),
                rand_tensor(rng, &[w]),
            ];
            check_gradients(&ins, h, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "causal_attention" => {
            let batch = rng.gen_range(1..=2);
            let seq = rng.gen_range(1..=4);
            let heads = rng.gen_range(1..=2);
            let width = heads * rng.gen_range(1..=3);
            let s = [batch * seq, width];
            let ins = [rand_tensor(rng, &s), rand_tensor(rng, &s), rand_tensor(rng, &s)];
            check_gradients(&ins, h, move |g, v| {
                g.causal_attention(v[0], v[1], v[2], batch, seq, heads)
            })
        }
        "gather" => {
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..k)).collect();
            let ins = [rand_tensor(rng, &[k, n])];
            check_gradients(&ins, h, move |g, v| g.gather(v[0], &ids))
        }
        "cross_entropy" => {
            let classes = n + 1;
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            let ins = [rand_tensor(rng, &[m, classes])];
            check_gradients(&ins, h, move |g, v| g.cross_entropy(v[0], &targets))
        }
        "mean_pool" => {
            let ins = [rand_tensor(rng, &[m * k, n])];
            check_gradients(&ins, h, move |g, v| g.mean_pool(v[0], m))
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..m)).collect();
            let ins = [rand_tensor(rng, &[m, n])];
            check_gradients(&ins, h, move |g, v| g.select_rows(v[0], &rows))
        }
        "sum" => {
            let ins = [rand_tensor(rng, &[m, k, n])];
            check_gradients(&ins, h, |g, v| Ok(g.sum(v[0])))
        }
        "reshape" => {
            let ins = [rand_tensor(rng, &[m, k * n])];
            check_gradients(&ins, h, move |g, v| g.reshape(v[0], &[m * k, n]))
        }
        other => Err(crate::error::Error::Input(format!("no gradient check for {other}"))),
    }
}
