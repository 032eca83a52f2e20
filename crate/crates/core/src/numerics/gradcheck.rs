//! Central finite-difference checks of the reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst relative error of one op over several random instances.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Compares the gradient of a scalar `loss(inputs)` against central
/// differences in every input element; returns the worst relative error.
pub fn check_inputs<F>(inputs: &[Tensor], loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            xs[i].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&xs)?;
            xs[i].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Same check for every scalar of a parameter store.
pub fn check_params<F>(store: &ParamStore, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads, store.len());
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for (idx, a) in analytic.iter().enumerate() {
        let numel = store.get(idx).value.numel();
        for e in 0..numel {
            let orig = store.get(idx).value.data()[e];
            work.get_mut(idx).value.data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(idx).value.data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(idx).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let exact = a.as_ref().map_or(0.0, |t| t.data()[e]);
            worst = worst.max(relative_error(exact, numeric));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.input(r.clone());
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance of every differentiable op: inputs plus a closure
/// that maps them to a scalar.
fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Builder) {
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let proj = |shape: &[usize], rng: &mut ChaCha8Rng| randn(shape, rng);
    match op {
        "matmul" => {
            let r = proj(&[m, n], rng);
            (
                vec![randn(&[m, k], rng), randn(&[k, n], rng)],
                Box::new(move |g, v| {
                    let o = g.matmul(v[0], v[1])?;
                    project(g, o, &r)
                }),
            )
        }
        "transpose" => {
            let r = proj(&[n, m], rng);
            (
                vec![randn(&[m, n], rng)],
                Box::new(move |g, v| {
                    let o = g.transpose(v[0])?;
                    project(g, o, &r)
                }),
            )
        }
        "add" | "mul" => {
            let r = proj(&[m, n], rng);
            let mul = op == "mul";
            (
                vec![randn(&[m, n], rng), randn(&[m, n], rng)],
                Box::new(move |g, v| {
                    let o = if mul { g.mul(v[0], v[1])? } else { g.add(v[0], v[1])? };
                    project(g, o, &r)
                }),
            )
        }
        "add_row" => {
            let r = proj(&[m, n], rng);
            (
                vec![randn(&[m, n], rng), randn(&[n], rng)],
                Box::new(move |g, v| {
                    let o = g.add_row(v[0], v[1])?;
                    project(g, o, &r)
                }),
            )
        }
        "scale" => {
            let r = proj(&[m, n], rng);
            let s: f64 = rng.sample(StandardNormal);
            (
                vec![randn(&[m, n], rng)],
                Box::new(move |g, v| {
                    let o = g.scale(v[0], s);
                    project(g, o, &r)
                }),
            )
        }
        "linear" => {
            let r = proj(&[m, n], rng);
            (
                vec![randn(&[m, k], rng), randn(&[k, n], rng), randn(&[n], rng)],
                Box::new(move |g, v| {
                    let o = g.linear(v[0], v[1], v[2])?;
                    project(g, o, &r)
                }),
            )
        }
        "embedding" => {
            let rows = m + 1;
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..rows)).collect();
            let r = proj(&[ids.len(), n], rng);
            (
                vec![randn(&[rows, n], rng)],
                Box::new(move |g, v| {
                    let o = g.embedding(v[0], &ids)?;
                    project(g, o, &r)
                }),
            )
        }
        "layer_norm" => {
            let d = n + 1;
            let r = proj(&[m, d], rng);
            (
                vec![randn(&[m, d], rng), randn(&[d], rng), randn(&[d], rng)],
                Box::new(move |g, v| {
                    let o = g.layer_norm(v[0], v[1], v[2])?;
                    project(g, o, &r)
                }),
            )
        }
        "softmax" | "gelu" => {
            let r = proj(&[m, n], rng);
            let soft = op == "softmax";
            (
                vec![randn(&[m, n], rng)],
                Box::new(move |g, v| {
                    let o = if soft { g.softmax(v[0]) } else { g.gelu(v[0]) };
                    project(g, o, &r)
                }),
            )
        }
        "dropout" => {
            let r = proj(&[m, n], rng);
            let seed = rng.gen();
            (
                vec![randn(&[m, n], rng)],
                Box::new(move |g, v| {
                    let mut drng = ChaCha8Rng::seed_from_u64(seed);
                    let o = g.dropout(v[0], 0.3, &mut drng)?;
                    project(g, o, &r)
                }),
            )
        }
        "concat" => {
            let axis = rng.gen_range(0..2);
            let (a, b) = if axis == 0 { ([m, n], [k, n]) } else { ([m, n], [m, k]) };
            let out = if axis == 0 { [m + k, n] } else { [m, n + k] };
            let r = proj(&out, rng);
            (
                vec![randn(&a, rng), randn(&b, rng)],
                Box::new(move |g, v| {
                    let o = g.concat(&[v[0], v[1]], axis)?;
                    project(g, o, &r)
                }),
            )
        }
        "slice" => {
            let axis = rng.gen_range(0..2);
            let len = if axis == 0 { m + 2 } else { n + 2 };
            let start = rng.gen_range(0..len - 1);
            let end = rng.gen_range(start + 1..=len);
            let out = if axis == 0 { [end - start, n] } else { [m, end - start] };
            let shape = if axis == 0 { [m + 2, n] } else { [m, n + 2] };
            let r = proj(&out, rng);
            (
                vec![randn(&shape, rng)],
                Box::new(move |g, v| {
                    let o = g.slice(v[0], axis, start, end)?;
                    project(g, o, &r)
                }),
            )
        }
        "sum" => (vec![randn(&[m, n], rng)], Box::new(|g, v| Ok(g.sum(v[0])))),
        "attention" => {
            let heads = rng.gen_range(1..3);
            let (seq, batch, dh) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..3));
            let shape = [seq * batch, heads * dh];
            let r = proj(&shape, rng);
            (
                vec![randn(&shape, rng), randn(&shape, rng), randn(&shape, rng)],
                Box::new(move |g, v| {
                    let o = g.attention(v[0], v[1], v[2], seq, heads)?;
                    project(g, o, &r)
                }),
            )
        }
        "cross_entropy" => {
            let classes = n + 1;
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            let mut weights: Vec<f64> = (0..m).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            weights[0] = 1.0;
            (
                vec![randn(&[m, classes], rng)],
                Box::new(move |g, v| g.cross_entropy(v[0], &targets, &weights)),
            )
        }
        "bce_with_logits" => {
            let targets: Vec<f64> = (0..m * n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            (
                vec![randn(&[m * n], rng)],
                Box::new(move |g, v| g.bce_with_logits(v[0], &targets)),
            )
        }
        other => panic!("no gradient check for `{other}`"),
    }
}

pub const CHECKED_OPS: [&str; 18] = [
    "matmul",
    "transpose",
    "add",
    "add_row",
    "mul",
    "scale",
    "linear",
    "embedding",
    "layer_norm",
    "softmax",
    "gelu",
    "dropout",
    "concat",
    "slice",
    "sum",
    "attention",
    "cross_entropy",
    "bce_with_logits",
];

/// Checks every op in [`CHECKED_OPS`] on `instances` random inputs each.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    CHECKED_OPS
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32));
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (inputs, build) = op_instance(op, &mut rng);
                worst = worst.max(check_inputs(&inputs, build)?);
            }
            Ok(CheckReport {
                name: op.to_string(),
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for report in check_all_ops(10, 17).unwrap() {
            assert!(report.max_rel_error < 1e-4, "{}: {:e}", report.name, report.max_rel_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // y = x² recorded as x·c with c a detached copy: gradient is off by 2.
        let x = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let err = check_inputs(&[x], |g, v| {
            let c = g.input(g.value(v[0]).clone());
            let y = g.mul(v[0], c)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err > 0.4);
    }
}
