//! Seeded finite-difference checks of every differentiable primitive.

use super::{grad_check, Graph, RngState, Tensor, Var};
use crate::error::Result;

/// Worst relative error of one primitive over its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

pub const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "div", "minimum", "maximum", "add_row", "sub_row", "scale", "mul_rows", "relu", "sigmoid",
    "sqrt", "abs", "matmul", "matmul_nt", "transpose", "layer_norm", "softmax", "gumbel_softmax", "concat_rows",
    "concat_cols", "slice_rows", "slice_cols", "reshape", "sum", "mean", "sum_rows", "l1_distance", "attention",
    "conv2d",
];

fn normal(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

fn positive(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.range(0.5, 2.0)).collect())
}

/// `sum(out * r)` with a fixed random `r`, so every output coordinate counts.
fn project(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let p = g.mul(out, rv);
    g.sum(p)
}

fn split_flat(g: &mut Graph, x: Var, shapes: &[&[usize]]) -> Vec<Var> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let piece = g.slice_cols(x, at, at + n);
            at += n;
            g.reshape(piece, s)
        })
        .collect()
}

/// Runs one trial of `name`; returns the relative error.
fn trial(name: &str, rng: &mut RngState, eps: f64) -> Result<f64> {
    let r = 2 + rng.below(3);
    let c = 2 + rng.below(4);
    let proj_rc = normal(rng, &[r, c]);
    let noise_seed = rng.below(1 << 30) as u64;

    macro_rules! check {
        ($x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let x = $x;
            let out = grad_check(|$g: &mut Graph, $v: Var| $body, &x, eps)?;
            Ok(out.max_rel_err)
        }};
    }
    macro_rules! binary {
        ($x:expr, $op:ident) => {
            check!($x, |g, x| {
                let a = g.slice_rows(x, 0, r);
                let b = g.slice_rows(x, r, 2 * r);
                let o = g.$op(a, b);
                project(g, o, &proj_rc)
            })
        };
    }
    macro_rules! unary {
        ($x:expr, $op:ident) => {
            check!($x, |g, x| {
                let o = g.$op(x);
                project(g, o, &proj_rc)
            })
        };
    }

    match name {
        "add" => binary!(normal(rng, &[2 * r, c]), add),
        "sub" => binary!(normal(rng, &[2 * r, c]), sub),
        "mul" => binary!(normal(rng, &[2 * r, c]), mul),
        "minimum" => binary!(normal(rng, &[2 * r, c]), minimum),
        "maximum" => binary!(normal(rng, &[2 * r, c]), maximum),
        "div" => {
            let mut x = normal(rng, &[2 * r, c]);
            let d = positive(rng, &[r, c]);
            x.data_mut()[r * c..].copy_from_slice(d.data());
            binary!(x, div)
        }
        "l1_distance" => check!(normal(rng, &[2 * r, c]), |g, x| {
            let a = g.slice_rows(x, 0, r);
            let b = g.slice_rows(x, r, 2 * r);
            g.l1_distance(a, b)
        }),
        "add_row" | "sub_row" => check!(normal(rng, &[r + 1, c]), |g, x| {
            let a = g.slice_rows(x, 0, r);
            let b = g.slice_rows(x, r, r + 1);
            let b = g.reshape(b, &[c]);
            let o = if name == "add_row" { g.add_row(a, b) } else { g.sub_row(a, b) };
            project(g, o, &proj_rc)
        }),
        "scale" => {
            let k = rng.range(-2.0, 2.0);
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.scale(x, k);
                project(g, o, &proj_rc)
            })
        }
        "mul_rows" => {
            let f: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.mul_rows(x, &f);
                project(g, o, &proj_rc)
            })
        }
        "relu" => unary!(normal(rng, &[r, c]), relu),
        "sigmoid" => unary!(normal(rng, &[r, c]).map(|v| 3.0 * v), sigmoid),
        "sqrt" => unary!(positive(rng, &[r, c]), sqrt),
        "abs" => unary!(normal(rng, &[r, c]), abs),
        "softmax" => unary!(normal(rng, &[r, c]), softmax),
        "gumbel_softmax" => {
            let tau = rng.range(0.5, 2.0);
            check!(normal(rng, &[r, c]), |g, x| {
                let mut noise = RngState::new(noise_seed);
                let o = g.gumbel_softmax(x, tau, false, &mut noise).expect("tau > 0");
                project(g, o, &proj_rc)
            })
        }
        "transpose" => {
            let p = normal(rng, &[c, r]);
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.transpose(x);
                project(g, o, &p)
            })
        }
        "matmul" | "matmul_nt" => {
            let (m, k, n) = (r, c, 2 + rng.below(3));
            let p = normal(rng, &[m, n]);
            let b_shape = if name == "matmul" { [k, n] } else { [n, k] };
            check!(normal(rng, &[1, m * k + k * n]), |g, x| {
                let v = split_flat(g, x, &[&[m, k], &b_shape]);
                let o = if name == "matmul" { g.matmul(v[0], v[1]) } else { g.matmul_nt(v[0], v[1]) };
                project(g, o, &p)
            })
        }
        "layer_norm" => check!(normal(rng, &[r + 2, c]), |g, x| {
            let a = g.slice_rows(x, 0, r);
            let gamma = g.slice_rows(x, r, r + 1);
            let gamma = g.reshape(gamma, &[c]);
            let beta = g.slice_rows(x, r + 1, r + 2);
            let beta = g.reshape(beta, &[c]);
            let o = g.layer_norm(a, gamma, beta, 1e-5);
            project(g, o, &proj_rc)
        }),
        "concat_rows" => {
            let p = normal(rng, &[2 * r, c]);
            check!(normal(rng, &[2 * r, c]), |g, x| {
                let a = g.slice_rows(x, r, 2 * r);
                let b = g.slice_rows(x, 0, r);
                let o = g.concat_rows(&[a, b]);
                project(g, o, &p)
            })
        }
        "concat_cols" => {
            let p = normal(rng, &[r, 2 * c]);
            check!(normal(rng, &[2 * r, c]), |g, x| {
                let a = g.slice_rows(x, 0, r);
                let b = g.slice_rows(x, r, 2 * r);
                let o = g.concat_cols(&[a, b]);
                project(g, o, &p)
            })
        }
        "slice_rows" => {
            let p = normal(rng, &[1, c]);
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.slice_rows(x, 1, 2);
                project(g, o, &p)
            })
        }
        "slice_cols" => {
            let p = normal(rng, &[r, 1]);
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.slice_cols(x, 1, 2);
                project(g, o, &p)
            })
        }
        "reshape" => {
            let p = normal(rng, &[c, r]);
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.reshape(x, &[c, r]);
                project(g, o, &p)
            })
        }
        "sum" => check!(normal(rng, &[r, c]), |g, x| g.sum(x)),
        "mean" => check!(normal(rng, &[r, c]), |g, x| g.mean(x)),
        "sum_rows" => {
            let p = normal(rng, &[c]);
            check!(normal(rng, &[r, c]), |g, x| {
                let o = g.sum_rows(x);
                project(g, o, &p)
            })
        }
        "attention" => {
            let (nq, nk, d) = (r, 2 + rng.below(4), c);
            let p = normal(rng, &[nq, d]);
            check!(normal(rng, &[1, nq * d + 2 * nk * d + nk]), |g, x| {
                let v = split_flat(g, x, &[&[nq, d], &[nk, d], &[nk, d], &[nk]]);
                let o = g.attention(v[0], v[1], v[2], Some(v[3]));
                project(g, o, &p)
            })
        }
        "conv2d" => {
            let (h, w, ci, co) = (3 + rng.below(3), 3 + rng.below(3), 1 + rng.below(2), 1 + rng.below(3));
            let stride = 1 + rng.below(2);
            let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
            let p = normal(rng, &[ho, wo, co]);
            check!(normal(rng, &[1, h * w * ci + 9 * ci * co + co]), |g, x| {
                let v = split_flat(g, x, &[&[h, w, ci], &[9 * ci, co], &[co]]);
                let o = g.conv2d(v[0], v[1], v[2], 3, stride, 1);
                project(g, o, &p)
            })
        }
        other => Err(crate::error::Error::Parameter(format!("unknown primitive `{other}`"))),
    }
}

/// `trials` seeded checks of every primitive in [`PRIMITIVES`].
pub fn primitive_suite(trials: usize, seed: u64, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = RngState::with_stream(seed, i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(trial(name, &mut rng, eps)?);
            }
            Ok(PrimitiveCheck {
                name,
                trials,
                max_rel_err: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_a_few_trials() {
        for c in primitive_suite(5, 1, 1e-6).unwrap() {
            assert!(c.max_rel_err < 1e-5, "{}: {}", c.name, c.max_rel_err);
        }
    }
}
