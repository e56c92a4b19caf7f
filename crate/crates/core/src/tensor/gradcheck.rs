//! Central finite-difference checks of tape gradients.
//!
//! Errors are measured per instance as `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-12)`
//! where `a` is the analytic gradient and `n` the numeric one, restricted to
//! the coordinates being checked.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::nn::{init_tensor, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Gradient of the scalar built by `build` with respect to every entry of `inputs`.
pub fn check_inputs<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };
    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Picks up to `per_param` random coordinates from every trainable parameter.
pub fn sample_coords<R: Rng>(store: &ParamStore<f64>, per_param: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in store.trainable_ids() {
        let mut idx: Vec<usize> = (0..store.get(id).numel()).collect();
        idx.shuffle(rng);
        out.extend(idx.into_iter().take(per_param).map(|i| (id, i)));
    }
    out
}

/// Gradient of the scalar built by `build` with respect to selected parameter coordinates.
pub fn check_params<F>(store: &ParamStore<f64>, coords: &[(ParamId, usize)], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(0.0, |g| g[i]))
        .collect();
    drop(tape);

    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let x = work.get(id).data()[i];
        let eval = |v: f64, work: &mut ParamStore<f64>| -> Result<f64> {
            work.get_mut(id).data_mut()[i] = v;
            let mut tape = Tape::new(work);
            let loss = build(&mut tape)?;
            Ok(tape.scalar(loss))
        };
        let up = eval(x + h, &mut work)?;
        let down = eval(x - h, &mut work)?;
        work.get_mut(id).data_mut()[i] = x;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    init_tensor(rows, cols, Init::Normal(1.0), rng)
}

fn positive_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(0.5..2.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Projects a non-scalar output onto fixed random weights so every output
/// coordinate contributes to the checked scalar.
fn project(tape: &mut Tape<'_, f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type OpCase = fn(&mut ChaCha8Rng) -> Result<f64>;

fn projected<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, out_shape: (usize, usize), f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let weights = rand_tensor(rng, out_shape.0, out_shape.1);
    let store = ParamStore::new();
    check_inputs(&store, &inputs, DEFAULT_STEP, |t, v| {
        let out = f(t, v)?;
        project(t, out, &weights)
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            let ins = vec![rand_tensor(rng, m, k), rand_tensor(rng, k, n)];
            projected(rng, ins, (m, n), |t, v| t.matmul(v[0], v[1]))
        }),
        ("transpose", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (c, r), |t, v| Ok(t.transpose(v[0])))
        }),
        ("add", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| t.sub(v[0], v[1]))
        }),
        ("mul", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |rng| {
            let (r, c) = dims(rng);
            let s = rng.gen_range(-2.0..2.0);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), move |t, v| Ok(t.scale(v[0], s)))
        }),
        ("add_row", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, 1, c)];
            projected(rng, ins, (r, c), |t, v| t.add_row(v[0], v[1]))
        }),
        ("reshape", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (c, r), move |t, v| t.reshape(v[0], c, r))
        }),
        ("row_dot", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r, c)];
            projected(rng, ins, (r, 1), |t, v| t.row_dot(v[0], v[1]))
        }),
        ("gelu", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| Ok(t.gelu(v[0])))
        }),
        ("sigmoid", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| Ok(t.sigmoid(v[0])))
        }),
        ("log", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![positive_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| t.log(v[0]))
        }),
        ("softmax", |rng| {
            let (r, c) = dims(rng);
            let tau = rng.gen_range(0.3..2.0);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), move |t, v| t.softmax(v[0], tau))
        }),
        ("layer_norm", |rng| {
            let r = rng.gen_range(1..4);
            let c = rng.gen_range(2..7);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, 1, c), rand_tensor(rng, 1, c)];
            projected(rng, ins, (r, c), |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("normalize_rows", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (r, c), |t, v| t.normalize_rows(v[0]))
        }),
        ("cosine", |rng| {
            let (r, c) = dims(rng);
            let r2 = rng.gen_range(1..5);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r2, c)];
            projected(rng, ins, (r, r2), |t, v| t.cosine(v[0], v[1]))
        }),
        ("concat_rows", |rng| {
            let (r, c) = dims(rng);
            let r2 = rng.gen_range(1..4);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r2, c)];
            projected(rng, ins, (r + r2, c), |t, v| t.concat_rows(v))
        }),
        ("concat_cols", |rng| {
            let (r, c) = dims(rng);
            let c2 = rng.gen_range(1..4);
            let ins = vec![rand_tensor(rng, r, c), rand_tensor(rng, r, c2)];
            projected(rng, ins, (r, c + c2), |t, v| t.concat_cols(v))
        }),
        ("slice_rows", |rng| {
            let r = rng.gen_range(2..6);
            let c = rng.gen_range(1..5);
            let start = rng.gen_range(0..r - 1);
            let len = rng.gen_range(1..=r - start);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (len, c), move |t, v| t.slice_rows(v[0], start, len))
        }),
        ("slice_cols", |rng| {
            let r = rng.gen_range(1..5);
            let c = rng.gen_range(2..6);
            let start = rng.gen_range(0..c - 1);
            let len = rng.gen_range(1..=c - start);
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (r, len), move |t, v| t.slice_cols(v[0], start, len))
        }),
        ("select_rows", |rng| {
            let (r, c) = dims(rng);
            let k = rng.gen_range(1..6);
            let index: Vec<usize> = (0..k).map(|_| rng.gen_range(0..r)).collect();
            let ins = vec![rand_tensor(rng, r, c)];
            projected(rng, ins, (k, c), move |t, v| t.select_rows(v[0], &index))
        }),
        ("sum", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            check_inputs(&ParamStore::new(), &ins, DEFAULT_STEP, |t, v| Ok(t.sum(v[0])))
        }),
        ("mean", |rng| {
            let (r, c) = dims(rng);
            let ins = vec![rand_tensor(rng, r, c)];
            check_inputs(&ParamStore::new(), &ins, DEFAULT_STEP, |t, v| Ok(t.mean(v[0])))
        }),
        ("cross_entropy", |rng| {
            let (r, c) = dims(rng);
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let ins = vec![rand_tensor(rng, r, c)];
            check_inputs(&ParamStore::new(), &ins, DEFAULT_STEP, |t, v| {
                t.cross_entropy(v[0], &targets)
            })
        }),
        ("bce_with_logits", |rng| {
            let (r, c) = dims(rng);
            let targets: Vec<f64> = (0..r * c).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let ins = vec![rand_tensor(rng, r, c)];
            check_inputs(&ParamStore::new(), &ins, DEFAULT_STEP, |t, v| {
                t.bce_with_logits(v[0], &targets)
            })
        }),
        ("attention", |rng| {
            let heads = rng.gen_range(1..3);
            let w = heads * rng.gen_range(1..4);
            let r = rng.gen_range(1..4);
            let l = rng.gen_range(1..5);
            let ins = vec![rand_tensor(rng, r, w), rand_tensor(rng, l, w), rand_tensor(rng, l, w)];
            projected(rng, ins, (r, w), move |t, v| t.attention(v[0], v[1], v[2], heads))
        }),
        ("attention_spans", |rng| {
            let heads = rng.gen_range(1..3);
            let w = heads * rng.gen_range(1..4);
            let r = rng.gen_range(1..5);
            let l = rng.gen_range(2..6);
            let spans: Vec<(usize, usize)> = (0..r)
                .map(|_| {
                    let s = rng.gen_range(0..l);
                    (s, rng.gen_range(1..=l - s))
                })
                .collect();
            let ins = vec![rand_tensor(rng, r, w), rand_tensor(rng, l, w), rand_tensor(rng, l, w)];
            projected(rng, ins, (r, w), move |t, v| t.attention_spans(v[0], v[1], v[2], heads, &spans))
        }),
        ("linear", |rng| {
            let mut store = ParamStore::new();
            let (r, c) = dims(rng);
            let out = rng.gen_range(1..5);
            let lin = Linear::new(&mut store, "lin", c, out, true, Init::Xavier, true, rng);
            let x = rand_tensor(rng, r, c);
            let weights = rand_tensor(rng, r, out);
            let coords = sample_coords(&store, usize::MAX, rng);
            let inputs = check_inputs(&store, std::slice::from_ref(&x), DEFAULT_STEP, |t, v| {
                let y = lin.forward(t, v[0])?;
                project(t, y, &weights)
            })?;
            let params = check_params(&store, &coords, DEFAULT_STEP, |t| {
                let xv = t.input(x.clone());
                let y = lin.forward(t, xv)?;
                project(t, y, &weights)
            })?;
            Ok(inputs.max(params))
        }),
        ("feed_forward", |rng| {
            let mut store = ParamStore::new();
            let r = rng.gen_range(1..4);
            let w = rng.gen_range(2..6);
            let ffn = FeedForward::new(&mut store, "ffn", w, 2 * w, Init::Xavier, true, rng);
            let x = rand_tensor(rng, r, w);
            let weights = rand_tensor(rng, r, w);
            let coords = sample_coords(&store, 6, rng);
            let inputs = check_inputs(&store, std::slice::from_ref(&x), DEFAULT_STEP, |t, v| {
                let y = ffn.forward(t, v[0])?;
                project(t, y, &weights)
            })?;
            let params = check_params(&store, &coords, DEFAULT_STEP, |t| {
                let xv = t.input(x.clone());
                let y = ffn.forward(t, xv)?;
                project(t, y, &weights)
            })?;
            Ok(inputs.max(params))
        }),
        ("multi_head_attention", |rng| {
            let mut store = ParamStore::new();
            let heads = rng.gen_range(1..3);
            let w = heads * rng.gen_range(1..4);
            let r = rng.gen_range(1..4);
            let l = rng.gen_range(1..5);
            let mha = MultiHeadAttention::new(&mut store, "mha", w, heads, true, rng);
            let ln = LayerNorm::new(&mut store, "ln", w, true);
            let ffn = FeedForward::new(&mut store, "ffn", w, 2 * w, Init::Xavier, true, rng);
            let x = rand_tensor(rng, r, w);
            let ctx = rand_tensor(rng, l, w);
            let weights = rand_tensor(rng, r, w);
            let coords = sample_coords(&store, 4, rng);
            // q + FFN(LN(q + MHA(q, ctx, ctx)))
            let graph = |t: &mut Tape<'_, f64>, x: Var, c: Var| -> Result<Var> {
                let a = mha.forward(t, x, c)?;
                let h = t.add(x, a.out)?;
                let n = ln.forward(t, h)?;
                let f = ffn.forward(t, n)?;
                let y = t.add(x, f)?;
                project(t, y, &weights)
            };
            let inputs = check_inputs(&store, &[x.clone(), ctx.clone()], DEFAULT_STEP, |t, v| {
                graph(t, v[0], v[1])
            })?;
            let params = check_params(&store, &coords, DEFAULT_STEP, |t| {
                let xv = t.input(x.clone());
                let cv = t.input(ctx.clone());
                graph(t, xv, cv)
            })?;
            Ok(inputs.max(params))
        }),
    ]
}

/// Runs every primitive check on `instances` random cases each.
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (k, (name, case)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckResult {
            name: name.to_string(),
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_zero_for_equal_vectors() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx sum(x*x) = 2x; compare against the deliberately wrong x.
        let x = [0.3, -1.2, 2.0];
        let wrong: Vec<f64> = x.to_vec();
        let right: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(relative_error(&wrong, &right) > 0.1);
    }

    #[test]
    fn every_primitive_passes_at_double_precision() {
        for r in op_suite(7, 20).unwrap() {
            assert!(r.passed(DEFAULT_TOLERANCE), "{} max rel err {}", r.name, r.max_rel_err);
        }
    }
}
