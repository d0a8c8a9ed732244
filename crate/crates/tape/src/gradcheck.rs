//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Analytic and numeric gradients of a scalar function, one entry per input.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradientPair {
    /// Worst per-input relative error, see [`relative_error`].
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }
}

/// Gradient norm below which errors are measured on an absolute scale.
/// Central differences carry roughly `1e-10` of rounding noise, so a
/// gradient that is exactly zero never looks relatively close.
pub const NORM_FLOOR: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.item(root))
}

/// Runs `f` once with backward for analytic gradients, then perturbs every
/// input element by `±h`. `f` must be deterministic (fixed dropout seeds).
pub fn gradient_pair<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradientPair>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut col = vec![0.0; inputs[i].len()];
        for (j, slot) in col.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        numeric.push(col);
    }
    Ok(GradientPair { analytic, numeric })
}

/// One differentiable primitive exercised at a random point chosen by `seed`.
#[derive(Clone, Copy)]
pub struct PrimitiveCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradientPair>,
}

impl std::fmt::Debug for PrimitiveCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrimitiveCase").field("name", &self.name).finish()
    }
}

pub const FD_STEP: f64 = 1e-5;

mod cases {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    use super::{gradient_pair, GradientPair, FD_STEP};
    use crate::attention::AttentionMask;
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::tensor::Tensor;

    fn normal(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // keep clear of the relu kink
                loop {
                    let v: f64 = rng.random_range(-1.5..1.5);
                    if v.abs() > 0.05 {
                        break v;
                    }
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn positive(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
    }

    /// Scalarizes `out` with fixed random weights so every output element
    /// contributes a distinct gradient.
    fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
        let w = g.constant(weights);
        let shape = g.shape(out).to_owned();
        let w = g.reshape(w, &shape)?;
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    }

    fn unary(
        seed: u64,
        shape: &[usize],
        positive_input: bool,
        f: fn(&mut Graph, Var) -> Result<Var>,
    ) -> Result<GradientPair> {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = if positive_input { positive(&mut rng, shape) } else { normal(&mut rng, shape) };
        let probe = {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let out = f(&mut g, xv)?;
            g.shape(out).to_vec()
        };
        let w = normal(&mut rng, &probe);
        gradient_pair(&[x], FD_STEP, move |g, v| {
            let out = f(g, v[0])?;
            project(g, out, &w)
        })
    }

    fn binary(seed: u64, a: &[usize], b: &[usize], f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<GradientPair> {
        let mut rng = StdRng::seed_from_u64(seed);
        let (x, y) = (normal(&mut rng, a), normal(&mut rng, b));
        let probe = {
            let mut g = Graph::new();
            let (xv, yv) = (g.constant(&x), g.constant(&y));
            let out = f(&mut g, xv, yv)?;
            g.shape(out).to_vec()
        };
        let w = normal(&mut rng, &probe);
        gradient_pair(&[x, y], FD_STEP, move |g, v| {
            let out = f(g, v[0], v[1])?;
            project(g, out, &w)
        })
    }

    pub fn matmul(s: u64) -> Result<GradientPair> {
        binary(s, &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b))
    }
    pub fn add(s: u64) -> Result<GradientPair> {
        binary(s, &[3, 4], &[3, 4], |g, a, b| g.add(a, b))
    }
    pub fn sub(s: u64) -> Result<GradientPair> {
        binary(s, &[3, 4], &[3, 4], |g, a, b| g.sub(a, b))
    }
    pub fn mul(s: u64) -> Result<GradientPair> {
        binary(s, &[3, 4], &[3, 4], |g, a, b| g.mul(a, b))
    }
    pub fn add_row(s: u64) -> Result<GradientPair> {
        binary(s, &[3, 4], &[4], |g, a, b| g.add_row(a, b))
    }
    pub fn affine(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.affine(x, 1.7, 0.3)))
    }
    pub fn gelu(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.gelu(x)))
    }
    pub fn relu(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.relu(x)))
    }
    pub fn sigmoid(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.sigmoid(x)))
    }
    pub fn exp(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.exp(x)))
    }
    pub fn log(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], true, |g, x| Ok(g.log_clamped(x, 1e-12)))
    }
    pub fn gather_rows(s: u64) -> Result<GradientPair> {
        unary(s, &[5, 3], false, |g, x| g.gather_rows(x, &[0, 2, 2, 4]))
    }
    pub fn concat_rows(s: u64) -> Result<GradientPair> {
        binary(s, &[2, 3], &[3, 3], |g, a, b| g.concat_rows(&[a, b, a]))
    }
    pub fn transpose(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| g.transpose(x))
    }
    pub fn reshape(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| g.reshape(x, &[2, 6]))
    }
    pub fn pick(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 5], false, |g, x| g.pick(x, &[1, 4, 0]))
    }
    pub fn sum(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.sum(x)))
    }
    pub fn mean(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.mean(x)))
    }
    pub fn sum_last(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.sum_last(x)))
    }
    pub fn logsumexp(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| Ok(g.logsumexp(x)))
    }
    pub fn softmax(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| g.softmax_with_temperature(x, 0.5))
    }
    pub fn log_softmax(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| g.log_softmax_with_temperature(x, 2.0))
    }
    pub fn normalize_rows(s: u64) -> Result<GradientPair> {
        unary(s, &[3, 4], false, |g, x| g.normalize_rows(x))
    }
    pub fn cosine_similarity(s: u64) -> Result<GradientPair> {
        binary(s, &[2, 3], &[2, 3], |g, a, b| g.cosine_similarity(a, b))
    }
    pub fn cosine_matrix(s: u64) -> Result<GradientPair> {
        binary(s, &[3, 4], &[2, 4], |g, a, b| g.cosine_matrix(a, b))
    }

    pub fn layer_norm(seed: u64) -> Result<GradientPair> {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = normal(&mut rng, &[3, 5]);
        let gain = normal(&mut rng, &[5]);
        let bias = normal(&mut rng, &[5]);
        let w = normal(&mut rng, &[3, 5]);
        gradient_pair(&[x, gain, bias], FD_STEP, move |g, v| {
            let out = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
            project(g, out, &w)
        })
    }

    pub fn dropout(seed: u64) -> Result<GradientPair> {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = normal(&mut rng, &[4, 5]);
        let w = normal(&mut rng, &[4, 5]);
        gradient_pair(&[x], FD_STEP, move |g, v| {
            let mut mask_rng = StdRng::seed_from_u64(seed ^ 0xD00D);
            let out = g.dropout(v[0], 0.3, &mut mask_rng)?;
            project(g, out, &w)
        })
    }

    fn attention_case(seed: u64, causal: bool, rate: f64) -> Result<GradientPair> {
        let (batch, seq, dim, heads) = (2, 4, 6, 2);
        let mut rng = StdRng::seed_from_u64(seed);
        let q = normal(&mut rng, &[batch * seq, dim]);
        let k = normal(&mut rng, &[batch * seq, dim]);
        let v = normal(&mut rng, &[batch * seq, dim]);
        let w = normal(&mut rng, &[batch * seq, dim]);
        let mut padding = vec![false; batch * seq];
        padding[seq] = true; // first key of the second sequence
        let mask = AttentionMask::new(batch, seq, padding, causal)?;
        gradient_pair(&[q, k, v], FD_STEP, move |g, x| {
            let mut drop_rng = StdRng::seed_from_u64(seed ^ 0xA77);
            let out = g.attention(x[0], x[1], x[2], heads, &mask, Some((rate, &mut drop_rng)))?;
            project(g, out, &w)
        })
    }

    pub fn attention(s: u64) -> Result<GradientPair> {
        attention_case(s, false, 0.0)
    }
    pub fn attention_causal(s: u64) -> Result<GradientPair> {
        attention_case(s, true, 0.0)
    }
    pub fn attention_dropout(s: u64) -> Result<GradientPair> {
        attention_case(s, false, 0.2)
    }
}

/// Every differentiable primitive of the tape.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    macro_rules! case {
        ($($name:ident),* $(,)?) => {
            vec![$(PrimitiveCase { name: stringify!($name), run: cases::$name }),*]
        };
    }
    case![
        matmul,
        add,
        sub,
        mul,
        add_row,
        affine,
        gelu,
        relu,
        sigmoid,
        exp,
        log,
        gather_rows,
        concat_rows,
        transpose,
        reshape,
        pick,
        sum,
        mean,
        sum_last,
        logsumexp,
        softmax,
        log_softmax,
        layer_norm,
        dropout,
        normalize_rows,
        cosine_similarity,
        cosine_matrix,
        attention,
        attention_causal,
        attention_dropout,
    ]
}
