//! Forward builders. Each records one node on the tape; the matching
//! gradient rule lives in `backward.rs`.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{self, gemm};

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Graph {
    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Param {
                op,
                detail: format!("expected a 2-D tensor, got shape {s:?}"),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, op)
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a),
            (m, k),
            false,
            self.value(b),
            (k, n),
            false,
            &mut out,
            false,
        );
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", x)?;
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(out, vec![cols, rows], Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        Ok(self.push(value, shape.to_vec(), Op::Reshape { x }))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(value, shape, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a vector along the last axis of `x` (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let width = last_dim(self.shape(x));
        if self.value(row).len() != width {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let value = self
            .value(x)
            .chunks(width)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::AddRow { x, row }))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.log_clamped(x, 0.0)
    }

    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| v.max(floor).ln(), Op::Log { x, floor })
    }

    /// Row gather from a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (limit, width) = self.dims2("gather_rows", table)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= limit) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                limit,
            });
        }
        if rows.is_empty() {
            return Err(TensorError::Param {
                op: "gather_rows",
                detail: "empty row list".into(),
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        Ok(self.push(
            out,
            vec![rows.len(), width],
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
                width,
            },
        ))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Param {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(out, vec![rows, cols], Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// `out[i] = x[i, cols[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2("pick", x)?;
        if cols.len() != rows {
            return Err(TensorError::Shape {
                op: "pick",
                lhs: vec![rows, width],
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::Index {
                op: "pick",
                index: bad,
                limit: width,
            });
        }
        let src = self.value(x);
        let out = cols.iter().enumerate().map(|(i, &c)| src[i * width + c]).collect();
        Ok(self.push(
            out,
            vec![rows],
            Op::Pick {
                x,
                cols: cols.to_vec(),
                width,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], vec![1], Op::Mean { x })
    }

    fn reduced_shape(&self, x: Var) -> Vec<usize> {
        let shape = self.shape(x);
        if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        }
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let width = last_dim(self.shape(x));
        let value = self.value(x).chunks(width).map(|c| c.iter().sum()).collect();
        let shape = self.reduced_shape(x);
        self.push(value, shape, Op::SumLast { x, width })
    }

    /// Stable log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let width = last_dim(self.shape(x));
        let value = self.value(x).chunks(width).map(kernels::logsumexp_slice).collect();
        let shape = self.reduced_shape(x);
        self.push(value, shape, Op::LogSumExp { x, width })
    }

    fn check_tau(tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(TensorError::Param {
                op: "softmax_with_temperature",
                detail: format!("temperature must be positive, got {tau}"),
            });
        }
        Ok(())
    }

    /// Softmax of `x / tau` over the last axis, max-subtracted.
    pub fn softmax_with_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let width = last_dim(self.shape(x));
        let mut value = self.value(x).to_vec();
        value.chunks_mut(width).for_each(|c| kernels::softmax_slice(c, tau));
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::Softmax { x, width, tau }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_with_temperature(x, 1.0)
    }

    /// `log softmax(x / tau)` over the last axis.
    pub fn log_softmax_with_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let width = last_dim(self.shape(x));
        let mut value = self.value(x).to_vec();
        for c in value.chunks_mut(width) {
            c.iter_mut().for_each(|v| *v /= tau);
            kernels::log_softmax_slice(c);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::LogSoftmax { x, width, tau }))
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let width = last_dim(self.shape(x));
        for p in [gain, bias] {
            if self.value(p).len() != width {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / width;
        let mut xhat = vec![0.0; rows * width];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * width];
        let (src, g, b) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..width {
                let xh = (row[c] - mean) * is;
                xhat[r * width + c] = xh;
                out[r * width + c] = g[c] * xh + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    /// `rate == 0` returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Param {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::Dropout { x, mask }))
    }

    /// Scales each last-axis slice to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let width = last_dim(self.shape(x));
        let mut norms = Vec::new();
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(width).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n.is_nan() || n <= 0.0 {
                return Err(TensorError::Degenerate {
                    op: "cosine_similarity",
                    detail: format!("row {r} has zero norm"),
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::NormalizeRows { x, width, norms }))
    }

    /// Cosine similarity of two tensors, each flattened to a vector.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).len() != self.value(v).len() {
            return Err(TensorError::Shape {
                op: "cosine_similarity",
                lhs: self.shape(u).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let n = self.value(u).len();
        let u = self.reshape(u, &[1, n])?;
        let v = self.reshape(v, &[1, n])?;
        let u = self.normalize_rows(u)?;
        let v = self.normalize_rows(v)?;
        let p = self.mul(u, v)?;
        Ok(self.sum(p))
    }

    /// Pairwise row cosines: `a [n×k]`, `b [m×k]` → `[n×m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let a = self.normalize_rows(a)?;
        let b = self.normalize_rows(b)?;
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    /// Row-wise cosine between matching rows of two equal-shape 2-D tensors.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let a = self.normalize_rows(a)?;
        let b = self.normalize_rows(b)?;
        let p = self.mul(a, b)?;
        Ok(self.sum_last(p))
    }
}
