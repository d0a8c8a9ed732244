use crate::attention::attention_backward;
use crate::graph::{Graph, Op};
use crate::kernels::{gelu_grad, gemm};

fn add_into(buf: &mut [f64], src: impl IntoIterator<Item = f64>) {
    buf.iter_mut().zip(src).for_each(|(o, x)| *o += x);
}

/// Pushes the upstream gradient of node `i` into its parents.
pub(crate) fn propagate(g: &Graph, i: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &g.nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            // dA = G·Bᵀ, dB = Aᵀ·G
            g.accumulate(grads, a, |buf| {
                gemm(up, (m, n), false, g.value(b), (k, n), true, buf, true)
            });
            g.accumulate(grads, b, |buf| {
                gemm(g.value(a), (m, k), true, up, (m, n), false, buf, true)
            });
        }
        &Op::Transpose { x, rows, cols } => g.accumulate(grads, x, |buf| {
            for r in 0..rows {
                for c in 0..cols {
                    buf[r * cols + c] += up[c * rows + r];
                }
            }
        }),
        &Op::Reshape { x } => g.accumulate(grads, x, |buf| add_into(buf, up.iter().copied())),
        &Op::Add { a, b } => {
            g.accumulate(grads, a, |buf| add_into(buf, up.iter().copied()));
            g.accumulate(grads, b, |buf| add_into(buf, up.iter().copied()));
        }
        &Op::Sub { a, b } => {
            g.accumulate(grads, a, |buf| add_into(buf, up.iter().copied()));
            g.accumulate(grads, b, |buf| add_into(buf, up.iter().map(|u| -u)));
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (g.value(a), g.value(b));
            g.accumulate(grads, a, |buf| add_into(buf, up.iter().zip(bv).map(|(u, y)| u * y)));
            g.accumulate(grads, b, |buf| add_into(buf, up.iter().zip(av).map(|(u, x)| u * x)));
        }
        &Op::AddRow { x, row } => {
            g.accumulate(grads, x, |buf| add_into(buf, up.iter().copied()));
            g.accumulate(grads, row, |buf| {
                let w = buf.len();
                for chunk in up.chunks(w) {
                    add_into(buf, chunk.iter().copied());
                }
            });
        }
        &Op::Affine { x, scale } => {
            g.accumulate(grads, x, |buf| add_into(buf, up.iter().map(|u| u * scale)))
        }
        &Op::Gelu { x } => {
            let xv = g.value(x);
            g.accumulate(grads, x, |buf| {
                add_into(buf, up.iter().zip(xv).map(|(u, &v)| u * gelu_grad(v)))
            });
        }
        &Op::Relu { x } => {
            let xv = g.value(x);
            g.accumulate(grads, x, |buf| {
                add_into(buf, up.iter().zip(xv).map(|(u, &v)| if v > 0.0 { *u } else { 0.0 }))
            });
        }
        &Op::Sigmoid { x } => g.accumulate(grads, x, |buf| {
            add_into(buf, up.iter().zip(out).map(|(u, s)| u * s * (1.0 - s)))
        }),
        &Op::Exp { x } => {
            g.accumulate(grads, x, |buf| add_into(buf, up.iter().zip(out).map(|(u, e)| u * e)))
        }
        &Op::Log { x, floor } => {
            let xv = g.value(x);
            g.accumulate(grads, x, |buf| {
                add_into(
                    buf,
                    up.iter()
                        .zip(xv)
                        .map(|(u, &v)| if v > floor { u / v } else { 0.0 }),
                )
            });
        }
        Op::GatherRows { table, rows, width } => g.accumulate(grads, *table, |buf| {
            for (i, &r) in rows.iter().enumerate() {
                add_into(
                    &mut buf[r * width..(r + 1) * width],
                    up[i * width..(i + 1) * width].iter().copied(),
                );
            }
        }),
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = g.value(p).len();
                g.accumulate(grads, p, |buf| {
                    add_into(buf, up[offset..offset + len].iter().copied())
                });
                offset += len;
            }
        }
        Op::Pick { x, cols, width } => g.accumulate(grads, *x, |buf| {
            for (i, &c) in cols.iter().enumerate() {
                buf[i * width + c] += up[i];
            }
        }),
        &Op::Sum { x } => g.accumulate(grads, x, |buf| buf.iter_mut().for_each(|o| *o += up[0])),
        &Op::Mean { x } => g.accumulate(grads, x, |buf| {
            let s = up[0] / buf.len() as f64;
            buf.iter_mut().for_each(|o| *o += s);
        }),
        &Op::SumLast { x, width } => g.accumulate(grads, x, |buf| {
            for (r, chunk) in buf.chunks_mut(width).enumerate() {
                chunk.iter_mut().for_each(|o| *o += up[r]);
            }
        }),
        &Op::LogSumExp { x, width } => {
            let xv = g.value(x);
            g.accumulate(grads, x, |buf| {
                for (r, chunk) in buf.chunks_mut(width).enumerate() {
                    let src = &xv[r * width..(r + 1) * width];
                    for (o, &v) in chunk.iter_mut().zip(src) {
                        *o += up[r] * (v - out[r]).exp();
                    }
                }
            });
        }
        &Op::Softmax { x, width, tau } => g.accumulate(grads, x, |buf| {
            for (r, chunk) in buf.chunks_mut(width).enumerate() {
                let y = &out[r * width..(r + 1) * width];
                let gu = &up[r * width..(r + 1) * width];
                let dot: f64 = y.iter().zip(gu).map(|(a, b)| a * b).sum();
                for c in 0..width {
                    chunk[c] += y[c] * (gu[c] - dot) / tau;
                }
            }
        }),
        &Op::LogSoftmax { x, width, tau } => g.accumulate(grads, x, |buf| {
            for (r, chunk) in buf.chunks_mut(width).enumerate() {
                let y = &out[r * width..(r + 1) * width];
                let gu = &up[r * width..(r + 1) * width];
                let total: f64 = gu.iter().sum();
                for c in 0..width {
                    chunk[c] += (gu[c] - y[c].exp() * total) / tau;
                }
            }
        }),
        Op::LayerNorm {
            x,
            gain,
            bias,
            width,
            xhat,
            inv_std,
        } => {
            let w = *width;
            let gv = g.value(*gain);
            g.accumulate(grads, *x, |buf| {
                for (r, chunk) in buf.chunks_mut(w).enumerate() {
                    let xh = &xhat[r * w..(r + 1) * w];
                    let gu = &up[r * w..(r + 1) * w];
                    let dxh: Vec<f64> = gu.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxh.iter().sum::<f64>() / w as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for c in 0..w {
                        chunk[c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                    }
                }
            });
            g.accumulate(grads, *gain, |buf| {
                for (chunk, xh) in up.chunks(w).zip(xhat.chunks(w)) {
                    add_into(buf, chunk.iter().zip(xh).map(|(a, b)| a * b));
                }
            });
            g.accumulate(grads, *bias, |buf| {
                for chunk in up.chunks(w) {
                    add_into(buf, chunk.iter().copied());
                }
            });
        }
        Op::Dropout { x, mask } => {
            g.accumulate(grads, *x, |buf| add_into(buf, up.iter().zip(mask).map(|(u, m)| u * m)))
        }
        Op::NormalizeRows { x, width, norms } => g.accumulate(grads, *x, |buf| {
            for (r, chunk) in buf.chunks_mut(*width).enumerate() {
                let y = &out[r * width..(r + 1) * width];
                let gu = &up[r * width..(r + 1) * width];
                let dot: f64 = y.iter().zip(gu).map(|(a, b)| a * b).sum();
                for c in 0..*width {
                    chunk[c] += (gu[c] - y[c] * dot) / norms[r];
                }
            }
        }),
        Op::Attention(cache) => attention_backward(g, cache, up, grads),
    }
}
