use super::ops::{col2im, gelu_grad, im2col, permute_data, sigmoid};
use super::{Op, Tape};
use crate::error::Result;
use crate::tensor::{gemm, numel, strides};

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    /// Push the output gradient `g` of node `i` into its inputs' slots.
    pub(super) fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    add_into(d, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    gemm(m, n, k, g, strides(n, false), vb, strides(n, true), d, 1.0);
                }
                if let Some(d) = self.acc(grads, *b) {
                    gemm(k, m, n, va, strides(k, true), g, strides(n, false), d, 1.0);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            strides(n, false),
                            &vb[t * k * n..],
                            strides(n, true),
                            &mut d[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..],
                            strides(k, true),
                            &g[t * m * n..],
                            strides(n, false),
                            &mut d[t * k * n..(t + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
                let s = self.shape(*x);
                let (c, inner) = (s[1], numel(&s[2..]));
                if let Some(d) = self.acc(grads, *b) {
                    for (j, chunk) in g.chunks(inner).enumerate() {
                        d[j % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (si, sw) = (self.shape(*input), self.shape(*weight));
                let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let k = cin * kh * kw;
                let hw = ho * wo;
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let mut cols = vec![0.0; k * hw];
                if self.requires_grad(*weight) {
                    let d = self.acc(grads, *weight).expect("weight requires grad");
                    for s in 0..n {
                        im2col(
                            &x[s * cin * h * w..(s + 1) * cin * h * w],
                            (cin, h, w),
                            (kh, kw),
                            *geom,
                            (ho, wo),
                            &mut cols,
                        );
                        gemm(
                            cout,
                            hw,
                            k,
                            &g[s * cout * hw..],
                            strides(hw, false),
                            &cols,
                            strides(hw, true),
                            d,
                            1.0,
                        );
                    }
                }
                if let Some(d) = self.acc(grads, *input) {
                    for s in 0..n {
                        gemm(
                            k,
                            cout,
                            hw,
                            wt,
                            strides(k, true),
                            &g[s * cout * hw..],
                            strides(hw, false),
                            &mut cols,
                            0.0,
                        );
                        col2im(
                            &cols,
                            (cin, h, w),
                            (kh, kw),
                            *geom,
                            (ho, wo),
                            &mut d[s * cin * h * w..(s + 1) * cin * h * w],
                        );
                    }
                }
            }
            Op::Upsample { input, fh, fw } => {
                let s = self.shape(*input);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h * fh, w * fw);
                if let Some(d) = self.acc(grads, *input) {
                    for p in 0..nc {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                d[p * h * w + (oy / fh) * w + ox / fw] += g[p * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        let s = sigmoid(vx[j]);
                        d[j] += g[j] * s * (1.0 + vx[j] * (1.0 - s));
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_grad(vx[j]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                }
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..out.len() / width {
                        let y = &out[r * width..(r + 1) * width];
                        let gy = &g[r * width..(r + 1) * width];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            d[r * width + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let width = *node.value.shape().last().unwrap();
                let vx = self.value(*x).data();
                let gn = self.value(*gain).data();
                if let Some(d) = self.acc(grads, *gain) {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..width {
                            d[j] += g[r * width + j] * (vx[r * width + j] - mean) * rstd;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for row in g.chunks(width) {
                        add_into(d, row);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; width];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &vx[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..width {
                            dxhat[j] = gr[j] * gn[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * (xr[j] - mean) * rstd;
                        }
                        m1 /= width as f64;
                        m2 /= width as f64;
                        for j in 0..width {
                            let xhat = (xr[j] - mean) * rstd;
                            d[r * width + j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Permute(x, axes) => {
                if let Some(d) = self.acc(grads, *x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inv);
                    add_into(d, &back);
                }
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let dp = self.shape(p)[*axis] * inner;
                    if let Some(d) = self.acc(grads, p) {
                        for o in 0..outer {
                            add_into(
                                &mut d[o * dp..(o + 1) * dp],
                                &g[o * total + offset..o * total + offset + dp],
                            );
                        }
                    }
                    offset += dp;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let len = node.value.shape()[*axis];
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let full = s[*axis];
                if let Some(d) = self.acc(grads, *input) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(
                            &mut d[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Gather { table, indices } => {
                let width = self.shape(*table)[1];
                if let Some(d) = self.acc(grads, *table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(
                            &mut d[idx * width..(idx + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                }
            }
            Op::Tile { input, times } => {
                if let Some(d) = self.acc(grads, *input) {
                    let n = d.len();
                    for t in 0..*times {
                        add_into(d, &g[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / va.len() as f64;
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] += s * (va[j] - vb[j]);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for j in 0..d.len() {
                        d[j] -= s * (va[j] - vb[j]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let c = self.shape(*logits)[1];
                let x = self.value(*logits).data();
                if let Some(d) = self.acc(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &x[r * c..(r + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / sum;
                            let y = if j == t { 1.0 } else { 0.0 };
                            d[r * c + j] += g[0] * w * (p - y);
                        }
                    }
                }
            }
            Op::Fsq {
                input,
                levels,
                normalize,
            } => {
                let dlen = levels.len();
                let vx = self.value(*input).data();
                if let Some(d) = self.acc(grads, *input) {
                    for j in 0..d.len() {
                        let l = (levels[j % dlen] - 1) as f64;
                        let s = sigmoid(vx[j]);
                        let scale = if *normalize { 2.0 } else { l };
                        d[j] += g[j] * scale * s * (1.0 - s);
                    }
                }
            }
        }
        Ok(())
    }
}
