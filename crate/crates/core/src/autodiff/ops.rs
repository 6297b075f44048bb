use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, strides, Tensor};

/// Stride and zero padding of a 2D convolution, per (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self::new((1, 1), (kernel / 2, kernel / 2))
    }

    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::arg("convolution stride must be >= 1"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn row_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = row_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn softmax_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            input[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    out: &mut [f64],
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * sw + kj) as isize - pw;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            strides(k, false),
            self.value(b).data(),
            strides(n, false),
            &mut out,
            0.0,
        );
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("bmm {:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                strides(k, false),
                &db[i * k * n..],
                strides(n, false),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(Tensor::new([bs, m, n], out)?, Op::BatchMatMul(a, b), &[a, b], "bmm")
    }

    /// `x[..., n] + b[n]`
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(Error::shape(format!(
                "row bias {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        self.push(v, Op::AddRowBias(x, b), &[x, b], "add_row_bias")
    }

    /// `x[N, C, ...] + b[C]`
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || self.shape(b) != [s[1]] {
            return Err(Error::shape(format!(
                "channel bias {:?} for input {:?}",
                self.shape(b),
                s
            )));
        }
        let c = s[1];
        let inner = numel(&s[2..]);
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let bb = bias[i % c];
            chunk.iter_mut().for_each(|o| *o += bb);
        }
        self.push(v, Op::AddChannelBias(x, b), &[x, b], "add_channel_bias")
    }

    /// Cross-correlation of `input[N, Cin, H, W]` with `weight[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::shape(format!("conv2d input {:?} weight {:?}", si, sw)));
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ho, wo) = geom.output_dims(h, w, kh, kw)?;
        let k = cin * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![0.0; k * hw];
        let mut out = vec![0.0; n * cout * hw];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for s in 0..n {
            im2col(
                &x[s * cin * h * w..(s + 1) * cin * h * w],
                (cin, h, w),
                (kh, kw),
                geom,
                (ho, wo),
                &mut cols,
            );
            gemm(
                cout,
                k,
                hw,
                wt,
                strides(k, false),
                &cols,
                strides(hw, false),
                &mut out[s * cout * hw..(s + 1) * cout * hw],
                0.0,
            );
        }
        let v = Tensor::new([n, cout, ho, wo], out)?;
        self.push(v, Op::Conv2d { input, weight, geom }, &[input, weight], "conv2d")
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by integer factors.
    pub fn upsample(&mut self, input: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || fh == 0 || fw == 0 {
            return Err(Error::shape(format!("upsample {:?} by {fh}x{fw}", s)));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * fh, w * fw);
        let x = self.value(input).data();
        let mut out = vec![0.0; nc * ho * wo];
        for p in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[p * ho * wo + oy * wo + ox] = x[p * h * w + (oy / fh) * w + ox / fw];
                }
            }
        }
        let v = Tensor::new([s[0], s[1], ho, wo], out)?;
        self.push(v, Op::Upsample { input, fh, fw }, &[input], "upsample")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x], "sigmoid")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|z| z * sigmoid(z));
        self.push(v, Op::Silu(x), &[x], "silu")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x], "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x], "tanh")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = *self.shape(x).last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut v = self.value(x).clone();
        softmax_rows(v.data_mut(), width);
        self.push(v, Op::Softmax(x), &[x], "softmax")
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let width = *self.shape(x).last().ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape("layer_norm gain/bias width"));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        let mut stats = Vec::with_capacity(v.len() / width.max(1));
        for row in v.data_mut().chunks_mut(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / width as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            for (j, z) in row.iter_mut().enumerate() {
                *z = (*z - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("permute {:?} by {:?}", s, axes)));
        }
        let (data, shape) = permute_data(self.value(x).data(), &s, axes);
        self.push(Tensor::new(shape, data)?, Op::Permute(x, axes.to_vec()), &[x], "permute")
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape(format!("concat {:?} with {:?}", first, s)));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow {:?} axis {axis} [{start}, {})",
                s,
                start + len
            )));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Narrow { input, axis, start }, &[input], "narrow")
    }

    /// Rows of a `[n, d]` table, e.g. an embedding lookup.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("gather from {:?}", s)));
        }
        let d = s[1];
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::arg(format!("row {i} out of range for table of {}", s[0])));
            }
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let v = Tensor::new([indices.len(), d], out)?;
        self.push(
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
            "gather",
        )
    }

    /// Repeat the whole tensor `times` along the leading axis.
    pub fn tile(&mut self, input: Var, times: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || times == 0 {
            return Err(Error::shape("tile needs rank >= 1 and times >= 1"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        let mut shape = s;
        shape[0] *= times;
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Tile { input, times }, &[input], "tile")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x], "mean")
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self, pred, target, "mse")?;
        let v = Tensor::scalar(self.value(pred).mse(self.value(target))?);
        self.push(v, Op::Mse(pred, target), &[pred, target], "mse")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1);
        self.weighted_cross_entropy(logits, targets, &vec![1.0 / n as f64; targets.len()])
    }

    /// `sum_r weights[r] * CE(logits[r], targets[r])` over the rows of a `[n, classes]` input.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy logits {:?} with {} targets",
                s,
                targets.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::arg(format!("target {bad} out of range for {c} classes")));
        }
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[t]);
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Finite scalar quantization with a straight-through gradient.
    ///
    /// The last axis holds one value per quantizer channel. Forward emits
    /// `round((L - 1) * sigmoid(z))` (optionally mapped to `[-1, 1]`);
    /// backward differentiates the un-rounded `(L - 1) * sigmoid(z)`.
    pub fn fsq(&mut self, input: Var, levels: &[u32], normalize: bool) -> Result<Var> {
        let d = levels.len();
        if d == 0 || self.shape(input).last() != Some(&d) {
            return Err(Error::shape(format!(
                "fsq over {:?} with {} levels",
                self.shape(input),
                d
            )));
        }
        let x = self.value(input);
        x.check_finite("fsq input")?;
        let mut v = x.clone();
        for (i, z) in v.data_mut().iter_mut().enumerate() {
            let l = (levels[i % d] - 1) as f64;
            let q = (l * sigmoid(*z)).round_ties_even();
            *z = if normalize { 2.0 * q / l - 1.0 } else { q };
        }
        self.push(
            v,
            Op::Fsq {
                input,
                levels: levels.to_vec(),
                normalize,
            },
            &[input],
            "fsq",
        )
    }

    /// Emit `value` in the forward pass while passing gradients to `input`
    /// unchanged, as in `input + stop_gradient(value - input)`.
    pub fn straight_through(&mut self, input: Var, value: Tensor) -> Result<Var> {
        if self.shape(input) != value.shape() {
            return Err(Error::shape("straight_through value shape"));
        }
        self.push(value, Op::StraightThrough(input), &[input], "straight_through")
    }

    /// Scaled dot-product attention: `softmax(q k^T / sqrt(d) + mask) v`
    /// over `[batch, tokens, d]` inputs. `mask` is added to the scores.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = *self.shape(q).last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.bmm(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = match mask {
            Some(m) => self.add(scores, m)?,
            None => scores,
        };
        let weights = self.softmax(scores)?;
        self.bmm(weights, v)
    }
}
