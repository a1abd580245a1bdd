//! Dense row-major `f32` tensors and the handful of kernels the segmentation
//! transformer needs. Every kernel is a pure function of its inputs; dot
//! products accumulate in `f64`.

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor shape {shape:?} has a zero axis")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err("tensor data length", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the elements; the length cannot change.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Keeps only the given indices (in the given order) along `axis`.
    pub fn select(&self, axis: usize, keep: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(dim_err("select axis", self.rank(), axis));
        }
        if keep.is_empty() {
            return Err(Error::Config("select would empty an axis".into()));
        }
        let len = self.shape[axis];
        if let Some(&bad) = keep.iter().find(|&&i| i >= len) {
            return Err(dim_err(format!("select index on axis {axis}"), len, bad));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * len * inner;
            for &k in keep {
                let start = base + k * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Ok(Self { shape, data })
    }

    /// `[C,H,W]` feature map to `[H*W, C]` token matrix.
    pub fn chw_to_tokens(&self) -> Result<Self> {
        let [c, h, w] = self.dims3("chw_to_tokens")?;
        let n = h * w;
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                data[p * c + ch] = self.data[ch * n + p];
            }
        }
        Ok(Self {
            shape: vec![n, c],
            data,
        })
    }

    /// `[H*W, C]` token matrix back to a `[C,H,W]` feature map.
    pub fn tokens_to_chw(&self, h: usize, w: usize) -> Result<Self> {
        let [n, c] = self.dims2("tokens_to_chw")?;
        if n != h * w {
            return Err(dim_err("token count", h * w, n));
        }
        let mut data = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                data[ch * n + p] = self.data[p * c + ch];
            }
        }
        Ok(Self {
            shape: vec![c, h, w],
            data,
        })
    }

    /// Concatenates tensors along axis 0; trailing axes must agree.
    pub fn concat0(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for t in parts {
            if &t.shape[1..] != tail {
                return Err(Error::Config(format!(
                    "concat trailing shape {:?} != {:?}",
                    &t.shape[1..],
                    tail
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(dim_err(format!("{what} rank"), 2, self.rank())),
        }
    }

    pub(crate) fn dims3(&self, what: &str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(dim_err(format!("{what} rank"), 3, self.rank())),
        }
    }

    pub(crate) fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(dim_err(format!("{what} rank"), 4, self.rank())),
        }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// 2-D cross-correlation of a `[C_in,H,W]` map with `[C_out, C_in/groups, kH, kW]` filters.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let [c_in, h, w] = input.dims3("conv2d input")?;
    let [c_out, c_per_group, kh, kw] = weight.dims4("conv2d weight")?;
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if groups == 0 || c_in % groups != 0 {
        return Err(Error::Config(format!(
            "conv2d input channels {c_in} not divisible by groups {groups}"
        )));
    }
    if c_out % groups != 0 {
        return Err(Error::Config(format!(
            "conv2d output channels {c_out} not divisible by groups {groups}"
        )));
    }
    if c_per_group != c_in / groups {
        return Err(dim_err("conv2d weight input-channel axis", c_in / groups, c_per_group));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(dim_err("conv2d bias axis", c_out, b.numel()));
        }
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if kh > hp {
        return Err(dim_err("conv2d kernel height vs padded input", hp, kh));
    }
    if kw > wp {
        return Err(dim_err("conv2d kernel width vs padded input", wp, kw));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let out_per_group = c_out / groups;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; c_out * oh * ow];
    for oc in 0..c_out {
        let g = oc / out_per_group;
        let b = bias.map_or(0.0, |b| b.data()[oc] as f64);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for icg in 0..c_per_group {
                    let ic = g * c_per_group + icg;
                    let w_base = ((oc * c_per_group) + icg) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (ic * h + iy as usize) * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] as f64 * wt[w_base + ky * kw + kx] as f64;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Affine map over the last axis; leading axes are flattened and restored.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [d_out, d_in] = weight.dims2("linear weight")?;
    let last = *input.shape().last().expect("tensor rank >= 1");
    if last != d_in {
        return Err(dim_err("linear input last axis", d_in, last));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(dim_err("linear bias axis", d_out, b.numel()));
        }
    }
    let rows = input.numel() / d_in;
    let x = input.data();
    let wt = weight.data();
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let wr = &wt[o * d_in..(o + 1) * d_in];
            let mut acc = bias.map_or(0.0, |b| b.data()[o] as f64);
            for (a, b) in xr.iter().zip(wr) {
                acc += *a as f64 * *b as f64;
            }
            out.push(acc as f32);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *input.shape().last().expect("tensor rank >= 1");
    if gamma.shape() != [d] {
        return Err(dim_err("layer_norm gamma axis", d, gamma.numel()));
    }
    if beta.shape() != [d] {
        return Err(dim_err("layer_norm beta axis", d, beta.numel()));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(input.numel());
    for row in input.data().chunks(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (i, &v) in row.iter().enumerate() {
            out.push(((v as f64 - mean) * inv * g[i] as f64 + b[i] as f64) as f32);
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Multi-head scaled dot-product attention with the conventional
/// `1/sqrt(head_dim)` scale.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let [_, d] = q.dims2("attention q")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    attention_scaled(q, k, v, heads, 1.0 / ((d / heads) as f32).sqrt())
}

/// Attention with an explicit logit scale. Queries and keys share a width,
/// values may be narrower or wider; output is `[N, D_v]`.
pub fn attention_scaled(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f32,
) -> Result<Tensor> {
    let [n, dq] = q.dims2("attention q")?;
    let [m, dk] = k.dims2("attention k")?;
    let [mv, dv] = v.dims2("attention v")?;
    if dk != dq {
        return Err(dim_err("attention key width", dq, dk));
    }
    if mv != m {
        return Err(dim_err("attention value rows", m, mv));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::Config(format!(
            "attention query width {dq} not divisible by {heads} heads"
        )));
    }
    if dv % heads != 0 {
        return Err(Error::Config(format!(
            "attention value width {dv} not divisible by {heads} heads"
        )));
    }
    let (hq, hv) = (dq / heads, dv / heads);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; n * dv];
    let mut logits = vec![0.0f64; m];
    for h in 0..heads {
        for i in 0..n {
            let qi = &qd[i * dq + h * hq..i * dq + (h + 1) * hq];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &kd[j * dq + h * hq..j * dq + (h + 1) * hq];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| *a as f64 * *b as f64).sum();
                *l = dot * scale as f64;
            }
            softmax_in_place(&mut logits);
            for c in 0..hv {
                let mut acc = 0.0f64;
                for (j, p) in logits.iter().enumerate() {
                    acc += p * vd[j * dv + h * hv + c] as f64;
                }
                out[i * dv + h * hv + c] = acc as f32;
            }
        }
    }
    Tensor::new(vec![n, dv], out)
}

fn softmax_in_place(row: &mut [f64]) {
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

/// Softmax over the last axis.
pub fn softmax(input: &Tensor) -> Tensor {
    let d = *input.shape().last().expect("tensor rank >= 1");
    let mut buf = vec![0.0f64; d];
    let mut out = Vec::with_capacity(input.numel());
    for row in input.data().chunks(d) {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = v as f64;
        }
        softmax_in_place(&mut buf);
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Tensor {
        shape: input.shape().to_vec(),
        data: out,
    }
}

/// Bilinear resize of a `[C,H,W]` map, half-pixel centers (align-corners = false).
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = input.dims3("resize input")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be at least 1x1".into()));
    }
    let ys: Vec<_> = (0..out_h).map(|o| source_coord(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| source_coord(o, w, out_w)).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = plane[y0 * w + x0] as f64 * (1.0 - lx) + plane[y0 * w + x1] as f64 * lx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - lx) + plane[y1 * w + x1] as f64 * lx;
                out.push((top * (1.0 - ly) + bot * ly) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// GELU, tanh approximation.
pub fn gelu(input: &Tensor) -> Tensor {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    input.map(|v| {
        let x = v as f64;
        (0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())) as f32
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "add shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_conv(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, cpg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let opg = co / groups;
        let at = |c: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                0.0
            } else {
                x.data()[(c * h + y as usize) * wd + xx as usize] as f64
            }
        };
        let mut out = vec![];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[o] as f64;
                    for j in 0..cpg {
                        let c = (o / opg) * cpg + j;
                        assert!(c < ci);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                s += at(c, y, xx)
                                    * w.data()[((o * cpg + j) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| i as f32 * 0.37 - 2.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ramp_average() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        for (got, want) in y.data().iter().zip([5.0, 6.0, 9.0, 10.0]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn conv_errors_name_axis() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 0, 1).unwrap_err().to_string();
        assert!(err.contains("input-channel"), "{err}");
        let w = Tensor::zeros(&[1, 2, 7, 3]);
        let err = conv2d(&x, &w, None, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
        let err = conv2d(&Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[2, 1, 1, 1]), None, 1, 0, 2)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn linear_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        let y = linear(&x, &w, Some(&Tensor::zeros(&[2]))).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);

        let x = t(&[3], &[1.0, 0.0, 0.0]);
        // rows pick components 2, 0, 1
        let w = t(&[3, 3], &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
        let y = linear(&x, &w, Some(&Tensor::full(&[3], 1.0))).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0]);

        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32 - 7.5);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(&[4]))).unwrap(), x);

        assert!(matches!(
            linear(&x, &Tensor::zeros(&[4, 3]), None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[4], 3.0), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(&t(&[2], &[-1.0, 1.0]), &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12)
            .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let y = layer_norm(&t(&[3], &[0.0, 2.0, 4.0]), &Tensor::full(&[3], 2.0), &Tensor::full(&[3], 1.0), 1e-5)
            .unwrap();
        let std = (8.0f64 / 3.0 + 1e-5).sqrt();
        let want = [1.0 - 4.0 / std, 1.0, 1.0 + 4.0 / std];
        for (g, w) in y.data().iter().zip(want) {
            assert!((*g as f64 - w).abs() < 1e-5);
        }
        let mean: f32 = y.data().iter().sum::<f32>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-6);
    }

    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
        let (n, d) = (q.dim(0), q.dim(1));
        let m = k.dim(0);
        let dv = v.dim(1);
        let (hd, hv) = (d / heads, dv / heads);
        let mut out = vec![0.0; n * dv];
        for h in 0..heads {
            for i in 0..n {
                let mut s = vec![0.0f64; m];
                for j in 0..m {
                    for c in 0..hd {
                        s[j] += q.data()[i * d + h * hd + c] as f64 * k.data()[j * d + h * hd + c] as f64;
                    }
                    s[j] /= (hd as f64).sqrt();
                }
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for j in 0..m {
                    for c in 0..hv {
                        out[i * dv + h * hv + c] += s[j].exp() / z * v.data()[j * dv + h * hv + c] as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]);
        let k = t(&[1, 4], &[1.0, 1.0, -1.0, 0.0]);
        let v = t(&[1, 4], &[7.0, 8.0, 9.0, 10.0]);
        assert_eq!(attention(&q, &k, &v, 2).unwrap().data(), v.data());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Tensor::from_fn(&[3, 2], |i| i as f32);
        let k = Tensor::full(&[4, 2], 0.5);
        let v = Tensor::from_fn(&[4, 2], |i| i as f32);
        let y = attention(&q, &k, &v, 1).unwrap();
        for row in y.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-6 && (row[1] - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let q = t(&[2, 4], &[0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]);
        let k = t(&[2, 4], &[0.7, -0.2, 0.3, 0.9, -0.4, 0.6, 0.2, -0.8]);
        let v = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 2.0]);
        let got = attention(&q, &k, &v, 2).unwrap();
        for (g, w) in got.data().iter().zip(naive_attention(&q, &k, &v, 2)) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
        assert!(matches!(attention(&q, &k, &v, 3), Err(Error::Config(_))));
    }

    fn oracle_bilinear(img: &[[f64; 2]; 2], oh: usize, ow: usize) -> Vec<f64> {
        // Pixel centers: out pixel i maps to (i + 0.5) * in / out - 0.5,
        // clamped into [0, in - 1] as an edge-replicated sample.
        let sample = |y: f64, x: f64| -> f64 {
            let y = y.clamp(0.0, 1.0);
            let x = x.clamp(0.0, 1.0);
            img[0][0] * (1.0 - y) * (1.0 - x)
                + img[0][1] * (1.0 - y) * x
                + img[1][0] * y * (1.0 - x)
                + img[1][1] * y * x
        };
        let mut out = vec![];
        for i in 0..oh {
            for j in 0..ow {
                let y = (i as f64 + 0.5) * 2.0 / oh as f64 - 0.5;
                let x = (j as f64 + 0.5) * 2.0 / ow as f64 - 0.5;
                out.push(sample(y, x));
            }
        }
        out
    }

    #[test]
    fn resize_examples() {
        let c = Tensor::full(&[2, 3, 5], 0.7);
        let y = resize_bilinear(&c, 7, 4).unwrap();
        assert_eq!(y.shape(), &[2, 7, 4]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let one = t(&[1, 1, 1], &[4.5]);
        assert_eq!(resize_bilinear(&one, 2, 2).unwrap().data(), &[4.5; 4]);

        let img = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let y = resize_bilinear(&img, 4, 4).unwrap();
        let want = oracle_bilinear(&[[0.0, 1.0], [2.0, 3.0]], 4, 4);
        for (g, w) in y.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[15], 3.0);
    }

    #[test]
    fn activations_and_add() {
        let x = t(&[4], &[-2.0, -0.5, 0.0, 1.5]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.0, 1.5]);
        let g = gelu(&x);
        assert!(g.data()[2] == 0.0 && (g.data()[3] - 1.39964).abs() < 1e-4);
        let s = softmax(&t(&[2, 3], &[1.0, 2.0, 3.0, -100.0, 0.0, 100.0]));
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert_eq!(add(&x, &x).unwrap().data(), &[-4.0, -1.0, 0.0, 3.0]);
        assert!(add(&x, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn select_and_token_layout() {
        let x = Tensor::from_fn(&[3, 2, 2], |i| i as f32);
        let s = x.select(0, &[2, 0]).unwrap();
        assert_eq!(s.data(), &[8.0, 9.0, 10.0, 11.0, 0.0, 1.0, 2.0, 3.0]);
        let tok = x.chw_to_tokens().unwrap();
        assert_eq!(tok.shape(), &[4, 3]);
        assert_eq!(&tok.data()[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(tok.tokens_to_chw(2, 2).unwrap(), x);
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn conv_matches_naive(
            groups in 1usize..3, cpg in 1usize..3, opg in 1usize..3,
            h in 3usize..7, w in 3usize..7, k in 1usize..4,
            stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
        ) {
            let ci = groups * cpg;
            let co = groups * opg;
            let mut s = seed;
            let mut next = move || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 33) as f32 / (1u64 << 31) as f32) - 0.5 };
            let x = Tensor::from_fn(&[ci, h, w], |_| next());
            let wt = Tensor::from_fn(&[co, cpg, k, k], |_| next());
            let b = Tensor::from_fn(&[co], |_| next());
            let y = conv2d(&x, &wt, Some(&b), stride, pad, groups).unwrap();
            let want = naive_conv(&x, &wt, &b, stride, pad, groups);
            prop_assert_eq!(y.numel(), want.len());
            for (g, wv) in y.data().iter().zip(&want) {
                prop_assert!((*g as f64 - wv).abs() <= 1e-5 * wv.abs().max(1.0));
            }
        }

        #[test]
        fn linear_matches_naive(rows in 1usize..5, din in 1usize..9, dout in 1usize..9,
                                vals in proptest::collection::vec(-2.0f32..2.0, 200)) {
            let x = Tensor::from_fn(&[rows, din], |i| vals[i % 200]);
            let w = Tensor::from_fn(&[dout, din], |i| vals[(i * 7 + 3) % 200]);
            let b = Tensor::from_fn(&[dout], |i| vals[(i * 13 + 1) % 200]);
            let y = linear(&x, &w, Some(&b)).unwrap();
            for r in 0..rows {
                for o in 0..dout {
                    let mut s = b.data()[o] as f64;
                    for i in 0..din {
                        s += x.data()[r * din + i] as f64 * w.data()[o * din + i] as f64;
                    }
                    let g = y.data()[r * dout + o] as f64;
                    prop_assert!((g - s).abs() <= 1e-5 * s.abs().max(1.0));
                }
            }
        }

        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let n = vals.len();
            let s = softmax(&Tensor::new(vec![n], vals).unwrap());
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            prop_assert!((s.data().iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}
