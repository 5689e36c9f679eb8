//! Dense layers with hand-written backward passes. Activations are CHW
//! `f64` buffers; matrix products go through `matrixmultiply::dgemm`.

/// `C x H x W` activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn zeros_like(other: &FeatureMap) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * a * b + beta * c` with row-major `a: m x k`, `b: k x n`.
/// `ta`/`tb` read the stored matrices as transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(input: &FeatureMap, s: &ConvShape, oh: usize, ow: usize) -> Vec<f64> {
    let k = s.kernel;
    let mut cols = vec![0.0; s.in_channels * k * k * oh * ow];
    for c in 0..s.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    let src = &input.data[(c * input.height + iy as usize) * input.width..];
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < input.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], s: &ConvShape, oh: usize, ow: usize, out: &mut FeatureMap) {
    let k = s.kernel;
    for c in 0..s.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= out.height as isize {
                        continue;
                    }
                    let base = (c * out.height + iy as usize) * out.width;
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < out.width as isize {
                            out.data[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `out x (in * k * k)`.
pub fn conv2d(input: &FeatureMap, weight: &[f64], bias: &[f64], s: &ConvShape) -> FeatureMap {
    assert_eq!(input.channels, s.in_channels, "conv input channels");
    let (oh, ow) = s.out_size(input.height, input.width);
    let mut out = FeatureMap::zeros(s.out_channels, oh, ow);
    for (c, &b) in bias.iter().enumerate() {
        out.data[c * oh * ow..(c + 1) * oh * ow].fill(b);
    }
    let kk = s.in_channels * s.kernel * s.kernel;
    if s.is_pointwise() {
        gemm(s.out_channels, kk, oh * ow, weight, false, &input.data, false, 1.0, &mut out.data);
    } else {
        let cols = im2col(input, s, oh, ow);
        gemm(s.out_channels, kk, oh * ow, weight, false, &cols, false, 1.0, &mut out.data);
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward(
    input: &FeatureMap,
    weight: &[f64],
    s: &ConvShape,
    dout: &FeatureMap,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> FeatureMap {
    let (oh, ow) = (dout.height, dout.width);
    let p = oh * ow;
    let kk = s.in_channels * s.kernel * s.kernel;
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += dout.data[c * p..(c + 1) * p].iter().sum::<f64>();
    }
    let mut din = FeatureMap::zeros_like(input);
    if s.is_pointwise() {
        gemm(s.out_channels, p, kk, &dout.data, false, &input.data, true, 1.0, dweight);
        gemm(kk, s.out_channels, p, weight, true, &dout.data, false, 0.0, &mut din.data);
    } else {
        let cols = im2col(input, s, oh, ow);
        gemm(s.out_channels, p, kk, &dout.data, false, &cols, true, 1.0, dweight);
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, s.out_channels, p, weight, true, &dout.data, false, 0.0, &mut dcols);
        col2im(&dcols, s, oh, ow, &mut din);
    }
    din
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour 2x upsampling cropped to `height x width`.
pub fn upsample2(x: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(x.channels, height, width);
    for c in 0..x.channels {
        for y in 0..height {
            for xx in 0..width {
                out.data[(c * height + y) * width + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &FeatureMap, src_height: usize, src_width: usize) -> FeatureMap {
    let mut din = FeatureMap::zeros(dout.channels, src_height, src_width);
    for c in 0..dout.channels {
        for y in 0..dout.height {
            for x in 0..dout.width {
                din.data[(c * src_height + y / 2) * src_width + x / 2] += dout.at(c, y, x);
            }
        }
    }
    din
}

/// `x: n x in`, `weight: out x in` -> `n x out`.
pub fn linear(x: &[f64], n: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_dim = bias.len();
    let in_dim = weight.len() / out_dim.max(1);
    let mut y = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm(n, in_dim, out_dim, x, false, weight, true, 1.0, &mut y);
    y
}

/// Accumulates weight/bias gradients and returns `dx`.
pub fn linear_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let out_dim = dbias.len();
    let in_dim = weight.len() / out_dim.max(1);
    for row in dy.chunks_exact(out_dim) {
        for (b, g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
    gemm(out_dim, n, in_dim, dy, true, x, false, 1.0, dweight);
    let mut dx = vec![0.0; n * in_dim];
    gemm(n, out_dim, in_dim, dy, false, weight, false, 0.0, &mut dx);
    dx
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subgradient of `|d|`, zero at the kink.
pub fn l1_grad(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Bilinear sample positions and weights at continuous `(y, x)`, where
/// integer coordinates are cell centers. Out-of-range points return nothing.
fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignShape {
    pub bins: usize,
    pub sampling: usize,
}

/// Pooled features for one box given in feature-map cell units, laid out
/// `channel x bin_y x bin_x`.
pub fn roi_align(feat: &FeatureMap, b: [f64; 4], s: &RoiAlignShape) -> Vec<f64> {
    let mut out = vec![0.0; feat.channels * s.bins * s.bins];
    roi_align_visit(feat.height, feat.width, b, s, |bin, idx, wgt| {
        for c in 0..feat.channels {
            out[c * s.bins * s.bins + bin] += wgt * feat.data[c * feat.height * feat.width + idx];
        }
    });
    out
}

pub fn roi_align_backward(dfeat: &mut FeatureMap, b: [f64; 4], s: &RoiAlignShape, dout: &[f64]) {
    let (h, w, ch) = (dfeat.height, dfeat.width, dfeat.channels);
    roi_align_visit(h, w, b, s, |bin, idx, wgt| {
        for c in 0..ch {
            dfeat.data[c * h * w + idx] += wgt * dout[c * s.bins * s.bins + bin];
        }
    });
}

fn roi_align_visit(h: usize, w: usize, b: [f64; 4], s: &RoiAlignShape, mut f: impl FnMut(usize, usize, f64)) {
    let [x1, y1, x2, y2] = b;
    let bw = (x2 - x1) / s.bins as f64;
    let bh = (y2 - y1) / s.bins as f64;
    let norm = 1.0 / (s.sampling * s.sampling) as f64;
    for by in 0..s.bins {
        for bx in 0..s.bins {
            let bin = by * s.bins + bx;
            for sy in 0..s.sampling {
                let y = y1 + bh * (by as f64 + (sy as f64 + 0.5) / s.sampling as f64);
                for sx in 0..s.sampling {
                    let x = x1 + bw * (bx as f64 + (sx as f64 + 0.5) / s.sampling as f64);
                    if let Some(taps) = bilinear_taps(h, w, y, x) {
                        for (idx, wgt) in taps {
                            if wgt != 0.0 {
                                f(bin, idx, wgt * norm);
                            }
                        }
                    }
                }
            }
        }
    }
}
