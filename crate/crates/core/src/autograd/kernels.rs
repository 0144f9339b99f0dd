//! Raw NCHW kernels used by the graph operations.
//!
//! Every kernel is single-threaded and performs its reductions in a fixed
//! order, so repeated calls on the same inputs are bitwise identical.

/// Geometry of a square-kernel 2D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a·b (+ c)`, where `a` is `m×k` and `b` is `k×n` after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in-bounds for the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
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

fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. `weight` is `out_channels × patch_len`, `bias` has `out_channels` entries.
pub fn conv2d_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f32],
    bias: Option<&[f32]>,
    out_channels: usize,
) -> Vec<f32> {
    let k = g.patch_len();
    let p = g.out_h() * g.out_w();
    let in_plane = g.in_channels * g.in_h * g.in_w;
    let mut out = vec![0.0; batch * out_channels * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let on = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        let patches: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(out_channels, k, p, weight, false, patches, false, on, false);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut on[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dweight: Option<Vec<f32>>,
    pub dbias: Option<Vec<f32>>,
}

/// Backward convolution. Only the requested gradients are computed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f32],
    out_channels: usize,
    dout: &[f32],
    want_dx: bool,
    want_dweight: bool,
    want_dbias: bool,
) -> ConvGrads {
    let k = g.patch_len();
    let p = g.out_h() * g.out_w();
    let in_plane = g.in_channels * g.in_h * g.in_w;
    let mut dx = want_dx.then(|| vec![0.0; batch * in_plane]);
    let mut dweight = want_dweight.then(|| vec![0.0; out_channels * k]);
    let mut dbias = want_dbias.then(|| vec![0.0; out_channels]);
    let mut cols = vec![0.0; k * p];
    for n in 0..batch {
        let dn = &dout[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(db) = dbias.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dn[co * p..(co + 1) * p].iter().sum::<f32>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            let xn = &x[n * in_plane..(n + 1) * in_plane];
            let patches: &[f32] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(out_channels, p, k, dn, false, patches, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                gemm(k, out_channels, p, weight, true, dn, false, dxn, false);
            } else {
                gemm(k, out_channels, p, weight, true, dn, false, &mut cols, false);
                col2im(&cols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// 2×2 max pooling with stride 2. Returns the pooled values and the flat
/// input index of every selected maximum (first maximum in raster order wins).
pub fn maxpool2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling: every pixel is replicated `factor×factor` times.
pub fn upsample_nearest(x: &[f32], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &x[p * h * w + (oy / factor) * w..p * h * w + (oy / factor + 1) * w];
            let dst = &mut out[p * oh * ow + oy * ow..p * oh * ow + (oy + 1) * ow];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dout: &[f32], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[p * h * w + (oy / factor) * w + ox / factor] += dout[p * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}

/// Per-pixel softmax over the channel axis of an NCHW buffer.
pub fn softmax_channels(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let mut max = f32::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[base + ch * hw + i]);
            }
            let mut total = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * hw + i] - max).exp();
                out[base + ch * hw + i] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * hw + i] /= total;
            }
        }
    }
    out
}

pub fn softmax_channels_backward(y: &[f32], dy: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut dx = vec![0.0; y.len()];
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += y[base + ch * hw + i] * dy[base + ch * hw + i];
            }
            for ch in 0..c {
                let idx = base + ch * hw + i;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

/// Batch statistics of an NCHW buffer: per-channel mean and biased variance.
pub fn channel_moments(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&v| (v as f64 - m) * (v as f64 - m))
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (mean, var)
}
