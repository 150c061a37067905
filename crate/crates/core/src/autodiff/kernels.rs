//! Numeric kernels shared by the graph ops and by graph-free inference.
//!
//! Feature maps are `[C, D, H, W]` buffers (depth 1 for 2D). Reductions run in
//! a fixed order so every kernel is bit-deterministic.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// `floor((in + 2·pad − k) / stride) + 1`, or `None` when the kernel does not
/// fit in the padded input.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_extent(input[a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
                Error::shape(format!(
                    "conv kernel {kernel:?} stride {stride:?} pad {pad:?} does not fit input {input:?}"
                ))
            })?;
        }
        Ok(ConvGeom {
            in_ch,
            out_ch,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn k_len(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn n_out(&self) -> usize {
        self.output.iter().product()
    }

    fn n_in(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o·s + k − p` is valid.
#[inline]
fn valid_range(n_out: usize, n_in: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  and  o*s + k - p < n_in
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n_in + p <= k {
        0
    } else {
        ((n_in + p - k - 1) / s + 1).min(n_out)
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, input: &[f32], col: &mut [f32]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let n = g.n_out();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(od, id, sd, kz, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, ih, sh, ky, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, iw, sw, kx, pw);
                    let dst = &mut col[row * n..(row + 1) * n];
                    dst.fill(0.0);
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + ky - ph;
                            let src_row = &plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let dst_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if sw == 1 {
                                let ix0 = x_lo + kx - pw;
                                dst_row[x_lo..x_hi]
                                    .copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                            } else {
                                for ox in x_lo..x_hi {
                                    dst_row[ox] = src_row[ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], grad_in: &mut [f32]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let n = g.n_out();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut grad_in[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(od, id, sd, kz, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, ih, sh, ky, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, iw, sw, kx, pw);
                    let src = &col[row * n..(row + 1) * n];
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + ky - ph;
                            let src_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst_row = &mut plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            for ox in x_lo..x_hi {
                                dst_row[ox * sw + kx - pw] += src_row[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the slices;
    // every caller passes buffers sized m·k, k·n and m·n respectively.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let n = g.n_out();
    let k = g.k_len();
    let mut out = vec![0.0f32; g.out_ch * n];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[oc]);
        }
    }
    if g.is_pointwise() {
        gemm(g.out_ch, k, n, weight, (k, 1), input, (n, 1), 1.0, &mut out);
    } else {
        let mut col = vec![0.0f32; k * n];
        im2col(g, input, &mut col);
        gemm(g.out_ch, k, n, weight, (k, 1), &col, (n, 1), 1.0, &mut out);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let n = g.n_out();
    let k = g.k_len();
    let pointwise = g.is_pointwise();
    let col_owned;
    let col: &[f32] = if pointwise {
        input
    } else if need.1 {
        let mut c = vec![0.0f32; k * n];
        im2col(g, input, &mut c);
        col_owned = c;
        &col_owned
    } else {
        &[]
    };

    let weight_grad = need.1.then(|| {
        let mut dw = vec![0.0f32; g.out_ch * k];
        // dW = dOut · colᵀ
        gemm(g.out_ch, n, k, grad_out, (n, 1), col, (1, n), 0.0, &mut dw);
        dw
    });
    let bias_grad = need.2.then(|| {
        grad_out
            .chunks(n)
            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    });
    let input_grad = need.0.then(|| {
        // dCol = Wᵀ · dOut
        if pointwise {
            let mut dx = vec![0.0f32; k * n];
            gemm(
                k,
                g.out_ch,
                n,
                weight,
                (1, k),
                grad_out,
                (n, 1),
                0.0,
                &mut dx,
            );
            dx
        } else {
            let mut dcol = vec![0.0f32; k * n];
            gemm(
                k,
                g.out_ch,
                n,
                weight,
                (1, k),
                grad_out,
                (n, 1),
                0.0,
                &mut dcol,
            );
            let mut dx = vec![0.0f32; g.in_ch * g.n_in()];
            col2im(g, &dcol, &mut dx);
            dx
        }
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// One-axis linear interpolation stencil for resampling `n_in` cells at
/// spacing `stride` onto `n_out` points (half-pixel centers, edge clamped).
pub fn linear_stencil(n_in: usize, n_out: usize, stride: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = ((o as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

pub(crate) fn upsample_nearest_forward(
    x: &[f32],
    c: usize,
    sp: [usize; 3],
    f: [usize; 3],
) -> Vec<f32> {
    let [d, h, w] = sp;
    let [od, oh, ow] = [d * f[0], h * f[1], w * f[2]];
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row = &x[((ch * d + z / f[0]) * h + y / f[1]) * w..][..w];
                out.extend((0..ow).map(|xx| row[xx / f[2]]));
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(
    g: &[f32],
    c: usize,
    sp: [usize; 3],
    f: [usize; 3],
) -> Vec<f32> {
    let [d, h, w] = sp;
    let [od, oh, ow] = [d * f[0], h * f[1], w * f[2]];
    let mut dx = vec![0.0f32; c * d * h * w];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &g[((ch * od + z) * oh + y) * ow..][..ow];
                let dst = &mut dx[((ch * d + z / f[0]) * h + y / f[1]) * w..][..w];
                for (xx, v) in src.iter().enumerate() {
                    dst[xx / f[2]] += v;
                }
            }
        }
    }
    dx
}

/// Multilinear resampling of `[C, D, H, W]` onto `out` spatial extent using
/// per-axis stencils from [`linear_stencil`].
pub fn resample_linear_forward(
    x: &[f32],
    c: usize,
    sp: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
) -> Vec<f32> {
    let sz = linear_stencil(sp[0], out[0], stride[0]);
    let sy = linear_stencil(sp[1], out[1], stride[1]);
    let sx = linear_stencil(sp[2], out[2], stride[2]);
    let [_, h, w] = sp;
    let mut res = Vec::with_capacity(c * out.iter().product::<usize>());
    for ch in 0..c {
        let plane = &x[ch * sp.iter().product::<usize>()..];
        for &(z0, z1, wz) in &sz {
            for &(y0, y1, wy) in &sy {
                let r00 = &plane[(z0 * h + y0) * w..][..w];
                let r01 = &plane[(z0 * h + y1) * w..][..w];
                let r10 = &plane[(z1 * h + y0) * w..][..w];
                let r11 = &plane[(z1 * h + y1) * w..][..w];
                for &(x0, x1, wx) in &sx {
                    let l = |r: &[f32]| r[x0] + (r[x1] - r[x0]) * wx;
                    let a = l(r00) + (l(r01) - l(r00)) * wy;
                    let b = l(r10) + (l(r11) - l(r10)) * wy;
                    res.push(a + (b - a) * wz);
                }
            }
        }
    }
    res
}

pub(crate) fn resample_linear_backward(
    g: &[f32],
    c: usize,
    sp: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
) -> Vec<f32> {
    let sz = linear_stencil(sp[0], out[0], stride[0]);
    let sy = linear_stencil(sp[1], out[1], stride[1]);
    let sx = linear_stencil(sp[2], out[2], stride[2]);
    let [_, h, w] = sp;
    let n_in: usize = sp.iter().product();
    let mut dx = vec![0.0f32; c * n_in];
    let mut it = g.iter();
    for ch in 0..c {
        let plane = &mut dx[ch * n_in..(ch + 1) * n_in];
        for &(z0, z1, wz) in &sz {
            for &(y0, y1, wy) in &sy {
                for &(x0, x1, wx) in &sx {
                    let v = *it.next().expect("gradient length matches output");
                    let corners = [
                        (z0, y0, x0, (1.0 - wz) * (1.0 - wy) * (1.0 - wx)),
                        (z0, y0, x1, (1.0 - wz) * (1.0 - wy) * wx),
                        (z0, y1, x0, (1.0 - wz) * wy * (1.0 - wx)),
                        (z0, y1, x1, (1.0 - wz) * wy * wx),
                        (z1, y0, x0, wz * (1.0 - wy) * (1.0 - wx)),
                        (z1, y0, x1, wz * (1.0 - wy) * wx),
                        (z1, y1, x0, wz * wy * (1.0 - wx)),
                        (z1, y1, x1, wz * wy * wx),
                    ];
                    for (z, y, xx, wt) in corners {
                        plane[(z * h + y) * w + xx] += v * wt;
                    }
                }
            }
        }
    }
    dx
}

/// Per-location channel norms of a `[C, N]` buffer.
pub(crate) fn channel_norms(x: &[f32], c: usize) -> Vec<f32> {
    let n = x.len() / c;
    let mut acc = vec![0.0f64; n];
    for ch in 0..c {
        for (a, v) in acc.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *a += (*v as f64) * (*v as f64);
        }
    }
    acc.into_iter().map(|s| s.sqrt() as f32).collect()
}

pub(crate) fn l2_normalize_forward(x: &[f32], c: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let n = x.len() / c;
    let norms = channel_norms(x, c);
    let mut y = vec![0.0f32; x.len()];
    for ch in 0..c {
        for i in 0..n {
            y[ch * n + i] = x[ch * n + i] / norms[i].max(eps);
        }
    }
    (y, norms)
}

pub(crate) fn l2_normalize_backward(
    y: &[f32],
    norms: &[f32],
    g: &[f32],
    c: usize,
    eps: f32,
) -> Vec<f32> {
    let n = y.len() / c;
    let mut dot = vec![0.0f64; n];
    for ch in 0..c {
        for i in 0..n {
            dot[i] += y[ch * n + i] as f64 * g[ch * n + i] as f64;
        }
    }
    let mut dx = vec![0.0f32; y.len()];
    for ch in 0..c {
        for i in 0..n {
            let k = ch * n + i;
            dx[k] = if norms[i] > eps {
                ((g[k] as f64 - y[k] as f64 * dot[i]) / norms[i] as f64) as f32
            } else {
                g[k] / eps
            };
        }
    }
    dx
}
