//! Numeric kernels behind the graph ops. Layout is `[B, C, H, W]` row-major.
//!
//! Convolutions run as im2col + sgemm. Large matrix products are split over a
//! fixed 32-row chunk grid and dispatched on the shared pool; the partition
//! does not depend on the thread count, so outputs are bit-identical for any
//! `ETM_NUM_THREADS`.

use super::{thread_pool, NnError, NnResult};
use rayon::prelude::*;

/// Resolved convolution geometry for square kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> NnResult<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || w_shape[2] != w_shape[3] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                expected: "x [B,C,H,W], w [Cout,Cin,k,k]".into(),
                got: format!("x {x_shape:?}, w {w_shape:?}"),
            });
        }
        if x_shape[1] != w_shape[1] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                expected: format!("{} input channels", w_shape[1]),
                got: format!("{}", x_shape[1]),
            });
        }
        if stride == 0 || dilation == 0 {
            return Err(NnError::BadConfig {
                op: "conv2d",
                reason: "stride and dilation must be >= 1".into(),
            });
        }
        let kernel = w_shape[2];
        let span = dilation * (kernel - 1) + 1;
        let (h_in, w_in) = (x_shape[2], x_shape[3]);
        if h_in + 2 * pad < span || w_in + 2 * pad < span {
            return Err(NnError::BadConfig {
                op: "conv2d",
                reason: format!("kernel span {span} exceeds padded input {h_in}x{w_in}"),
            });
        }
        Ok(Self {
            batch: x_shape[0],
            c_in: x_shape[1],
            h_in,
            w_in,
            c_out: w_shape[0],
            kernel,
            stride,
            pad,
            dilation,
            h_out: (h_in + 2 * pad - span) / stride + 1,
            w_out: (w_in + 2 * pad - span) / stride + 1,
        })
    }

    pub fn cols_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel * self.h_out * self.w_out
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn in_image(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    fn out_image(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
}

// ── gemm ───────────────────────────────────────────────────────────────────

const PAR_ROWS: usize = 32;
const PAR_FLOP_THRESHOLD: usize = 200_000;

#[derive(Clone, Copy)]
struct SendConstPtr(*const f32);
unsafe impl Send for SendConstPtr {}
unsafe impl Sync for SendConstPtr {}

#[derive(Clone, Copy)]
struct SendMutPtr(*mut f32);
unsafe impl Send for SendMutPtr {}
unsafe impl Sync for SendMutPtr {}

/// Strided sgemm `c = alpha * a @ b + beta * c`, parallelized over fixed
/// 32-row bands of the output. Caller guarantees the strided views are in
/// bounds and that `c` rows are disjoint between bands (true for any `rsc`).
#[allow(clippy::too_many_arguments)]
unsafe fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: *const f32,
    rsa: isize,
    csa: isize,
    b: *const f32,
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let flops = 2 * m * k * n;
    if flops < PAR_FLOP_THRESHOLD || m <= PAR_ROWS {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        return;
    }
    let bands: Vec<(usize, usize)> = (0..m)
        .step_by(PAR_ROWS)
        .map(|r0| (r0, (r0 + PAR_ROWS).min(m)))
        .collect();
    let (ap, bp, cp) = (SendConstPtr(a), SendConstPtr(b), SendMutPtr(c));
    thread_pool().install(|| {
        bands.into_par_iter().for_each(|(r0, r1)| {
            let (ap, bp, cp) = (ap, bp, cp);
            matrixmultiply::sgemm(
                r1 - r0,
                k,
                n,
                alpha,
                ap.0.offset(r0 as isize * rsa),
                rsa,
                csa,
                bp.0,
                rsb,
                csb,
                beta,
                cp.0.offset(r0 as isize * rsc),
                rsc,
                csc,
            );
        });
    });
}

/// Row-major `c [m,n] = alpha * a [m,k] @ b [k,n] + beta * c`.
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        sgemm_strided(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Row-major `c [m,n] = alpha * a [m,k] @ b^T + beta * c` with `b` stored `[n,k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        sgemm_strided(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Row-major `c [m,n] = alpha * a^T @ b [k,n] + beta * c` with `a` stored `[k,m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        sgemm_strided(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ── convolution ────────────────────────────────────────────────────────────

/// Unfold one image into `[Cin*k*k, Hout*Wout]` columns (zero padding).
pub fn im2col(x_img: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let n = g.h_out * g.w_out;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x_img[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let out_row = &mut cols[row * n..(row + 1) * n];
                let dy = (kh * g.dilation) as isize - g.pad as isize;
                let dx = (kw * g.dilation) as isize - g.pad as isize;
                let mut idx = 0;
                for ho in 0..g.h_out {
                    let hy = (ho * g.stride) as isize + dy;
                    if hy < 0 || hy >= g.h_in as isize {
                        out_row[idx..idx + g.w_out].fill(0.0);
                        idx += g.w_out;
                        continue;
                    }
                    let line = &plane[hy as usize * g.w_in..(hy as usize + 1) * g.w_in];
                    for wo in 0..g.w_out {
                        let wx = (wo * g.stride) as isize + dx;
                        out_row[idx] = if wx < 0 || wx >= g.w_in as isize {
                            0.0
                        } else {
                            line[wx as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns back, accumulating into one image buffer.
pub fn col2im_add(cols: &[f32], g: &ConvGeom, dx_img: &mut [f32]) {
    let n = g.h_out * g.w_out;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane_off = ci * g.h_in * g.w_in;
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let col_row = &cols[row * n..(row + 1) * n];
                let dy = (kh * g.dilation) as isize - g.pad as isize;
                let dx = (kw * g.dilation) as isize - g.pad as isize;
                let mut idx = 0;
                for ho in 0..g.h_out {
                    let hy = (ho * g.stride) as isize + dy;
                    if hy < 0 || hy >= g.h_in as isize {
                        idx += g.w_out;
                        continue;
                    }
                    let line_off = plane_off + hy as usize * g.w_in;
                    for wo in 0..g.w_out {
                        let wx = (wo * g.stride) as isize + dx;
                        if wx >= 0 && wx < g.w_in as isize {
                            dx_img[line_off + wx as usize] += col_row[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution forward. When `keep_cols` is set the unfolded columns are
/// returned for the weight-gradient pass.
pub fn conv2d_forward(
    x: &[f32],
    w: &[f32],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let kk = g.c_in * g.kernel * g.kernel;
    let n = g.h_out * g.w_out;
    let mut out = vec![0.0f32; g.batch * g.out_image()];
    let mut cols_all = if keep_cols {
        Some(vec![0.0f32; g.batch * g.cols_len()])
    } else {
        None
    };
    let run_image = |x_img: &[f32], out_img: &mut [f32], cols: &mut [f32]| {
        im2col(x_img, g, cols);
        gemm_nn(g.c_out, kk, n, 1.0, w, cols, 0.0, out_img);
    };
    if g.batch == 1 {
        let mut scratch;
        let cols = match cols_all.as_mut() {
            Some(c) => &mut c[..],
            None => {
                scratch = vec![0.0f32; g.cols_len()];
                &mut scratch[..]
            }
        };
        run_image(x, &mut out, cols);
    } else {
        let in_sz = g.in_image();
        let out_sz = g.out_image();
        let cols_sz = g.cols_len();
        match cols_all.as_mut() {
            Some(cols_all) => thread_pool().install(|| {
                out.par_chunks_mut(out_sz)
                    .zip(cols_all.par_chunks_mut(cols_sz))
                    .zip(x.par_chunks(in_sz))
                    .for_each(|((out_img, cols), x_img)| {
                        im2col(x_img, g, cols);
                        matrixmultiply_serial(g.c_out, kk, n, w, cols, out_img);
                    });
            }),
            None => thread_pool().install(|| {
                out.par_chunks_mut(out_sz)
                    .zip(x.par_chunks(in_sz))
                    .for_each(|(out_img, x_img)| {
                        let mut cols = vec![0.0f32; cols_sz];
                        im2col(x_img, g, &mut cols);
                        matrixmultiply_serial(g.c_out, kk, n, w, &cols, out_img);
                    });
            }),
        }
    }
    (out, cols_all)
}

fn matrixmultiply_serial(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_input(dy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let kk = g.c_in * g.kernel * g.kernel;
    let n = g.h_out * g.w_out;
    let mut dx = vec![0.0f32; g.batch * g.in_image()];
    let mut dcols = vec![0.0f32; g.cols_len()];
    for b in 0..g.batch {
        let dy_img = &dy[b * g.out_image()..(b + 1) * g.out_image()];
        gemm_tn(kk, g.c_out, n, 1.0, w, dy_img, 0.0, &mut dcols);
        col2im_add(&dcols, g, &mut dx[b * g.in_image()..(b + 1) * g.in_image()]);
    }
    dx
}

/// Gradient w.r.t. the convolution weights, accumulated into `dw`.
pub fn conv2d_backward_weight(dy: &[f32], cols_all: &[f32], g: &ConvGeom, dw: &mut [f32]) {
    let kk = g.c_in * g.kernel * g.kernel;
    let n = g.h_out * g.w_out;
    for b in 0..g.batch {
        let dy_img = &dy[b * g.out_image()..(b + 1) * g.out_image()];
        let cols = &cols_all[b * g.cols_len()..(b + 1) * g.cols_len()];
        gemm_nt(g.c_out, n, kk, 1.0, dy_img, cols, 1.0, dw);
    }
}

// ── pooling and resampling ─────────────────────────────────────────────────

/// Global average pool `[B,C,H,W] -> [B,C,1,1]`.
pub fn global_avg_pool(x: &[f32], b: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; b * c];
    for (i, o) in out.iter_mut().enumerate() {
        let plane = &x[i * hw..(i + 1) * hw];
        let sum: f64 = plane.iter().map(|&v| v as f64).sum();
        *o = (sum / hw as f64) as f32;
    }
    out
}

/// Integer-factor nearest-neighbor upsample `[B,C,h,w] -> [B,C,h*fh,w*fw]`.
pub fn upsample_nearest(x: &[f32], b: usize, c: usize, h: usize, w: usize, fh: usize, fw: usize) -> Vec<f32> {
    let (oh, ow) = (h * fh, w * fw);
    let mut out = vec![0.0f32; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / fh) * w..(oy / fh + 1) * w];
            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, o) in out_row.iter_mut().enumerate() {
                *o = row[ox / fw];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &[f32], b: usize, c: usize, h: usize, w: usize, fh: usize, fw: usize, dx: &mut [f32]) {
    let (oh, ow) = (h * fh, w * fw);
    for plane in 0..b * c {
        let d_src = &mut dx[plane * h * w..(plane + 1) * h * w];
        let d_out = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = oy / fh;
            for ox in 0..ow {
                d_src[row * w + ox / fw] += d_out[oy * ow + ox];
            }
        }
    }
}

/// Per-axis source indices and lerp weight for half-pixel bilinear sampling.
pub(crate) fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64).clamp(0.0, 1.0))
        })
        .collect()
}

/// Bilinear resize `[B,C,h,w] -> [B,C,oh,ow]`, half-pixel centers, edges clamped.
pub fn resize_bilinear(x: &[f32], b: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = vec![0.0f32; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = wy as f32;
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = wx as f32;
                let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                out_row[ox] = top + wy * (bot - top);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(dy: &[f32], b: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for plane in 0..b * c {
        let d_src = &mut dx[plane * h * w..(plane + 1) * h * w];
        let d_out = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = wy as f32;
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = wx as f32;
                let g = d_out[oy * ow + ox];
                d_src[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                d_src[y0 * w + x1] += (1.0 - wy) * wx * g;
                d_src[y1 * w + x0] += wy * (1.0 - wx) * g;
                d_src[y1 * w + x1] += wy * wx * g;
            }
        }
    }
}

// ── per-pixel class softmax ────────────────────────────────────────────────

/// Softmax over the class dimension of `[B,C,H,W]` (dim 1), per pixel.
pub fn softmax_classes(x: &[f32], b: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut m = f32::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[base + ci * hw + p]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                let e = (x[base + ci * hw + p] - m).exp();
                out[base + ci * hw + p] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for ci in 0..c {
                out[base + ci * hw + p] *= inv;
            }
        }
    }
    out
}

/// Log-softmax over the class dimension, per pixel.
pub fn log_softmax_classes(x: &[f32], b: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut m = f32::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[base + ci * hw + p]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += ((x[base + ci * hw + p] - m) as f64).exp();
            }
            let lse = sum.ln() as f32 + m;
            for ci in 0..c {
                out[base + ci * hw + p] = x[base + ci * hw + p] - lse;
            }
        }
    }
    out
}
