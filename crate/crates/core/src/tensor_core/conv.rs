//! Stride-1 "same" 2-D convolution via row-tiled im2col and SGEMM.
//!
//! Every sample is processed independently and parameter gradients are
//! reduced in sample order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use super::tensor::{Dims, Param, Tensor4};
use crate::error::{Error, Result};

/// Upper bound on the number of f32 values in one im2col tile.
const TILE_ELEMS: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    /// (c_out, c_in, kh, kw) row-major.
    pub kernels: Param,
    pub biases: Param,
}

impl ConvParams {
    pub fn new(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::EvenKernel { kh, kw });
        }
        Ok(Self {
            c_out,
            c_in,
            kh,
            kw,
            kernels: Param::new(vec![0.0; c_out * c_in * kh * kw]),
            biases: Param::new(vec![0.0; c_out]),
        })
    }

    pub fn from_values(
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        kernels: Vec<f32>,
        biases: Vec<f32>,
    ) -> Result<Self> {
        let mut p = Self::new(c_out, c_in, kh, kw)?;
        if kernels.len() != p.kernels.len() {
            return Err(Error::shape(
                "ConvParams kernels",
                format!("({c_out}, {c_in}, {kh}, {kw})"),
                format!("{} values", kernels.len()),
            ));
        }
        if biases.len() != c_out {
            return Err(Error::shape(
                "ConvParams biases",
                c_out,
                format!("{} values", biases.len()),
            ));
        }
        p.kernels = Param::new(kernels);
        p.biases = Param::new(biases);
        Ok(p)
    }

    /// Length of one unrolled receptive patch: c_in * kh * kw.
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn shape_string(&self) -> String {
        format!(
            "(c_out={}, c_in={}, {}x{})",
            self.c_out, self.c_in, self.kh, self.kw
        )
    }

    fn check(&self, input: Dims) -> Result<()> {
        if self.kh.is_multiple_of(2) || self.kw.is_multiple_of(2) {
            return Err(Error::EvenKernel {
                kh: self.kh,
                kw: self.kw,
            });
        }
        if input.c != self.c_in {
            return Err(Error::shape("conv2d", input, self.shape_string()));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.kernels.zero_grad();
        self.biases.zero_grad();
    }
}

/// `out[n,co,y,x] = bias[co] + sum kernel[co,ci,dy,dx] * padded[n,ci,y+dy,x+dx]`.
pub fn conv2d_forward(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    let d = input.dims();
    params.check(d)?;
    let out_dims = Dims::new(d.n, params.c_out, d.h, d.w);
    let mut out = Tensor4::zeros(out_dims);
    if out_dims.is_empty() {
        return Ok(out);
    }
    let in_sample = d.sample();
    let out_sample = out_dims.sample();
    out.data_mut()
        .par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(n, out_s)| {
            let x_s = &input.data()[n * in_sample..(n + 1) * in_sample];
            forward_sample(x_s, d.h, d.w, params, out_s);
        });
    Ok(out)
}

fn rows_per_tile(patch_len: usize, w: usize, h: usize) -> usize {
    (TILE_ELEMS / (patch_len * w).max(1)).clamp(1, h.max(1))
}

fn forward_sample(x: &[f32], h: usize, w: usize, p: &ConvParams, out: &mut [f32]) {
    let k = p.patch_len();
    let plane = h * w;
    let rows = rows_per_tile(k, w, h);
    let mut col = vec![0.0f32; k * rows * w];
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let ncol = (y1 - y0) * w;
        im2col(x, p, h, w, y0, y1, &mut col[..k * ncol]);
        // out[:, y0*w ..] (c_out x ncol, row stride = plane) = K (c_out x k) * col (k x ncol)
        gemm(
            p.c_out,
            k,
            ncol,
            &p.kernels.value,
            (k, 1),
            &col[..k * ncol],
            (ncol, 1),
            0.0,
            &mut out[y0 * w..],
            (plane, 1),
        );
        y0 = y1;
    }
    for (co, plane_out) in out.chunks_mut(plane).enumerate() {
        let b = p.biases.value[co];
        if b != 0.0 {
            plane_out.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Returns the input gradient and accumulates kernel and bias gradients into `params`.
pub fn conv2d_backward(
    input: &Tensor4,
    params: &mut ConvParams,
    upstream: &Tensor4,
) -> Result<Tensor4> {
    let d = input.dims();
    params.check(d)?;
    let out_dims = Dims::new(d.n, params.c_out, d.h, d.w);
    if upstream.dims() != out_dims {
        return Err(Error::shape("conv2d_backward", upstream.dims(), out_dims));
    }
    let mut grad_in = Tensor4::zeros(d);
    if d.is_empty() {
        return Ok(grad_in);
    }
    let in_sample = d.sample();
    let out_sample = out_dims.sample();
    let p: &ConvParams = params;
    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = grad_in
        .data_mut()
        .par_chunks_mut(in_sample)
        .enumerate()
        .map(|(n, gx)| {
            let x_s = &input.data()[n * in_sample..(n + 1) * in_sample];
            let g_s = &upstream.data()[n * out_sample..(n + 1) * out_sample];
            backward_sample(x_s, g_s, d.h, d.w, p, gx)
        })
        .collect();
    for (dk, db) in per_sample {
        for (g, v) in params.kernels.grad.iter_mut().zip(&dk) {
            *g += v;
        }
        for (g, v) in params.biases.grad.iter_mut().zip(&db) {
            *g += v;
        }
    }
    Ok(grad_in)
}

fn backward_sample(
    x: &[f32],
    g: &[f32],
    h: usize,
    w: usize,
    p: &ConvParams,
    gx: &mut [f32],
) -> (Vec<f32>, Vec<f32>) {
    let k = p.patch_len();
    let plane = h * w;
    let rows = rows_per_tile(k, w, h);
    let mut col = vec![0.0f32; k * rows * w];
    let mut dcol = vec![0.0f32; k * rows * w];
    let mut dk = vec![0.0f32; p.c_out * k];
    let mut first = true;
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let ncol = (y1 - y0) * w;
        im2col(x, p, h, w, y0, y1, &mut col[..k * ncol]);
        let g_tile = &g[y0 * w..];
        // dK (c_out x k) += dY_tile (c_out x ncol) * col^T (ncol x k)
        gemm(
            p.c_out,
            ncol,
            k,
            g_tile,
            (plane, 1),
            &col[..k * ncol],
            (1, ncol),
            if first { 0.0 } else { 1.0 },
            &mut dk,
            (k, 1),
        );
        first = false;
        // dcol (k x ncol) = K^T (k x c_out) * dY_tile (c_out x ncol)
        gemm(
            k,
            p.c_out,
            ncol,
            &p.kernels.value,
            (1, k),
            g_tile,
            (plane, 1),
            0.0,
            &mut dcol[..k * ncol],
            (ncol, 1),
        );
        col2im(&dcol[..k * ncol], p, h, w, y0, y1, gx);
        y0 = y1;
    }
    let db = g
        .chunks(plane)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    (dk, db)
}

/// Valid output-column range for kernel column offset `dx` under same padding.
#[inline]
fn x_range(dx: usize, pw: usize, w: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(dx);
    let hi = (w + pw).saturating_sub(dx).min(w);
    (lo, hi.max(lo))
}

fn im2col(x: &[f32], p: &ConvParams, h: usize, w: usize, y0: usize, y1: usize, col: &mut [f32]) {
    let (ph, pw) = (p.kh / 2, p.kw / 2);
    let ncol = (y1 - y0) * w;
    let plane = h * w;
    let mut r = 0;
    for ci in 0..p.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for dy in 0..p.kh {
            for dx in 0..p.kw {
                let row = &mut col[r * ncol..(r + 1) * ncol];
                let (xl, xh) = x_range(dx, pw, w);
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = (y + dy).wrapping_sub(ph);
                    if sy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..xl].fill(0.0);
                    dst[xh..].fill(0.0);
                    let s0 = sy * w + xl + dx - pw;
                    dst[xl..xh].copy_from_slice(&src[s0..s0 + (xh - xl)]);
                }
                r += 1;
            }
        }
    }
}

fn col2im(dcol: &[f32], p: &ConvParams, h: usize, w: usize, y0: usize, y1: usize, gx: &mut [f32]) {
    let (ph, pw) = (p.kh / 2, p.kw / 2);
    let ncol = (y1 - y0) * w;
    let plane = h * w;
    let mut r = 0;
    for ci in 0..p.c_in {
        let dst = &mut gx[ci * plane..(ci + 1) * plane];
        for dy in 0..p.kh {
            for dx in 0..p.kw {
                let row = &dcol[r * ncol..(r + 1) * ncol];
                let (xl, xh) = x_range(dx, pw, w);
                for y in y0..y1 {
                    let sy = (y + dy).wrapping_sub(ph);
                    if sy >= h {
                        continue;
                    }
                    let s0 = sy * w + xl + dx - pw;
                    let src = &row[(y - y0) * w + xl..(y - y0) * w + xh];
                    for (a, b) in dst[s0..s0 + (xh - xl)].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                r += 1;
            }
        }
    }
}

/// C (m x n) = A (m x k) * B (k x n) + beta * C, with explicit (row, col) strides.
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
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches by the
    // lengths of the borrowed slices; `c` is exclusively borrowed.
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
            rsc as isize,
            csc as isize,
        );
    }
}
