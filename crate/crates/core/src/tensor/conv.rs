//! 2-D convolution lowered to a column matrix and a single GEMM.
//!
//! The GEMM is the single-threaded `matrixmultiply` kernel, so the summation
//! order is fixed and results are reproducible bit for bit.

use super::{Result, Tensor, TensorError};

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    fn valid_range(&self, k: usize, out: usize, input: usize) -> (usize, usize) {
        let (s, p) = (self.stride as i64, self.padding as i64);
        let k = k as i64;
        // need 0 <= o*s + k - p < input
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = ((input as i64 - 1 + p - k).div_euclid(s) + 1).clamp(0, out as i64);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                let row = ((c * g.kh + ky) * g.kw + kx) * n;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.padding;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let n = g.cols();
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                let row = ((c * g.kh + ky) * g.kw + kx) * n;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.padding;
                        for (d, s) in dst[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&src[ox0..ox1]) {
                            *d += s;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox * g.stride + kx - g.padding] += src[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c (m x n) = a (m x k) * b (k x n)` with explicit strides; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller's strides describe matrices lying inside `a`, `b`,
    // and `c`; `c` is row-major m x n and does not alias the inputs.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `input: [C,H,W]` with `weights: [K,C,kh,kw]` plus a
/// per-output-channel bias, producing `[K,H',W']` with
/// `H' = (H + 2*padding - kh) / stride + 1`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let mismatch = |detail: String| TensorError::ShapeMismatch { op: OP, detail };
    let (c, h, w) = match *input.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(mismatch(format!("input must be [C,H,W], got {s:?}"))),
    };
    let (k, wc, kh, kw) = match *weights.shape() {
        [k, wc, kh, kw] => (k, wc, kh, kw),
        ref s => return Err(mismatch(format!("weights must be [K,C,kh,kw], got {s:?}"))),
    };
    if wc != c {
        return Err(mismatch(format!("input has {c} channels, weights expect {wc}")));
    }
    if bias.shape() != [k] {
        return Err(mismatch(format!("bias {:?} for {k} output channels", bias.shape())));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument { op: OP, detail: "stride must be >= 1".into() });
    }
    if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(TensorError::EmptyOutput {
            op: OP,
            detail: format!("kernel {kh}x{kw} vs padded input {}x{}", h + 2 * padding, w + 2 * padding),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    if k == 0 || c == 0 {
        return Err(TensorError::EmptyOutput { op: OP, detail: format!("{k} filters over {c} channels") });
    }
    let g = Geometry { c, h, w, kh, kw, stride, padding, oh, ow };

    let cols = if g.is_pointwise() { None } else { Some(im2col(input.data(), &g)) };
    let (rows, n) = (g.rows(), g.cols());
    let mut out = vec![0.0; k * n];
    {
        let colm = cols.as_deref().unwrap_or(input.data());
        gemm(k, rows, n, weights.data(), rows as isize, 1, colm, n as isize, 1, &mut out);
    }
    for (plane, b) in out.chunks_exact_mut(n).zip(bias.data()) {
        plane.iter_mut().for_each(|v| *v += b);
    }

    let (inp, wts) = (input.clone(), weights.clone());
    Ok(Tensor::from_op(
        vec![k, oh, ow],
        out,
        vec![input.clone(), weights.clone(), bias.clone()],
        Box::new(move |gout, needs| {
            let colm = cols.as_deref().unwrap_or(inp.data());
            let grad_input = needs[0].then(|| {
                // gcols (rows x n) = W^T (rows x k) * gout (k x n)
                let mut gcols = vec![0.0; rows * n];
                gemm(rows, k, n, wts.data(), 1, rows as isize, gout, n as isize, 1, &mut gcols);
                if g.is_pointwise() {
                    gcols
                } else {
                    col2im(&gcols, &g)
                }
            });
            let grad_weights = needs[1].then(|| {
                // gW (k x rows) = gout (k x n) * cols^T (n x rows)
                let mut gw = vec![0.0; k * rows];
                gemm(k, n, rows, gout, n as isize, 1, colm, 1, n as isize, &mut gw);
                gw
            });
            let grad_bias = needs[2].then(|| gout.chunks_exact(n).map(|p| p.iter().sum()).collect());
            vec![grad_input, grad_weights, grad_bias]
        }),
    ))
}
