//! Direct 2-D convolution kernels (im2col + GEMM) over `[N, C, H, W]` batches.

use crate::exec::{self, Exec};

/// `c = beta * c + op(a) * op(b)` with row-major storage.
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe exactly the row-major
    // (or transposed) layouts of `a` and `b`, and `c` is a dense m x n block.
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii as usize >= g.h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *o = if jj < 0 || jj as usize >= g.w {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(
    exec: Exec,
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.positions();
    let mut out = vec![0.0; n * out_len];
    exec::for_each_chunk_mut(exec, &mut out, out_len, |s, y| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.cout, g.cin, g.positions(), kernel, false, xs, false, 0.0, y);
        } else {
            let mut col = vec![0.0; g.patch() * g.positions()];
            im2col(g, xs, &mut col);
            gemm(g.cout, g.patch(), g.positions(), kernel, false, &col, false, 0.0, y);
        }
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(g.positions()).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(
    exec: Exec,
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
) -> ConvGrads {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.positions();
    let klen = g.cout * g.patch();
    let per_sample = exec::map_range(exec, n, |s| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        let mut dx = vec![0.0; in_len];
        let mut dk = vec![0.0; klen];
        if g.is_pointwise() {
            gemm(g.cin, g.cout, g.positions(), kernel, true, dys, false, 0.0, &mut dx);
            gemm(g.cout, g.positions(), g.cin, dys, false, xs, true, 0.0, &mut dk);
        } else {
            let mut col = vec![0.0; g.patch() * g.positions()];
            im2col(g, xs, &mut col);
            gemm(g.cout, g.positions(), g.patch(), dys, false, &col, true, 0.0, &mut dk);
            gemm(g.patch(), g.cout, g.positions(), kernel, true, dys, false, 0.0, &mut col);
            col2im(g, &col, &mut dx);
        }
        (dx, dk)
    });
    let mut input = Vec::with_capacity(n * in_len);
    let mut dkernel = vec![0.0; klen];
    for (dx, dk) in per_sample {
        input.extend_from_slice(&dx);
        dkernel.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
    }
    let mut dbias = vec![0.0; g.cout];
    for s in 0..n {
        for (co, row) in dy[s * out_len..(s + 1) * out_len]
            .chunks(g.positions())
            .enumerate()
        {
            dbias[co] += row.iter().sum::<f64>();
        }
    }
    ConvGrads {
        input,
        kernel: dkernel,
        bias: dbias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive reference convolution for cross-checking the GEMM path.
    fn naive(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.ho * g.wo];
        for co in 0..g.cout {
            for oi in 0..g.ho {
                for oj in 0..g.wo {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                                    acc += x[(c * g.h + ii as usize) * g.w + jj as usize]
                                        * k[((co * g.cin + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(co * g.ho + oi) * g.wo + oj] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_padding_and_stride() {
        let g = ConvGeom {
            cin: 2,
            h: 5,
            w: 6,
            cout: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 3,
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..54).map(|i| ((i * 5) % 9) as f64 * 0.1 - 0.4).collect();
        let fast = forward(Exec::Sequential, &g, 1, &x, &k, None);
        let slow = naive(&g, &x, &k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
