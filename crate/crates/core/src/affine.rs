//! Differentiable affine warping: grid generation and bilinear sampling with
//! zero padding.
//!
//! Coordinates are normalized to `[-1, 1]` with the corner pixels at `-1` and
//! `1` (align-corners). A dimension of extent 1 has the single coordinate 0.
//! `theta` maps a target coordinate `(x_t, y_t, 1)` to the source coordinate
//! read from the input.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// The six entries of the 2x3 matrix `[[t0, t1, t2], [t3, t4, t5]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    theta: [f64; 6],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    pub fn identity() -> Self {
        AffineParams {
            theta: Self::IDENTITY,
        }
    }

    pub fn new(theta: [f64; 6]) -> Result<Self> {
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                message: "non-finite affine parameter".into(),
            });
        }
        Ok(AffineParams { theta })
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        let arr: [f64; 6] = theta
            .try_into()
            .map_err(|_| Error::dim(format!("affine params need 6 values, got {}", theta.len())))?;
        Self::new(arr)
    }

    /// Isotropic scaling about the center.
    pub fn scale(s: f64) -> Self {
        AffineParams {
            theta: [s, 0.0, 0.0, 0.0, s, 0.0],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineParams {
            theta: [1.0, 0.0, dx, 0.0, 1.0, dy],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        self.theta
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.theta;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }

    /// `compose(a, b)` maps a point through `b`, then through `a`.
    pub fn compose(a: &AffineParams, b: &AffineParams) -> AffineParams {
        let (p, q) = (&a.theta, &b.theta);
        AffineParams {
            theta: [
                p[0] * q[0] + p[1] * q[3],
                p[0] * q[1] + p[1] * q[4],
                p[0] * q[2] + p[1] * q[5] + p[2],
                p[3] * q[0] + p[4] * q[3],
                p[3] * q[1] + p[4] * q[4],
                p[3] * q[2] + p[4] * q[5] + p[5],
            ],
        }
    }

    /// Inverse map; `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<AffineParams> {
        let t = &self.theta;
        let det = t[0] * t[4] - t[1] * t[3];
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, c, d) = (t[4] / det, -t[1] / det, -t[3] / det, t[0] / det);
        Some(AffineParams {
            theta: [a, b, -(a * t[2] + b * t[5]), c, d, -(c * t[2] + d * t[5])],
        })
    }

    pub fn mean_abs_diff(&self, other: &AffineParams) -> f64 {
        self.theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 6.0
    }
}

/// Normalized source coordinates `[H_out, W_out, 2]`, `(x_s, y_s)` per target pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub coords: Tensor,
}

impl SamplingGrid {
    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = (i * self.width() + j) * 2;
        (self.coords.data()[k], self.coords.data()[k + 1])
    }
}

/// Normalized coordinate of lattice index `i` along an axis of extent `n`.
pub fn target_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (2 * i) as f64 / (n - 1) as f64 - 1.0
    }
}

fn unnormalize(coord: f64, n: usize) -> f64 {
    (coord + 1.0) * (n - 1) as f64 / 2.0
}

pub(crate) fn grid_kernel(theta: &[f64; 6], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let yt = target_coord(i, h);
        for j in 0..w {
            let xt = target_coord(j, w);
            out.push(theta[0] * xt + theta[1] * yt + theta[2]);
            out.push(theta[3] * xt + theta[4] * yt + theta[5]);
        }
    }
    out
}

pub(crate) fn grid_backward_kernel(dgrid: &[f64], h: usize, w: usize) -> [f64; 6] {
    let mut d = [0.0; 6];
    for i in 0..h {
        let yt = target_coord(i, h);
        for j in 0..w {
            let xt = target_coord(j, w);
            let k = (i * w + j) * 2;
            let (gx, gy) = (dgrid[k], dgrid[k + 1]);
            d[0] += gx * xt;
            d[1] += gx * yt;
            d[2] += gx;
            d[3] += gy * xt;
            d[4] += gy * yt;
            d[5] += gy;
        }
    }
    d
}

/// Bilinear footprint of one source point: the top-left lattice corner and
/// the fractional offsets.
struct Footprint {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

impl Footprint {
    fn new(gx: f64, gy: f64, h: usize, w: usize) -> Self {
        let x = unnormalize(gx, w);
        let y = unnormalize(gy, h);
        let (xf, yf) = (x.floor(), y.floor());
        Footprint {
            x0: xf as isize,
            y0: yf as isize,
            fx: x - xf,
            fy: y - yf,
        }
    }

    /// The four neighbours as `(flat index or None when outside, weight)`,
    /// in order (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1).
    fn taps(&self, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
        let at = |y: isize, x: isize| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| y as usize * w + x as usize)
        };
        let (x0, y0, fx, fy) = (self.x0, self.y0, self.fx, self.fy);
        [
            (at(y0, x0), (1.0 - fy) * (1.0 - fx)),
            (at(y0, x0 + 1), (1.0 - fy) * fx),
            (at(y0 + 1, x0), fy * (1.0 - fx)),
            (at(y0 + 1, x0 + 1), fy * fx),
        ]
    }
}

pub(crate) fn sample_kernel(
    input: &[f64],
    [c, h, w]: [usize; 3],
    grid: &[f64],
    [ho, wo]: [usize; 2],
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * ho * wo];
    for p in 0..ho * wo {
        let fp = Footprint::new(grid[2 * p], grid[2 * p + 1], h, w);
        let taps = fp.taps(h, w);
        for ch in 0..c {
            let src = &input[ch * plane..(ch + 1) * plane];
            let mut v = 0.0;
            for &(idx, wt) in &taps {
                if let Some(k) = idx {
                    v += wt * src[k];
                }
            }
            out[ch * ho * wo + p] = v;
        }
    }
    out
}

/// Returns `(d input, d grid)` for one sample.
pub(crate) fn sample_backward_kernel(
    input: &[f64],
    [c, h, w]: [usize; 3],
    grid: &[f64],
    [ho, wo]: [usize; 2],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut dinput = vec![0.0; input.len()];
    let mut dgrid = vec![0.0; ho * wo * 2];
    let sx = (w - 1) as f64 / 2.0;
    let sy = (h - 1) as f64 / 2.0;
    for p in 0..ho * wo {
        let fp = Footprint::new(grid[2 * p], grid[2 * p + 1], h, w);
        let taps = fp.taps(h, w);
        let (mut gx, mut gy) = (0.0, 0.0);
        for ch in 0..c {
            let g = upstream[ch * ho * wo + p];
            if g == 0.0 {
                continue;
            }
            let src = &input[ch * plane..(ch + 1) * plane];
            let dst = &mut dinput[ch * plane..(ch + 1) * plane];
            let mut v = [0.0; 4];
            for (t, &(idx, wt)) in taps.iter().enumerate() {
                if let Some(k) = idx {
                    dst[k] += g * wt;
                    v[t] = src[k];
                }
            }
            gx += g * ((1.0 - fp.fy) * (v[1] - v[0]) + fp.fy * (v[3] - v[2]));
            gy += g * ((1.0 - fp.fx) * (v[2] - v[0]) + fp.fx * (v[3] - v[1]));
        }
        dgrid[2 * p] = gx * sx;
        dgrid[2 * p + 1] = gy * sy;
    }
    (dinput, dgrid)
}

/// Builds the sampling grid of `theta` for an `h_out x w_out` target.
pub fn make_grid(theta: &AffineParams, h_out: usize, w_out: usize) -> Result<SamplingGrid> {
    if h_out == 0 || w_out == 0 {
        return Err(Error::dim("sampling grid needs a non-empty target"));
    }
    AffineParams::new(theta.theta)?;
    let coords = Tensor::new(&[h_out, w_out, 2], grid_kernel(&theta.theta, h_out, w_out))?;
    Ok(SamplingGrid { coords })
}

fn chw(input: &Tensor) -> Result<[usize; 3]> {
    match *input.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::dim(format!(
            "expected a [C, H, W] image, got {:?}",
            input.shape()
        ))),
    }
}

/// Bilinear sampling of `input [C, H, W]` at `grid`, zero outside the image.
pub fn bilinear_sample(input: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    let [c, h, w] = chw(input)?;
    if !grid.coords.all_finite() {
        return Err(Error::Numeric {
            index: grid.coords.data().iter().position(|v| !v.is_finite()).unwrap(),
            message: "non-finite sampling coordinate".into(),
        });
    }
    let (ho, wo) = (grid.height(), grid.width());
    Tensor::new(
        &[c, ho, wo],
        sample_kernel(input.data(), [c, h, w], grid.coords.data(), [ho, wo]),
    )
}

/// Warps `input` by `theta` to an `h_out x w_out` image.
pub fn warp(input: &Tensor, theta: &AffineParams, h_out: usize, w_out: usize) -> Result<Tensor> {
    bilinear_sample(input, &make_grid(theta, h_out, w_out)?)
}

/// Gradients of `sum(upstream * warp(input, theta))` with respect to the
/// input pixels and the six affine parameters.
pub fn sample_backward(
    input: &Tensor,
    theta: &AffineParams,
    upstream: &Tensor,
) -> Result<(Tensor, [f64; 6])> {
    let [c, h, w] = chw(input)?;
    let &[uc, ho, wo] = upstream.shape() else {
        return Err(Error::dim("upstream gradient must be [C, H_out, W_out]"));
    };
    if uc != c {
        return Err(Error::dim("upstream channel count differs from input"));
    }
    let grid = make_grid(theta, ho, wo)?;
    let (di, dg) = sample_backward_kernel(
        input.data(),
        [c, h, w],
        grid.coords.data(),
        [ho, wo],
        upstream.data(),
    );
    Ok((
        Tensor::new(&[c, h, w], di)?,
        grid_backward_kernel(&dg, ho, wo),
    ))
}

/// Taped warp of a batch: `images [N, C, H, W]`, `theta [N, 6]`.
pub fn warp_on_tape(
    tape: &mut Tape,
    images: crate::tensor::Var,
    theta: crate::tensor::Var,
    h_out: usize,
    w_out: usize,
) -> Result<crate::tensor::Var> {
    let grid = tape.affine_grid(theta, h_out, w_out)?;
    tape.grid_sample(images, grid)
}
