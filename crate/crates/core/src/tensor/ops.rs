//! Forward/backward kernels for the tape ops that are not convolutions or warps.

use super::tape::{BnStats, CeVariant, NormMode, NORM_EPS, PROB_FLOOR};
use super::Tensor;
use crate::error::{Error, Result};

fn pool_dims(x: &Tensor, k: usize) -> Result<[usize; 6]> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::dim(format!(
            "pooling expects [N, C, H, W], got {:?}",
            x.shape()
        )));
    };
    if k == 0 || k > h || k > w {
        return Err(Error::dim(format!("pool window {k} does not fit {h}x{w}")));
    }
    Ok([n, c, h, w, h / k, w / k])
}

pub(crate) fn avg_pool_forward(x: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let [n, c, h, w, ho, wo] = pool_dims(x, k)?;
    let area = (k * k) as f64;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut s = 0.0;
                for di in 0..k {
                    let row = &plane[(oi * k + di) * w + oj * k..][..k];
                    s += row.iter().sum::<f64>();
                }
                y.push(s / area);
            }
        }
    }
    Ok((vec![n, c, ho, wo], y))
}

pub(crate) fn avg_pool_backward(shape: &[usize], k: usize, g: &[f64]) -> Vec<f64> {
    let &[n, c, h, w] = shape else { unreachable!() };
    let (ho, wo) = (h / k, w / k);
    let area = (k * k) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for (p, plane) in dx.chunks_mut(h * w).enumerate() {
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for oi in 0..ho {
            for oj in 0..wo {
                let v = gp[oi * wo + oj] / area;
                for di in 0..k {
                    for dj in 0..k {
                        plane[(oi * k + di) * w + oj * k + dj] += v;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn max_pool_forward(
    x: &Tensor,
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    let [n, c, h, w, ho, wo] = pool_dims(x, k)?;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = (oi * k + di) * w + oj * k + dj;
                        if plane[idx] > best {
                            best = plane[idx];
                            at = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(p * h * w + at);
            }
        }
    }
    Ok((vec![n, c, ho, wo], y, arg))
}

/// Returns `(y, xhat, inv_std, stats)`. Groups are channels (batch norm) or
/// (sample, channel) pairs (instance norm).
pub(crate) fn norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    per_instance: bool,
    mode: NormMode<'_>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Option<BnStats>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "normalization expects [N, C, ...], got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(format!(
            "normalization affine params must have {c} entries"
        )));
    }
    let groups = if per_instance { n * c } else { c };
    let group_of = |ni: usize, ci: usize| if per_instance { ni * c + ci } else { ci };
    let count = if per_instance { s } else { n * s } as f64;
    let data = x.data();

    let (mean, var, stats) = match mode {
        NormMode::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::dim("running stats length mismatch"));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
        NormMode::Batch => {
            let mut mean = vec![0.0; groups];
            for ni in 0..n {
                for ci in 0..c {
                    let blk = &data[(ni * c + ci) * s..][..s];
                    mean[group_of(ni, ci)] += blk.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0.0; groups];
            for ni in 0..n {
                for ci in 0..c {
                    let gi = group_of(ni, ci);
                    let m = mean[gi];
                    let blk = &data[(ni * c + ci) * s..][..s];
                    var[gi] += blk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let stats = (!per_instance).then(|| {
                let bessel = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                BnStats {
                    mean: mean.clone(),
                    var: var.iter().map(|v| v * bessel).collect(),
                }
            });
            (mean, var, stats)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut y = vec![0.0; data.len()];
    for ni in 0..n {
        for ci in 0..c {
            let gi = group_of(ni, ci);
            let off = (ni * c + ci) * s;
            for j in off..off + s {
                let h = (data[j] - mean[gi]) * inv_std[gi];
                xhat[j] = h;
                y[j] = gamma[ci] * h + beta[ci];
            }
        }
    }
    Ok((y, xhat, inv_std, stats))
}

pub(crate) struct NormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn norm_backward(
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    per_instance: bool,
    batch_stats: bool,
    g: &[f64],
) -> NormGrads {
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let groups = inv_std.len();
    let group_of = |ni: usize, ci: usize| if per_instance { ni * c + ci } else { ci };
    let count = if per_instance { s } else { n * s } as f64;

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    // per group: sum(dxhat), sum(dxhat * xhat)
    let mut sum_d = vec![0.0; groups];
    let mut sum_dx = vec![0.0; groups];
    for ni in 0..n {
        for ci in 0..c {
            let gi = group_of(ni, ci);
            let off = (ni * c + ci) * s;
            for j in off..off + s {
                dgamma[ci] += g[j] * xhat[j];
                dbeta[ci] += g[j];
                let dh = g[j] * gamma[ci];
                sum_d[gi] += dh;
                sum_dx[gi] += dh * xhat[j];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for ni in 0..n {
        for ci in 0..c {
            let gi = group_of(ni, ci);
            let off = (ni * c + ci) * s;
            for j in off..off + s {
                let dh = g[j] * gamma[ci];
                dx[j] = if batch_stats {
                    inv_std[gi] / count * (count * dh - sum_d[gi] - xhat[j] * sum_dx[gi])
                } else {
                    dh * inv_std[gi]
                };
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Returns `(mean loss, probabilities, dL/dp per sample)`; the per-sample
/// derivative is unscaled by the batch mean.
pub(crate) fn cross_entropy(
    logits: &[f64],
    c: usize,
    targets: &[usize],
    eps: f64,
    variant: CeVariant,
) -> (f64, Vec<f64>, Vec<f64>) {
    let b = targets.len();
    let mut probs = Vec::with_capacity(b * c);
    let mut dl_dp = Vec::with_capacity(b * c);
    let mut total = 0.0;
    let shift = eps / c as f64;
    for (row, &t) in logits.chunks(c).zip(targets) {
        let p = softmax_row(row);
        for (i, &pi) in p.iter().enumerate() {
            let onehot = if i == t { 1.0 } else { 0.0 };
            match variant {
                CeVariant::SmoothedTargets => {
                    let q = (1.0 - eps) * onehot + shift;
                    if pi > PROB_FLOOR {
                        total -= q * pi.ln();
                        dl_dp.push(-q / pi);
                    } else {
                        total -= q * PROB_FLOOR.ln();
                        dl_dp.push(0.0);
                    }
                }
                CeVariant::LogShift => {
                    let arg = pi + shift;
                    if onehot == 0.0 {
                        dl_dp.push(0.0);
                    } else if arg > PROB_FLOOR {
                        total -= arg.ln();
                        dl_dp.push(-1.0 / arg);
                    } else {
                        total -= PROB_FLOOR.ln();
                        dl_dp.push(0.0);
                    }
                }
            }
        }
        probs.extend(p);
    }
    (total / b as f64, probs, dl_dp)
}

fn pair_distance(e: &[f64], d: usize, i: usize, j: usize, squared: bool) -> f64 {
    let sq: f64 = e[i * d..(i + 1) * d]
        .iter()
        .zip(&e[j * d..(j + 1) * d])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if squared {
        sq
    } else {
        sq.sqrt()
    }
}

/// Returns `(loss, active (anchor, pos, neg) terms, anchors averaged over)`.
pub(crate) fn batch_hard_triplet(
    e: &[f64],
    d: usize,
    labels: &[usize],
    margin: f64,
    squared: bool,
) -> Result<(f64, Vec<(usize, usize, usize)>, usize)> {
    let b = labels.len();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Mining(
            "batch holds a single identity, no negatives exist".into(),
        ));
    }
    // running mean over anchors: equal hinge values average to themselves exactly
    let mut mean = 0.0;
    let mut terms = Vec::new();
    let mut anchors = 0;
    for a in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dist = pair_distance(e, d, a, j, squared);
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|(_, best)| dist > best) {
                    hardest_pos = Some((j, dist));
                }
            } else if hardest_neg.is_none_or(|(_, best)| dist < best) {
                hardest_neg = Some((j, dist));
            }
        }
        let (Some((p, dp)), Some((n, dn))) = (hardest_pos, hardest_neg) else {
            continue;
        };
        anchors += 1;
        let term = (dp - dn + margin).max(0.0);
        if term > 0.0 {
            terms.push((a, p, n));
        }
        mean += (term - mean) / anchors as f64;
    }
    if anchors == 0 {
        return Err(Error::Mining("no anchor has an in-batch positive".into()));
    }
    Ok((mean, terms, anchors))
}

/// Adds `scale * d dist(a, j) / d e` into `de`.
pub(crate) fn triplet_pair_grad(
    e: &[f64],
    d: usize,
    a: usize,
    j: usize,
    scale: f64,
    squared: bool,
    de: &mut [f64],
) {
    let factor = if squared {
        2.0 * scale
    } else {
        let dist = pair_distance(e, d, a, j, false);
        if dist == 0.0 {
            return;
        }
        scale / dist
    };
    for k in 0..d {
        let diff = e[a * d + k] - e[j * d + k];
        de[a * d + k] += factor * diff;
        de[j * d + k] -= factor * diff;
    }
}
