//! Retrieval metrics under the Market1501 protocol and the stripe-wise
//! block distance matrix.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::image::write_pgm;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::config("eval.metric", format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// Largest possible cosine distance; assigned to pairs involving a zero row.
pub const MAX_COSINE_DISTANCE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct Distances {
    /// `[nq, ng]`
    pub matrix: Tensor,
    /// Zero-norm query rows (cosine only).
    pub flagged_queries: Vec<usize>,
    /// Zero-norm gallery rows (cosine only).
    pub flagged_gallery: Vec<usize>,
}

fn rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::dim(format!("{what} features must be [N, D], got {:?}", t.shape()))),
    }
}

fn unit_rows(t: &Tensor, n: usize, d: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = t.data().to_vec();
    let mut zero = Vec::new();
    for (i, row) in out.chunks_mut(d).enumerate().take(n) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero.push(i);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    (out, zero)
}

pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric, exec: Exec) -> Result<Distances> {
    let (nq, d) = rows(q, "query")?;
    let (ng, dg) = rows(g, "gallery")?;
    if d != dg {
        return Err(Error::dim(format!("feature width mismatch: {d} vs {dg}")));
    }
    let (qd, gd, fq, fg) = match metric {
        Metric::Euclidean => (q.data().to_vec(), g.data().to_vec(), vec![], vec![]),
        Metric::Cosine => {
            let (qd, fq) = unit_rows(q, nq, d);
            let (gd, fg) = unit_rows(g, ng, d);
            (qd, gd, fq, fg)
        }
    };
    let rows: Vec<Vec<f64>> = exec::map_range(exec, nq, |i| {
        let a = &qd[i * d..(i + 1) * d];
        (0..ng)
            .map(|j| {
                let b = &gd[j * d..(j + 1) * d];
                match metric {
                    Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
                    Metric::Cosine => {
                        if fq.binary_search(&i).is_ok() || fg.binary_search(&j).is_ok() {
                            MAX_COSINE_DISTANCE
                        } else {
                            1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                        }
                    }
                }
            })
            .collect()
    });
    Ok(Distances {
        matrix: Tensor::new(&[nq, ng], rows.concat())?,
        flagged_queries: fq,
        flagged_gallery: fg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `cmc[k - 1]` is the Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// AP per query; `None` for queries without a relevant gallery item.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_valid_queries: usize,
    pub num_invalid_queries: usize,
    pub metric: Metric,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.min(self.cmc.len())).max(1) - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", k + 1));
        }
        s.push_str(&format!("map,{}\n", self.map));
        s.push_str(&format!("valid_queries,{}\n", self.num_valid_queries));
        s.push_str(&format!("invalid_queries,{}\n", self.num_invalid_queries));
        s.push_str(&format!("metric,{}\n", self.metric));
        s
    }
}

/// Per-query outcome: index of the first correct match among kept gallery
/// items, and AP.
fn score_query(dist: &[f64], qpid: i64, qcam: u32, g_pids: &[i64], g_camids: &[u32]) -> Option<(usize, f64)> {
    if qpid == -1 {
        return None;
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    let kept = order
        .into_iter()
        .filter(|&j| g_pids[j] != -1 && !(g_pids[j] == qpid && g_camids[j] == qcam));
    let mut hits = 0usize;
    let mut first = None;
    let mut prec_sum = 0.0;
    for (rank, j) in kept.enumerate() {
        if g_pids[j] == qpid {
            hits += 1;
            first.get_or_insert(rank);
            prec_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    first.map(|f| (f, prec_sum / hits as f64))
}

/// Market1501-protocol CMC (ranks 1..=k_max) and mAP. Gallery items sharing
/// both pid and camera with the query are dropped, as are junk (`-1`) items.
/// Ties keep gallery order.
pub fn evaluate(
    distmat: &Tensor,
    q_pids: &[i64],
    q_camids: &[u32],
    g_pids: &[i64],
    g_camids: &[u32],
    k_max: usize,
    metric: Metric,
    exec: Exec,
) -> Result<EvalReport> {
    let (nq, ng) = rows(distmat, "distance")?;
    if q_pids.len() != nq || q_camids.len() != nq || g_pids.len() != ng || g_camids.len() != ng {
        return Err(Error::dim("label arrays do not match the distance matrix"));
    }
    if k_max == 0 {
        return Err(Error::config("eval.max_rank", "must be positive"));
    }
    let d = distmat.data();
    let per_query = exec::map_range(exec, nq, |i| {
        score_query(&d[i * ng..(i + 1) * ng], q_pids[i], q_camids[i], g_pids, g_camids)
    });
    let valid = per_query.iter().flatten().count();
    if valid == 0 {
        return Err(Error::Evaluation(
            "no query has a relevant gallery item after filtering".into(),
        ));
    }
    let mut first_hist = vec![0usize; k_max];
    let mut ap_sum = 0.0;
    for &(first, ap) in per_query.iter().flatten() {
        if first < k_max {
            first_hist[first] += 1;
        }
        ap_sum += ap;
    }
    let mut acc = 0usize;
    let cmc = first_hist
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / valid as f64
        })
        .collect();
    Ok(EvalReport {
        cmc,
        map: ap_sum / valid as f64,
        per_query_ap: per_query.iter().map(|q| q.map(|(_, ap)| ap)).collect(),
        num_valid_queries: valid,
        num_invalid_queries: nq - valid,
        metric,
    })
}

fn stripe_descriptors(f: &Tensor, nblocks: usize) -> Result<Vec<Vec<f64>>> {
    let &[c, h, w] = f.shape() else {
        return Err(Error::dim(format!("block features must be [C, H, W], got {:?}", f.shape())));
    };
    if nblocks == 0 || h % nblocks != 0 {
        return Err(Error::dim(format!("height {h} not divisible into {nblocks} blocks")));
    }
    let sh = h / nblocks;
    let d = f.data();
    Ok((0..nblocks)
        .map(|b| {
            let mut v: Vec<f64> = (0..c)
                .map(|ch| {
                    let start = (ch * h + b * sh) * w;
                    d[start..start + sh * w].iter().sum::<f64>() / (sh * w) as f64
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            v
        })
        .collect())
}

/// Splits both maps into horizontal stripes; entry `(i, j)` is the Euclidean
/// distance between the normalized mean descriptors of stripe `i` of `a` and
/// stripe `j` of `b`.
pub fn block_distance_matrix(a: &Tensor, b: &Tensor, nblocks: usize) -> Result<Tensor> {
    if a.shape()[..1] != b.shape()[..1] {
        return Err(Error::dim("block features differ in channel count"));
    }
    let da = stripe_descriptors(a, nblocks)?;
    let db = stripe_descriptors(b, nblocks)?;
    Ok(Tensor::from_fn(&[nblocks, nblocks], |k| {
        let (i, j) = (k / nblocks, k % nblocks);
        da[i].iter().zip(&db[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }))
}

pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// Writes `m` as CSV and as a min-max scaled 8-bit graymap.
pub fn write_block_matrix(m: &Tensor, csv: &Path, pgm: &Path) -> Result<()> {
    std::fs::write(csv, matrix_csv(m)).map_err(|e| Error::io(csv, e))?;
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = m
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    write_pgm(pgm, &scaled, m.shape()[0], m.shape()[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(d: &[f64], nq: usize, qp: &[i64], qc: &[u32], gp: &[i64], gc: &[u32], k: usize) -> Result<EvalReport> {
        let m = Tensor::new(&[nq, d.len() / nq], d.to_vec()).unwrap();
        evaluate(&m, qp, qc, gp, gc, k, Metric::Euclidean, Exec::Sequential)
    }

    /// Independent enumerator: for each gallery item decides relevance and
    /// counts how many kept items strictly precede it.
    fn brute_force(d: &[f64], qp: &[i64], qc: &[u32], gp: &[i64], gc: &[u32], k: usize) -> Option<(Vec<f64>, f64)> {
        let ng = gp.len();
        let mut cmc = vec![0.0; k];
        let mut aps = Vec::new();
        for q in 0..qp.len() {
            let row = &d[q * ng..(q + 1) * ng];
            let keep = |j: usize| qp[q] != -1 && gp[j] != -1 && !(gp[j] == qp[q] && gc[j] == qc[q]);
            let before = |j: usize, i: usize| row[i] < row[j] || (row[i] == row[j] && i < j);
            let rank_of = |j: usize| (0..ng).filter(|&i| keep(i) && before(j, i)).count() + 1;
            let rel: Vec<usize> = (0..ng).filter(|&j| keep(j) && gp[j] == qp[q]).collect();
            if rel.is_empty() {
                continue;
            }
            let mut ap = 0.0;
            for &j in &rel {
                let r = rank_of(j);
                let rel_at = rel.iter().filter(|&&i| rank_of(i) <= r).count();
                ap += rel_at as f64 / r as f64;
            }
            aps.push(ap / rel.len() as f64);
            let best = rel.iter().map(|&j| rank_of(j)).min().unwrap();
            for (kk, c) in cmc.iter_mut().enumerate() {
                if best <= kk + 1 {
                    *c += 1.0;
                }
            }
        }
        if aps.is_empty() {
            return None;
        }
        let n = aps.len() as f64;
        Some((cmc.iter().map(|c| c / n).collect(), aps.iter().sum::<f64>() / n))
    }

    #[test]
    fn perfect_ranking() {
        let r = eval(&[0.1, 0.2, 0.3, 0.9], 1, &[1], &[1], &[1, 1, 1, 2], &[2, 2, 3, 2], 4).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.cmc.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn hand_ap_ranks_one_and_three() {
        let r = eval(&[0.1, 0.2, 0.3], 1, &[1], &[1], &[1, 2, 1], &[2, 2, 2], 3).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn same_camera_matches_and_junk_are_removed() {
        let r = eval(&[0.0, 0.1, 0.2, 0.3], 1, &[5], &[1], &[5, -1, 7, 5], &[1, 2, 2, 2], 3).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_invalid_is_an_evaluation_error() {
        let e = eval(&[0.0, 0.1], 1, &[5], &[1], &[5, 6], &[1, 2], 2).unwrap_err();
        assert!(matches!(e, Error::Evaluation(_)));
        let r = eval(&[0.0, 0.1, 0.0, 0.1], 2, &[5, 6], &[1, 1], &[5, 6], &[2, 2], 2).unwrap();
        assert_eq!(r.num_valid_queries, 2);
        let r = eval(&[0.0, 0.1, 0.0, 0.1], 2, &[5, 9], &[1, 1], &[5, 6], &[2, 2], 2).unwrap();
        assert_eq!((r.num_valid_queries, r.num_invalid_queries), (1, 1));
    }

    #[test]
    fn distances() {
        let q = Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = distance_matrix(&q, &q, Metric::Euclidean, Exec::Sequential).unwrap();
        assert_eq!(d.matrix.data(), &[0.0, 5.0, 5.0, 0.0]);
        let u = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let c = distance_matrix(&u, &u, Metric::Cosine, Exec::Sequential).unwrap();
        assert_eq!(c.matrix.data(), &[0.0, 1.0, 1.0, 0.0]);
        let c = distance_matrix(&q, &u, Metric::Cosine, Exec::Sequential).unwrap();
        assert_eq!(c.flagged_queries, vec![0]);
        assert_eq!(c.matrix.data()[..2], [MAX_COSINE_DISTANCE; 2]);
    }

    #[test]
    fn block_matrix_diagonal_and_shift() {
        let a = Tensor::from_fn(&[4, 16, 3], |i| {
            let (ch, row) = (i / 48, (i / 3) % 16);
            ((ch * 7 + (row / 2) * 3) % 5) as f64 + 0.1 * ch as f64
        });
        let m = block_distance_matrix(&a, &a, 8).unwrap();
        for i in 0..8 {
            assert!(m.data()[i * 9].abs() < 1e-12);
        }
        assert!(m.data().iter().all(|&v| v >= 0.0));
        // b's stripe j is a's stripe j + 1 (cyclic).
        let b = Tensor::from_fn(&[4, 16, 3], |i| {
            let (ch, row, col) = (i / 48, (i / 3) % 16, i % 3);
            a.data()[(ch * 16 + (row + 2) % 16) * 3 + col]
        });
        let s = block_distance_matrix(&a, &b, 8).unwrap();
        for i in 0..8 {
            let row = &s.data()[i * 8..(i + 1) * 8];
            let j = (i + 7) % 8;
            assert!(row[j].abs() < 1e-12, "row {i}");
        }
        assert!(block_distance_matrix(&a, &a, 5).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            nq in 1usize..=5,
            ng in 1usize..=20,
            seed in any::<u64>(),
        ) {
            let mut s = seed;
            let mut next = |m: u64| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) % m };
            let qp: Vec<i64> = (0..nq).map(|_| next(4) as i64).collect();
            let qc: Vec<u32> = (0..nq).map(|_| next(3) as u32).collect();
            let gp: Vec<i64> = (0..ng).map(|_| next(5) as i64 - 1).collect();
            let gc: Vec<u32> = (0..ng).map(|_| next(3) as u32).collect();
            // Coarse distances so ties occur.
            let d: Vec<f64> = (0..nq * ng).map(|_| next(6) as f64 / 4.0).collect();
            let k = 10;
            let got = eval(&d, nq, &qp, &qc, &gp, &gc, k);
            match brute_force(&d, &qp, &qc, &gp, &gc, k) {
                None => prop_assert!(got.is_err()),
                Some((cmc, map)) => {
                    let r = got.unwrap();
                    prop_assert!((r.map - map).abs() <= 1e-9);
                    for (a, b) in r.cmc.iter().zip(&cmc) {
                        prop_assert!((a - b).abs() <= 1e-9);
                    }
                    prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }

        #[test]
        fn gallery_permutation_without_ties_is_invariant(ng in 2usize..15, seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = |m: u64| { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s % m };
            let gp: Vec<i64> = (0..ng).map(|_| next(3) as i64).collect();
            let gc: Vec<u32> = (0..ng).map(|_| next(2) as u32 + 1).collect();
            let d: Vec<f64> = (0..ng).map(|i| i as f64 + 0.5).collect();
            let perm: Vec<usize> = (0..ng).rev().collect();
            let a = eval(&d, 1, &[0], &[9], &gp, &gc, 5);
            let pd: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
            let pp: Vec<i64> = perm.iter().map(|&i| gp[i]).collect();
            let pc: Vec<u32> = perm.iter().map(|&i| gc[i]).collect();
            let b = eval(&pd, 1, &[0], &[9], &pp, &pc, 5);
            prop_assert_eq!(a.ok(), b.ok());
        }
    }
}
