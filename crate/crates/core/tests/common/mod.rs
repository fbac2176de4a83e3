//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use reid_core::linalg::Matrix;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Largest hinge over every (positive, negative) pair of each anchor, averaged.
pub fn exhaustive_triplet(x: &Matrix, labels: &[usize], margin: f64) -> f64 {
    let n = x.rows();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let v = sq_dist(x.row(a), x.row(p)) - sq_dist(x.row(a), x.row(q)) + margin;
                worst = worst.max(v.max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Labels where every class has at least two members and there are at least
/// two classes.
pub fn random_labels(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 4);
    let classes = rng.random_range(2..=n / 2);
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
    while labels.len() < n {
        labels.push(rng.random_range(0..classes));
    }
    labels
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let v = x.get(i, j);
            probe.set(i, j, v + h);
            let up = f(&probe);
            probe.set(i, j, v - h);
            let down = f(&probe);
            probe.set(i, j, v);
            g.set(i, j, (up - down) / (2.0 * h));
        }
    }
    g
}

/// `||a - b|| / max(||a||, ||b||, floor)`
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Log-likelihood written out term by term.
pub fn lognormal_loglik(samples: &[f64], mu: f64, sigma: f64) -> f64 {
    samples
        .iter()
        .map(|&x| {
            let z = (x.ln() - mu) / sigma;
            -x.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
        })
        .sum()
}

/// Golden-section search for the maximum of a unimodal function on `[lo, hi]`.
pub fn golden_max(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

/// Numeric maximizer of the log-normal likelihood: nested golden-section
/// searches over sigma (outer) and mu (inner).
pub fn numeric_lognormal_mle(samples: &[f64]) -> (f64, f64) {
    let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo).max(1e-3);
    let best_mu = |sigma: f64| golden_max(lo, hi, 1e-10, |mu| lognormal_loglik(samples, mu, sigma));
    let sigma = golden_max(1e-4, spread, 1e-10, |s| lognormal_loglik(samples, best_mu(s), s));
    (best_mu(sigma), sigma)
}

/// Sorts gallery indices by distance with the index as tie-break, drops junk
/// and returns relevance flags.
pub fn naive_flags(distances: &[f64], relevant: &[bool], junk: &[bool]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap().then(a.cmp(&b)));
    idx.into_iter().filter(|&g| !junk[g]).map(|g| relevant[g]).collect()
}

/// Mean over hit positions of precision at that position, counted from scratch.
pub fn naive_ap(flags: &[bool]) -> Option<f64> {
    let hits: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
    if hits.is_empty() {
        return None;
    }
    let sum: f64 = hits
        .iter()
        .map(|&i| flags[..=i].iter().filter(|&&f| f).count() as f64 / (i + 1) as f64)
        .sum();
    Some(sum / hits.len() as f64)
}

/// `(mAP, CMC)` over queries with at least one relevant item.
pub fn naive_scores(lists: &[Vec<bool>], max_rank: usize) -> Option<(f64, Vec<f64>)> {
    let valid: Vec<&Vec<bool>> = lists.iter().filter(|l| l.contains(&true)).collect();
    if valid.is_empty() {
        return None;
    }
    let map = valid.iter().map(|l| naive_ap(l).unwrap()).sum::<f64>() / valid.len() as f64;
    let cmc = (1..=max_rank)
        .map(|r| valid.iter().filter(|l| l.iter().take(r).any(|&f| f)).count() as f64 / valid.len() as f64)
        .collect();
    Some((map, cmc))
}

fn sorted_neighbours(dist: &[Vec<f64>], i: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[i][a].partial_cmp(&dist[i][b]).unwrap().then(a.cmp(&b)));
    idx
}

fn k_reciprocal_set(ranks: &[Vec<usize>], i: usize, k: usize) -> HashSet<usize> {
    let forward: HashSet<usize> = ranks[i].iter().take(k + 1).copied().collect();
    forward
        .into_iter()
        .filter(|&c| ranks[c].iter().take(k + 1).any(|&x| x == i))
        .collect()
}

/// Straightforward k-reciprocal re-ranking with set arithmetic and a
/// min/max Jaccard.
pub fn naive_rerank(qg: &Matrix, qq: &Matrix, gg: &Matrix, k1: usize, k2: usize, lambda: f64) -> Matrix {
    let (nq, ng) = (qg.rows(), qg.cols());
    let n = nq + ng;
    let mut full = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            full[i][j] = if i < nq && j < nq {
                qq.get(i, j)
            } else if i < nq {
                qg.get(i, j - nq)
            } else if j < nq {
                qg.get(j, i - nq)
            } else {
                gg.get(i - nq, j - nq)
            };
        }
    }
    // normalise each column by its max after squaring, then transpose
    let mut dist = vec![vec![0.0; n]; n];
    for j in 0..n {
        let max = (0..n).map(|i| full[i][j] * full[i][j]).fold(0.0, f64::max);
        for i in 0..n {
            dist[j][i] = if max > 0.0 { full[i][j] * full[i][j] / max } else { 0.0 };
        }
    }
    let ranks: Vec<Vec<usize>> = (0..n).map(|i| sorted_neighbours(&dist, i)).collect();
    let half = ((k1 as f64) / 2.0).round_ties_even() as usize;

    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let base = k_reciprocal_set(&ranks, i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let sub = k_reciprocal_set(&ranks, c, half);
            if 3 * sub.intersection(&base).count() > 2 * sub.len() {
                expanded.extend(sub);
            }
        }
        let z: f64 = expanded.iter().map(|&j| (-dist[i][j]).exp()).sum();
        for &j in &expanded {
            v[i][j] = (-dist[i][j]).exp() / z;
        }
    }
    if k2 > 1 {
        let mut expanded = vec![vec![0.0; n]; n];
        for i in 0..n {
            let top: Vec<usize> = ranks[i].iter().take(k2).copied().collect();
            for j in 0..n {
                expanded[i][j] = top.iter().map(|&r| v[r][j]).sum::<f64>() / top.len() as f64;
            }
        }
        v = expanded;
    }
    Matrix::from_fn(nq, ng, |i, j| {
        let g = nq + j;
        let (mut smin, mut smax) = (0.0, 0.0);
        for l in 0..n {
            smin += v[i][l].min(v[g][l]);
            smax += v[i][l].max(v[g][l]);
        }
        (1.0 - lambda) * (1.0 - smin / smax) + lambda * qg.get(i, j)
    })
}

/// Symmetric distance blocks from random points, so the joint matrix is metric.
pub fn random_blocks(nq: usize, ng: usize, dim: usize, rng: &mut impl Rng) -> (Matrix, Matrix, Matrix) {
    let q = random_matrix(nq, dim, rng);
    let g = random_matrix(ng, dim, rng);
    let d = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
    (
        Matrix::from_fn(nq, ng, |i, j| d(q.row(i), g.row(j))),
        Matrix::from_fn(nq, nq, |i, j| d(q.row(i), q.row(j))),
        Matrix::from_fn(ng, ng, |i, j| d(g.row(i), g.row(j))),
    )
}
