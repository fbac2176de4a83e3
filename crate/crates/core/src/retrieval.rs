//! Query-to-gallery distances, spatio-temporal fusion, ranking and
//! k-reciprocal re-ranking.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{write_text, CameraGraph, FeatureRecord, MetaRecord};
use crate::linalg::{squared_euclidean, Matrix};
use crate::spatiotemporal::{affinity_from_density, density, StModel};
use crate::{Error, Result};

/// `n_query x n_gallery` matrix of finite, nonnegative distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Matrix,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

impl DistanceMatrix {
    pub fn new(values: Matrix, query_ids: Vec<String>, gallery_ids: Vec<String>) -> Result<Self> {
        if values.rows() != query_ids.len() || values.cols() != gallery_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} distances for {} queries and {} gallery items",
                values.rows(),
                values.cols(),
                query_ids.len(),
                gallery_ids.len()
            )));
        }
        if let Some(p) = values
            .as_slice()
            .iter()
            .position(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::NonFiniteValue {
                row: p / values.cols().max(1),
                col: p % values.cols().max(1),
            });
        }
        Ok(Self {
            values,
            query_ids,
            gallery_ids,
        })
    }

    pub fn n_query(&self) -> usize {
        self.values.rows()
    }

    pub fn n_gallery(&self) -> usize {
        self.values.cols()
    }
}

/// Euclidean distances between the rows of `a` and the rows of `b`.
pub fn pairwise_distances(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            left: a.cols(),
            right: b.cols(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let q = a.row(i);
            b.iter_rows().map(|g| squared_euclidean(q, g).sqrt()).collect()
        })
        .collect();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

fn stack(records: &[&FeatureRecord]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.embedding.as_slice()).collect();
    Matrix::from_rows(&rows)
}

pub fn appearance_distances(
    queries: &[&FeatureRecord],
    gallery: &[&FeatureRecord],
) -> Result<DistanceMatrix> {
    let q = stack(queries)?;
    let g = stack(gallery)?;
    let values = if queries.is_empty() || gallery.is_empty() {
        Matrix::zeros(queries.len(), gallery.len())
    } else {
        pairwise_distances(&q, &g)?
    };
    DistanceMatrix::new(
        values,
        queries.iter().map(|r| r.meta.image_id.clone()).collect(),
        gallery.iter().map(|r| r.meta.image_id.clone()).collect(),
    )
}

/// How pairs seen by the same camera are scored. Their camera distance is 0,
/// outside the log-normal support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SameCameraPolicy {
    /// Spatial density 0, like any value outside the support; the time term
    /// is scored as usual.
    #[default]
    ZeroDensity,
    /// No spatio-temporal penalty at all.
    AppearanceOnly,
}

impl SameCameraPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::ZeroDensity => "zero-density",
            Self::AppearanceOnly => "appearance-only",
        }
    }
}

impl FromStr for SameCameraPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-density" => Ok(Self::ZeroDensity),
            "appearance-only" => Ok(Self::AppearanceOnly),
            other => Err(Error::InvalidConfig(format!("unknown same-camera policy `{other}`"))),
        }
    }
}

/// `D_s + D_t` for one pair. Zero gaps have density 0.
pub fn st_penalty(
    q: &MetaRecord,
    g: &MetaRecord,
    graph: &CameraGraph,
    model: &StModel,
    policy: SameCameraPolicy,
) -> Result<f64> {
    let delta = if q.camera_id == g.camera_id {
        match policy {
            SameCameraPolicy::AppearanceOnly => return Ok(0.0),
            SameCameraPolicy::ZeroDensity => 0.0,
        }
    } else {
        graph
            .distance(&q.camera_id, &g.camera_id)
            .ok_or_else(|| Error::MissingCameraDistance(q.camera_id.clone(), g.camera_id.clone()))?
    };
    let tau = (q.timestamp - g.timestamp).abs();
    let ds = affinity_from_density(density(delta, &model.dist), model.alpha1, model.alpha2);
    let dt = affinity_from_density(density(tau, &model.time), model.beta1, model.beta2);
    Ok(ds + dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FuseOptions {
    /// Min-max normalize each appearance row to [0, 1] before fusing.
    pub normalize_rows: bool,
    pub same_camera: SameCameraPolicy,
}

fn min_max(row: &mut [f64]) {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in row.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// `fused = d_a + omega * (D_s + D_t)` with `omega` taken from the model.
pub fn fuse(
    d_a: &DistanceMatrix,
    queries: &[&MetaRecord],
    gallery: &[&MetaRecord],
    graph: &CameraGraph,
    model: &StModel,
    opts: FuseOptions,
) -> Result<DistanceMatrix> {
    if queries.len() != d_a.n_query() || gallery.len() != d_a.n_gallery() {
        return Err(Error::ShapeMismatch(format!(
            "{} query / {} gallery records for a {}x{} distance matrix",
            queries.len(),
            gallery.len(),
            d_a.n_query(),
            d_a.n_gallery()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..d_a.n_query())
        .into_par_iter()
        .map(|i| {
            let mut row = d_a.values.row(i).to_vec();
            if opts.normalize_rows {
                min_max(&mut row);
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v += model.omega * st_penalty(queries[i], gallery[j], graph, model, opts.same_camera)?;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut values = Matrix::zeros(d_a.n_query(), d_a.n_gallery());
    for (i, r) in rows.into_iter().enumerate() {
        values.row_mut(i).copy_from_slice(&r);
    }
    DistanceMatrix::new(values, d_a.query_ids.clone(), d_a.gallery_ids.clone())
}

/// Gallery order per query, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    pub order: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

/// Stable ascending argsort; ties keep the lower index first.
pub fn argsort(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

pub fn rank(d: &DistanceMatrix) -> RankingResult {
    let (order, distances) = (0..d.n_query())
        .into_par_iter()
        .map(|i| {
            let row = d.values.row(i);
            let o = argsort(row);
            let ds = o.iter().map(|&j| row[j]).collect();
            (o, ds)
        })
        .unzip();
    RankingResult {
        query_ids: d.query_ids.clone(),
        gallery_ids: d.gallery_ids.clone(),
        order,
        distances,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the final mix.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k1 <= self.k2 {
            return Err(Error::BadK(format!(
                "need k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::BadK(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Top `k` entries of a rank row, clamped to its length.
fn head(row: &[usize], k: usize) -> &[usize] {
    &row[..k.min(row.len())]
}

/// Members of `forward` whose own top-`k` list contains `i`.
fn reciprocal(initial_rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    head(&initial_rank[i], k + 1)
        .iter()
        .copied()
        .filter(|&c| head(&initial_rank[c], k + 1).contains(&i))
        .collect()
}

/// k-reciprocal re-ranking with local query expansion:
/// `final = (1 - lambda) * jaccard + lambda * d_qg`.
///
/// Neighbour sets and encoding weights are computed on the squared,
/// per-column-max normalized joint distance matrix over queries and gallery.
pub fn k_reciprocal_rerank(
    d_qg: &Matrix,
    d_qq: &Matrix,
    d_gg: &Matrix,
    params: RerankParams,
) -> Result<Matrix> {
    params.validate()?;
    let (nq, ng) = (d_qg.rows(), d_qg.cols());
    if d_qq.rows() != nq || d_qq.cols() != nq || d_gg.rows() != ng || d_gg.cols() != ng {
        return Err(Error::ShapeMismatch(format!(
            "re-ranking blocks: qg {nq}x{ng}, qq {}x{}, gg {}x{}",
            d_qq.rows(),
            d_qq.cols(),
            d_gg.rows(),
            d_gg.cols()
        )));
    }
    let n = nq + ng;
    // joint[i][j] for i, j over queries then gallery
    let joint = |i: usize, j: usize| -> f64 {
        match (i < nq, j < nq) {
            (true, true) => d_qq.get(i, j),
            (true, false) => d_qg.get(i, j - nq),
            (false, true) => d_qg.get(j, i - nq),
            (false, false) => d_gg.get(i - nq, j - nq),
        }
    };
    // row i of `dist` is column i of the squared joint matrix over its max
    let mut dist = Matrix::zeros(n, n);
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|j| joint(j, i).powi(2)).collect();
        let max = col.iter().copied().fold(0.0, f64::max);
        for (j, v) in col.into_iter().enumerate() {
            dist.set(i, j, if max > 0.0 { v / max } else { 0.0 });
        }
    }
    let initial_rank: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| argsort(dist.row(i))).collect();

    let half = (params.k1 as f64 / 2.0).round_ties_even() as usize;
    let encode = |i: usize| -> Vec<f64> {
        let k_rec = reciprocal(&initial_rank, i, params.k1);
        let mut expansion = k_rec.clone();
        for &cand in &k_rec {
            let cand_rec = reciprocal(&initial_rank, cand, half);
            let shared = cand_rec.iter().filter(|c| k_rec.contains(c)).count();
            if shared as f64 > 2.0 / 3.0 * cand_rec.len() as f64 {
                expansion.extend(cand_rec);
            }
        }
        expansion.sort_unstable();
        expansion.dedup();
        let weights: Vec<f64> = expansion.iter().map(|&j| (-dist.get(i, j)).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut v = vec![0.0; n];
        for (&j, w) in expansion.iter().zip(weights) {
            v[j] = w / total;
        }
        v
    };
    let mut v: Vec<Vec<f64>> = (0..n).into_par_iter().map(encode).collect();

    if params.k2 != 1 {
        v = (0..n)
            .into_par_iter()
            .map(|i| {
                let rows = head(&initial_rank[i], params.k2);
                let mut acc = vec![0.0; n];
                for &r in rows {
                    for (a, x) in acc.iter_mut().zip(&v[r]) {
                        *a += x;
                    }
                }
                let m = rows.len() as f64;
                acc.iter_mut().for_each(|a| *a /= m);
                acc
            })
            .collect();
    }

    // inverted index: column -> rows with nonzero weight
    let mut inv: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, row) in v.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            if x != 0.0 {
                inv[c].push(r);
            }
        }
    }

    let rows: Vec<Vec<f64>> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let mut tmin = vec![0.0; n];
            for (l, &vil) in v[i].iter().enumerate() {
                if vil == 0.0 {
                    continue;
                }
                for &j in &inv[l] {
                    tmin[j] += vil.min(v[j][l]);
                }
            }
            (0..ng)
                .map(|g| {
                    let t = tmin[nq + g];
                    let jac = 1.0 - t / (2.0 - t);
                    (1.0 - params.lambda) * jac + params.lambda * d_qg.get(i, g)
                })
                .collect()
        })
        .collect();
    let mut out = Matrix::zeros(nq, ng);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

pub const RANKING_HEADER: &str = "query_id,rank,gallery_id,distance";

pub fn encode_ranking(r: &RankingResult) -> String {
    let mut s = String::from(RANKING_HEADER);
    s.push('\n');
    for (qi, q) in r.query_ids.iter().enumerate() {
        for (pos, (&g, d)) in r.order[qi].iter().zip(&r.distances[qi]).enumerate() {
            s.push_str(&format!("{q},{},{},{d}\n", pos + 1, r.gallery_ids[g]));
        }
    }
    s
}

pub fn write_ranking(path: &Path, r: &RankingResult) -> Result<()> {
    write_text(path, &encode_ranking(r))
}

/// One query's ranked gallery as read back from a ranking file.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub gallery: Vec<(String, f64)>,
}

/// Groups rows by query (first-appearance order) and orders them by rank.
pub fn decode_ranking(text: &str) -> Result<Vec<RankedList>> {
    let mut lines = text.lines();
    let found = lines.next().unwrap_or("").trim();
    if found != RANKING_HEADER {
        return Err(Error::MalformedHeader {
            expected: RANKING_HEADER.into(),
            found: found.into(),
        });
    }
    let mut lists: Vec<(String, Vec<(usize, String, f64)>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: &str| Error::BadRow {
            line: line_no,
            message: m.to_string(),
        };
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let rank: usize = f[1].parse().map_err(|_| bad("bad rank"))?;
        let d: f64 = f[3].parse().map_err(|_| bad("bad distance"))?;
        if rank == 0 {
            return Err(bad("ranks start at 1"));
        }
        match lists.iter_mut().find(|(q, _)| q == f[0]) {
            Some((_, rows)) => rows.push((rank, f[2].to_string(), d)),
            None => lists.push((f[0].to_string(), vec![(rank, f[2].to_string(), d)])),
        }
    }
    Ok(lists
        .into_iter()
        .map(|(q, mut rows)| {
            rows.sort_by_key(|r| r.0);
            RankedList {
                query_id: q,
                gallery: rows.into_iter().map(|(_, g, d)| (g, d)).collect(),
            }
        })
        .collect())
}

pub fn parse_ranking(path: &Path) -> Result<Vec<RankedList>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_ranking(&text)
}
