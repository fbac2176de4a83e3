//! mAP and CMC.
//!
//! Junk gallery items are removed from every ranked list before scoring, so
//! their distances never matter. AP is non-interpolated: the mean of the
//! precision at each relevant position.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{parse_key_values, parse_value, write_text, MetaRecord};
use crate::retrieval::{RankedList, RankingResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Protocol {
    /// Same identity on another camera is relevant; same identity on the
    /// query's camera is junk.
    #[default]
    CrossCamera,
    /// Any other image of the same identity is relevant; only the query
    /// image itself is junk.
    All,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-camera" | "cross_camera" => Ok(Protocol::CrossCamera),
            "all" => Ok(Protocol::All),
            other => Err(Error::InvalidConfig(format!("unknown protocol `{other}`"))),
        }
    }
}

/// `(relevant, junk)` flags for each gallery item.
pub fn relevance_mask(
    query: &MetaRecord,
    gallery: &[&MetaRecord],
    protocol: Protocol,
) -> (Vec<bool>, Vec<bool>) {
    gallery
        .iter()
        .map(|g| {
            let same_id = g.vehicle_id == query.vehicle_id;
            match protocol {
                Protocol::CrossCamera => {
                    let same_cam = g.camera_id == query.camera_id;
                    (same_id && !same_cam, same_id && same_cam)
                }
                Protocol::All => {
                    let itself = g.image_id == query.image_id;
                    (same_id && !itself, itself)
                }
            }
        })
        .unzip()
}

/// `None` when the list holds no relevant item.
pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Zero-based position of the first relevant item.
pub fn first_hit(ranked: &[bool]) -> Option<usize> {
    ranked.iter().position(|&r| r)
}

/// CMC over the queries that have at least one relevant item.
pub fn cmc(ranked: &[Vec<bool>], max_rank: usize) -> Vec<f64> {
    let firsts: Vec<usize> = ranked.iter().filter_map(|r| first_hit(r)).collect();
    let mut curve = vec![0.0; max_rank];
    if firsts.is_empty() {
        return curve;
    }
    let mut counts = vec![0usize; max_rank];
    for f in &firsts {
        if *f < max_rank {
            counts[*f] += 1;
        }
    }
    let mut acc = 0usize;
    for (c, n) in curve.iter_mut().zip(counts) {
        acc += n;
        *c = acc as f64 / firsts.len() as f64;
    }
    curve
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    /// One entry per query; `None` for queries without relevant items.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_valid_queries: usize,
}

impl EvalReport {
    pub fn top_k(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn top1(&self) -> f64 {
        self.top_k(1)
    }

    pub fn top5(&self) -> f64 {
        self.top_k(5)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }
}

/// Scores junk-free relevance lists, one per query.
pub fn evaluate_flags(ranked: &[Vec<bool>], max_rank: usize) -> Result<EvalReport> {
    let per_query_ap: Vec<Option<f64>> = ranked.iter().map(|r| average_precision(r)).collect();
    let valid: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let map = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(EvalReport {
        map,
        cmc: cmc(ranked, max_rank),
        per_query_ap,
        num_valid_queries: valid.len(),
    })
}

fn strip_junk(order: impl Iterator<Item = usize>, relevant: &[bool], junk: &[bool]) -> Vec<bool> {
    order.filter(|&g| !junk[g]).map(|g| relevant[g]).collect()
}

pub fn evaluate(
    ranking: &RankingResult,
    queries: &[&MetaRecord],
    gallery: &[&MetaRecord],
    protocol: Protocol,
    max_rank: usize,
) -> Result<EvalReport> {
    if queries.len() != ranking.order.len() || gallery.len() != ranking.gallery_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "ranking over {}x{} but {} query / {} gallery records",
            ranking.order.len(),
            ranking.gallery_ids.len(),
            queries.len(),
            gallery.len()
        )));
    }
    let lists: Vec<Vec<bool>> = queries
        .iter()
        .zip(&ranking.order)
        .map(|(q, order)| {
            let (rel, junk) = relevance_mask(q, gallery, protocol);
            strip_junk(order.iter().copied(), &rel, &junk)
        })
        .collect();
    evaluate_flags(&lists, max_rank)
}

/// Evaluates ranked lists read from a ranking file against metadata.
pub fn evaluate_lists(
    lists: &[RankedList],
    meta: &[MetaRecord],
    protocol: Protocol,
    max_rank: usize,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &MetaRecord> = meta.iter().map(|m| (m.image_id.as_str(), m)).collect();
    let lookup = |id: &str| by_id.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()));
    let mut flags = Vec::with_capacity(lists.len());
    for list in lists {
        let q = lookup(&list.query_id)?;
        let gallery: Vec<&MetaRecord> = list
            .gallery
            .iter()
            .map(|(g, _)| lookup(g))
            .collect::<Result<_>>()?;
        let (rel, junk) = relevance_mask(q, &gallery, protocol);
        flags.push(strip_junk(0..gallery.len(), &rel, &junk));
    }
    evaluate_flags(&flags, max_rank)
}

/// Mean of several reports, entry by entry. Per-query APs are concatenated.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::NoValidQueries)?;
    let n = reports.len() as f64;
    let len = first.cmc.len();
    let mut cmc = vec![0.0; len];
    for r in reports {
        if r.cmc.len() != len {
            return Err(Error::ShapeMismatch("reports with different CMC lengths".into()));
        }
        for (c, v) in cmc.iter_mut().zip(&r.cmc) {
            *c += v;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    Ok(EvalReport {
        map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        cmc,
        per_query_ap: reports.iter().flat_map(|r| r.per_query_ap.clone()).collect(),
        num_valid_queries: reports.iter().map(|r| r.num_valid_queries).sum(),
    })
}

/// One gallery image drawn per identity; all remaining images are queries.
/// Returns `(query indices, gallery indices)` into `records`.
pub fn sample_gallery_split(records: &[MetaRecord], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_id.entry(r.vehicle_id.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for members in by_id.values() {
        let pick = *members.choose(&mut rng).expect("non-empty group");
        gallery.push(pick);
        queries.extend(members.iter().copied().filter(|&m| m != pick));
    }
    queries.sort_unstable();
    gallery.sort_unstable();
    (queries, gallery)
}

/// Repeats the random gallery split `draws` times and averages the reports.
pub fn repeated_split_eval<F>(
    records: &[MetaRecord],
    draws: usize,
    seed: u64,
    mut run: F,
) -> Result<EvalReport>
where
    F: FnMut(&[usize], &[usize]) -> Result<EvalReport>,
{
    let reports = (0..draws as u64)
        .map(|d| {
            let (q, g) = sample_gallery_split(records, seed.wrapping_add(d));
            run(&q, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    average_reports(&reports)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "map = {}", self.map)?;
        writeln!(f, "top1 = {}", self.top1())?;
        writeln!(f, "top5 = {}", self.top5())?;
        let joined: Vec<String> = self.cmc.iter().map(|c| c.to_string()).collect();
        writeln!(f, "cmc = {}", joined.join(","))?;
        writeln!(f, "num_valid_queries = {}", self.num_valid_queries)
    }
}

/// Reads the flat report document; per-query APs are not stored.
impl FromStr for EvalReport {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut map = None;
        let mut cmc = None;
        let mut valid = None;
        for (line, key, value) in parse_key_values(text)? {
            match key.as_str() {
                "map" => map = Some(parse_value::<f64>(line, &key, &value)?),
                "cmc" => {
                    cmc = Some(
                        value
                            .split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| parse_value::<f64>(line, &key, s.trim()))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "num_valid_queries" => valid = Some(parse_value(line, &key, &value)?),
                "top1" | "top5" => {
                    parse_value::<f64>(line, &key, &value)?;
                }
                other => return Err(Error::InvalidConfig(format!("unknown report key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::InvalidConfig(format!("report lacks `{k}`"));
        Ok(EvalReport {
            map: map.ok_or_else(|| missing("map"))?,
            cmc: cmc.ok_or_else(|| missing("cmc"))?,
            per_query_ap: Vec::new(),
            num_valid_queries: valid.ok_or_else(|| missing("num_valid_queries"))?,
        })
    }
}
