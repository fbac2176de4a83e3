//! Part division of feature maps along height, width or channel, per-part
//! pooling, and assembly of the final embedding.

use crate::attention::FeatureMap;
use crate::linalg::{l2_norm, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
    Channel,
}

impl Axis {
    fn size(self, x: &FeatureMap) -> usize {
        match self {
            Axis::Height => x.height(),
            Axis::Width => x.width(),
            Axis::Channel => x.channels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSet {
    pub axis: Axis,
    pub parts: Vec<FeatureMap>,
}

impl PartSet {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Extent of each part along the division axis.
    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(|p| self.axis.size(p)).collect()
    }
}

/// Contiguous near-equal slice lengths; the remainder goes to leading parts.
pub fn part_sizes(size: usize, n_parts: usize) -> Result<Vec<usize>> {
    if n_parts == 0 || n_parts > size {
        return Err(Error::TooManyParts {
            size,
            parts: n_parts,
        });
    }
    let (base, rem) = (size / n_parts, size % n_parts);
    Ok((0..n_parts).map(|i| base + usize::from(i < rem)).collect())
}

fn slice(x: &FeatureMap, axis: Axis, start: usize, len: usize) -> FeatureMap {
    let (c, h, w) = x.dims();
    let built = match axis {
        Axis::Channel => FeatureMap::from_fn(len, h, w, |i, j, k| x.get(start + i, j, k)),
        Axis::Height => FeatureMap::from_fn(c, len, w, |i, j, k| x.get(i, start + j, k)),
        Axis::Width => FeatureMap::from_fn(c, h, len, |i, j, k| x.get(i, j, start + k)),
    };
    built.expect("slice of a valid map")
}

pub fn divide(x: &FeatureMap, axis: Axis, n_parts: usize) -> Result<PartSet> {
    let sizes = part_sizes(axis.size(x), n_parts)?;
    let mut start = 0;
    let parts = sizes
        .into_iter()
        .map(|len| {
            let p = slice(x, axis, start, len);
            start += len;
            p
        })
        .collect();
    Ok(PartSet { axis, parts })
}

/// Inverse of [`divide`]: concatenates parts along their axis.
pub fn concat(set: &PartSet) -> Result<FeatureMap> {
    let first = set
        .parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no parts to concatenate".into()))?;
    let (c, h, w) = first.dims();
    let total: usize = set.sizes().iter().sum();
    for p in &set.parts {
        let (pc, ph, pw) = p.dims();
        let ok = match set.axis {
            Axis::Channel => ph == h && pw == w,
            Axis::Height => pc == c && pw == w,
            Axis::Width => pc == c && ph == h,
        };
        if !ok {
            return Err(Error::ShapeMismatch("parts disagree off-axis".into()));
        }
    }
    // locate (part, local index) for a global coordinate along the axis
    let mut owner = Vec::with_capacity(total);
    for (pi, len) in set.sizes().into_iter().enumerate() {
        owner.extend((0..len).map(|l| (pi, l)));
    }
    match set.axis {
        Axis::Channel => FeatureMap::from_fn(total, h, w, |i, j, k| {
            let (p, l) = owner[i];
            set.parts[p].get(l, j, k)
        }),
        Axis::Height => FeatureMap::from_fn(c, total, w, |i, j, k| {
            let (p, l) = owner[j];
            set.parts[p].get(i, l, k)
        }),
        Axis::Width => FeatureMap::from_fn(c, h, total, |i, j, k| {
            let (p, l) = owner[k];
            set.parts[p].get(i, j, l)
        }),
    }
}

/// Spatial average of every part. Height and width parts yield length-`C`
/// rows; channel parts yield one entry per channel in the part.
pub fn pool_parts(set: &PartSet) -> Vec<Vec<f64>> {
    set.parts
        .iter()
        .map(|p| {
            let n = (p.height() * p.width()) as f64;
            (0..p.channels())
                .map(|i| p.plane(i).iter().sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Applies an optional linear map to each pooled part; `None` is identity.
pub fn project_parts(pooled: &[Vec<f64>], maps: &[Option<Matrix>]) -> Result<Vec<Vec<f64>>> {
    pooled
        .iter()
        .enumerate()
        .map(|(i, row)| match maps.get(i).and_then(Option::as_ref) {
            Some(m) => m.matvec(row),
            None => Ok(row.clone()),
        })
        .collect()
}

fn push_block(out: &mut Vec<f64>, block: &[f64], normalize: bool) {
    let norm = l2_norm(block);
    if normalize && norm > 0.0 {
        out.extend(block.iter().map(|v| v / norm));
    } else {
        out.extend_from_slice(block);
    }
}

/// Concatenates `coarse`, `fine`, then every part row of each part group in
/// the order given (height, width, channel by convention).
pub fn assemble_embedding(
    coarse: &[f64],
    fine: &[f64],
    parts: &[Vec<Vec<f64>>],
    normalize_blocks: bool,
) -> Vec<f64> {
    let mut out = Vec::new();
    for block in [coarse, fine] {
        if !block.is_empty() {
            push_block(&mut out, block, normalize_blocks);
        }
    }
    for group in parts {
        for row in group {
            if !row.is_empty() {
                push_block(&mut out, row, normalize_blocks);
            }
        }
    }
    out
}

/// Per-dimension standardization separating the metric-learning view of an
/// embedding from the classifier view. Statistics come from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct BnNeck {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BnNeck {
    pub const EPS: f64 = 1e-5;

    pub fn fit(train: &Matrix) -> Result<Self> {
        if train.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = train.rows() as f64;
        let d = train.cols();
        let mut mean = vec![0.0; d];
        for r in train.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in train.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n + Self::EPS).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn apply_rows(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..m.rows() {
            let r = self.apply(m.row(i));
            out.row_mut(i).copy_from_slice(&r);
        }
        out
    }
}
