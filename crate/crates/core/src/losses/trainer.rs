//! Plain gradient descent over a linear embedder `f = W x` and a linear
//! classification head, driven by the combined objective.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{combine, cross_entropy, triplet_batch_hard};
use crate::data::{write_text, Dataset};
use crate::division::BnNeck;
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `ce + lambda * tri`
    Joint,
    /// Cross-entropy alone; the triplet term is never evaluated.
    CeOnly,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub margin: f64,
    pub learning_rate: f64,
    /// Embedding width; defaults to the input width.
    pub out_dim: Option<usize>,
    /// Identities per batch (P).
    pub batch_identities: usize,
    /// Images sampled per identity (K).
    pub images_per_identity: usize,
    /// Standardize embeddings before the classifier.
    pub bnneck: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            epsilon: 0.1,
            margin: 1.2,
            learning_rate: 0.05,
            out_dim: None,
            batch_identities: 8,
            images_per_identity: 4,
            bnneck: true,
            objective: Objective::Joint,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub tri: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `d_out x d_in`
    pub embedder: Matrix,
    /// `classes x d_out`
    pub head: Matrix,
    /// Full-dataset losses; row 0 is the initialization.
    pub trace: Vec<TraceRow>,
}

struct Model {
    w: Matrix,
    head: Matrix,
}

struct Step {
    ce: f64,
    tri: f64,
    grad_w: Matrix,
    grad_head: Matrix,
}

/// Rows of `x` mapped through `W`: `X Wᵀ`.
fn embed(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let r = w.matvec(x.row(i)).expect("embedder width");
        out.row_mut(i).copy_from_slice(&r);
    }
    out
}

fn evaluate(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    bn: Option<&BnNeck>,
    cfg: &TrainConfig,
) -> Result<Step> {
    let f = embed(x, &model.w);
    let h = bn.map_or_else(|| f.clone(), |b| b.apply_rows(&f));
    let logits = embed(&h, &model.head);
    let (ce, g_logits) = cross_entropy(&logits, labels, cfg.epsilon)?;

    // dL/dhead = g_logitsᵀ h ; dL/dh = g_logits head
    let grad_head = g_logits.transpose().matmul(&h)?;
    let mut grad_f = g_logits.matmul(&model.head)?;
    if let Some(b) = bn {
        for i in 0..grad_f.rows() {
            for (g, s) in grad_f.row_mut(i).iter_mut().zip(&b.std) {
                *g /= s;
            }
        }
    }
    let tri = match cfg.objective {
        Objective::Joint => {
            let (tri, g_tri) = triplet_batch_hard(&f, labels, cfg.margin)?;
            for (g, t) in grad_f.as_mut_slice().iter_mut().zip(g_tri.as_slice()) {
                *g += cfg.lambda * t;
            }
            tri
        }
        Objective::CeOnly => 0.0,
    };
    let grad_w = grad_f.transpose().matmul(x)?;
    Ok(Step {
        ce,
        tri,
        grad_w,
        grad_head,
    })
}

fn descend(m: &mut Matrix, g: &Matrix, lr: f64) {
    for (w, d) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *w -= lr * d;
    }
}

/// P x K batches: identities shuffled and chunked, K images drawn per
/// identity without replacement. A trailing single-identity chunk is merged
/// into its predecessor so every batch has negatives.
fn sample_batches(
    by_class: &BTreeMap<usize, Vec<usize>>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(rng);
    let p = cfg.batch_identities.max(2);
    let mut chunks: Vec<Vec<usize>> = classes.chunks(p).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    let k = cfg.images_per_identity.max(2);
    chunks
        .into_iter()
        .map(|chunk| {
            chunk
                .iter()
                .flat_map(|c| {
                    let members = &by_class[c];
                    members
                        .choose_multiple(rng, k.min(members.len()))
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .collect()
}

fn gather(x: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), x.cols());
    for (o, &r) in rows.iter().enumerate() {
        out.row_mut(o).copy_from_slice(x.row(r));
    }
    out
}

fn init_model(d_in: usize, d_out: usize, classes: usize, rng: &mut ChaCha8Rng) -> Model {
    let nw = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
    let nh = Normal::new(0.0, (1.0 / d_out as f64).sqrt()).unwrap();
    Model {
        w: Matrix::from_fn(d_out, d_in, |_, _| nw.sample(rng)),
        head: Matrix::from_fn(classes, d_out, |_, _| nh.sample(rng)),
    }
}

/// Trains for `epochs` passes. Deterministic for a fixed `cfg.seed`.
pub fn train_toy(dataset: &Dataset, cfg: &TrainConfig, epochs: usize) -> Result<TrainOutcome> {
    let (labels, names) = dataset.class_labels();
    if names.len() < 2 {
        return Err(Error::InvalidConfig("training needs at least two identities".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((_, members)) = by_class.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::NoPositive(members[0]));
    }
    let x = dataset.embeddings();
    let d_in = x.cols();
    let d_out = cfg.out_dim.unwrap_or(d_in);
    if d_out == 0 {
        return Err(Error::InvalidConfig("embedding width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(d_in, d_out, names.len(), &mut rng);

    let neck = |m: &Model| -> Result<Option<BnNeck>> {
        if cfg.bnneck {
            BnNeck::fit(&embed(&x, &m.w)).map(Some)
        } else {
            Ok(None)
        }
    };
    let record = |epoch: usize, m: &Model, bn: Option<&BnNeck>| -> Result<TraceRow> {
        let s = evaluate(m, &x, &labels, bn, cfg)?;
        let lambda = match cfg.objective {
            Objective::Joint => cfg.lambda,
            Objective::CeOnly => 0.0,
        };
        Ok(TraceRow {
            epoch,
            total: combine(s.ce, s.tri, lambda),
            ce: s.ce,
            tri: s.tri,
        })
    };

    let mut bn = neck(&model)?;
    let mut trace = vec![record(0, &model, bn.as_ref())?];
    for epoch in 1..=epochs {
        for rows in sample_batches(&by_class, cfg, &mut rng) {
            let xb = gather(&x, &rows);
            let lb: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let step = evaluate(&model, &xb, &lb, bn.as_ref(), cfg)?;
            descend(&mut model.w, &step.grad_w, cfg.learning_rate);
            descend(&mut model.head, &step.grad_head, cfg.learning_rate);
        }
        bn = neck(&model)?;
        trace.push(record(epoch, &model, bn.as_ref())?);
    }
    Ok(TrainOutcome {
        embedder: model.w,
        head: model.head,
        trace,
    })
}

/// Maps every embedding through the trained embedder.
pub fn embed_dataset(dataset: &Dataset, embedder: &Matrix) -> Result<Dataset> {
    if embedder.cols() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            left: embedder.cols(),
            right: dataset.dim(),
        });
    }
    dataset.with_embeddings(&embed(&dataset.embeddings(), embedder))
}

pub fn encode_trace(trace: &[TraceRow]) -> String {
    let mut s = String::from("epoch,total,ce,tri\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.total, r.ce, r.tri));
    }
    s
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_text(path, &encode_trace(trace))
}
