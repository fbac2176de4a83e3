//! End-to-end helpers: query/gallery splits, fused ranking with optional
//! re-ranking, feature-map embeddings and ablation sweeps.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_block, channel_pool, AttentionOrder, ChannelAttentionWeights, FeatureMap,
    SpatialAttentionWeights, DEFAULT_SPATIAL_KERNEL,
};
use crate::data::{write_text, CameraGraph, Dataset, EngineConfig, FeatureRecord, MetaRecord};
use crate::division::{assemble_embedding, divide, pool_parts, Axis};
use crate::linalg::Matrix;
use crate::losses::{embed_dataset, train_toy, TrainConfig};
use crate::metrics::{evaluate, EvalReport, Protocol};
use crate::retrieval::{
    appearance_distances, fuse, k_reciprocal_rerank, rank, DistanceMatrix, FuseOptions,
    RankingResult, RerankParams,
};
use crate::spatiotemporal::StModel;
use crate::{Error, Result};

/// Record indices of the queries and of the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl Split {
    /// Named queries; every other record forms the gallery.
    pub fn from_query_ids(dataset: &Dataset, ids: &[String]) -> Result<Self> {
        let mut queries = Vec::with_capacity(ids.len());
        let mut seen = HashSet::new();
        for id in ids {
            let i = dataset.position(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            if !seen.insert(i) {
                return Err(Error::DuplicateImageId(id.clone()));
            }
            queries.push(i);
        }
        let gallery = (0..dataset.len()).filter(|i| !seen.contains(i)).collect();
        Ok(Self { queries, gallery })
    }

    fn records<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a FeatureRecord> {
        idx.iter().map(|&i| dataset.get(i)).collect()
    }

    fn metas<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a MetaRecord> {
        idx.iter().map(|&i| &dataset.get(i).meta).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RankOptions {
    pub fuse: FuseOptions,
    pub rerank: Option<RerankParams>,
    /// Re-rank appearance distances first, then fuse.
    pub rerank_before_fuse: bool,
}

/// Appearance distances, fused with `model` when given, optionally re-ranked.
pub fn distance_matrix(
    dataset: &Dataset,
    split: &Split,
    graph: &CameraGraph,
    model: Option<&StModel>,
    opts: &RankOptions,
) -> Result<DistanceMatrix> {
    let q = Split::records(dataset, &split.queries);
    let g = Split::records(dataset, &split.gallery);
    let qm = Split::metas(dataset, &split.queries);
    let gm = Split::metas(dataset, &split.gallery);

    let fuse_block = |d: DistanceMatrix, rows: &[&MetaRecord], cols: &[&MetaRecord]| match model {
        Some(m) => fuse(&d, rows, cols, graph, m, opts.fuse),
        None => Ok(d),
    };

    let d_qg = appearance_distances(&q, &g)?;
    let Some(params) = opts.rerank else {
        return fuse_block(d_qg, &qm, &gm);
    };
    let d_qq = appearance_distances(&q, &q)?;
    let d_gg = appearance_distances(&g, &g)?;
    if opts.rerank_before_fuse {
        let rr = k_reciprocal_rerank(&d_qg.values, &d_qq.values, &d_gg.values, params)?;
        let rr = DistanceMatrix::new(rr, d_qg.query_ids, d_qg.gallery_ids)?;
        fuse_block(rr, &qm, &gm)
    } else {
        let f_qg = fuse_block(d_qg, &qm, &gm)?;
        let f_qq = fuse_block(d_qq, &qm, &qm)?;
        let f_gg = fuse_block(d_gg, &gm, &gm)?;
        let rr = k_reciprocal_rerank(&f_qg.values, &f_qq.values, &f_gg.values, params)?;
        DistanceMatrix::new(rr, f_qg.query_ids, f_qg.gallery_ids)
    }
}

pub fn ranking(
    dataset: &Dataset,
    split: &Split,
    graph: &CameraGraph,
    model: Option<&StModel>,
    opts: &RankOptions,
) -> Result<RankingResult> {
    Ok(rank(&distance_matrix(dataset, split, graph, model, opts)?))
}

pub fn evaluate_ranking(
    dataset: &Dataset,
    split: &Split,
    ranking: &RankingResult,
    protocol: Protocol,
    max_rank: usize,
) -> Result<EvalReport> {
    let qm = Split::metas(dataset, &split.queries);
    let gm = Split::metas(dataset, &split.gallery);
    evaluate(ranking, &qm, &gm, protocol, max_rank)
}

/// Ranks and scores in one go.
pub fn rank_and_evaluate(
    dataset: &Dataset,
    split: &Split,
    graph: &CameraGraph,
    model: Option<&StModel>,
    opts: &RankOptions,
    protocol: Protocol,
    max_rank: usize,
) -> Result<EvalReport> {
    let r = ranking(dataset, split, graph, model, opts)?;
    evaluate_ranking(dataset, split, &r, protocol, max_rank)
}

/// How flat embeddings are turned into two-stream descriptors.
#[derive(Debug, Clone)]
pub struct MapEmbedConfig {
    /// `(C, H, W)`; must multiply to the embedding dimension.
    pub shape: (usize, usize, usize),
    pub channel: Option<ChannelAttentionWeights>,
    pub spatial: Option<SpatialAttentionWeights>,
    pub order: AttentionOrder,
    /// Parts along height, width, channel.
    pub parts: (usize, usize, usize),
    pub normalize_blocks: bool,
}

impl MapEmbedConfig {
    /// Seeded attention weights with the engine's reduction ratio and part counts.
    pub fn seeded(shape: (usize, usize, usize), engine: &EngineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(engine.seed);
        let kernel = DEFAULT_SPATIAL_KERNEL.min(2 * (shape.1.max(shape.2) / 2) + 1);
        Ok(Self {
            shape,
            channel: Some(ChannelAttentionWeights::random(shape.0, engine.reduction_ratio, &mut rng)?),
            spatial: Some(SpatialAttentionWeights::random(kernel, &mut rng)?),
            order: AttentionOrder::default(),
            parts: (engine.parts_h, engine.parts_w, engine.parts_c),
            normalize_blocks: true,
        })
    }
}

/// Coarse stream: global average of the map. Fine stream: global average of
/// the attended map followed by its height, width and channel parts.
pub fn map_embedding(v: &[f64], cfg: &MapEmbedConfig) -> Result<Vec<f64>> {
    let (c, h, w) = cfg.shape;
    if c * h * w != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding of length {} cannot be viewed as ({c}, {h}, {w})",
            v.len()
        )));
    }
    let x = FeatureMap::new(c, h, w, v.to_vec())?;
    let (coarse, _) = channel_pool(&x);
    let attended = attention_block(&x, cfg.channel.as_ref(), cfg.spatial.as_ref(), cfg.order)?;
    let (fine, _) = channel_pool(&attended);
    let (ph, pw, pc) = cfg.parts;
    let groups = [
        pool_parts(&divide(&attended, Axis::Height, ph)?),
        pool_parts(&divide(&attended, Axis::Width, pw)?),
        pool_parts(&divide(&attended, Axis::Channel, pc)?),
    ];
    Ok(assemble_embedding(&coarse, &fine, &groups, cfg.normalize_blocks))
}

pub fn map_embed_dataset(dataset: &Dataset, cfg: &MapEmbedConfig) -> Result<Dataset> {
    let rows = dataset
        .records()
        .iter()
        .map(|r| map_embedding(&r.embedding, cfg))
        .collect::<Result<Vec<_>>>()?;
    dataset.with_embeddings(&Matrix::from_rows(&rows)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepParam {
    Omega(Vec<f64>),
    Lambda(Vec<f64>),
    Parts(Vec<usize>),
    AttentionOrder(Vec<AttentionOrder>),
}

impl SweepParam {
    /// Parses a parameter name and a comma-separated value list.
    pub fn parse(name: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::InvalidConfig("empty sweep value list".into()));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad sweep value `{s}`")))
        };
        match name {
            "omega" => Ok(Self::Omega(items.into_iter().map(num).collect::<Result<_>>()?)),
            "lambda" => Ok(Self::Lambda(items.into_iter().map(num).collect::<Result<_>>()?)),
            "parts" => Ok(Self::Parts(
                items
                    .into_iter()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::InvalidConfig(format!("bad part count `{s}`")))
                    })
                    .collect::<Result<_>>()?,
            )),
            "attention-order" => Ok(Self::AttentionOrder(
                items.into_iter().map(str::parse).collect::<Result<_>>()?,
            )),
            other => Err(Error::InvalidConfig(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

/// Shared inputs for every sweep point.
#[derive(Debug, Clone)]
pub struct SweepContext<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a Split,
    pub graph: &'a CameraGraph,
    pub model: &'a StModel,
    pub engine: EngineConfig,
    pub protocol: Protocol,
    pub max_rank: usize,
    pub map_shape: (usize, usize, usize),
    pub fuse: FuseOptions,
    pub train_epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: EvalReport,
}

fn appearance_eval(ctx: &SweepContext, dataset: &Dataset) -> Result<EvalReport> {
    rank_and_evaluate(
        dataset,
        ctx.split,
        ctx.graph,
        None,
        &RankOptions::default(),
        ctx.protocol,
        ctx.max_rank,
    )
}

/// Omega points use the fused distance; every other sweep scores the
/// appearance distance of the re-embedded dataset.
pub fn sweep(param: &SweepParam, ctx: &SweepContext) -> Result<Vec<SweepRow>> {
    match param {
        SweepParam::Omega(values) => values
            .iter()
            .map(|&w| {
                let model = StModel { omega: w, ..*ctx.model };
                let report = rank_and_evaluate(
                    ctx.dataset,
                    ctx.split,
                    ctx.graph,
                    Some(&model),
                    &RankOptions {
                        fuse: ctx.fuse,
                        ..RankOptions::default()
                    },
                    ctx.protocol,
                    ctx.max_rank,
                )?;
                Ok(SweepRow {
                    value: w.to_string(),
                    report,
                })
            })
            .collect(),
        SweepParam::Lambda(values) => values
            .iter()
            .map(|&lambda| {
                let cfg = TrainConfig {
                    lambda,
                    epsilon: ctx.engine.epsilon,
                    margin: ctx.engine.margin,
                    learning_rate: ctx.learning_rate,
                    seed: ctx.engine.seed,
                    ..TrainConfig::default()
                };
                let out = train_toy(ctx.dataset, &cfg, ctx.train_epochs)?;
                let embedded = embed_dataset(ctx.dataset, &out.embedder)?;
                Ok(SweepRow {
                    value: lambda.to_string(),
                    report: appearance_eval(ctx, &embedded)?,
                })
            })
            .collect(),
        SweepParam::Parts(values) => {
            let base = MapEmbedConfig::seeded(ctx.map_shape, &ctx.engine)?;
            values
                .iter()
                .map(|&n| {
                    let cfg = MapEmbedConfig {
                        parts: (n, n, n),
                        ..base.clone()
                    };
                    Ok(SweepRow {
                        value: n.to_string(),
                        report: appearance_eval(ctx, &map_embed_dataset(ctx.dataset, &cfg)?)?,
                    })
                })
                .collect()
        }
        SweepParam::AttentionOrder(orders) => {
            let base = MapEmbedConfig::seeded(ctx.map_shape, &ctx.engine)?;
            orders
                .iter()
                .map(|&order| {
                    let cfg = MapEmbedConfig {
                        order,
                        ..base.clone()
                    };
                    Ok(SweepRow {
                        value: order.name().to_string(),
                        report: appearance_eval(ctx, &map_embed_dataset(ctx.dataset, &cfg)?)?,
                    })
                })
                .collect()
        }
    }
}

pub fn encode_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,map,top1,top5\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.value,
            r.report.map,
            r.report.top1(),
            r.report.top5()
        ));
    }
    s
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_text(path, &encode_sweep(rows))
}
