use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reid_core::data::{
    parse_camera_graph, parse_metadata, parse_queries, write_features, Dataset, EngineConfig,
};
use reid_core::losses::{embed_dataset, train_toy, write_trace, TrainConfig};
use reid_core::metrics::{evaluate_lists, Protocol};
use reid_core::pipeline::{ranking, sweep, write_sweep, RankOptions, Split, SweepContext, SweepParam};
use reid_core::retrieval::{parse_ranking, write_ranking, FuseOptions, RerankParams};
use reid_core::spatiotemporal::{collect_st_samples, PairingRule, StModel};
use reid_core::synth::{generate, SynthConfig};
use reid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "reid", version, about = "Vehicle re-identification retrieval engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Fit the spatio-temporal model from labelled metadata.
    FitSt(FitStArgs),
    /// Rank the gallery for each query.
    Rank(RankArgs),
    /// Score a ranking file.
    Eval(EvalArgs),
    /// Train the toy linear embedder and write its loss trace.
    TrainToy(TrainArgs),
    /// Run an ablation sweep over a synthetic directory.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    identities: usize,
    #[arg(long, default_value_t = 6)]
    cameras: usize,
    #[arg(long, default_value_t = 8)]
    per_id: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    /// Fraction of records with corrupted embeddings.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct FitStArgs {
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pair every two sightings of an identity instead of consecutive ones.
    #[arg(long)]
    all_pairs: bool,
    /// Engine config file; supplies the sigmoid parameters and omega.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Spatio-temporal model; appearance-only ranking when absent.
    #[arg(long, requires = "cameras")]
    st: Option<PathBuf>,
    /// Overrides the model's omega.
    #[arg(long)]
    omega: Option<f64>,
    /// Min-max normalize appearance rows before fusing.
    #[arg(long)]
    normalize: bool,
    /// zero-density or appearance-only.
    #[arg(long, default_value = "zero-density")]
    same_camera: String,
    #[arg(long)]
    rerank: bool,
    #[arg(long, default_value_t = 20)]
    k1: usize,
    #[arg(long, default_value_t = 6)]
    k2: usize,
    #[arg(long, default_value_t = 0.3)]
    lambda_rr: f64,
    /// Re-rank appearance distances before fusing.
    #[arg(long)]
    rerank_first: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ranks: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long, default_value = "cross-camera")]
    protocol: String,
    #[arg(long, default_value_t = 50)]
    max_rank: usize,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding features.bin and meta.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.4)]
    lambda: f64,
    #[arg(long, default_value_t = 1.2)]
    margin: f64,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    no_bnneck: bool,
    #[arg(long)]
    trace: PathBuf,
    /// Write the trained embeddings as a features file.
    #[arg(long)]
    embed_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// omega, lambda, parts or attention-order.
    #[arg(long)]
    param: String,
    /// Comma-separated values; defaults depend on the parameter.
    #[arg(long)]
    values: Option<String>,
    /// Synthetic dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Feature-map view `C,H,W` of the embeddings.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value = "cross-camera")]
    protocol: String,
    #[arg(long, default_value_t = 50)]
    max_rank: usize,
    /// Same-camera policy for fused distances.
    #[arg(long, default_value = "zero-density")]
    same_camera: String,
    #[arg(long)]
    out: PathBuf,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_identities: a.identities,
        cameras: a.cameras,
        sightings_per_identity: a.per_id,
        embedding_dim: a.dim,
        cluster_spread: a.spread,
        noise_fraction: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let out = generate(&cfg)?;
    out.write_to_dir(&a.out)?;
    println!("wrote {} records to {}", out.dataset.len(), a.out.display());
    Ok(())
}

fn run_fit_st(a: FitStArgs) -> Result<()> {
    let meta = parse_metadata(&a.meta)?;
    let graph = parse_camera_graph(&a.cameras)?;
    let rule = if a.all_pairs {
        PairingRule::AllPairs
    } else {
        PairingRule::Consecutive
    };
    let samples = collect_st_samples(&meta, &graph, rule)?;
    let mut model = StModel::fit(&samples)?;
    if let Some(path) = a.config {
        let cfg = EngineConfig::load(&path)?;
        model = StModel::new(
            model.dist,
            model.time,
            (cfg.alpha1, cfg.alpha2),
            (cfg.beta1, cfg.beta2),
            cfg.omega,
        )?;
    }
    model.save(&a.out)?;
    println!("fitted on {} pairs", samples.len());
    Ok(())
}

fn run_rank(a: RankArgs) -> Result<()> {
    let dataset = Dataset::load(&a.features, &a.meta)?;
    let split = Split::from_query_ids(&dataset, &parse_queries(&a.queries)?)?;
    if split.queries.is_empty() {
        return Err(invalid("query list is empty"));
    }
    let graph = match &a.cameras {
        Some(p) => parse_camera_graph(p)?,
        None => Default::default(),
    };
    let model = match &a.st {
        Some(p) => {
            let mut m = StModel::load(p)?;
            if let Some(w) = a.omega {
                m = StModel::new(m.dist, m.time, (m.alpha1, m.alpha2), (m.beta1, m.beta2), w)?;
            }
            Some(m)
        }
        None => None,
    };
    let rerank = if a.rerank {
        let p = RerankParams {
            k1: a.k1,
            k2: a.k2,
            lambda: a.lambda_rr,
        };
        p.validate()?;
        Some(p)
    } else {
        None
    };
    let opts = RankOptions {
        fuse: FuseOptions {
            normalize_rows: a.normalize,
            same_camera: a.same_camera.parse()?,
        },
        rerank,
        rerank_before_fuse: a.rerank_first,
    };
    let r = ranking(&dataset, &split, &graph, model.as_ref(), &opts)?;
    write_ranking(&a.out, &r)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let lists = parse_ranking(&a.ranks)?;
    let meta = parse_metadata(&a.meta)?;
    let report = evaluate_lists(&lists, &meta, protocol, a.max_rank)?;
    match a.out {
        Some(p) => report.save(&p),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&a.data.join("features.bin"), &a.data.join("meta.csv"))?;
    let cfg = TrainConfig {
        lambda: a.lambda,
        epsilon: a.eps,
        margin: a.margin,
        learning_rate: a.lr,
        bnneck: !a.no_bnneck,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let out = train_toy(&dataset, &cfg, a.epochs)?;
    write_trace(&a.trace, &out.trace)?;
    if let Some(path) = a.embed_out {
        write_features(&path, &embed_dataset(&dataset, &out.embedder)?.embeddings())?;
    }
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        println!("loss {:.6} -> {:.6}", first.total, last.total);
    }
    Ok(())
}

fn default_shape(dim: usize) -> Result<(usize, usize, usize)> {
    if dim % 16 == 0 {
        Ok((dim / 16, 4, 4))
    } else {
        Err(invalid(format!(
            "embedding dimension {dim} is not a multiple of 16; pass --shape"
        )))
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| invalid(format!("bad shape `{s}`"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid(format!("shape `{s}` needs three entries"))),
    }
}

fn load_dir(dir: &Path) -> Result<(Dataset, reid_core::data::CameraGraph, Vec<String>)> {
    let dataset = Dataset::load(&dir.join("features.bin"), &dir.join("meta.csv"))?;
    let graph = parse_camera_graph(&dir.join("cameras.csv"))?;
    let queries = parse_queries(&dir.join("queries.txt"))?;
    Ok((dataset, graph, queries))
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let default_values = match a.param.as_str() {
        "omega" => "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1",
        "lambda" => "0,0.2,0.4,0.6,0.8,1",
        "parts" => "1,2,4",
        "attention-order" => "channel-spatial,spatial-channel,parallel",
        other => return Err(invalid(format!("unknown sweep parameter `{other}`"))),
    };
    let param = SweepParam::parse(&a.param, a.values.as_deref().unwrap_or(default_values))?;
    let protocol: Protocol = a.protocol.parse()?;
    let (dataset, graph, queries) = load_dir(&a.data)?;
    let split = Split::from_query_ids(&dataset, &queries)?;
    let samples = collect_st_samples(&dataset.metas(), &graph, PairingRule::Consecutive)?;
    let model = StModel::fit(&samples)?;
    let map_shape = match &a.shape {
        Some(s) => parse_shape(s)?,
        None => default_shape(dataset.dim())?,
    };
    let engine = EngineConfig {
        seed: a.seed,
        ..EngineConfig::default()
    };
    let ctx = SweepContext {
        dataset: &dataset,
        split: &split,
        graph: &graph,
        model: &model,
        engine,
        protocol,
        max_rank: a.max_rank,
        map_shape,
        fuse: FuseOptions {
            same_camera: a.same_camera.parse()?,
            ..FuseOptions::default()
        },
        train_epochs: a.epochs,
        learning_rate: a.lr,
    };
    let rows = sweep(&param, &ctx)?;
    write_sweep(&a.out, &rows)?;
    for r in &rows {
        println!("{}: map {:.4}", r.value, r.report.map);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::FitSt(a) => run_fit_st(a),
        Command::Rank(a) => run_rank(a),
        Command::Eval(a) => run_eval(a),
        Command::TrainToy(a) => run_train(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
