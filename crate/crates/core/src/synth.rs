//! Seeded synthetic camera networks.
//!
//! Each identity gets a centroid embedding; sightings scatter around it.
//! Consecutive sightings move to a different camera after a log-normal time
//! gap, and camera-pair distances are themselves log-normal draws, so the
//! transit statistics of the output follow the planted parameters.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::data::{
    write_camera_graph, write_features, write_metadata, write_queries, CameraGraph, Dataset,
    FeatureRecord, MetaRecord,
};
use crate::linalg::Matrix;
use crate::spatiotemporal::{LogNormalParams, StModel, TransitSamples};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub cameras: usize,
    pub sightings_per_identity: usize,
    pub embedding_dim: usize,
    /// Expected norm of the per-sighting offset from the identity centroid.
    pub cluster_spread: f64,
    pub true_dist_params: LogNormalParams,
    pub true_time_params: LogNormalParams,
    /// Fraction of records whose embedding is replaced by noise.
    pub noise_fraction: f64,
    /// Identities enter the network at a uniform time in `[0, time_window)`.
    pub time_window: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 50,
            cameras: 6,
            sightings_per_identity: 8,
            embedding_dim: 128,
            cluster_spread: 0.5,
            true_dist_params: LogNormalParams {
                mu: 0.0,
                sigma: 0.4,
            },
            true_time_params: LogNormalParams {
                mu: 0.0,
                sigma: 0.4,
            },
            noise_fraction: 0.0,
            time_window: 500.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_identities == 0
            || self.cameras == 0
            || self.sightings_per_identity == 0
            || self.embedding_dim == 0
        {
            return bad("identities, cameras, sightings and dimension must all be >= 1");
        }
        if self.sightings_per_identity > 1 && self.cameras < 2 {
            return bad("multiple sightings need at least two cameras");
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster spread must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad("noise fraction must lie in [0, 1]");
        }
        if !(self.time_window >= 0.0 && self.time_window.is_finite()) {
            return bad("time window must be finite and >= 0");
        }
        LogNormalParams::new(self.true_dist_params.mu, self.true_dist_params.sigma)?;
        LogNormalParams::new(self.true_time_params.mu, self.true_time_params.sigma)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub graph: CameraGraph,
    /// Planted log-normal parameters with default sigmoid settings.
    pub truth: StModel,
    /// One query image per identity.
    pub queries: Vec<String>,
    /// Ledger of every planted transition, in generation order.
    pub transitions: TransitSamples,
}

pub fn camera_name(i: usize) -> String {
    format!("c{:02}", i + 1)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Cameras on a ring road with log-normal segment lengths. The graph holds
/// shortest-path distances between every pair; vehicles move between ring
/// neighbours only.
fn ring_network(
    cameras: usize,
    segment: &LogNormal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(CameraGraph, Vec<Vec<usize>>)> {
    let mut dist = vec![vec![f64::INFINITY; cameras]; cameras];
    let mut neighbours = vec![Vec::new(); cameras];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    let segments = match cameras {
        0 | 1 => 0,
        2 => 1,
        m => m,
    };
    for a in 0..segments {
        let b = (a + 1) % cameras;
        let len = segment.sample(rng);
        dist[a][b] = len;
        dist[b][a] = len;
        neighbours[a].push(b);
        neighbours[b].push(a);
    }
    for k in 0..cameras {
        for i in 0..cameras {
            for j in 0..cameras {
                let via = dist[i][k] + dist[k][j];
                if via < dist[i][j] {
                    dist[i][j] = via;
                }
            }
        }
    }
    let mut graph = CameraGraph::new();
    for a in 0..cameras {
        graph.add_camera(&camera_name(a));
        for b in a + 1..cameras {
            graph.insert(&camera_name(a), &camera_name(b), dist[a][b])?;
        }
    }
    Ok((graph, neighbours))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dist_ln = LogNormal::new(cfg.true_dist_params.mu, cfg.true_dist_params.sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let time_ln = LogNormal::new(cfg.true_time_params.mu, cfg.true_time_params.sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let d = cfg.embedding_dim;
    let centroid_n = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
    let spread_n = Normal::new(0.0, cfg.cluster_spread / (d as f64).sqrt()).unwrap();

    let (graph, neighbours) = ring_network(cfg.cameras, &dist_ln, &mut rng)?;

    let mut records = Vec::with_capacity(cfg.n_identities * cfg.sightings_per_identity);
    let mut queries = Vec::with_capacity(cfg.n_identities);
    let mut transitions = TransitSamples::default();
    for v in 0..cfg.n_identities {
        let vehicle = format!("v{v:04}");
        let centroid: Vec<f64> = (0..d).map(|_| centroid_n.sample(&mut rng)).collect();
        let mut t = if cfg.time_window > 0.0 {
            rng.random_range(0.0..cfg.time_window)
        } else {
            0.0
        };
        let mut cam = rng.random_range(0..cfg.cameras);
        for s in 0..cfg.sightings_per_identity {
            if s > 0 {
                let next = *neighbours[cam].choose(&mut rng).expect("at least two cameras");
                let tau = time_ln.sample(&mut rng);
                transitions.delta.push(
                    graph
                        .distance(&camera_name(cam), &camera_name(next))
                        .expect("connected network"),
                );
                transitions.tau.push(tau);
                t += tau;
                cam = next;
            }
            let embedding = centroid
                .iter()
                .map(|c| round_f32(c + spread_n.sample(&mut rng)))
                .collect();
            let image_id = format!("{vehicle}_{s:03}");
            if s == cfg.sightings_per_identity / 2 {
                queries.push(image_id.clone());
            }
            records.push(FeatureRecord {
                meta: MetaRecord {
                    image_id,
                    vehicle_id: vehicle.clone(),
                    camera_id: camera_name(cam),
                    timestamp: t,
                },
                embedding,
            });
        }
    }
    let mut dataset = Dataset::new(records)?;
    if cfg.noise_fraction > 0.0 {
        dataset = corrupt(&dataset, cfg.noise_fraction, cfg.seed ^ 0x5eed_c0de)?;
    }
    Ok(SynthOutput {
        dataset,
        graph,
        truth: StModel::with_defaults(cfg.true_dist_params, cfg.true_time_params),
        queries,
        transitions,
    })
}

/// Replaces `round(fraction * n)` embeddings with isotropic Gaussian noise
/// whose per-entry scale is the root mean square entry of the input. For one
/// seed, a larger fraction corrupts a superset of records, each with the same
/// replacement vector.
pub fn corrupt(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} outside [0, 1]")));
    }
    let n = dataset.len();
    let count = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut emb = dataset.embeddings();
    let entries = emb.as_slice();
    let rms = (entries.iter().map(|v| v * v).sum::<f64>() / entries.len().max(1) as f64).sqrt();
    let noise = Normal::new(0.0, rms).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for &i in &order[..count] {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(i as u64 + 1);
        for v in emb.row_mut(i) {
            *v = round_f32(noise.sample(&mut r));
        }
    }
    dataset.with_embeddings(&emb)
}

impl SynthOutput {
    /// Writes `features.bin`, `meta.csv`, `cameras.csv`, `truth.txt` and
    /// `queries.txt` into `dir`, creating it if needed.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let feats: Matrix = self.dataset.embeddings();
        write_features(&dir.join("features.bin"), &feats)?;
        write_metadata(&dir.join("meta.csv"), &self.dataset.metas())?;
        write_camera_graph(&dir.join("cameras.csv"), &self.graph)?;
        self.truth.save(&dir.join("truth.txt"))?;
        write_queries(&dir.join("queries.txt"), &self.queries)
    }
}
