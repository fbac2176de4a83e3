//! Domain records and their on-disk formats.
//!
//! * `meta.csv`     `image_id,vehicle_id,camera_id,timestamp_s`
//! * `features.bin` `DFR1` | u32 n | u32 d | n·d little-endian f32, row-major
//! * `cameras.csv`  `camera_a,camera_b,distance_m`
//! * config files   `key = value` lines mirroring [`EngineConfig`]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::linalg::Matrix;
use crate::{Error, Result};

pub const META_HEADER: &str = "image_id,vehicle_id,camera_id,timestamp_s";
pub const CAMERA_HEADER: &str = "camera_a,camera_b,distance_m";
pub const FEATURE_MAGIC: [u8; 4] = *b"DFR1";

/// Image metadata without its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRecord {
    pub image_id: String,
    pub vehicle_id: String,
    pub camera_id: String,
    /// Seconds; opaque absolute time.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub meta: MetaRecord,
    pub embedding: Vec<f64>,
}

/// Non-empty, ordered collection of records sharing one embedding dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<FeatureRecord>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let dim = first.embedding.len();
        if dim == 0 {
            return Err(Error::ShapeMismatch("zero-dimensional embeddings".into()));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: r.embedding.len(),
                });
            }
            if let Some(col) = r.embedding.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { row: i, col });
            }
            validate_timestamp(r.meta.timestamp, i + 1)?;
            if index.insert(r.meta.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateImageId(r.meta.image_id.clone()));
            }
        }
        Ok(Self {
            records,
            dim,
            index,
        })
    }

    /// Joins metadata rows with the embedding matrix row by row.
    pub fn from_parts(meta: Vec<MetaRecord>, features: &Matrix) -> Result<Self> {
        if meta.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} metadata rows but {} feature rows",
                meta.len(),
                features.rows()
            )));
        }
        let records = meta
            .into_iter()
            .enumerate()
            .map(|(i, m)| FeatureRecord {
                meta: m,
                embedding: features.row(i).to_vec(),
            })
            .collect();
        Self::new(records)
    }

    pub fn load(features: &Path, meta: &Path) -> Result<Self> {
        let meta = parse_metadata(meta)?;
        let feats = parse_features(features)?;
        Self::from_parts(meta, &feats)
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &FeatureRecord {
        &self.records[i]
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn metas(&self) -> Vec<MetaRecord> {
        self.records.iter().map(|r| r.meta.clone()).collect()
    }

    pub fn embeddings(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for r in &self.records {
            data.extend_from_slice(&r.embedding);
        }
        Matrix::from_vec(self.len(), self.dim, data).expect("validated shape")
    }

    /// Returns a copy with every embedding replaced by the rows of `embeddings`.
    pub fn with_embeddings(&self, embeddings: &Matrix) -> Result<Self> {
        Self::from_parts(self.metas(), embeddings)
    }

    /// Sorted distinct vehicle ids mapped to dense class indices.
    pub fn class_labels(&self) -> (Vec<usize>, Vec<String>) {
        let ids: BTreeSet<&str> = self
            .records
            .iter()
            .map(|r| r.meta.vehicle_id.as_str())
            .collect();
        let names: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        let lookup: HashMap<&str, usize> = ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        let labels = self
            .records
            .iter()
            .map(|r| lookup[r.meta.vehicle_id.as_str()])
            .collect();
        (labels, names)
    }
}

fn validate_timestamp(t: f64, line: usize) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::BadTimestamp {
            line,
            value: t.to_string(),
        });
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Splits CSV text into (line number, trimmed fields) after checking the header.
fn csv_rows<'a>(
    text: &'a str,
    header: &str,
) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)> + 'a> {
    let mut lines = text.lines();
    let found = lines.next().unwrap_or("").trim();
    if found != header {
        return Err(Error::MalformedHeader {
            expected: header.to_string(),
            found: found.to_string(),
        });
    }
    Ok(lines
        .enumerate()
        .map(|(i, l)| (i + 2, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n, l.split(',').map(str::trim).collect())))
}

fn expect_fields(line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::BadRow {
            line,
            message: format!("expected {n} fields, found {}", fields.len()),
        });
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err(Error::BadRow {
            line,
            message: "empty field".into(),
        });
    }
    Ok(())
}

pub fn decode_metadata(text: &str) -> Result<Vec<MetaRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, fields) in csv_rows(text, META_HEADER)? {
        expect_fields(line, &fields, 4)?;
        let timestamp: f64 = fields[3].parse().map_err(|_| Error::BadTimestamp {
            line,
            value: fields[3].to_string(),
        })?;
        validate_timestamp(timestamp, line).map_err(|_| Error::BadTimestamp {
            line,
            value: fields[3].to_string(),
        })?;
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::DuplicateImageId(fields[0].to_string()));
        }
        out.push(MetaRecord {
            image_id: fields[0].to_string(),
            vehicle_id: fields[1].to_string(),
            camera_id: fields[2].to_string(),
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn parse_metadata(path: &Path) -> Result<Vec<MetaRecord>> {
    decode_metadata(&read_text(path)?)
}

pub fn encode_metadata(records: &[MetaRecord]) -> String {
    let mut s = String::from(META_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.image_id, r.vehicle_id, r.camera_id, r.timestamp
        ));
    }
    s
}

pub fn write_metadata(path: &Path, records: &[MetaRecord]) -> Result<()> {
    write_text(path, &encode_metadata(records))
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(Error::TruncatedPayload {
            expected: 12,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(12))
        .ok_or_else(|| Error::ShapeMismatch(format!("{n}x{d} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after {n}x{d} payload",
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for (k, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                row: k / d,
                col: k % d,
            });
        }
        data.push(v as f64);
    }
    Matrix::from_vec(n, d, data)
}

pub fn parse_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// Values are narrowed to f32; matrices read from a feature file encode back
/// to the identical bytes.
pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.as_slice().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

/// Symmetric road distances between cameras.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CameraGraph {
    cameras: BTreeSet<String>,
    // keyed with the lexicographically smaller id first
    distances: BTreeMap<(String, String), f64>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CameraGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_camera(&mut self, id: &str) {
        self.cameras.insert(id.to_string());
    }

    /// Inserts an undirected edge. Re-inserting the same pair with the same
    /// distance is allowed; a different value is a conflict.
    pub fn insert(&mut self, a: &str, b: &str, distance: f64) -> Result<()> {
        if a == b {
            if distance != 0.0 {
                return Err(Error::NonPositiveDistance {
                    a: a.into(),
                    b: b.into(),
                    distance,
                });
            }
            self.add_camera(a);
            return Ok(());
        }
        if !(distance.is_finite() && distance > 0.0) {
            return Err(Error::NonPositiveDistance {
                a: a.into(),
                b: b.into(),
                distance,
            });
        }
        let key = pair_key(a, b);
        if let Some(&old) = self.distances.get(&key) {
            if old != distance {
                return Err(Error::AsymmetricConflict(a.into(), b.into()));
            }
        }
        self.distances.insert(key, distance);
        self.add_camera(a);
        self.add_camera(b);
        Ok(())
    }

    pub fn cameras(&self) -> impl Iterator<Item = &str> {
        self.cameras.iter().map(String::as_str)
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn contains(&self, camera: &str) -> bool {
        self.cameras.contains(camera)
    }

    /// Zero for identical cameras, `None` when no edge is stored.
    pub fn distance(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.distances.get(&pair_key(a, b)).copied()
    }

    /// Stored undirected edges, smaller id first.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.distances
            .iter()
            .map(|((a, b), d)| (a.as_str(), b.as_str(), *d))
    }
}

pub fn decode_camera_graph(text: &str) -> Result<CameraGraph> {
    let mut g = CameraGraph::new();
    for (line, fields) in csv_rows(text, CAMERA_HEADER)? {
        expect_fields(line, &fields, 3)?;
        let distance: f64 = fields[2].parse().map_err(|_| Error::BadRow {
            line,
            message: format!("bad distance `{}`", fields[2]),
        })?;
        g.insert(fields[0], fields[1], distance)?;
    }
    Ok(g)
}

pub fn parse_camera_graph(path: &Path) -> Result<CameraGraph> {
    decode_camera_graph(&read_text(path)?)
}

pub fn encode_camera_graph(g: &CameraGraph) -> String {
    let mut s = String::from(CAMERA_HEADER);
    s.push('\n');
    for (a, b, d) in g.edges() {
        s.push_str(&format!("{a},{b},{d}\n"));
    }
    s
}

pub fn write_camera_graph(path: &Path, g: &CameraGraph) -> Result<()> {
    write_text(path, &encode_camera_graph(g))
}

/// Query list: one image id per line, blank lines and `#` comments ignored.
pub fn decode_queries(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

pub fn parse_queries(path: &Path) -> Result<Vec<String>> {
    Ok(decode_queries(&read_text(path)?))
}

pub fn write_queries(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = ids.join("\n");
    s.push('\n');
    write_text(path, &s)
}

/// Parses `key = value` lines; `#` starts a comment.
pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::BadRow {
            line: i + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::BadRow {
        line,
        message: format!("bad value `{value}` for `{key}`"),
    })
}

/// Engine hyperparameters. Defaults follow the published settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Weight of the triplet term in the total loss.
    pub lambda: f64,
    /// Label-smoothing factor.
    pub epsilon: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the spatio-temporal terms in the fused distance.
    pub omega: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Channel-attention MLP reduction ratio.
    pub reduction_ratio: usize,
    pub parts_h: usize,
    pub parts_w: usize,
    pub parts_c: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            epsilon: 0.1,
            margin: 1.2,
            omega: 0.2,
            alpha1: 6.0,
            alpha2: 0.5,
            beta1: 6.0,
            beta2: 0.5,
            reduction_ratio: 16,
            parts_h: 2,
            parts_w: 2,
            parts_c: 2,
            seed: 42,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be >= 0");
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad("omega must be >= 0");
        }
        if ![self.alpha1, self.alpha2, self.beta1, self.beta2]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("sigmoid parameters must be finite");
        }
        if self.reduction_ratio == 0 || self.parts_h == 0 || self.parts_w == 0 || self.parts_c == 0
        {
            return bad("reduction_ratio and part counts must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_text(path)?.parse()
    }
}

impl FromStr for EngineConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut c = EngineConfig::default();
        for (line, key, value) in parse_key_values(text)? {
            let v = value.as_str();
            match key.as_str() {
                "lambda" => c.lambda = parse_value(line, &key, v)?,
                "epsilon" => c.epsilon = parse_value(line, &key, v)?,
                "margin" => c.margin = parse_value(line, &key, v)?,
                "omega" => c.omega = parse_value(line, &key, v)?,
                "alpha1" => c.alpha1 = parse_value(line, &key, v)?,
                "alpha2" => c.alpha2 = parse_value(line, &key, v)?,
                "beta1" => c.beta1 = parse_value(line, &key, v)?,
                "beta2" => c.beta2 = parse_value(line, &key, v)?,
                "reduction_ratio" => c.reduction_ratio = parse_value(line, &key, v)?,
                "parts_h" => c.parts_h = parse_value(line, &key, v)?,
                "parts_w" => c.parts_w = parse_value(line, &key, v)?,
                "parts_c" => c.parts_c = parse_value(line, &key, v)?,
                "seed" => c.seed = parse_value(line, &key, v)?,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown key `{other}` on line {line}"
                    )))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for EngineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "epsilon = {}", self.epsilon)?;
        writeln!(f, "margin = {}", self.margin)?;
        writeln!(f, "omega = {}", self.omega)?;
        writeln!(f, "alpha1 = {}", self.alpha1)?;
        writeln!(f, "alpha2 = {}", self.alpha2)?;
        writeln!(f, "beta1 = {}", self.beta1)?;
        writeln!(f, "beta2 = {}", self.beta2)?;
        writeln!(f, "reduction_ratio = {}", self.reduction_ratio)?;
        writeln!(f, "parts_h = {}", self.parts_h)?;
        writeln!(f, "parts_w = {}", self.parts_w)?;
        writeln!(f, "parts_c = {}", self.parts_c)?;
        writeln!(f, "seed = {}", self.seed)
    }
}
