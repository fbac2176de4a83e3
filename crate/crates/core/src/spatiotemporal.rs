//! Log-normal models of camera distance and transit time, and the sigmoid
//! affinities derived from them.
//!
//! `D = 1 / (1 + exp(shape * (pdf(x) - offset)))` is small when `x` is a
//! plausible transition and approaches 1 for implausible ones, so it acts as
//! a distance-like penalty when added to the appearance distance.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{parse_key_values, parse_value, write_text, CameraGraph, MetaRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::DegenerateSample(format!(
                "log-normal needs finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(Self { mu, sigma })
    }
}

pub fn log_normal_pdf(x: f64, p: &LogNormalParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveInput(x));
    }
    Ok(density(x, p))
}

/// Density with the support limit folded in: zero for `x <= 0`.
pub fn density(x: f64, p: &LogNormalParams) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    let z = x.ln() - p.mu;
    (-(z * z) / (2.0 * p.sigma * p.sigma)).exp() / (x * (2.0 * PI * p.sigma * p.sigma).sqrt())
}

/// Log of the product of densities over `samples`.
pub fn log_likelihood(samples: &[f64], p: &LogNormalParams) -> f64 {
    let s2 = p.sigma * p.sigma;
    let c = 0.5 * (2.0 * PI * s2).ln();
    samples
        .iter()
        .map(|&x| {
            let l = x.ln();
            -l - c - (l - p.mu) * (l - p.mu) / (2.0 * s2)
        })
        .sum()
}

/// Closed-form maximum-likelihood fit: mean and (biased) standard deviation
/// of the log-samples.
pub fn fit_log_normal(samples: &[f64]) -> Result<LogNormalParams> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(&bad) = samples.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::NonPositiveSample(bad));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Err(Error::DegenerateSample("all samples equal".into()));
    }
    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateSample("zero log-variance".into()));
    }
    LogNormalParams::new(mu, var.sqrt())
}

/// Which same-identity record pairs contribute transit samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairingRule {
    /// Time-adjacent sightings of one identity on different cameras.
    #[default]
    Consecutive,
    /// Every unordered pair of sightings on different cameras.
    AllPairs,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitSamples {
    pub delta: Vec<f64>,
    pub tau: Vec<f64>,
}

impl TransitSamples {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

/// Camera distance and absolute time gap for same-identity cross-camera
/// pairs. Zero gaps are dropped (outside the log-normal support).
pub fn collect_st_samples(
    records: &[MetaRecord],
    graph: &CameraGraph,
    rule: PairingRule,
) -> Result<TransitSamples> {
    let mut by_id: BTreeMap<&str, Vec<&MetaRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.vehicle_id.as_str()).or_default().push(r);
    }
    let mut out = TransitSamples::default();
    let mut push = |a: &MetaRecord, b: &MetaRecord| -> Result<()> {
        if a.camera_id == b.camera_id {
            return Ok(());
        }
        let delta = graph
            .distance(&a.camera_id, &b.camera_id)
            .ok_or_else(|| Error::MissingCameraDistance(a.camera_id.clone(), b.camera_id.clone()))?;
        let tau = (a.timestamp - b.timestamp).abs();
        if delta > 0.0 && tau > 0.0 {
            out.delta.push(delta);
            out.tau.push(tau);
        }
        Ok(())
    };
    for members in by_id.values_mut() {
        // content-based order so record order in the file is irrelevant
        members.sort_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then_with(|| a.camera_id.cmp(&b.camera_id))
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        match rule {
            PairingRule::Consecutive => {
                for w in members.windows(2) {
                    push(w[0], w[1])?;
                }
            }
            PairingRule::AllPairs => {
                for i in 0..members.len() {
                    for j in i + 1..members.len() {
                        push(members[i], members[j])?;
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    Ok(out)
}

/// `1 / (1 + exp(shape * (density - offset)))`, kept strictly inside (0, 1).
pub fn affinity_from_density(density: f64, shape: f64, offset: f64) -> f64 {
    let d = 1.0 / (1.0 + (shape * (density - offset)).exp());
    d.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StModel {
    pub dist: LogNormalParams,
    pub time: LogNormalParams,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub omega: f64,
}

impl StModel {
    pub const DEFAULT_ALPHA1: f64 = 6.0;
    pub const DEFAULT_ALPHA2: f64 = 0.5;
    pub const DEFAULT_BETA1: f64 = 6.0;
    pub const DEFAULT_BETA2: f64 = 0.5;
    pub const DEFAULT_OMEGA: f64 = 0.2;

    pub fn new(
        dist: LogNormalParams,
        time: LogNormalParams,
        alpha: (f64, f64),
        beta: (f64, f64),
        omega: f64,
    ) -> Result<Self> {
        let m = Self {
            dist,
            time,
            alpha1: alpha.0,
            alpha2: alpha.1,
            beta1: beta.0,
            beta2: beta.1,
            omega,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_defaults(dist: LogNormalParams, time: LogNormalParams) -> Self {
        Self {
            dist,
            time,
            alpha1: Self::DEFAULT_ALPHA1,
            alpha2: Self::DEFAULT_ALPHA2,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            omega: Self::DEFAULT_OMEGA,
        }
    }

    /// Fits both distributions from transit samples.
    pub fn fit(samples: &TransitSamples) -> Result<Self> {
        Ok(Self::with_defaults(
            fit_log_normal(&samples.delta)?,
            fit_log_normal(&samples.tau)?,
        ))
    }

    fn validate(&self) -> Result<()> {
        LogNormalParams::new(self.dist.mu, self.dist.sigma)?;
        LogNormalParams::new(self.time.mu, self.time.sigma)?;
        if !(self.alpha1 > 0.0 && self.beta1 > 0.0) {
            return Err(Error::InvalidConfig("alpha1 and beta1 must be positive".into()));
        }
        if ![self.alpha1, self.alpha2, self.beta1, self.beta2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("sigmoid parameters must be finite".into()));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidConfig("omega must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_string())
    }
}

pub fn spatial_affinity(delta: f64, m: &StModel) -> Result<f64> {
    let p = log_normal_pdf(delta, &m.dist)?;
    Ok(affinity_from_density(p, m.alpha1, m.alpha2))
}

pub fn temporal_affinity(tau: f64, m: &StModel) -> Result<f64> {
    let p = log_normal_pdf(tau, &m.time)?;
    Ok(affinity_from_density(p, m.beta1, m.beta2))
}

const ST_KEYS: [&str; 9] = [
    "mu_delta",
    "sigma_delta",
    "mu_tau",
    "sigma_tau",
    "alpha1",
    "alpha2",
    "beta1",
    "beta2",
    "omega",
];

impl fmt::Display for StModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values = [
            self.dist.mu,
            self.dist.sigma,
            self.time.mu,
            self.time.sigma,
            self.alpha1,
            self.alpha2,
            self.beta1,
            self.beta2,
            self.omega,
        ];
        for (k, v) in ST_KEYS.iter().zip(values) {
            // 17 significant digits
            writeln!(f, "{k} = {v:.16e}")?;
        }
        Ok(())
    }
}

impl FromStr for StModel {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values: [Option<f64>; 9] = [None; 9];
        for (line, key, value) in parse_key_values(text)? {
            let slot = ST_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown key `{key}` on line {line}")))?;
            values[slot] = Some(parse_value(line, &key, &value)?);
        }
        let get = |i: usize| {
            values[i].ok_or_else(|| Error::InvalidConfig(format!("missing `{}`", ST_KEYS[i])))
        };
        let m = StModel {
            dist: LogNormalParams {
                mu: get(0)?,
                sigma: get(1)?,
            },
            time: LogNormalParams {
                mu: get(2)?,
                sigma: get(3)?,
            },
            alpha1: get(4)?,
            alpha2: get(5)?,
            beta1: get(6)?,
            beta2: get(7)?,
            omega: get(8)?,
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn std_params() -> LogNormalParams {
        LogNormalParams::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn pdf_reference_points() {
        let p = std_params();
        assert!((log_normal_pdf(1.0, &p).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        // exp(-1/2) / (e * sqrt(2 pi))
        assert!((log_normal_pdf(E, &p).unwrap() - 0.089_016_054_915_951_49).abs() < 1e-15);
        assert!(log_normal_pdf(1e-12, &p).unwrap() < 1e-50);
        assert!(matches!(log_normal_pdf(0.0, &p), Err(Error::NonPositiveInput(_))));
        assert!(matches!(log_normal_pdf(-2.0, &p), Err(Error::NonPositiveInput(_))));
    }

    #[test]
    fn fit_examples() {
        let p = fit_log_normal(&[1.0, E * E]).unwrap();
        assert!((p.mu - 1.0).abs() < 1e-15);
        assert!((p.sigma - 1.0).abs() < 1e-15);
        assert!(matches!(fit_log_normal(&[5.0, 5.0, 5.0]), Err(Error::DegenerateSample(_))));
        assert!(matches!(fit_log_normal(&[5.0]), Err(Error::DegenerateSample(_))));
        assert!(matches!(fit_log_normal(&[1.0, 0.0]), Err(Error::NonPositiveSample(_))));
    }

    #[test]
    fn params_reject_nonpositive_sigma() {
        assert!(LogNormalParams::new(0.0, 0.0).is_err());
        assert!(LogNormalParams::new(f64::NAN, 1.0).is_err());
    }

    fn meta(id: &str, v: &str, c: &str, t: f64) -> MetaRecord {
        MetaRecord {
            image_id: id.into(),
            vehicle_id: v.into(),
            camera_id: c.into(),
            timestamp: t,
        }
    }

    fn graph() -> CameraGraph {
        let mut g = CameraGraph::new();
        g.insert("c1", "c2", 500.0).unwrap();
        g.insert("c2", "c3", 200.0).unwrap();
        g.insert("c1", "c3", 650.0).unwrap();
        g
    }

    #[test]
    fn two_sightings_one_sample() {
        let recs = [meta("a", "v1", "c1", 0.0), meta("b", "v1", "c2", 300.0)];
        let s = collect_st_samples(&recs, &graph(), PairingRule::Consecutive).unwrap();
        assert_eq!(s.delta, vec![500.0]);
        assert_eq!(s.tau, vec![300.0]);
    }

    #[test]
    fn single_camera_has_no_pairs() {
        let recs = [meta("a", "v1", "c1", 0.0), meta("b", "v1", "c1", 30.0)];
        assert!(matches!(
            collect_st_samples(&recs, &graph(), PairingRule::AllPairs),
            Err(Error::NoPositivePairs)
        ));
    }

    #[test]
    fn pairing_rules() {
        let recs = [
            meta("a", "v1", "c1", 0.0),
            meta("b", "v1", "c2", 10.0),
            meta("c", "v1", "c3", 25.0),
            meta("d", "v2", "c1", 5.0),
            meta("e", "v2", "c1", 9.0),
        ];
        let cons = collect_st_samples(&recs, &graph(), PairingRule::Consecutive).unwrap();
        assert_eq!(cons.delta, vec![500.0, 200.0]);
        assert_eq!(cons.tau, vec![10.0, 15.0]);
        let all = collect_st_samples(&recs, &graph(), PairingRule::AllPairs).unwrap();
        assert_eq!(all.len(), 3);
        let mut rev = recs.to_vec();
        rev.reverse();
        assert_eq!(collect_st_samples(&rev, &graph(), PairingRule::Consecutive).unwrap(), cons);
    }

    #[test]
    fn missing_edge_and_zero_gap() {
        let mut g = CameraGraph::new();
        g.insert("c1", "c2", 5.0).unwrap();
        let recs = [meta("a", "v1", "c1", 0.0), meta("b", "v1", "c9", 3.0)];
        assert!(matches!(
            collect_st_samples(&recs, &g, PairingRule::Consecutive),
            Err(Error::MissingCameraDistance(..))
        ));
        let same_time = [meta("a", "v1", "c1", 3.0), meta("b", "v1", "c2", 3.0)];
        assert!(matches!(
            collect_st_samples(&same_time, &g, PairingRule::Consecutive),
            Err(Error::NoPositivePairs)
        ));
    }

    fn model() -> StModel {
        StModel::with_defaults(std_params(), std_params())
    }

    #[test]
    fn affinity_anchor_values() {
        let m = model();
        let d = spatial_affinity(1.0, &m).unwrap();
        let expect = 1.0 / (1.0 + (6.0 * (0.398_942_280_401_432_7 - 0.5f64)).exp());
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.647_106_897_907_358).abs() < 1e-14);
        assert_eq!(affinity_from_density(0.5, 6.0, 0.5), 0.5);
        assert!(affinity_from_density(1e6, 6.0, 0.5) > 0.0);
        assert!(affinity_from_density(1e6, 6.0, 0.5) < 1e-300);
        assert!(temporal_affinity(-1.0, &m).is_err());
        assert_eq!(
            temporal_affinity(1.0, &m).unwrap(),
            spatial_affinity(1.0, &m).unwrap()
        );
    }

    #[test]
    fn model_document_roundtrip() {
        let m = StModel::new(
            LogNormalParams::new(0.1 + 0.2, 1.0 / 3.0).unwrap(),
            LogNormalParams::new(-2.5e-7, 123.456_789_012_345_67).unwrap(),
            (6.0, 0.5),
            (6.0, 0.5),
            0.2,
        )
        .unwrap();
        let text = m.to_string();
        assert!(text.starts_with("mu_delta = "));
        let back: StModel = text.parse().unwrap();
        assert_eq!(back, m);
        assert!("mu_delta = 1".parse::<StModel>().is_err());
        assert!(StModel::new(std_params(), std_params(), (-1.0, 0.5), (6.0, 0.5), 0.2).is_err());
    }
}
