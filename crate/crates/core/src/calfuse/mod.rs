//! Score calibration and fusion by prior-weighted logistic regression.
//!
//! Both stages minimize
//! `π/N_t Σ_tar softplus(−(l_i + logit π)) + (1−π)/N_n Σ_non softplus(l_i + logit π) + ridge`,
//! where `l_i` is an affine function of the raw score(s) and optional quality
//! measures. Calibrated outputs are log-likelihood ratios.

mod solver;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use solver::{logit, Problem, Solution, GRAD_TOL, MAX_ITERS};

use crate::embedspace::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::metrics::{Trial, TrialKey, TrialRecord, TrialScores};

/// Default ridge weight, anchored at the identity map.
pub const DEFAULT_L2: f64 = 1e-3;

/// Selects which `:`-separated fields of a trial's partition label form the
/// calibration partition, e.g. fields `[0]` of `"cts:male"` gives `"cts"`.
/// An empty field list uses the whole label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSelector {
    pub fields: Vec<usize>,
}

impl PartitionSelector {
    pub fn whole() -> Self {
        Self::default()
    }

    pub fn fields(fields: Vec<usize>) -> Self {
        Self { fields }
    }

    pub fn key(&self, partition: Option<&str>) -> Option<String> {
        let p = partition?;
        if self.fields.is_empty() {
            return Some(p.to_string());
        }
        let parts: Vec<&str> = p.split(':').collect();
        let picked: Vec<&str> = self.fields.iter().filter_map(|&i| parts.get(i).copied()).collect();
        if picked.is_empty() {
            None
        } else {
            Some(picked.join(":"))
        }
    }
}

/// Scale, offset and QM weights of one calibration map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCal {
    pub scale: f64,
    pub offset: f64,
    #[serde(default)]
    pub qm_weights: Vec<f64>,
}

impl AffineCal {
    pub fn identity(qm_dim: usize) -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
            qm_weights: vec![0.0; qm_dim],
        }
    }

    pub fn apply(&self, score: f64, qm: Option<&[f64]>) -> Result<f64> {
        let mut l = self.scale * score + self.offset;
        if !self.qm_weights.is_empty() {
            let q = qm.ok_or_else(|| Error::MissingData("calibration uses quality measures but the trial has none".into()))?;
            if q.len() != self.qm_weights.len() {
                return Err(Error::Shape(format!(
                    "trial has {} quality measures, model expects {}",
                    q.len(),
                    self.qm_weights.len()
                )));
            }
            l += self.qm_weights.iter().zip(q).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(l)
    }

    fn from_theta(theta: &[f64]) -> Self {
        Self {
            scale: theta[0],
            offset: theta[1],
            qm_weights: theta[2..].to_vec(),
        }
    }
}

/// Optimizer diagnostics for one fitted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_target: usize,
    pub n_nontarget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub effective_prior: f64,
    pub l2: f64,
    pub global: AffineCal,
    pub global_fit: FitInfo,
    #[serde(default)]
    pub partitions: BTreeMap<String, AffineCal>,
    #[serde(default)]
    pub partition_fits: BTreeMap<String, FitInfo>,
    /// Partitions seen in training that fell back to the global map.
    #[serde(default)]
    pub fallback_partitions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_by: Option<PartitionSelector>,
    pub qm_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub prior: f64,
    pub l2: f64,
    pub use_qm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_by: Option<PartitionSelector>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            prior: crate::metrics::CostParams::default().target_priors[0],
            l2: DEFAULT_L2,
            use_qm: false,
            partition_by: None,
        }
    }
}

fn keyed(scores: &TrialScores) -> Vec<&TrialRecord> {
    scores.records.iter().filter(|r| r.key != TrialKey::Unknown).collect()
}

fn features_for(records: &[&TrialRecord], use_qm: bool, qm_dim: usize) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            let mut x = vec![r.score, 1.0];
            if use_qm {
                let q = r.qm.as_ref().ok_or_else(|| {
                    Error::MissingData(format!("trial {} {} has no quality measures", r.enroll_id, r.test_id))
                })?;
                if q.len() != qm_dim {
                    return Err(Error::Shape(format!(
                        "trial {} {} has {} quality measures, expected {qm_dim}",
                        r.enroll_id,
                        r.test_id,
                        q.len()
                    )));
                }
                x.extend_from_slice(q);
            }
            Ok(x)
        })
        .collect()
}

fn fit_affine(records: &[&TrialRecord], cfg: &CalibrationConfig, qm_dim: usize, init: Option<&[f64]>) -> Result<(AffineCal, FitInfo)> {
    let features = features_for(records, cfg.use_qm, qm_dim)?;
    let is_target: Vec<bool> = records.iter().map(|r| r.key == TrialKey::Target).collect();
    let p = 2 + if cfg.use_qm { qm_dim } else { 0 };
    let mut anchor = vec![0.0; p];
    anchor[0] = 1.0;
    let problem = Problem {
        features: &features,
        is_target: &is_target,
        prior: cfg.prior,
        ridge: vec![cfg.l2; p],
        anchor: anchor.clone(),
    };
    let sol = problem.solve(init.unwrap_or(&anchor))?;
    if !sol.converged {
        log::warn!(
            "calibration stopped after {} iterations with gradient norm {:.3e}",
            sol.iterations,
            sol.grad_norm
        );
    }
    let cal = AffineCal::from_theta(&sol.theta);
    if !(cal.scale > 0.0) {
        log::warn!("calibration scale {} is not positive", cal.scale);
    }
    let nt = is_target.iter().filter(|t| **t).count();
    Ok((
        cal,
        FitInfo {
            objective: sol.objective,
            grad_norm: sol.grad_norm,
            iterations: sol.iterations,
            converged: sol.converged,
            n_target: nt,
            n_nontarget: is_target.len() - nt,
        },
    ))
}

/// Global map always; one map per selected partition when `partition_by` is set.
/// Partitions missing a class fall back to the global map.
pub fn train_calibration(scores: &TrialScores, cfg: &CalibrationConfig) -> Result<CalibrationModel> {
    if !(cfg.l2 >= 0.0) {
        return Err(Error::InvalidArgument("l2 must be nonnegative".into()));
    }
    let records = keyed(scores);
    let qm_dim = if cfg.use_qm {
        records
            .first()
            .and_then(|r| r.qm.as_ref())
            .map(|q| q.len())
            .ok_or_else(|| Error::MissingData("quality measures requested but trials carry none".into()))?
    } else {
        0
    };
    let (global, global_fit) = fit_affine(&records, cfg, qm_dim, None)?;
    let mut partitions = BTreeMap::new();
    let mut partition_fits = BTreeMap::new();
    let mut fallback = Vec::new();
    if let Some(sel) = &cfg.partition_by {
        let mut groups: BTreeMap<String, Vec<&TrialRecord>> = BTreeMap::new();
        for r in &records {
            if let Some(k) = sel.key(r.partition.as_deref()) {
                groups.entry(k).or_default().push(r);
            }
        }
        for (key, group) in groups {
            match fit_affine(&group, cfg, qm_dim, None) {
                Ok((cal, info)) => {
                    partitions.insert(key.clone(), cal);
                    partition_fits.insert(key, info);
                }
                Err(Error::MissingData(msg)) => {
                    log::warn!("partition {key:?}: {msg}; using the global calibration");
                    fallback.push(key);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(CalibrationModel {
        effective_prior: cfg.prior,
        l2: cfg.l2,
        global,
        global_fit,
        partitions,
        partition_fits,
        fallback_partitions: fallback,
        partition_by: cfg.partition_by.clone(),
        qm_dim,
    })
}

/// Calibrated scores and which partitions had to use the global map.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub scores: TrialScores,
    pub fallback_trials: usize,
    pub fallback_partitions: BTreeSet<String>,
}

impl CalibrationModel {
    fn map_for(&self, r: &TrialRecord) -> (&AffineCal, Option<String>) {
        match &self.partition_by {
            None => (&self.global, None),
            Some(sel) => match sel.key(r.partition.as_deref()) {
                Some(k) => match self.partitions.get(&k) {
                    Some(cal) => (cal, None),
                    None => (&self.global, Some(k)),
                },
                None => (&self.global, Some(crate::metrics::NO_PARTITION.to_string())),
            },
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }
}

pub fn apply_calibration(model: &CalibrationModel, scores: &TrialScores) -> Result<Calibrated> {
    let out: Vec<(TrialRecord, Option<String>)> = scores
        .records
        .par_iter()
        .map(|r| {
            let (cal, fb) = model.map_for(r);
            let score = cal.apply(r.score, r.qm.as_deref()).map_err(|e| match e {
                Error::MissingData(m) => Error::MissingData(format!("trial {} {}: {m}", r.enroll_id, r.test_id)),
                other => other,
            })?;
            Ok((TrialRecord { score, ..r.clone() }, fb))
        })
        .collect::<Result<Vec<_>>>()?;
    let fallback_trials = out.iter().filter(|(_, f)| f.is_some()).count();
    let fallback_partitions = out.iter().filter_map(|(_, f)| f.clone()).collect();
    Ok(Calibrated {
        scores: TrialScores::new(out.into_iter().map(|(r, _)| r).collect())?,
        fallback_trials,
        fallback_partitions,
    })
}

/// Which quality measures to extract, in the order listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QmSet {
    pub log_duration: bool,
    pub norm: bool,
}

impl Default for QmSet {
    fn default() -> Self {
        Self {
            log_duration: true,
            norm: true,
        }
    }
}

impl QmSet {
    pub fn len(&self) -> usize {
        2 * (self.log_duration as usize + self.norm as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[log dur_e, log dur_t, ‖e‖, ‖t‖]` (subset per `set`). Pass embeddings
/// before length normalization.
pub fn extract_qm(enroll: &Embedding, test: &Embedding, set: QmSet) -> Result<Vec<f64>> {
    let mut q = Vec::with_capacity(set.len());
    if set.log_duration {
        for e in [enroll, test] {
            let d = e.duration_s.ok_or_else(|| {
                Error::MissingData(format!("trial {} {}: segment {:?} has no duration", enroll.id, test.id, e.id))
            })?;
            if !(d > 0.0) {
                return Err(Error::InvalidArgument(format!("segment {:?} has non-positive duration", e.id)));
            }
            q.push(d.ln());
        }
    }
    if set.norm {
        q.push(enroll.norm());
        q.push(test.norm());
    }
    Ok(q)
}

/// Fills each trial's QM vector from the raw (pre-length-norm) embedding sets.
pub fn attach_qm(trials: &mut [Trial], enroll: &EmbeddingSet, test: &EmbeddingSet, set: QmSet) -> Result<()> {
    for (i, t) in trials.iter_mut().enumerate() {
        let e = enroll.get(&t.enroll_id).ok_or_else(|| Error::UnknownId {
            line: i + 1,
            id: t.enroll_id.clone(),
        })?;
        let s = test.get(&t.test_id).ok_or_else(|| Error::UnknownId {
            line: i + 1,
            id: t.test_id.clone(),
        })?;
        t.qm = Some(extract_qm(e, s, set)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub offset: f64,
    pub effective_prior: f64,
    pub l2: f64,
    pub fit: FitInfo,
}

impl FusionModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }
}

fn check_aligned(systems: &[TrialScores]) -> Result<()> {
    let first = systems
        .first()
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one system".into()))?;
    for (k, s) in systems.iter().enumerate().skip(1) {
        if s.len() != first.len() {
            return Err(Error::Shape(format!(
                "system {} has {} trials, system 1 has {}",
                k + 1,
                s.len(),
                first.len()
            )));
        }
        if let Some((i, (a, b))) = first
            .records
            .iter()
            .zip(&s.records)
            .enumerate()
            .find(|(_, (a, b))| a.enroll_id != b.enroll_id || a.test_id != b.test_id)
        {
            return Err(Error::Shape(format!(
                "system {} diverges at trial {}: {} {} vs {} {}",
                k + 1,
                i + 1,
                b.enroll_id,
                b.test_id,
                a.enroll_id,
                a.test_id
            )));
        }
    }
    Ok(())
}

fn fusion_problem_parts(systems: &[TrialScores]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let n_sys = systems.len();
    let mut features = Vec::new();
    let mut is_target = Vec::new();
    for (i, r) in systems[0].records.iter().enumerate() {
        if r.key == TrialKey::Unknown {
            continue;
        }
        let mut x: Vec<f64> = systems.iter().map(|s| s.records[i].score).collect();
        x.push(1.0);
        debug_assert_eq!(x.len(), n_sys + 1);
        features.push(x);
        is_target.push(r.key == TrialKey::Target);
    }
    (features, is_target)
}

/// Linear fusion `l = b + Σ_j a_j s_j`.
///
/// The ridge is `l2·(J Σ_j (a_j − 1/J)² + b²)`: with one system it is the
/// calibration ridge, and duplicating a system leaves the fused optimum unchanged.
pub fn train_fusion(systems: &[TrialScores], prior: f64, l2: f64) -> Result<FusionModel> {
    train_fusion_from(systems, prior, l2, None)
}

/// As [`train_fusion`], starting the optimizer at `init` (weights then offset).
pub fn train_fusion_from(systems: &[TrialScores], prior: f64, l2: f64, init: Option<&[f64]>) -> Result<FusionModel> {
    check_aligned(systems)?;
    if !(l2 >= 0.0) {
        return Err(Error::InvalidArgument("l2 must be nonnegative".into()));
    }
    let j = systems.len();
    let (features, is_target) = fusion_problem_parts(systems);
    let mut anchor = vec![1.0 / j as f64; j];
    anchor.push(0.0);
    let mut ridge = vec![l2 * j as f64; j];
    ridge.push(l2);
    let problem = Problem {
        features: &features,
        is_target: &is_target,
        prior,
        ridge,
        anchor: anchor.clone(),
    };
    let sol = problem.solve(init.unwrap_or(&anchor))?;
    if !sol.converged {
        log::warn!("fusion stopped with gradient norm {:.3e}", sol.grad_norm);
    }
    let nt = is_target.iter().filter(|t| **t).count();
    Ok(FusionModel {
        weights: sol.theta[..j].to_vec(),
        offset: sol.theta[j],
        effective_prior: prior,
        l2,
        fit: FitInfo {
            objective: sol.objective,
            grad_norm: sol.grad_norm,
            iterations: sol.iterations,
            converged: sol.converged,
            n_target: nt,
            n_nontarget: is_target.len() - nt,
        },
    })
}

pub fn apply_fusion(model: &FusionModel, systems: &[TrialScores]) -> Result<TrialScores> {
    if systems.len() != model.weights.len() {
        return Err(Error::Shape(format!(
            "fusion model has {} weights, got {} systems",
            model.weights.len(),
            systems.len()
        )));
    }
    check_aligned(systems)?;
    let records = systems[0]
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = model.offset
                + model
                    .weights
                    .iter()
                    .zip(systems)
                    .map(|(w, sys)| w * sys.records[i].score)
                    .sum::<f64>();
            TrialRecord { score: s, ..r.clone() }
        })
        .collect();
    TrialScores::new(records)
}

/// Objectives reached from `n` random starting points (convexity check).
pub fn restart_objectives(systems: &[TrialScores], prior: f64, l2: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let init: Vec<f64> = (0..=systems.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            Ok(train_fusion_from(systems, prior, l2, Some(&init))?.fit.objective)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{compute_act_cost, CostParams};

    fn toy(n: usize, sep: f64) -> TrialScores {
        // deterministic interleaved scores with overlap
        let tar: Vec<f64> = (0..n).map(|i| sep + ((i as f64) * 0.7).sin() * 2.0).collect();
        let non: Vec<f64> = (0..4 * n).map(|i| -sep + ((i as f64) * 1.3).cos() * 2.0).collect();
        TrialScores::from_split(&tar, &non).unwrap()
    }

    #[test]
    fn identity_map_leaves_scores() {
        let s = toy(10, 1.0);
        let model = CalibrationModel {
            effective_prior: 0.5,
            l2: 0.0,
            global: AffineCal::identity(0),
            global_fit: FitInfo {
                objective: 0.0,
                grad_norm: 0.0,
                iterations: 0,
                converged: true,
                n_target: 0,
                n_nontarget: 0,
            },
            partitions: BTreeMap::new(),
            partition_fits: BTreeMap::new(),
            fallback_partitions: vec![],
            partition_by: None,
            qm_dim: 0,
        };
        assert_eq!(apply_calibration(&model, &s).unwrap().scores, s);
        let a = AffineCal {
            scale: 2.0,
            offset: 1.0,
            qm_weights: vec![],
        };
        assert_eq!(a.apply(0.5, None).unwrap(), 2.0);
    }

    #[test]
    fn converges_and_dominates_identity() {
        let s = toy(200, 1.5);
        for prior in [0.5, 0.1, 0.01] {
            let cfg = CalibrationConfig {
                prior,
                l2: 0.0,
                ..Default::default()
            };
            let m = train_calibration(&s, &cfg).unwrap();
            assert!(m.global_fit.converged && m.global_fit.grad_norm <= GRAD_TOL);
            let cal = apply_calibration(&m, &s).unwrap().scores;
            let p = CostParams::single(prior);
            let before = compute_act_cost(&s, &p).unwrap().value;
            let after = compute_act_cost(&cal, &p).unwrap().value;
            // logistic loss is a surrogate, so allow the cost to tie within one trial's weight
            assert!(after <= before + 1.0 / 200.0 / prior.min(1.0 - prior) * prior + 1e-12, "{after} vs {before}");
        }
    }

    #[test]
    fn heavy_ridge_anchors_identity() {
        let s = toy(50, 1.0).map_scores(|v| 3.0 * v + 2.0);
        let cfg = CalibrationConfig {
            prior: 0.3,
            l2: 1e9,
            ..Default::default()
        };
        let m = train_calibration(&s, &cfg).unwrap();
        assert!((m.global.scale - 1.0).abs() < 1e-6 && m.global.offset.abs() < 1e-6);
    }

    fn with_partitions(s: &TrialScores) -> TrialScores {
        let mut s = s.clone();
        for (i, r) in s.records.iter_mut().enumerate() {
            r.partition = Some(if i % 2 == 0 { "cts:male" } else { "afv:female" }.to_string());
        }
        // a partition with only nontargets
        s.records.push(TrialRecord {
            enroll_id: "x".into(),
            test_id: "y".into(),
            score: -1.0,
            key: TrialKey::Nontarget,
            partition: Some("afv_x:male".into()),
            qm: None,
        });
        s
    }

    #[test]
    fn partition_fallback() {
        let s = with_partitions(&toy(100, 1.0));
        let cfg = CalibrationConfig {
            prior: 0.2,
            partition_by: Some(PartitionSelector::fields(vec![0])),
            ..Default::default()
        };
        let m = train_calibration(&s, &cfg).unwrap();
        assert_eq!(m.fallback_partitions, vec!["afv_x".to_string()]);
        assert!(m.partitions.contains_key("cts") && m.partitions.contains_key("afv"));
        let mut probe = s.clone();
        probe.records[0].partition = Some("unseen:male".into());
        let out = apply_calibration(&m, &probe).unwrap();
        assert!(out.fallback_partitions.contains("unseen"));
        assert!(out.fallback_partitions.contains("afv_x"));
        assert_eq!(out.fallback_trials, 2);
        let want = m.global.apply(probe.records[0].score, None).unwrap();
        assert_eq!(out.scores.records[0].score, want);
    }

    #[test]
    fn selector_fields() {
        let sel = PartitionSelector::fields(vec![1]);
        assert_eq!(sel.key(Some("cts:male")).as_deref(), Some("male"));
        assert_eq!(PartitionSelector::whole().key(Some("cts:male")).as_deref(), Some("cts:male"));
        assert_eq!(sel.key(None), None);
    }

    #[test]
    fn qm_requires_vectors() {
        let s = toy(20, 1.0);
        let cfg = CalibrationConfig {
            use_qm: true,
            ..Default::default()
        };
        assert!(train_calibration(&s, &cfg).is_err());
        let a = AffineCal {
            scale: 1.0,
            offset: 0.0,
            qm_weights: vec![0.1],
        };
        assert!(matches!(a.apply(1.0, None), Err(Error::MissingData(_))));
    }

    #[test]
    fn qm_extraction() {
        let e = Embedding::new("e", vec![1.0, 0.0]).with_duration(10.0);
        let t = Embedding::new("t", vec![0.0, 1.0]).with_duration(10.0);
        let q = extract_qm(&e, &t, QmSet::default()).unwrap();
        assert_eq!(q, vec![10f64.ln(), 10f64.ln(), 1.0, 1.0]);
        let no_dur = Embedding::new("t", vec![0.0, 1.0]);
        let err = extract_qm(&e, &no_dur, QmSet::default()).unwrap_err();
        assert!(err.to_string().contains("e t"));
        let only_norm = QmSet {
            log_duration: false,
            norm: true,
        };
        assert_eq!(extract_qm(&e, &no_dur, only_norm).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn fusion_arithmetic_and_identity() {
        let a = TrialScores::from_split(&[1.0], &[0.0]).unwrap();
        let b = TrialScores::from_split(&[3.0], &[2.0]).unwrap();
        let mut m = FusionModel {
            weights: vec![0.5, 0.5],
            offset: 0.0,
            effective_prior: 0.5,
            l2: 0.0,
            fit: FitInfo {
                objective: 0.0,
                grad_norm: 0.0,
                iterations: 0,
                converged: true,
                n_target: 1,
                n_nontarget: 1,
            },
        };
        assert_eq!(apply_fusion(&m, &[a.clone(), b]).unwrap().records[0].score, 2.0);
        m.weights = vec![1.0];
        assert_eq!(apply_fusion(&m, &[a.clone()]).unwrap(), a);
        assert!(apply_fusion(&m, &[a.clone(), a]).is_err());
    }

    #[test]
    fn single_system_fusion_is_calibration() {
        let s = toy(100, 1.0);
        let f = train_fusion(&[s.clone()], 0.1, DEFAULT_L2).unwrap();
        let c = train_calibration(
            &s,
            &CalibrationConfig {
                prior: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((f.weights[0] - c.global.scale).abs() < 1e-8);
        assert!((f.offset - c.global.offset).abs() < 1e-8);
    }

    #[test]
    fn duplicated_system_splits_weight() {
        let s = toy(100, 1.0);
        let single = train_fusion(&[s.clone()], 0.1, DEFAULT_L2).unwrap();
        let double = train_fusion(&[s.clone(), s.clone()], 0.1, DEFAULT_L2).unwrap();
        assert!((double.weights[0] - double.weights[1]).abs() < 1e-8);
        let a = apply_fusion(&single, &[s.clone()]).unwrap();
        let b = apply_fusion(&double, &[s.clone(), s]).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.score - y.score).abs() < 1e-6);
        }
    }

    #[test]
    fn misaligned_systems_rejected() {
        let a = toy(5, 1.0);
        let mut b = a.clone();
        b.records[3].test_id = "other".into();
        let err = train_fusion(&[a, b], 0.5, 0.0).unwrap_err();
        assert!(err.to_string().contains("trial 4"));
    }

    #[test]
    fn restarts_agree() {
        let s = toy(80, 1.0);
        let t = s.map_scores(|v| 0.5 * v + (v * 3.0).sin());
        let objs = restart_objectives(&[s, t], 0.2, DEFAULT_L2, 5, 1).unwrap();
        let (lo, hi) = objs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo <= 1e-9, "{objs:?}");
    }
}
