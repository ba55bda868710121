//! Detection metrics over keyed trial scores: EER, minimum and actual
//! normalized detection cost, and empirical DET points.
//!
//! A trial is accepted when `score >= threshold`. Candidate thresholds are
//! `-inf`, the midpoints between adjacent distinct scores, and `+inf`, which
//! covers every distinct partition of the sorted scores.

mod trials;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use trials::{
    format_scores, format_trials, parse_scores, parse_trials, read_scores, read_trials, write_scores, write_trials,
    Trial, TrialKey, TrialRecord, TrialScores,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub target_priors: Vec<f64>,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            target_priors: vec![0.01, 0.005],
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl CostParams {
    pub fn single(prior: f64) -> Self {
        Self {
            target_priors: vec![prior],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_priors.is_empty() {
            return Err(Error::InvalidArgument("at least one target prior is required".into()));
        }
        if let Some(p) = self.target_priors.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidArgument(format!("target prior {p} is not inside (0, 1)")));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) || !self.c_miss.is_finite() || !self.c_fa.is_finite() {
            return Err(Error::InvalidArgument("detection costs must be positive and finite".into()));
        }
        Ok(())
    }

    /// Bayes decision threshold for calibrated log-likelihood ratios.
    pub fn bayes_threshold(&self, prior: f64) -> f64 {
        (self.c_fa * (1.0 - prior) / (self.c_miss * prior)).ln()
    }

    /// Cost normalized by the best trivial system (accept-all or reject-all).
    pub fn normalized_cost(&self, prior: f64, p_miss: f64, p_fa: f64) -> f64 {
        let miss_w = self.c_miss * prior;
        let fa_w = self.c_fa * (1.0 - prior);
        (miss_w * p_miss + fa_w * p_fa) / miss_w.min(fa_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    /// `threshold<TAB>p_miss<TAB>p_fa` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tp_miss\tp_fa\n");
        for p in &self.points {
            out.push_str(&format!("{}\t{}\t{}\n", p.threshold, p.p_miss, p.p_fa));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostResult {
    /// Mean of the per-prior costs.
    pub value: f64,
    pub per_prior: Vec<f64>,
}

fn split_checked(scores: &TrialScores) -> Result<(Vec<f64>, Vec<f64>)> {
    let (tar, non) = scores.split();
    if tar.is_empty() || non.is_empty() {
        return Err(Error::MissingData(format!(
            "metrics need at least one target and one nontarget trial (got {} / {})",
            tar.len(),
            non.len()
        )));
    }
    Ok((tar, non))
}

/// Error counts at every candidate threshold, ascending.
fn sweep(tar: &[f64], non: &[f64]) -> Vec<DetPoint> {
    let mut all: Vec<(f64, bool)> = tar
        .iter()
        .map(|&s| (s, true))
        .chain(non.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    // below: trials with score < threshold (misses among targets, correct rejects among nontargets)
    let mut miss = 0usize;
    let mut rejected_non = 0usize;
    let mut points = Vec::with_capacity(all.len() + 1);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                miss += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        let threshold = if i < all.len() {
            s + (all[i].0 - s) / 2.0
        } else {
            f64::INFINITY
        };
        points.push(DetPoint {
            threshold,
            p_miss: miss as f64 / nt,
            p_fa: (non.len() - rejected_non) as f64 / nn,
        });
    }
    points
}

pub fn det_points(scores: &TrialScores) -> Result<DetCurve> {
    let (tar, non) = split_checked(scores)?;
    Ok(DetCurve {
        points: sweep(&tar, &non),
    })
}

fn eer_from_points(points: &[DetPoint]) -> f64 {
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("last point has p_miss = 1 >= p_fa = 0");
    let p1 = points[k];
    if p1.p_miss == p1.p_fa || k == 0 {
        return p1.p_miss;
    }
    let p0 = points[k - 1];
    let dm = p1.p_miss - p0.p_miss;
    let df = p1.p_fa - p0.p_fa;
    let t = (p0.p_fa - p0.p_miss) / (dm - df);
    p0.p_miss + t * dm
}

/// Equal error rate by linear interpolation of the empirical DET at the crossing.
pub fn compute_eer(scores: &TrialScores) -> Result<f64> {
    let (tar, non) = split_checked(scores)?;
    Ok(eer_from_points(&sweep(&tar, &non)))
}

pub fn compute_min_cost(scores: &TrialScores, params: &CostParams) -> Result<CostResult> {
    params.validate()?;
    let (tar, non) = split_checked(scores)?;
    let points = sweep(&tar, &non);
    let per_prior: Vec<f64> = params
        .target_priors
        .iter()
        .map(|&p| {
            points
                .iter()
                .map(|d| params.normalized_cost(p, d.p_miss, d.p_fa))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(CostResult {
        value: mean(&per_prior),
        per_prior,
    })
}

/// Actual cost at the Bayes threshold of each prior; scores are read as LLRs.
pub fn compute_act_cost(scores: &TrialScores, params: &CostParams) -> Result<CostResult> {
    params.validate()?;
    let (tar, non) = split_checked(scores)?;
    let per_prior: Vec<f64> = params
        .target_priors
        .iter()
        .map(|&p| {
            let theta = params.bayes_threshold(p);
            let miss = tar.iter().filter(|&&s| s < theta).count();
            let fa = non.iter().filter(|&&s| s >= theta).count();
            params.normalized_cost(p, miss as f64 / tar.len() as f64, fa as f64 / non.len() as f64)
        })
        .collect();
    Ok(CostResult {
        value: mean(&per_prior),
        per_prior,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// EER, minimum and actual cost for one trial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub eer: f64,
    pub min_cp: CostResult,
    pub act_cp: CostResult,
}

pub fn evaluate(scores: &TrialScores, params: &CostParams) -> Result<SystemMetrics> {
    let (tar, non) = split_checked(scores)?;
    Ok(SystemMetrics {
        n_target: tar.len(),
        n_nontarget: non.len(),
        eer: compute_eer(scores)?,
        min_cp: compute_min_cost(scores, params)?,
        act_cp: compute_act_cost(scores, params)?,
    })
}

/// Overall and per-partition metrics. Partitions lacking either class are
/// listed in `skipped_partitions` instead of failing the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: SystemMetrics,
    pub partitions: BTreeMap<String, SystemMetrics>,
    pub skipped_partitions: Vec<String>,
}

pub const NO_PARTITION: &str = "<none>";

pub fn evaluate_report(scores: &TrialScores, params: &CostParams) -> Result<MetricsReport> {
    let overall = evaluate(scores, params)?;
    let mut partitions = BTreeMap::new();
    let mut skipped = Vec::new();
    let groups = scores.by_partition();
    if groups.len() > 1 || groups.iter().any(|(p, _)| p.is_some()) {
        for (name, group) in groups {
            let name = name.unwrap_or_else(|| NO_PARTITION.to_string());
            match evaluate(&group, params) {
                Ok(m) => {
                    partitions.insert(name, m);
                }
                Err(Error::MissingData(_)) => skipped.push(name),
                Err(e) => return Err(e),
            }
        }
    }
    skipped.sort();
    Ok(MetricsReport {
        overall,
        partitions,
        skipped_partitions: skipped,
    })
}
