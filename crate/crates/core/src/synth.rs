//! Seeded synthetic experiments.
//!
//! Every experiment draws its data from known PLDA models, so the ground truth
//! (speaker labels, true LLRs) is available and the outcome depends only on
//! the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calfuse::{
    apply_calibration, apply_fusion, train_calibration, train_fusion, CalibrationConfig, PartitionSelector,
};
use crate::coral::{adapt_plda_coral_plus, estimate_domain_stats, recenter, CoralPlusConfig};
use crate::embedspace::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{symmetrized, Matrix, Vector};
use crate::metrics::{evaluate, CostParams, SystemMetrics, Trial, TrialKey, TrialRecord, TrialScores};
use crate::plda::{sample_embeddings, score_trials, train_plda, DomainTransform, PldaModel, PldaTrainConfig};

fn normal_vec(d: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// `A Aᵀ / d + ridge·I` with `A` standard normal.
pub fn random_spd(d: usize, ridge: f64, rng: &mut impl Rng) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    symmetrized(&a * a.transpose() / d as f64 + Matrix::identity(d, d) * ridge)
}

/// Random two-covariance model whose speaker variability dominates a few directions.
pub fn random_plda_model(d: usize, rng: &mut impl Rng) -> Result<PldaModel> {
    let mu = normal_vec(d, rng);
    let phi_b = random_spd(d, 0.05, rng) * 4.0;
    let phi_w = random_spd(d, 0.2, rng);
    PldaModel::new(mu, phi_b, phi_w)
}

/// Random affine domain shift: `x ↦ (I + strength·G) x + strength·δ`.
pub fn random_shift(d: usize, strength: f64, rng: &mut impl Rng) -> DomainTransform {
    let g = Matrix::from_fn(d, d, |_, _| -> f64 { StandardNormal.sample(rng) }) / (d as f64).sqrt();
    DomainTransform {
        matrix: Matrix::identity(d, d) + g * strength,
        shift: normal_vec(d, rng) * strength,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub dim: usize,
    pub ood_speakers: usize,
    pub ood_per_speaker: usize,
    /// Unlabeled in-domain adaptation data.
    pub ind_adapt_speakers: usize,
    pub ind_adapt_per_speaker: usize,
    /// In-domain evaluation: the first segment of each speaker enrolls, the rest test.
    pub eval_speakers: usize,
    pub eval_per_speaker: usize,
    pub shift_strength: f64,
    pub coral_plus: CoralPlusConfig,
    pub plda: PldaTrainConfig,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            ood_speakers: 400,
            ood_per_speaker: 8,
            ind_adapt_speakers: 300,
            ind_adapt_per_speaker: 4,
            eval_speakers: 150,
            eval_per_speaker: 4,
            shift_strength: 0.8,
            coral_plus: CoralPlusConfig::default(),
            plda: PldaTrainConfig::default(),
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ood_speakers < 2 || self.ood_per_speaker < 2 {
            return Err(Error::InvalidArgument("need dim ≥ 1 and at least 2×2 OOD segments".into()));
        }
        if self.eval_speakers < 2 || self.eval_per_speaker < 2 {
            return Err(Error::InvalidArgument("evaluation needs at least 2 speakers with 2 segments".into()));
        }
        if self.ind_adapt_speakers * self.ind_adapt_per_speaker <= self.dim {
            return Err(Error::InvalidArgument("in-domain adaptation set must exceed the dimension".into()));
        }
        self.coral_plus.validate()?;
        self.plda.validate()
    }
}

/// Generated data for one domain-shift run.
#[derive(Debug, Clone)]
pub struct ShiftData {
    pub truth: PldaModel,
    pub transform: DomainTransform,
    pub ood_train: EmbeddingSet,
    pub ind_adapt: EmbeddingSet,
    pub enroll: EmbeddingSet,
    pub test: EmbeddingSet,
    pub trials: Vec<Trial>,
}

fn relabel(set: EmbeddingSet, domain: &str, prefix: &str) -> Result<EmbeddingSet> {
    let items = set
        .into_items()
        .into_iter()
        .map(|e| Embedding {
            id: format!("{prefix}{}", e.id),
            speaker: e.speaker.map(|s| format!("{prefix}{s}")),
            domain: Some(domain.to_string()),
            ..e
        })
        .collect::<Vec<_>>();
    let d = items.first().map_or(0, |e| e.dim());
    EmbeddingSet::new(d, items)
}

/// Draws OOD training data, unlabeled InD adaptation data and an InD trial list.
pub fn generate_shift_data(cfg: &ShiftConfig, seed: u64) -> Result<ShiftData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = random_plda_model(cfg.dim, &mut rng)?;
    let transform = random_shift(cfg.dim, cfg.shift_strength, &mut rng);
    let seeds: [u64; 3] = [rng.random(), rng.random(), rng.random()];
    let ood_train = relabel(
        sample_embeddings(&truth, cfg.ood_speakers, cfg.ood_per_speaker, seeds[0], None)?,
        "ood",
        "ood-",
    )?;
    let adapt = sample_embeddings(&truth, cfg.ind_adapt_speakers, cfg.ind_adapt_per_speaker, seeds[1], Some(&transform))?;
    let ind_adapt = EmbeddingSet::new(
        cfg.dim,
        relabel(adapt, "ind", "adp-")?
            .into_items()
            .into_iter()
            .map(|e| Embedding { speaker: None, ..e })
            .collect(),
    )?;
    let eval = relabel(
        sample_embeddings(&truth, cfg.eval_speakers, cfg.eval_per_speaker, seeds[2], Some(&transform))?,
        "ind",
        "evl-",
    )?;
    let (enroll_items, test_items): (Vec<_>, Vec<_>) = eval.into_items().into_iter().partition(|e| e.id.ends_with("-000"));
    let enroll = EmbeddingSet::new(cfg.dim, enroll_items)?;
    let test = EmbeddingSet::new(cfg.dim, test_items)?;
    let mut trials = Vec::with_capacity(enroll.len() * test.len());
    for e in enroll.iter() {
        for t in test.iter() {
            let key = if e.speaker == t.speaker { TrialKey::Target } else { TrialKey::Nontarget };
            trials.push(Trial::new(e.id.clone(), t.id.clone(), key));
        }
    }
    Ok(ShiftData {
        truth,
        transform,
        ood_train,
        ind_adapt,
        enroll,
        test,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub seed: u64,
    pub n_trials: usize,
    pub ood: SystemMetrics,
    pub coral_plus: SystemMetrics,
    /// Relative `min_cp` reduction of CORAL+ over the unadapted model.
    pub min_cp_improvement: f64,
}

/// Models and scores of one domain-shift run.
#[derive(Debug, Clone)]
pub struct ShiftRun {
    pub data: ShiftData,
    pub ood_model: PldaModel,
    pub adapted_model: PldaModel,
    pub ood_scores: TrialScores,
    pub adapted_scores: TrialScores,
    pub result: ShiftResult,
}

/// Unadapted OOD PLDA vs CORAL+ (re-centred on the InD mean) on InD trials.
pub fn run_domain_shift(cfg: &ShiftConfig, seed: u64, cost: &CostParams) -> Result<ShiftRun> {
    let data = generate_shift_data(cfg, seed)?;
    let ood_model = train_plda(&data.ood_train, &cfg.plda)?.model;
    let ind = estimate_domain_stats(&data.ind_adapt)?;
    let adapted_model = recenter(&adapt_plda_coral_plus(&ood_model, &ind, &cfg.coral_plus)?, ind.mean.as_slice())?;
    let ood_scores = score_trials(&ood_model, &data.enroll, &data.test, &data.trials)?;
    let adapted_scores = score_trials(&adapted_model, &data.enroll, &data.test, &data.trials)?;
    let ood = evaluate(&ood_scores, cost)?;
    let coral_plus = evaluate(&adapted_scores, cost)?;
    let result = ShiftResult {
        seed,
        n_trials: data.trials.len(),
        min_cp_improvement: (ood.min_cp.value - coral_plus.min_cp.value) / ood.min_cp.value,
        ood,
        coral_plus,
    };
    Ok(ShiftRun {
        data,
        ood_model,
        adapted_model,
        ood_scores,
        adapted_scores,
        result,
    })
}

/// Trials scored with the generating model's own LLR, hence perfectly calibrated.
pub fn true_llr_trials(dim: usize, n_targets: usize, n_nontargets: usize, seed: u64) -> Result<TrialScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_plda_model(dim, &mut rng)?;
    let scorer = model.scorer()?;
    let root_b = crate::linalg::spd_sqrt(&model.phi_b)?;
    let root_w = crate::linalg::spd_sqrt(&model.phi_w)?;
    let draw = |y: &Vector, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (&model.mu + y + &root_w * normal_vec(dim, rng)).iter().copied().collect()
    };
    let mut records = Vec::with_capacity(n_targets + n_nontargets);
    for i in 0..n_targets + n_nontargets {
        let target = i < n_targets;
        let y1 = &root_b * normal_vec(dim, &mut rng);
        let y2 = if target { y1.clone() } else { &root_b * normal_vec(dim, &mut rng) };
        let e = draw(&y1, &mut rng);
        let t = draw(&y2, &mut rng);
        records.push(TrialRecord {
            enroll_id: format!("e{i:07}"),
            test_id: format!("t{i:07}"),
            score: scorer.score_vectors(&e, &t)?,
            key: if target { TrialKey::Target } else { TrialKey::Nontarget },
            partition: None,
            qm: None,
        });
    }
    TrialScores::new(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub scale: f64,
    pub offset: f64,
    pub min_cp: f64,
    pub act_cp: f64,
    pub prior: f64,
}

/// Calibrates `score_scale × true LLR` at `prior` and reports the fit on the same trials.
pub fn calibration_experiment(n_trials: usize, score_scale: f64, prior: f64, seed: u64) -> Result<CalibrationResult> {
    let n_t = n_trials / 2;
    let scores = true_llr_trials(8, n_t, n_trials - n_t, seed)?.map_scores(|s| s * score_scale);
    let cfg = CalibrationConfig {
        prior,
        ..Default::default()
    };
    let model = train_calibration(&scores, &cfg)?;
    let cal = apply_calibration(&model, &scores)?.scores;
    let m = evaluate(&cal, &CostParams::single(prior))?;
    Ok(CalibrationResult {
        scale: model.global.scale,
        offset: model.global.offset,
        min_cp: m.min_cp.value,
        act_cp: m.act_cp.value,
        prior,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub seed: u64,
    pub weights: Vec<f64>,
    pub system_min_cp: Vec<f64>,
    pub fused_min_cp: f64,
}

/// Two systems = true LLR plus independent noise; fusion trained on a dev half
/// and evaluated on the held-out half.
pub fn fusion_experiment(n_per_split: usize, noise: [f64; 2], seed: u64, cost: &CostParams) -> Result<FusionResult> {
    let n_t = n_per_split / 5;
    let base = true_llr_trials(8, 2 * n_t, 2 * (n_per_split - n_t), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let systems: Vec<TrialScores> = noise
        .iter()
        .map(|&sd| {
            let noisy: Vec<TrialRecord> = base
                .records
                .iter()
                .map(|r| TrialRecord {
                    score: r.score + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                    ..r.clone()
                })
                .collect();
            TrialScores::new(noisy)
        })
        .collect::<Result<_>>()?;
    // targets come first: alternate records between dev and eval
    let split = |s: &TrialScores, parity: usize| {
        TrialScores::new(s.records.iter().skip(parity).step_by(2).cloned().collect())
    };
    let dev: Vec<TrialScores> = systems.iter().map(|s| split(s, 0)).collect::<Result<_>>()?;
    let eval: Vec<TrialScores> = systems.iter().map(|s| split(s, 1)).collect::<Result<_>>()?;
    let model = train_fusion(&dev, cost.target_priors[0], crate::calfuse::DEFAULT_L2)?;
    let fused = apply_fusion(&model, &eval)?;
    Ok(FusionResult {
        seed,
        weights: model.weights.clone(),
        system_min_cp: eval.iter().map(|s| evaluate(s, cost).map(|m| m.min_cp.value)).collect::<Result<_>>()?,
        fused_min_cp: evaluate(&fused, cost)?.min_cp.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitResult {
    pub seed: u64,
    pub global_gap: f64,
    pub partitioned_gap: f64,
}

impl OverfitResult {
    pub fn partitioned_worse(&self) -> bool {
        self.partitioned_gap > self.global_gap
    }
}

fn partitioned_trials(
    base: &TrialScores,
    n_partitions: usize,
    rng: &mut ChaCha8Rng,
) -> TrialScores {
    // shared miscalibration, partition labels and uninformative QMs
    let records = base
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let dur: f64 = rng.random_range(5.0..60.0);
            TrialRecord {
                score: 1.5 * r.score - 1.0,
                partition: Some(format!("p{}", i % n_partitions)),
                qm: Some(vec![dur.ln(), StandardNormal.sample(rng)]),
                ..r.clone()
            }
        })
        .collect();
    TrialScores { records }
}

/// Per-partition + QM calibration vs global calibration, trained on a dev set
/// with `trials_per_partition` trials per partition and scored on a large eval set.
/// The eval-side gap is `act_cp − min_cp` at `prior`.
pub fn overfit_experiment(n_partitions: usize, trials_per_partition: usize, prior: f64, seed: u64) -> Result<OverfitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev_n = n_partitions * trials_per_partition;
    let dev_t = (dev_n / 5).max(n_partitions);
    let dev = true_llr_trials(8, dev_t, dev_n - dev_t, rng.random())?;
    let eval = true_llr_trials(8, 4000, 16000, rng.random())?;
    // interleave classes so every partition gets targets
    let interleave = |s: TrialScores, n_t: usize| {
        let (t, n) = s.records.split_at(n_t);
        let ratio = (n.len() / t.len().max(1)).max(1);
        let mut out = Vec::with_capacity(s.records.len());
        let mut ni = n.iter();
        for r in t {
            out.push(r.clone());
            out.extend(ni.by_ref().take(ratio).cloned());
        }
        out.extend(ni.cloned());
        TrialScores { records: out }
    };
    let dev = partitioned_trials(&interleave(dev, dev_t), n_partitions, &mut rng);
    let eval = partitioned_trials(&interleave(eval, 4000), n_partitions, &mut rng);
    let gap = |cfg: CalibrationConfig| -> Result<f64> {
        let m = train_calibration(&dev, &cfg)?;
        let cal = apply_calibration(&m, &eval)?.scores;
        let r = evaluate(&cal, &CostParams::single(prior))?;
        Ok(r.act_cp.value - r.min_cp.value)
    };
    let global_gap = gap(CalibrationConfig {
        prior,
        ..Default::default()
    })?;
    let partitioned_gap = gap(CalibrationConfig {
        prior,
        use_qm: true,
        partition_by: Some(PartitionSelector::whole()),
        ..Default::default()
    })?;
    Ok(OverfitResult {
        seed,
        global_gap,
        partitioned_gap,
    })
}

/// Deterministic summary of the full synthetic pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config: ShiftConfig,
    pub cost: CostParams,
    pub ood_loglik_trace: Vec<f64>,
    pub domain_shift: ShiftResult,
    /// CORAL+ scores calibrated on half of the InD trials and evaluated on the other half.
    pub calibrated: SystemMetrics,
    pub calibration_scale: f64,
    pub calibration_offset: f64,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Data generation, OOD PLDA training, CORAL+ adaptation, scoring, calibration, metrics.
pub fn run_pipeline(cfg: &ShiftConfig, cost: &CostParams, seed: u64) -> Result<PipelineReport> {
    let run = run_domain_shift(cfg, seed, cost)?;
    let trace = train_plda(&run.data.ood_train, &cfg.plda)?.loglik_trace;
    let dev = TrialScores {
        records: run.adapted_scores.records.iter().step_by(2).cloned().collect(),
    };
    let eval = TrialScores {
        records: run.adapted_scores.records.iter().skip(1).step_by(2).cloned().collect(),
    };
    let cal = train_calibration(
        &dev,
        &CalibrationConfig {
            prior: cost.target_priors[0],
            ..Default::default()
        },
    )?;
    let calibrated = evaluate(&apply_calibration(&cal, &eval)?.scores, cost)?;
    Ok(PipelineReport {
        seed,
        config: cfg.clone(),
        cost: cost.clone(),
        ood_loglik_trace: trace,
        domain_shift: run.result,
        calibrated,
        calibration_scale: cal.global.scale,
        calibration_offset: cal.global.offset,
    })
}
