use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use svkit::calfuse::{
    apply_calibration, apply_fusion, attach_qm, train_calibration, train_fusion, CalibrationConfig, CalibrationModel,
    FusionModel, PartitionSelector,
};
use svkit::codecsim::{read_raw_pcm16, read_wav, transcode_alaw, write_raw_pcm16, write_wav};
use svkit::coral::{adapt_plda_coral_from_stats, adapt_plda_coral_plus, estimate_domain_stats, recenter};
use svkit::embedspace::{
    apply_preprocess, fit_preprocess, load_embeddings, save_embeddings, score_cosine, EmbeddingFormat, PreprocessChain,
};
use svkit::metrics::{
    det_points, evaluate_report, format_trials, read_scores, read_trials, write_scores, MetricsReport, Trial,
};
use svkit::neurkern::tensor::Tensor;
use svkit::neurkern::{fuse_repvgg_block, load_block_manifest, random_block, BlockManifest, Tensor4};
use svkit::plda::{load_model, save_model, score_trials_with, train_plda, Provenance};
use svkit::synth::{generate_shift_data, run_pipeline};
use svkit::{CostParams, EmbeddingSet, TrialScores};

use crate::config::PipelineConfig;
use crate::manifest::{default_manifest_path, Recorder};
use crate::{
    AdaptArgs, AdaptMethod, CalibrateArgs, Cli, Codec, Command, EvaluateArgs, FuseArgs, FuseRepvggArgs,
    PreprocessArgs, ScoreArgs, SynthArgs, TrainPldaArgs, TranscodeArgs,
};

/// Bad flags or flag combinations (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<svkit::Error>() {
            return match e {
                svkit::Error::Numerical(_) => 3,
                svkit::Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref()).map_err(|e| {
        if e.downcast_ref::<svkit::Error>().is_some() {
            e.context("invalid config file")
        } else {
            e
        }
    })?;
    let mut rec = Recorder::default();
    if let Some(c) = &cli.config {
        rec.input(c);
    }
    let (name, primary) = match cli.command {
        Command::Preprocess(a) => ("preprocess", preprocess(a, &mut cfg, &mut rec)?),
        Command::TrainPlda(a) => ("train-plda", train(a, &mut cfg, &mut rec)?),
        Command::Adapt(a) => ("adapt", adapt(a, &mut cfg, &mut rec)?),
        Command::Score(a) => ("score", score(a, &mut rec)?),
        Command::Calibrate(a) => ("calibrate", calibrate(a, &mut cfg, &mut rec)?),
        Command::Fuse(a) => ("fuse", fuse(a, &mut cfg, &mut rec)?),
        Command::Evaluate(a) => ("evaluate", evaluate(a, &mut cfg, &mut rec)?),
        Command::FuseRepvgg(a) => ("fuse-repvgg", fuse_repvgg(a, &mut cfg, &mut rec)?),
        Command::Transcode(a) => ("transcode", transcode(a, &mut rec)?),
        Command::Synth(a) => ("synth", synth(a, &mut cfg, &mut rec)?),
    };
    let path = cli.run_manifest.unwrap_or_else(|| default_manifest_path(&primary));
    rec.write(name, &cfg, &path)
}

fn load_set(rec: &mut Recorder, path: &Path) -> Result<EmbeddingSet> {
    rec.input(path);
    Ok(load_embeddings(path, EmbeddingFormat::from_path(path))?)
}

fn save_set(rec: &mut Recorder, set: &EmbeddingSet, path: &Path) -> Result<()> {
    save_embeddings(set, path, EmbeddingFormat::from_path(path))?;
    rec.output(path);
    Ok(())
}

fn write_json<T: Serialize>(rec: &mut Recorder, value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    rec.output(path);
    Ok(())
}

fn write_text(rec: &mut Recorder, text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    rec.output(path);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(rec: &mut Recorder, path: &Path) -> Result<T> {
    rec.input(path);
    let text = std::fs::read_to_string(path).map_err(|e| svkit::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(svkit::Error::from).with_context(|| format!("parsing {}", path.display()))?)
}

fn preprocess(a: PreprocessArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if a.length_norm {
        cfg.preprocess.length_norm = true;
    }
    if a.no_length_norm {
        cfg.preprocess.length_norm = false;
    }
    let input = load_set(rec, &a.input)?;
    let chain: PreprocessChain = match &a.chain {
        Some(p) => read_json(rec, p)?,
        None => {
            let fit = match &a.fit_on {
                Some(p) => load_set(rec, p)?,
                None => input.clone(),
            };
            fit_preprocess(&fit, cfg.preprocess.length_norm)?
        }
    };
    if let Some(p) = &a.save_chain {
        write_json(rec, &chain, p)?;
    }
    save_set(rec, &apply_preprocess(&chain, &input)?, &a.output)?;
    Ok(a.output)
}

fn train(a: TrainPldaArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if let Some(v) = a.max_iters {
        cfg.plda.max_iters = v;
    }
    if let Some(v) = a.tol {
        cfg.plda.loglik_rel_tol = v;
    }
    if let Some(v) = a.seed {
        cfg.plda.seed = v;
    }
    let data = load_set(rec, &a.input)?;
    let out = train_plda(&data, &cfg.plda)?;
    if !out.converged {
        log::warn!("EM stopped after {} iterations without meeting the tolerance", cfg.plda.max_iters);
    }
    save_model(&out.model, None, &a.output)?;
    rec.output(&a.output);
    if let Some(p) = &a.trace {
        let mut text = String::from("iter\tloglik\n");
        for (i, v) in out.loglik_trace.iter().enumerate() {
            writeln!(text, "{i}\t{v}")?;
        }
        write_text(rec, &text, p)?;
    }
    Ok(a.output)
}

fn adapt(a: AdaptArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if let Some(v) = a.gamma {
        cfg.coral_plus.gamma = v;
    }
    if let Some(v) = a.beta {
        cfg.coral_plus.beta = v;
    }
    rec.input(&a.model);
    let (model, _) = load_model(&a.model)?;
    let ind = estimate_domain_stats(&load_set(rec, &a.ind)?)?;
    let (adapted, prov) = match a.method {
        AdaptMethod::Coral => (
            adapt_plda_coral_from_stats(&model, &ind)?,
            Provenance {
                method: "coral".into(),
                gamma: None,
                beta: None,
                center: Some(ind.mean.iter().copied().collect()),
            },
        ),
        AdaptMethod::CoralPlus => (
            adapt_plda_coral_plus(&model, &ind, &cfg.coral_plus)?,
            Provenance {
                method: "coral+".into(),
                gamma: Some(cfg.coral_plus.gamma),
                beta: Some(cfg.coral_plus.beta),
                center: Some(ind.mean.iter().copied().collect()),
            },
        ),
    };
    save_model(&adapted, Some(prov), &a.output)?;
    rec.output(&a.output);
    Ok(a.output)
}

fn score(a: ScoreArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let enroll = load_set(rec, &a.enroll)?;
    let test = load_set(rec, &a.test)?;
    rec.input(&a.trials);
    let trials = read_trials(&a.trials)?;
    let scores = match &a.model {
        Some(p) if !a.cosine => {
            rec.input(p);
            let (mut model, prov) = load_model(p)?;
            if let Some(center) = prov.and_then(|p| p.center) {
                model = recenter(&model, &center)?;
            }
            let scorer = model.scorer()?;
            score_trials_with(&enroll, &test, &trials, true, |e, t| scorer.score(e, t))?
        }
        _ => score_trials_with(&enroll, &test, &trials, true, score_cosine)?,
    };
    write_scores(&scores, &a.output)?;
    rec.output(&a.output);
    Ok(a.output)
}

/// Scores with keys, partitions and (optionally) QMs from the key file and raw embeddings.
fn keyed_scores(
    rec: &mut Recorder,
    scores: &Path,
    trials: Option<&Path>,
    qm: Option<(&Path, &Path, svkit::calfuse::QmSet)>,
) -> Result<TrialScores> {
    rec.input(scores);
    let s = read_scores(scores)?;
    let Some(tp) = trials else {
        if qm.is_some() {
            return Err(usage("quality measures need --trials"));
        }
        return Ok(s);
    };
    rec.input(tp);
    let mut trials: Vec<Trial> = read_trials(tp)?;
    if let Some((e, t, set)) = qm {
        let enroll = load_set(rec, e)?;
        let test = load_set(rec, t)?;
        attach_qm(&mut trials, &enroll, &test, set)?;
    }
    Ok(s.attach_keys(&trials)?)
}

fn calibrate(a: CalibrateArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    let f = &a.flags;
    if let Some(v) = f.prior {
        cfg.calibration.prior = Some(v);
    }
    if let Some(v) = f.l2 {
        cfg.calibration.l2 = v;
    }
    if let Some(v) = &f.partition_fields {
        cfg.calibration.partition_fields = Some(v.clone());
    }
    if f.qm {
        cfg.calibration.use_qm = true;
    }
    let model: Option<CalibrationModel> = a.model.as_deref().map(|p| read_json(rec, p)).transpose()?;
    let use_qm = model.as_ref().map_or(cfg.calibration.use_qm, |m| m.qm_dim > 0);
    let qm = if use_qm {
        match (&f.qm_enroll, &f.qm_test) {
            (Some(e), Some(t)) => Some((e.as_path(), t.as_path(), cfg.calibration.qm)),
            _ => return Err(usage("quality measures need --qm-enroll and --qm-test")),
        }
    } else {
        None
    };
    let scores = keyed_scores(rec, &a.scores, f.trials.as_deref(), qm)?;
    match model {
        None => {
            if f.trials.is_none() {
                return Err(usage("training a calibration needs --trials with keys"));
            }
            let out = a.model_out.clone().expect("clap requires --model-out");
            let ccfg = CalibrationConfig {
                prior: cfg.calibration_prior(),
                l2: cfg.calibration.l2,
                use_qm,
                partition_by: cfg.calibration.partition_fields.clone().map(PartitionSelector::fields),
            };
            let m = train_calibration(&scores, &ccfg)?;
            for p in &m.fallback_partitions {
                eprintln!("partition {p}: one class missing, using the global calibration");
            }
            m.save(&out)?;
            rec.output(&out);
            Ok(out)
        }
        Some(m) => {
            let out = a.output.clone().expect("clap requires --output");
            let cal = apply_calibration(&m, &scores)?;
            if cal.fallback_trials > 0 {
                eprintln!(
                    "{} trials used the global calibration (partitions: {})",
                    cal.fallback_trials,
                    cal.fallback_partitions.iter().cloned().collect::<Vec<_>>().join(", ")
                );
            }
            write_scores(&cal.scores, &out)?;
            rec.output(&out);
            Ok(out)
        }
    }
}

fn fuse(a: FuseArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if let Some(v) = a.prior {
        cfg.calibration.prior = Some(v);
    }
    if let Some(v) = a.l2 {
        cfg.calibration.l2 = v;
    }
    let systems: Vec<TrialScores> = a
        .scores
        .iter()
        .map(|p| keyed_scores(rec, p, a.trials.as_deref(), None))
        .collect::<Result<_>>()?;
    match &a.model {
        None => {
            if a.trials.is_none() {
                return Err(usage("training a fusion needs --trials with keys"));
            }
            let out = a.model_out.clone().expect("clap requires --model-out");
            let m = train_fusion(&systems, cfg.calibration_prior(), cfg.calibration.l2)?;
            m.save(&out)?;
            rec.output(&out);
            Ok(out)
        }
        Some(p) => {
            let m: FusionModel = read_json(rec, p)?;
            let out = a.output.clone().expect("clap requires --output");
            write_scores(&apply_fusion(&m, &systems)?, &out)?;
            rec.output(&out);
            Ok(out)
        }
    }
}

#[derive(Debug, Serialize)]
struct SystemReport {
    name: String,
    #[serde(flatten)]
    metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    cost: CostParams,
    systems: Vec<SystemReport>,
}

fn table(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let priors: Vec<String> = report.cost.target_priors.iter().map(|p| p.to_string()).collect();
    let _ = writeln!(s, "# priors {}  c_miss {}  c_fa {}", priors.join(","), report.cost.c_miss, report.cost.c_fa);
    let _ = writeln!(
        s,
        "{:<16} {:<16} {:>8} {:>10} {:>8} {:>8} {:>8}",
        "system", "partition", "targets", "nontargets", "EER%", "minCp", "actCp"
    );
    for sys in &report.systems {
        let mut rows = vec![("all".to_string(), &sys.metrics.overall)];
        rows.extend(sys.metrics.partitions.iter().map(|(k, v)| (k.clone(), v)));
        for (part, m) in rows {
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>8} {:>10} {:>8.3} {:>8.4} {:>8.4}",
                sys.name,
                part,
                m.n_target,
                m.n_nontarget,
                100.0 * m.eer,
                m.min_cp.value,
                m.act_cp.value
            );
        }
        for part in &sys.metrics.skipped_partitions {
            let _ = writeln!(s, "{:<16} {:<16} (skipped: one class missing)", sys.name, part);
        }
    }
    s
}

fn split_named(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

fn evaluate(a: EvaluateArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if let Some(p) = &a.priors {
        cfg.cost.target_priors = p.clone();
    }
    if let Some(v) = a.c_miss {
        cfg.cost.c_miss = v;
    }
    if let Some(v) = a.c_fa {
        cfg.cost.c_fa = v;
    }
    cfg.cost.validate()?;
    let mut systems = Vec::new();
    let mut seen = BTreeMap::new();
    for arg in &a.scores {
        let (name, path) = split_named(arg);
        if seen.insert(name.clone(), ()).is_some() {
            return Err(usage(format!("system name {name:?} given twice")));
        }
        let scores = keyed_scores(rec, &path, Some(&a.trials), None)?;
        if let Some(dir) = &a.det_dir {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_text(rec, &det_points(&scores)?.to_tsv(), &dir.join(format!("{name}.det.tsv")))?;
        }
        systems.push(SystemReport {
            name,
            metrics: evaluate_report(&scores, &cfg.cost)?,
        });
    }
    let report = EvaluationReport {
        cost: cfg.cost.clone(),
        systems,
    };
    let text = table(&report);
    print!("{text}");
    if let Some(p) = &a.table {
        write_text(rec, &text, p)?;
    }
    match &a.report {
        Some(p) => {
            write_json(rec, &report, p)?;
            Ok(p.clone())
        }
        None => Ok(a.table.clone().unwrap_or_else(|| PathBuf::from("evaluate"))),
    }
}

fn fuse_repvgg(a: FuseRepvggArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(c) = a.generate {
        if c == 0 {
            return Err(usage("--generate needs at least one channel"));
        }
        let block = random_block(c, true, true, &mut rng);
        BlockManifest::save_block(&block, &a.block)?;
        rec.output(&a.block);
    } else {
        rec.input(&a.block);
    }
    let block = load_block_manifest(&a.block)?;
    let fused = fuse_repvgg_block(&block)?;
    let (_, cout) = block.channels()?;
    let kernel_path = PathBuf::from(format!("{}.kernel.tnsr", a.output.display()));
    let bias_path = PathBuf::from(format!("{}.bias.tnsr", a.output.display()));
    Tensor {
        dims: fused.kernel.dims.to_vec(),
        data: fused.kernel.data.iter().map(|&v| v as f32).collect(),
    }
    .save(&kernel_path)?;
    Tensor::new(vec![cout], fused.bias.iter().map(|&v| v as f32).collect())?.save(&bias_path)?;
    rec.output(&kernel_path);
    rec.output(&bias_path);

    let (cin, _) = block.channels()?;
    let n = a.probe_size.max(1);
    let probe = Tensor4::from_vec(
        [1, cin, n, n],
        (0..cin * n * n).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).collect(),
    )?;
    let r64 = block.forward(&probe)?.max_abs_diff(&fused.forward(&probe)?);
    let b32 = block.cast::<f32>();
    let f32_fused = fuse_repvgg_block(&b32)?;
    let p32 = probe.cast::<f32>();
    let r32 = b32.forward(&p32)?.max_abs_diff(&f32_fused.forward(&p32)?);
    println!("max |multi-branch - fused|: f64 {r64:.3e}, f32 {r32:.3e}");
    Ok(kernel_path)
}

fn transcode(a: TranscodeArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let Codec::Alaw = a.codec;
    rec.input(&a.input);
    let pcm = if a.raw { read_raw_pcm16(&a.input, a.rate)? } else { read_wav(&a.input)? };
    let out = transcode_alaw(&pcm)?;
    if a.raw {
        write_raw_pcm16(&out, &a.output)?;
    } else {
        write_wav(&out, &a.output)?;
    }
    rec.output(&a.output);
    Ok(a.output)
}

fn synth(a: SynthArgs, cfg: &mut PipelineConfig, rec: &mut Recorder) -> Result<PathBuf> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.dim {
        cfg.synth.dim = d;
    }
    if let Some(s) = a.shift {
        cfg.synth.shift_strength = s;
    }
    cfg.synth.plda = cfg.plda.clone();
    cfg.synth.coral_plus = cfg.coral_plus;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let data = generate_shift_data(&cfg.synth, cfg.seed)?;
    let dir = &a.out_dir;
    save_set(rec, &data.ood_train, &dir.join("ood_train.svec"))?;
    save_set(rec, &data.ind_adapt, &dir.join("ind_adapt.svec"))?;
    save_set(rec, &data.enroll, &dir.join("enroll.svec"))?;
    save_set(rec, &data.test, &dir.join("test.svec"))?;
    write_text(rec, &format_trials(&data.trials), &dir.join("trials.tsv"))?;
    save_model(&data.truth, None, dir.join("truth.json"))?;
    rec.output(&dir.join("truth.json"));
    if let Some(p) = &a.report {
        let report = run_pipeline(&cfg.synth, &cfg.cost, cfg.seed)?;
        write_text(rec, &report.to_json()?, p)?;
    }
    Ok(a.out_dir)
}
