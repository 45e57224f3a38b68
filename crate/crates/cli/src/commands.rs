use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mdm_core::denoiser::{checkpoint, ToyTransformer};
use mdm_core::forward::{anti_mask_pair, corrupt as corrupt_view, CorruptedSequence};
use mdm_core::sampler::{self, Generation, SamplerConfig};
use mdm_core::scaling::{
    self, compute_optimal, d_star_of_n, iso_curves, iso_flops, Allocation, LawForm, LawParams,
    ScalingPoint,
};
use mdm_core::sde::{self, AdamWTuple, DriftHorizonFit, DriftHorizonPoint, SCritEstimate, SdeBase};
use mdm_core::trainer::{
    self, grad_variance_probe, MixtureSource, RunRecord, ToyCorpus, VarianceReport,
};
use mdm_core::vocab::{Sequence, TaskKind, TokenId, UnifiedVocab};

use crate::artifact::ArtifactSink;
use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Independent random streams derived from the experiment seed.
mod stream {
    pub const CORPUS: u64 = 0;
    pub const CORRUPT: u64 = 1;
    pub const GENERATE: u64 = 2;
    pub const SYNTH: u64 = 3;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

/// Vocabulary, corpus and an initialized model, all from the experiment seed.
struct Setup {
    vocab: UnifiedVocab,
    corpus: ToyCorpus,
    model: ToyTransformer,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let vocab = UnifiedVocab::build(cfg.vocab.sizes)?;
    let mut rng = rng_for(cfg.seed, stream::CORPUS);
    let corpus = ToyCorpus::generate(&vocab, &cfg.corpus, &mut rng)?;
    let model = ToyTransformer::new(
        cfg.model.clone(),
        vocab.clone(),
        &cfg.multipliers.table(),
        &mut rng,
    )?;
    Ok(Setup {
        vocab,
        corpus,
        model,
    })
}

fn all_samples(corpus: &ToyCorpus) -> Vec<Sequence> {
    corpus.pools.iter().flatten().cloned().collect()
}

#[derive(Serialize)]
struct View {
    t: f64,
    masked: Vec<usize>,
    tokens: Vec<TokenId>,
}

impl From<CorruptedSequence> for View {
    fn from(v: CorruptedSequence) -> Self {
        View {
            t: v.t,
            masked: v.masked,
            tokens: v.tokens,
        }
    }
}

#[derive(Serialize)]
struct CorruptRow {
    sequence: usize,
    view: View,
    #[serde(skip_serializing_if = "Option::is_none")]
    complement: Option<View>,
}

#[derive(Serialize)]
struct CorruptReport {
    schedule: String,
    sequences: Vec<Vec<TokenId>>,
    views: Vec<CorruptRow>,
}

pub fn corrupt(
    cfg: &ExperimentConfig,
    input: Option<&Path>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let c = &cfg.corrupt;
    if c.t_grid.is_empty() {
        return Err(CliError::Usage("corrupt.t_grid is empty".into()));
    }
    let (vocab, sequences) = match input {
        Some(path) => {
            let vocab = UnifiedVocab::build(cfg.vocab.sizes)?;
            let raw: Vec<Vec<TokenId>> = serde_json::from_reader(BufReader::new(open(path)?))?;
            let seqs = raw
                .into_iter()
                .map(|t| Sequence::from_tokens(&vocab, t))
                .collect::<mdm_core::Result<Vec<_>>>()
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            (vocab, seqs)
        }
        None => {
            let s = setup(cfg)?;
            let pool = all_samples(&s.corpus);
            let picked = (0..c.count.min(pool.len()))
                .map(|i| pool[i * pool.len() / c.count.max(1)].clone())
                .collect();
            (s.vocab, picked)
        }
    };
    let schedule = &cfg.train.schedule;
    let mut rng = rng_for(cfg.seed, stream::CORRUPT);
    let mut views = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        for &t in &c.t_grid {
            let row = if c.anti_mask {
                let (a, b) = anti_mask_pair(&vocab, seq, t, schedule, &mut rng)?;
                CorruptRow {
                    sequence: i,
                    view: a.into(),
                    complement: Some(b.into()),
                }
            } else {
                CorruptRow {
                    sequence: i,
                    view: corrupt_view(&vocab, seq, t, schedule, &mut rng)?.into(),
                    complement: None,
                }
            };
            views.push(row);
        }
    }
    sink.json(
        "corrupt.json",
        &CorruptReport {
            schedule: schedule.to_string(),
            sequences: sequences.into_iter().map(|s| s.tokens).collect(),
            views,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    record: RunRecord,
    /// Mean batch loss per step.
    losses: Vec<f64>,
}

fn train_once(
    cfg: &ExperimentConfig,
    setup: &Setup,
    anti_mask: bool,
) -> Result<(ToyTransformer, TrainReport), CliError> {
    let source = MixtureSource::new(setup.corpus.clone(), cfg.mixture.clone())?;
    let mut tc = cfg.train_config();
    tc.anti_mask = anti_mask;
    let mut model = setup.model.clone();
    let out = trainer::train(&mut model, &source, &tc)?;
    Ok((
        model,
        TrainReport {
            record: out.record,
            losses: out.losses,
        },
    ))
}

fn write_jsonl(path: &Path, records: &[RunRecord]) -> Result<(), CliError> {
    let _ = std::fs::remove_file(path);
    for r in records {
        trainer::append_jsonl(path, r)?;
    }
    Ok(())
}

pub fn train(
    cfg: &ExperimentConfig,
    log: Option<&Path>,
    tag: Option<String>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let (model, mut report) = train_once(cfg, &s, cfg.train.anti_mask)?;
    report.record.tag = tag;
    let meta = serde_json::json!({
        "provenance": sink.provenance(),
        "l_star": cfg.corpus.l_star,
        "record": report.record,
    });
    let ckpt = sink.path("model.ckpt");
    checkpoint::save(&model, meta, &ckpt)?;
    let runs = sink.path("runs.jsonl");
    write_jsonl(&runs, std::slice::from_ref(&report.record))?;
    sink.json("train.json", &report)?;
    if let Some(log) = log {
        trainer::append_jsonl(log, &report.record)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerateReport {
    task: TaskKind,
    prompt: Vec<TokenId>,
    target_len: usize,
    sampler: SamplerConfig,
    generations: Vec<Generation>,
}

pub fn generate(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    task: TaskKind,
    prompt: &[TokenId],
    target_len: usize,
    count: usize,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    open(ckpt)?;
    let (model, meta) = checkpoint::load(ckpt)?;
    let l_star = meta
        .get("l_star")
        .and_then(serde_json::Value::as_u64)
        .map_or(cfg.corpus.l_star, |v| v as usize);
    let sampler_cfg = cfg
        .sampler
        .clone()
        .unwrap_or_else(|| SamplerConfig::preset(task));
    let vocab = model.vocab.clone();
    let mut rng = rng_for(cfg.seed, stream::GENERATE);
    let mut generations = Vec::with_capacity(count);
    for _ in 0..count {
        let state = sampler::init_masked(&vocab, task, prompt, target_len, l_star)?;
        generations.push(sampler::generate(
            &model,
            &vocab,
            state,
            &sampler_cfg,
            &mut rng,
        )?);
    }
    sink.json(
        "generate.json",
        &GenerateReport {
            task,
            prompt: prompt.to_vec(),
            target_len,
            sampler: sampler_cfg,
            generations,
        },
    )?;
    Ok(())
}

pub fn probe_variance(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let model = match ckpt {
        Some(p) => {
            open(p)?;
            checkpoint::load(p)?.0
        }
        None => s.model,
    };
    let samples = all_samples(&s.corpus);
    let report = grad_variance_probe(&model, &samples, &cfg.probe)?;
    sink.json("probe.json", &ProbeReport::from(report))?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeReport {
    #[serde(flatten)]
    report: VarianceReport,
    anti_significantly_lower: bool,
}

impl From<VarianceReport> for ProbeReport {
    fn from(report: VarianceReport) -> Self {
        ProbeReport {
            anti_significantly_lower: report.anti_significantly_lower(),
            report,
        }
    }
}

#[derive(Serialize)]
struct RescaleReport {
    base: SdeBase,
    d: f64,
    b: f64,
    gamma: f64,
    kappa: f64,
    tuple: AdamWTuple,
}

pub fn sde_rescale(
    cfg: &ExperimentConfig,
    d: Option<f64>,
    b: Option<f64>,
    gamma: Option<f64>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let base = SdeBase {
        d_base: cfg.sde.d_base,
        b_base: cfg.sde.b_base,
        tuple: AdamWTuple::from_hyper(&cfg.train.hyper),
    };
    base.validate()?;
    let d = d.unwrap_or(base.d_base);
    let b = b.unwrap_or(base.b_base);
    let gamma = gamma.unwrap_or(cfg.sde.gamma);
    let kappa = sde::kappa(d, b, &base, gamma)?;
    let tuple = sde::rescale_adamw(&base.tuple, kappa)?;
    println!("{}", serde_json::to_string(&tuple)?);
    sink.json(
        "sde.json",
        &RescaleReport {
            base,
            d,
            b,
            gamma,
            kappa,
            tuple,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct BcritGroup {
    n_nonembed: usize,
    d_tokens: usize,
    seq_len: usize,
    /// `(steps, final loss)` sorted by steps.
    curve: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<SCritEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b_crit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn bcrit_scan(
    cfg: &ExperimentConfig,
    runs: &Path,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    open(runs)?;
    let records = trainer::read_jsonl(runs)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no runs", runs.display())));
    }
    let mut keys: Vec<(usize, usize, usize)> = records
        .iter()
        .map(|r| (r.n_nonembed, r.d_tokens, r.seq_len))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut groups = Vec::with_capacity(keys.len());
    let mut first_err = None;
    for (n, d, l) in keys {
        let mut curve: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| (r.n_nonembed, r.d_tokens, r.seq_len) == (n, d, l))
            .map(|r| (r.steps as f64, r.final_loss))
            .collect();
        curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let found = sde::estimate_s_crit(&curve, cfg.bcrit.delta)
            .and_then(|est| Ok((est, sde::b_crit(d as f64, l as f64, est.s_crit)?)));
        let (estimate, b_crit, error) = match found {
            Ok((est, bc)) => (Some(est), Some(bc), None),
            Err(e) => {
                let msg = e.to_string();
                first_err.get_or_insert(e);
                (None, None, Some(msg))
            }
        };
        groups.push(BcritGroup {
            n_nonembed: n,
            d_tokens: d,
            seq_len: l,
            curve,
            estimate,
            b_crit,
            error,
        });
    }
    if groups.iter().all(|g| g.estimate.is_none()) {
        return Err(first_err.expect("every group failed").into());
    }
    sink.json("bcrit.json", &groups)?;
    Ok(())
}

#[derive(Serialize)]
struct GammaAtHorizon {
    d: f64,
    closed: f64,
    numeric: f64,
    s_tilde: f64,
    b_tilde: f64,
}

#[derive(Serialize)]
struct GammaReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    planted: Option<DriftHorizonFit>,
    fit: DriftHorizonFit,
    objective: f64,
    n_points: usize,
    gamma_closed: f64,
    horizons: Vec<GammaAtHorizon>,
}

#[derive(Deserialize)]
struct DriftRow {
    s_tilde: f64,
    b_tilde: f64,
    loss: f64,
}

fn synth_drift_points(cfg: &ExperimentConfig) -> Result<Vec<DriftHorizonPoint>, CliError> {
    use rand_distr::{Distribution, StandardNormal};
    let g = &cfg.gamma_sweep;
    g.planted.validate()?;
    let mut rng = rng_for(cfg.seed, stream::SYNTH);
    let grid = |lo: f64, hi: f64, k: usize| -> Vec<f64> {
        (0..k)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (k - 1) as f64))
            .collect()
    };
    let mut pts = Vec::new();
    for &s in &grid(2.0, 6.0, 12) {
        for &b in &grid(1.0, 5.0, 12) {
            let z: f64 = StandardNormal.sample(&mut rng);
            pts.push(DriftHorizonPoint {
                s_tilde: s,
                b_tilde: b,
                loss: g.planted.loss(s, b) * (1.0 + g.noise * z),
            });
        }
    }
    Ok(pts)
}

pub fn gamma_sweep(
    cfg: &ExperimentConfig,
    points: Option<&Path>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let g = &cfg.gamma_sweep;
    let (pts, planted) = match points {
        Some(p) => {
            let mut rdr = csv::Reader::from_reader(open(p)?);
            let pts = rdr
                .deserialize::<DriftRow>()
                .map(|r| {
                    r.map(|r| DriftHorizonPoint {
                        s_tilde: r.s_tilde,
                        b_tilde: r.b_tilde,
                        loss: r.loss,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            (pts, None)
        }
        None => (synth_drift_points(cfg)?, Some(g.planted)),
    };
    let (fit, objective) = sde::fit_drift_horizon(&pts, g.restarts, cfg.seed)?;
    let horizons = g
        .d_values
        .iter()
        .map(|&d| {
            let est = sde::gamma_star_numeric(&fit, d, g.seq_len)?;
            Ok(GammaAtHorizon {
                d,
                closed: fit.gamma_star(),
                numeric: est.gamma,
                s_tilde: est.s_tilde,
                b_tilde: est.b_tilde,
            })
        })
        .collect::<mdm_core::Result<Vec<_>>>()?;
    let rows = sde::gamma_sweep(&fit, &g.d_values, g.seq_len, &g.gammas);
    sink.csv("gamma_sweep.csv", |f| write_rows(&rows, f))?;
    if planted.is_some() {
        sink.csv("drift_points.csv", |f| write_rows(&pts, f))?;
    }
    sink.json(
        "gamma.json",
        &GammaReport {
            planted,
            fit,
            objective,
            n_points: pts.len(),
            gamma_closed: fit.gamma_star(),
            horizons,
        },
    )?;
    Ok(())
}

fn write_rows<T: Serialize>(rows: &[T], out: File) -> mdm_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| mdm_core::MdmError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FitReport<'a> {
    source: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted: Option<LawParams>,
    #[serde(flatten)]
    fit: scaling::ScalingFit,
    bootstrap_median: Option<LawParams>,
}

pub fn fit_scaling(
    cfg: &ExperimentConfig,
    input: Option<&Path>,
    runs: Option<&Path>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let planted_cfg = &cfg.scaling.planted;
    let (points, source, planted) = match (input, runs) {
        (Some(p), _) => (scaling::read_points_csv(open(p)?)?, "csv", None),
        (None, Some(p)) => {
            open(p)?;
            let pts = trainer::read_jsonl(p)?
                .iter()
                .map(ScalingPoint::from_record)
                .collect();
            (pts, "runs", None)
        }
        (None, None) => {
            planted_cfg.params.validate()?;
            let mut rng = rng_for(cfg.seed, stream::SYNTH);
            let pts = scaling::planted_points(
                planted_cfg.params,
                planted_cfg.form,
                (planted_cfg.n_range[0], planted_cfg.n_range[1]),
                (planted_cfg.d_range[0], planted_cfg.d_range[1]),
                planted_cfg.points,
                planted_cfg.noise,
                &mut rng,
            );
            (pts, "planted", Some(planted_cfg.params))
        }
    };
    let fit = scaling::fit_power_law(&points, &cfg.scaling.fit)?;
    sink.csv("points.csv", |f| scaling::write_points_csv(&points, f))?;
    sink.json(
        "fit.json",
        &FitReport {
            source,
            planted,
            bootstrap_median: fit.bootstrap_median(),
            fit,
        },
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct FitInput {
    form: LawForm,
    params: LawParams,
}

/// Reads `fit.json`, with or without the artifact envelope.
fn read_fit(path: &Path) -> Result<FitInput, CliError> {
    let v: serde_json::Value = serde_json::from_reader(BufReader::new(open(path)?))?;
    let inner = v.get("result").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct DStarRow {
    n: f64,
    d_star: f64,
}

#[derive(Serialize)]
struct FrontierReport {
    form: LawForm,
    params: LawParams,
    /// `a / b`.
    d_star_exponent: f64,
    /// Least-squares log-log slope of the tabulated frontier.
    d_star_slope: f64,
    /// `b / (a + b)`.
    tau: f64,
    /// Log-log slope of optimal size against budget.
    tau_slope: Option<f64>,
    allocations: Vec<Allocation>,
    d_star: Vec<DStarRow>,
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
fn log_slope(xy: &[(f64, f64)]) -> Option<f64> {
    if xy.len() < 2 {
        return None;
    }
    let n = xy.len() as f64;
    let lx: Vec<f64> = xy.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = xy.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn frontier(
    cfg: &ExperimentConfig,
    fit: Option<&Path>,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let fr = &cfg.frontier;
    let (form, p) = match fit {
        Some(path) => {
            let f = read_fit(path)?;
            (f.form, f.params)
        }
        None => (cfg.scaling.planted.form, cfg.scaling.planted.params),
    };
    p.validate()?;
    fr.flops.validate()?;
    let [lo, hi] = fr.n_range;
    if !(lo > 0.0 && hi > lo && fr.grid >= 2) {
        return Err(CliError::Usage(
            "frontier.n_range needs 0 < lo < hi and grid >= 2".into(),
        ));
    }
    let ns: Vec<f64> = (0..fr.grid)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (fr.grid - 1) as f64).exp())
        .collect();
    let d_star: Vec<DStarRow> = ns
        .iter()
        .map(|&n| DStarRow {
            n,
            d_star: d_star_of_n(form, &p, n),
        })
        .collect();
    let d_star_slope = log_slope(&d_star.iter().map(|r| (r.n, r.d_star)).collect::<Vec<_>>())
        .ok_or_else(|| CliError::Usage("frontier table needs two sizes".into()))?;
    let allocations = fr
        .budgets
        .iter()
        .map(|&c| compute_optimal(form, &p, c, &fr.flops))
        .collect::<mdm_core::Result<Vec<_>>>()?;
    let tau_slope = log_slope(
        &allocations
            .iter()
            .map(|a| (a.budget, a.n))
            .collect::<Vec<_>>(),
    );
    let curves = iso_curves(form, &p, &fr.levels, (lo, hi), fr.grid)?;
    let flops = iso_flops(form, &p, &fr.budgets, &fr.flops, (lo, hi), fr.grid)?;

    sink.csv("d_star.csv", |f| write_rows(&d_star, f))?;
    sink.csv("iso_loss.csv", |f| {
        scaling::frontier::write_iso_curves_csv(&curves, f)
    })?;
    sink.csv("iso_flops.csv", |f| {
        scaling::frontier::write_iso_flops_csv(&flops, f)
    })?;
    sink.json(
        "frontier.json",
        &FrontierReport {
            form,
            params: p,
            d_star_exponent: p.a / p.b,
            d_star_slope,
            tau: p.b / (p.a + p.b),
            tau_slope,
            allocations,
            d_star,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AblateReport {
    iid: TrainReport,
    anti: TrainReport,
    /// Anti-mask final loss minus iid final loss.
    loss_delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    probe: Option<ProbeReport>,
}

pub fn antimask_ablate(
    cfg: &ExperimentConfig,
    probe: bool,
    sink: &mut ArtifactSink,
) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let (_, mut iid) = train_once(cfg, &s, false)?;
    let (_, mut anti) = train_once(cfg, &s, true)?;
    iid.record.tag = Some("iid".into());
    anti.record.tag = Some("anti-mask".into());
    if iid.record.d_tokens != anti.record.d_tokens || iid.record.steps != anti.record.steps {
        return Err(CliError::Data("paired runs are not compute-matched".into()));
    }
    let probe = if probe {
        Some(grad_variance_probe(&s.model, &all_samples(&s.corpus), &cfg.probe)?.into())
    } else {
        None
    };
    let runs = sink.path("runs.jsonl");
    write_jsonl(&runs, &[iid.record.clone(), anti.record.clone()])?;
    sink.json(
        "ablate.json",
        &AblateReport {
            loss_delta: anti.record.final_loss - iid.record.final_loss,
            iid,
            anti,
            probe,
        },
    )?;
    Ok(())
}
