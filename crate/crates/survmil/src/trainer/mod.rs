//! End-to-end composition and the training / evaluation drivers.
//!
//! One slide flows gate -> cluster -> attend -> pool -> mixture head on a
//! single tape; training is batch-size-1 Adam with global-norm clipping and
//! per-epoch shuffling. Everything is seeded, so a (config, manifest, seed)
//! triple reproduces checkpoints and metrics bit for bit.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::config::PipelineConfig;
use crate::dataio::{kfold_split, load_bag, CohortManifest, PatchBag};
use crate::edmll::{SurvivalCurve, SurvivalHead};
use crate::error::{Error, Result};
use crate::ggc;
use crate::hca::{self, AttentionPool, AttnMode, MhsaLayer};
use crate::metrics::{
    self, kaplan_meier, logrank, stratify_median, td_concordance, KmCurve, LogRankResult,
    Stratification, SurvivalRecord, TdcResult,
};
use crate::qgps::{select_patches, GateResult, PatchScorer};
use crate::tensor::{clip_global_norm, AdamState, NodeId, ParamSet, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::Write;
use std::time::Instant;

const GRAD_CLIP_NORM: f64 = 5.0;

/// All learnable stages plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: PipelineConfig,
    pub feature_dim: usize,
    pub params: ParamSet,
    pub scorer: PatchScorer,
    pub intra: MhsaLayer,
    pub inter: MhsaLayer,
    pub pool: AttentionPool,
    pub head: SurvivalHead,
}

impl Model {
    /// Registers every stage's parameters under the config seed. The
    /// registration order is fixed; it determines checkpoint layout.
    pub fn new(config: &PipelineConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Contract("feature_dim must be >= 1".into()));
        }
        if !feature_dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "feature width {feature_dim} is not divisible by heads={}",
                config.heads
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let scorer = PatchScorer::register(&mut params, &mut rng, feature_dim, config.scorer_hidden);
        let intra = MhsaLayer::register(&mut params, &mut rng, "intra", feature_dim, config.heads)?;
        let inter = MhsaLayer::register(&mut params, &mut rng, "inter", feature_dim, config.heads)?;
        let pool = AttentionPool::register(&mut params, &mut rng, feature_dim, config.attn_hidden);
        let head = SurvivalHead::register(
            &mut params,
            &mut rng,
            feature_dim,
            config.experts,
            config.components,
        )?;
        Ok(Model {
            config: config.clone(),
            feature_dim,
            params,
            scorer,
            intra,
            inter,
            pool,
            head,
        })
    }
}

/// Everything `forward_slide` produced: the tape (so a loss can be appended),
/// the slide embedding, and the forward-only stage decisions.
pub struct SlideForward {
    pub tape: Tape,
    pub z: NodeId,
    pub gate: Option<GateResult>,
    pub clusters: Option<ggc::ClusterAssignment>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Runs the full pipeline for one bag. `dropout_rng` enables training-mode
/// dropout; pass `None` for evaluation. Clustering is seeded from the config
/// seed and the slide id, so it is stable across epochs and after reload.
pub fn forward_slide(
    model: &Model,
    bag: &PatchBag,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<SlideForward> {
    if bag.d != model.feature_dim {
        return Err(Error::DimMismatch {
            op: "forward_slide",
            left: vec![bag.n, bag.d],
            right: vec![bag.n, model.feature_dim],
        });
    }
    let cfg = &model.config;
    let mut tape = Tape::new();
    let mut mode = match dropout_rng {
        Some(rng) => AttnMode::Train {
            rate: cfg.dropout,
            rng,
        },
        None => AttnMode::Eval,
    };
    let x = tape.constant(bag.n, bag.d, bag.features.clone())?;

    // stage 1: quantile gate (hard selection; the scorer's logits pick the
    // survivors but the surviving features pass through unchanged)
    let gate = if cfg.disable_qgps {
        None
    } else {
        let logits = model.scorer.score_patches(&mut tape, &model.params, x)?;
        let gate = select_patches(tape.value(logits), cfg.quantile)?;
        Some(gate)
    };
    let selected: Vec<usize> = match &gate {
        Some(g) => g.selected.clone(),
        None => (0..bag.n).collect(),
    };
    let remaining: Vec<usize> = match &gate {
        Some(g) => g.remaining.clone(),
        None => Vec::new(),
    };

    // stages 2-3: cluster, attend, reassemble
    let (p_final, clusters) = if cfg.disable_ggc_hca {
        (x, None)
    } else {
        let m = selected.len();
        let feats: Vec<f64> = selected
            .iter()
            .flat_map(|&i| bag.feature_row(i).to_vec())
            .collect();
        let coords: Vec<f64> = selected
            .iter()
            .flat_map(|&i| bag.coords[i * 2..i * 2 + 2].to_vec())
            .collect();
        let s_morph = ggc::cosine_similarity(&feats, m, bag.d);
        let (s_spatial, sigma_d) = ggc::spatial_similarity(&coords, m);
        let sim = ggc::composite_similarity(
            &s_morph,
            &s_spatial,
            m,
            cfg.omega_morph,
            cfg.omega_spatial,
            sigma_d,
        )?;
        let k_eff = cfg.knn_k.min(m - 1);
        let graph = ggc::build_knn_graph(&sim, k_eff)?;
        let smoothed = ggc::graph_smooth(&feats, m, bag.d, &graph);
        let kmeans_seed = cfg.seed ^ fnv1a(&bag.slide_id);
        let assignment = ggc::balanced_kmeans(&smoothed, m, bag.d, cfg.group_size, kmeans_seed)?;

        let x_sel = tape.gather_rows(x, &selected)?;
        let cluster_nodes: Vec<NodeId> = assignment
            .members()
            .iter()
            .map(|idx| tape.gather_rows(x_sel, idx))
            .collect::<Result<_>>()?;
        let refined = hca::intra_cluster_attend(
            &mut tape,
            &model.params,
            &model.intra,
            &cluster_nodes,
            &mut mode,
        )?;
        let summary = hca::summarize_clusters(&mut tape, &refined)?;
        let global = model
            .inter
            .apply(&mut tape, &model.params, summary, &mut mode)?;
        let p_tilde = tape.concat_rows(&refined)?;
        let p_hat = hca::broadcast_residual(&mut tape, p_tilde, global)?;
        let rem_node = if remaining.is_empty() {
            None
        } else {
            Some(tape.gather_rows(x, &remaining)?)
        };
        (hca::assemble_final(&mut tape, p_hat, rem_node)?, Some(assignment))
    };

    // stage 4: pooled slide embedding
    let (z, _alpha) = model
        .pool
        .apply(&mut tape, &model.params, p_final, &mut mode)?;

    Ok(SlideForward {
        tape,
        z,
        gate,
        clusters,
    })
}

/// Frozen survival curve for one bag (evaluation mode).
pub fn predict_curve(model: &Model, bag: &PatchBag) -> Result<SurvivalCurve> {
    let fwd = forward_slide(model, bag, None)?;
    let z = fwd.tape.value(fwd.z).to_vec();
    model.head.curve(&model.params, &z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u128,
}

/// A trained model plus its provenance.
pub struct Trained {
    pub model: Model,
    pub epoch_logs: Vec<EpochLog>,
    pub train_rng: ChaCha12Rng,
}

fn median_event_time(bags: &[PatchBag]) -> f64 {
    let mut events: Vec<f64> = bags
        .iter()
        .filter(|b| b.censor == 1)
        .map(|b| b.time)
        .collect();
    if events.is_empty() {
        events = bags.iter().map(|b| b.time).collect();
    }
    events.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    events[events.len() / 2]
}

/// Trains a fresh model on a manifest. Bags are loaded up front; the time
/// normalization constant is the training-set median event time. Emits one
/// JSON line per epoch to `log_sink` when given.
pub fn train(
    config: &PipelineConfig,
    manifest: &CohortManifest,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<Trained> {
    if manifest.entries.is_empty() {
        return Err(Error::Insufficient("training manifest is empty".into()));
    }
    let bags: Vec<PatchBag> = manifest
        .entries
        .iter()
        .map(|e| {
            load_bag(e).map_err(|err| {
                Error::Contract(format!("slide {}: {err}", e.slide_id))
            })
        })
        .collect::<Result<_>>()?;
    let feature_dim = bags[0].d;
    for b in &bags {
        if b.d != feature_dim {
            return Err(Error::Contract(format!(
                "slide {}: feature width {} differs from cohort width {feature_dim}",
                b.slide_id, b.d
            )));
        }
    }
    let mut model = Model::new(config, feature_dim)?;
    model.head.set_time_scale(median_event_time(&bags))?;

    let mut adam = AdamState::new(&model.params, config.learning_rate, config.weight_decay);
    // distinct stream from parameter init
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x7261696e));
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut epoch_logs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let bag = &bags[i];
            let mut fwd = forward_slide(&model, bag, Some(&mut rng)).map_err(|err| {
                Error::Contract(format!("slide {}: {err}", bag.slide_id))
            })?;
            let loss = model.head.total_loss(
                &mut fwd.tape,
                &model.params,
                fwd.z,
                bag.time,
                bag.censor,
                config.lambda_ent,
                config.entropy_sign,
            )?;
            loss_sum += fwd.tape.scalar_value(loss);
            fwd.tape.backward(loss, &mut model.params)?;
            clip_global_norm(&mut model.params, GRAD_CLIP_NORM);
            adam.step(&mut model.params);
            model.params.zero_grads();
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / bags.len() as f64,
            wall_ms: started.elapsed().as_millis(),
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::json!({
                "epoch": log.epoch,
                "mean_loss": log.mean_loss,
                "wall_ms": log.wall_ms as u64,
            });
            writeln!(sink, "{line}").map_err(|e| Error::io("train log", e))?;
        }
        epoch_logs.push(log);
    }

    Ok(Trained {
        model,
        epoch_logs,
        train_rng: rng,
    })
}

/// Per-slide evaluation output.
#[derive(Debug, Clone)]
pub struct SlideEval {
    pub slide_id: String,
    pub time: f64,
    pub censor: u8,
    pub predicted_median: f64,
    pub risk_score: f64,
}

/// Cohort-level evaluation: concordance, median-split Kaplan-Meier curves,
/// and the log-rank separation between the risk groups.
#[derive(Debug, Clone)]
pub struct CohortMetrics {
    pub tdc: TdcResult,
    pub slides: Vec<SlideEval>,
    pub stratification: Option<Stratification>,
    pub km_high: Option<KmCurve>,
    pub km_low: Option<KmCurve>,
    pub logrank: Option<LogRankResult>,
}

impl CohortMetrics {
    /// Canonical multi-line report; floats at fixed precision so reruns are
    /// byte-identical.
    pub fn report(&self) -> String {
        let mut out = String::new();
        match self.tdc.value {
            Some(v) => out.push_str(&format!(
                "TDC {:.6} over {} comparable pairs\n",
                v, self.tdc.comparable_pairs
            )),
            None => out.push_str("TDC undefined: insufficient comparable pairs\n"),
        }
        match (&self.stratification, &self.logrank) {
            (Some(s), Some(lr)) => {
                out.push_str(&format!(
                    "risk split high={} low={}{}\n",
                    s.high.len(),
                    s.low.len(),
                    if s.degenerate { " (degenerate)" } else { "" }
                ));
                out.push_str(&format!(
                    "logrank chi2 {:.6} p {:.6}\n",
                    lr.statistic, lr.p_value
                ));
            }
            (Some(s), None) => {
                out.push_str(&format!(
                    "risk split high={} low={} logrank undefined\n",
                    s.high.len(),
                    s.low.len()
                ));
            }
            _ => out.push_str("risk split unavailable\n"),
        }
        out
    }
}

/// Evaluates a model on a manifest: predicts a curve per slide, computes
/// time-dependent concordance, then stratifies at the median risk and runs
/// the log-rank test between the groups.
pub fn evaluate(model: &Model, manifest: &CohortManifest) -> Result<CohortMetrics> {
    if manifest.entries.is_empty() {
        return Err(Error::Insufficient("evaluation manifest is empty".into()));
    }
    let mut curves = Vec::with_capacity(manifest.entries.len());
    let mut slides = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let bag = load_bag(entry)
            .map_err(|err| Error::Contract(format!("slide {}: {err}", entry.slide_id)))?;
        let curve = predict_curve(model, &bag)
            .map_err(|err| Error::Contract(format!("slide {}: {err}", entry.slide_id)))?;
        let median = curve.predicted_median()?;
        slides.push(SlideEval {
            slide_id: entry.slide_id.clone(),
            time: entry.time,
            censor: entry.censor,
            predicted_median: median,
            risk_score: -median,
        });
        curves.push(curve);
    }

    let times: Vec<f64> = slides.iter().map(|s| s.time).collect();
    let censors: Vec<u8> = slides.iter().map(|s| s.censor).collect();
    let tdc = td_concordance(&times, &censors, |j, t| {
        curves[j].spf(t).expect("times are positive")
    });

    let (stratification, km_high, km_low, lr) = if slides.len() >= 2 {
        let risks: Vec<f64> = slides.iter().map(|s| s.risk_score).collect();
        let strat = stratify_median(&risks)?;
        let record = |idx: &[usize]| -> Vec<SurvivalRecord> {
            idx.iter()
                .map(|&i| SurvivalRecord {
                    time: slides[i].time,
                    censor: slides[i].censor,
                    risk_score: slides[i].risk_score,
                })
                .collect()
        };
        let high = record(&strat.high);
        let low = record(&strat.low);
        let km_high = if high.is_empty() { None } else { Some(kaplan_meier(&high)?) };
        let km_low = if low.is_empty() { None } else { Some(kaplan_meier(&low)?) };
        let lr = if high.is_empty() || low.is_empty() {
            None
        } else {
            logrank(&high, &low)?
        };
        (Some(strat), km_high, km_low, lr)
    } else {
        (None, None, None, None)
    };

    Ok(CohortMetrics {
        tdc,
        slides,
        stratification,
        km_high,
        km_low,
        logrank: lr,
    })
}

/// One fold's outcome within cross-validation.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: CohortMetrics,
}

/// Cross-validation summary: per-fold metrics plus the aggregate TDC.
#[derive(Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub tdc_mean: f64,
    pub tdc_std: f64,
    /// Log-rank over the pooled out-of-fold risk predictions.
    pub pooled_logrank: Option<LogRankResult>,
    pub pooled_slides: Vec<SlideEval>,
}

impl CvOutcome {
    pub fn report(&self) -> String {
        let mut out = String::new();
        for f in &self.folds {
            match f.metrics.tdc.value {
                Some(v) => out.push_str(&format!(
                    "fold {} TDC {:.6} (n_test={})\n",
                    f.fold,
                    v,
                    f.metrics.slides.len()
                )),
                None => out.push_str(&format!("fold {} TDC undefined\n", f.fold)),
            }
        }
        out.push_str(&format!("TDC {:.3} \u{00b1} {:.3}\n", self.tdc_mean, self.tdc_std));
        if let Some(lr) = &self.pooled_logrank {
            out.push_str(&format!(
                "pooled logrank chi2 {:.6} p {:.6}\n",
                lr.statistic, lr.p_value
            ));
        }
        out
    }
}

/// K-fold cross-validation. Fold f trains with seed `seed + f` on the fold
/// complement; folds run on `jobs` worker threads and results are collected
/// by fold index, so the outcome is independent of scheduling.
pub fn cross_validate(config: &PipelineConfig, manifest: &CohortManifest) -> Result<CvOutcome> {
    let folds = kfold_split(manifest, config.folds, config.seed)?;
    let jobs = config.jobs.max(1).min(folds.len());
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..folds.len()).map(|_| None).collect();

    if jobs == 1 {
        for (f, (train_m, test_m)) in folds.iter().enumerate() {
            results[f] = Some(run_fold(config, f, train_m, test_m));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<FoldOutcome>>>> =
            (0..folds.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let f = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if f >= folds.len() {
                        break;
                    }
                    let (train_m, test_m) = &folds[f];
                    let out = run_fold(config, f, train_m, test_m);
                    *slots[f].lock().expect("fold slot") = Some(out);
                });
            }
        });
        for (f, slot) in slots.into_iter().enumerate() {
            results[f] = slot.into_inner().expect("fold slot");
        }
    }

    let mut outcomes = Vec::with_capacity(folds.len());
    for r in results {
        outcomes.push(r.expect("fold ran")?);
    }

    let values: Vec<f64> = outcomes
        .iter()
        .filter_map(|f| f.metrics.tdc.value)
        .collect();
    if values.is_empty() {
        return Err(Error::Insufficient("no fold produced a defined TDC".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / values.len() as f64)
        .sqrt();

    // pooled out-of-fold stratification
    let mut pooled: Vec<SlideEval> = outcomes
        .iter()
        .flat_map(|f| f.metrics.slides.clone())
        .collect();
    pooled.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let pooled_logrank = if pooled.len() >= 2 {
        let risks: Vec<f64> = pooled.iter().map(|s| s.risk_score).collect();
        let strat = stratify_median(&risks)?;
        let rec = |idx: &[usize]| -> Vec<SurvivalRecord> {
            idx.iter()
                .map(|&i| SurvivalRecord {
                    time: pooled[i].time,
                    censor: pooled[i].censor,
                    risk_score: pooled[i].risk_score,
                })
                .collect()
        };
        if strat.high.is_empty() || strat.low.is_empty() {
            None
        } else {
            logrank(&rec(&strat.high), &rec(&strat.low))?
        }
    } else {
        None
    };

    Ok(CvOutcome {
        folds: outcomes,
        tdc_mean: mean,
        tdc_std: std,
        pooled_logrank,
        pooled_slides: pooled,
    })
}

fn run_fold(
    config: &PipelineConfig,
    fold: usize,
    train_m: &CohortManifest,
    test_m: &CohortManifest,
) -> Result<FoldOutcome> {
    let mut fold_config = config.clone();
    fold_config.seed = config.seed.wrapping_add(fold as u64);
    let trained = train(&fold_config, train_m, None)?;
    let metrics = evaluate(&trained.model, test_m)?;
    Ok(FoldOutcome { fold, metrics })
}

/// Reference TDC for a cohort evaluated by brute-force pair enumeration;
/// test-suite hook kept beside the production path it checks.
pub fn evaluate_tdc_reference(model: &Model, manifest: &CohortManifest) -> Result<TdcResult> {
    let mut curves = Vec::new();
    let mut times = Vec::new();
    let mut censors = Vec::new();
    for entry in &manifest.entries {
        let bag = load_bag(entry)?;
        curves.push(predict_curve(model, &bag)?);
        times.push(entry.time);
        censors.push(entry.censor);
    }
    Ok(metrics::reference::brute_force_tdc(&times, &censors, |j, t| {
        curves[j].spf(t).expect("times are positive")
    }))
}
