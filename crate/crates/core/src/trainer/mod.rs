//! Source pretraining, adaptation with the combined objective, evaluation
//! and ablation suites.

mod ablation;
mod config;
mod objective;

use serde::{Deserialize, Serialize};

pub use ablation::{
    mean_sd, prepare_seed, ABLATION_COLUMNS, run_ablation, run_cell, run_suite_on, AblationRow, AblationTable, CellResult,
    SeedContext, SeedMetric, Suite, DELTA_GRID, K_GRID, LAMBDA2_GRID, LAMBDA3_GRID,
};
pub use config::{AlignmentMode, TrainConfig};
pub use objective::{
    assign_anchors, compute_objective, pseudo_label, AlignState, Batch, LossComponents, Objective,
    StepCounts,
};

use crate::alignment::DiscriminatorParams;
use crate::detector::{propose_and_detect, DetectorConfig, DetectorParams, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::memory::{MemoryBank, RefreshStatus};
use crate::numerics::{sgd_step, Concern, RngStream};
use crate::par;
use crate::synthgen::{Dataset, SceneSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// Step-averaged losses and summed counts for one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub losses: LossComponents,
    pub counts: StepCounts,
    /// Present on evaluation epochs.
    pub map: Option<f64>,
    pub accuracy: Option<f64>,
    pub memory_refreshed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub records: Vec<EpochRecord>,
}

/// Column order of [`MetricsTrace::to_csv`].
pub const METRICS_COLUMNS: [&str; 15] = [
    "phase",
    "epoch",
    "l_sup",
    "l_unsup",
    "l_fg",
    "l_bg",
    "l_total",
    "map",
    "accuracy",
    "pseudo_labels",
    "fg_pairs",
    "bg_pairs",
    "skipped",
    "memory_refreshed",
    "evaluated",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsTrace {
    /// One row per epoch in [`METRICS_COLUMNS`] order. Floats use the
    /// shortest round-trip form, so equal traces give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = METRICS_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let phase = match r.phase {
                Phase::Pretrain => "pretrain",
                Phase::Adapt => "adapt",
            };
            let l = &r.losses;
            let c = &r.counts;
            out.push_str(&format!(
                "{phase},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                l.sup,
                l.unsup,
                l.fg,
                l.bg,
                l.total,
                opt(r.map),
                opt(r.accuracy),
                c.pseudo_labels,
                c.fg_pairs,
                c.bg_pairs,
                c.skipped,
                r.memory_refreshed,
                r.map.is_some(),
            ));
        }
        out
    }

    pub fn last_eval(&self) -> Option<(f64, f64)> {
        self.records
            .iter()
            .rev()
            .find_map(|r| Some((r.map?, r.accuracy?)))
    }
}

/// Detection report over `scenes` at score threshold `delta`.
pub fn evaluate_detector(scenes: &[SceneSample], params: &DetectorParams, delta: f64) -> Result<EvalReport> {
    let images: Vec<_> = par::map(scenes, |s| {
        propose_and_detect(&s.image, params, delta, DEFAULT_NMS_IOU).map(|d| (d, s.boxes.clone()))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    evaluate(&images, params.config.classes)
}

fn check_finite(losses: &LossComponents, phase: Phase, epoch: usize) -> Result<()> {
    if losses.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            reason: format!("{phase:?} loss is not finite: {losses:?}"),
        })
    }
}

/// Shuffled visiting order; `lane` separates the independent orders drawn
/// in the same epoch.
fn epoch_order(len: usize, config: &TrainConfig, lane: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    RngStream::for_concern(config.seed, Concern::Shuffle, lane << 32 | epoch as u64).shuffle(&mut order);
    order
}

fn add_scaled(acc: &mut LossComponents, l: &LossComponents, f: f64) {
    acc.sup += f * l.sup;
    acc.unsup += f * l.unsup;
    acc.fg += f * l.fg;
    acc.bg += f * l.bg;
    acc.total += f * l.total;
}

fn is_eval_epoch(epoch: usize, total: usize, every: usize) -> bool {
    (epoch + 1).is_multiple_of(every) || epoch + 1 == total
}

/// Fits a freshly initialised detector on the labelled source scenes with
/// the anchor cross-entropy only. Evaluation epochs report source metrics.
pub fn pretrain_source(
    source: &[SceneSample],
    detector: &DetectorConfig,
    config: &TrainConfig,
) -> Result<(DetectorParams, MetricsTrace)> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Precondition("pretraining needs at least one source scene".into()));
    }
    let mut rng = RngStream::for_concern(config.seed, Concern::Init, 0);
    let mut params = DetectorParams::init(detector.clone(), &mut rng)?;
    let sup_only = TrainConfig {
        lambda1: 0.0,
        fg_enabled: false,
        bg_enabled: false,
        ..config.clone()
    };
    let disc = DiscriminatorParams::zeros(params.embed_dim());
    let per_step = config.batch_source + config.batch_target;
    let steps = source.len().div_ceil(per_step);
    let mut trace = MetricsTrace::default();
    let mut state = AlignState::default();
    for epoch in 0..config.pretrain_epochs {
        let order = epoch_order(source.len(), config, 0, epoch);
        let mut acc = LossComponents::default();
        for step in 0..steps {
            let batch = Batch {
                source: order[step * per_step..((step + 1) * per_step).min(order.len())]
                    .iter()
                    .map(|&i| &source[i])
                    .collect(),
                target: Vec::new(),
                step: (epoch * steps + step) as u64,
            };
            let obj = compute_objective(&batch, &mut state, &params, &disc, &sup_only)?;
            check_finite(&obj.losses, Phase::Pretrain, epoch)?;
            add_scaled(&mut acc, &obj.losses, 1.0 / steps as f64);
            sgd_step(&mut params.params, &obj.detector_grads, config.lr, config.momentum)
                .map_err(|e| Error::Training { epoch, reason: e.to_string() })?;
        }
        let (map, accuracy) = if is_eval_epoch(epoch, config.pretrain_epochs, config.eval_every) {
            let r = evaluate_detector(source, &params, config.eval_delta)?;
            (Some(r.map), Some(r.accuracy))
        } else {
            (None, None)
        };
        log::info!("pretrain epoch {epoch}: L_sup {:.4} mAP {map:?}", acc.sup);
        trace.records.push(EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            losses: acc,
            counts: StepCounts::default(),
            map,
            accuracy,
            memory_refreshed: false,
        });
    }
    Ok((params, trace))
}

/// Scenes whose instances populate the memory for `mode`. Provenance
/// strategies also need the unselected family members.
pub fn memory_scenes(data: &Dataset, mode: AlignmentMode) -> Vec<SceneSample> {
    match mode {
        AlignmentMode::Provenance(_) => data.source_and_siblings(),
        _ => data.source.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub params: DetectorParams,
    pub discriminator: DiscriminatorParams,
    pub memory: Option<MemoryBank>,
    pub trace: MetricsTrace,
    pub report: EvalReport,
}

/// Adapts `detector` to the target split.
///
/// `memory` is the full bank built from [`memory_scenes`] with the
/// pretrained weights; when absent and the mode needs one it is built here.
/// The bank is subsampled once per the config and then refreshed every
/// `refresh_interval` epochs over the surviving entries.
pub fn adapt(
    data: &Dataset,
    detector: &DetectorParams,
    memory: Option<&MemoryBank>,
    config: &TrainConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Precondition("adaptation needs source and target scenes".into()));
    }
    let mut params = detector.clone();
    params.params.reset_momentum();
    let mut disc_rng = RngStream::for_concern(config.seed, Concern::Init, 1);
    let mut disc = DiscriminatorParams::init_neutral(params.embed_dim(), &mut disc_rng)?;

    let needs_memory = config.mode.uses_memory() && (config.fg_weight() > 0.0 || config.bg_weight() > 0.0);
    let bank_scenes = if needs_memory {
        memory_scenes(data, config.mode)
    } else {
        Vec::new()
    };
    let mut bank = if needs_memory {
        let full = match memory {
            Some(b) => b.clone(),
            None => MemoryBank::build(&bank_scenes, &params, 0)?.0,
        };
        let mut rng = RngStream::for_concern(config.seed, Concern::Subsample, 0);
        let mut b = full.subsample(config.subsample, config.keep_fg, config.keep_bg, &mut rng)?;
        b.built_at = 0;
        Some(b)
    } else {
        None
    };

    let provenance = matches!(config.mode, AlignmentMode::Provenance(_)).then_some(&data.provenance);
    let mut prototypes = Vec::new();
    let (ns, nt) = (config.batch_source, config.batch_target);
    let steps = data.target.len().div_ceil(nt);
    let lr = config.adapt_lr();
    let mut trace = MetricsTrace::default();
    let mut report = None;
    for epoch in 0..config.adapt_epochs {
        let t_order = epoch_order(data.target.len(), config, 1, epoch);
        let s_order = epoch_order(data.source.len(), config, 2, epoch);
        let mut acc = LossComponents::default();
        let mut counts = StepCounts::default();
        for step in 0..steps {
            let target: Vec<&SceneSample> = t_order[step * nt..((step + 1) * nt).min(t_order.len())]
                .iter()
                .map(|&i| &data.target[i])
                .collect();
            let source: Vec<&SceneSample> = (0..ns)
                .map(|k| &data.source[s_order[(step * ns + k) % s_order.len()]])
                .collect();
            let batch = Batch {
                source,
                target,
                step: (epoch * steps + step) as u64,
            };
            let mut state = AlignState {
                memory: bank.as_ref(),
                provenance,
                prototypes: std::mem::take(&mut prototypes),
            };
            let obj = compute_objective(&batch, &mut state, &params, &disc, config)?;
            prototypes = state.prototypes;
            check_finite(&obj.losses, Phase::Adapt, epoch)?;
            add_scaled(&mut acc, &obj.losses, 1.0 / steps as f64);
            counts += obj.counts;
            let fail = |e: Error| Error::Training { epoch, reason: e.to_string() };
            sgd_step(&mut params.params, &obj.detector_grads, lr, config.momentum).map_err(fail)?;
            if config.bg_weight() > 0.0 {
                sgd_step(&mut disc.params, &obj.disc_grads, lr, config.momentum).map_err(fail)?;
            }
        }
        let mut refreshed = false;
        if let Some(b) = bank.as_mut() {
            let status = b.refresh(&bank_scenes, &params, epoch as u64 + 1, config.refresh_interval)?;
            refreshed = status == RefreshStatus::Refreshed;
        }
        let (map, accuracy) = if is_eval_epoch(epoch, config.adapt_epochs, config.eval_every) {
            let r = evaluate_detector(&data.target, &params, config.eval_delta)?;
            let out = (Some(r.map), Some(r.accuracy));
            report = Some(r);
            out
        } else {
            (None, None)
        };
        log::info!(
            "adapt epoch {epoch}: total {:.4} sup {:.4} unsup {:.4} fg {:.4} bg {:.4} mAP {map:?}",
            acc.total,
            acc.sup,
            acc.unsup,
            acc.fg,
            acc.bg
        );
        trace.records.push(EpochRecord {
            phase: Phase::Adapt,
            epoch,
            losses: acc,
            counts,
            map,
            accuracy,
            memory_refreshed: refreshed,
        });
    }
    let report = match report {
        Some(r) => r,
        None => evaluate_detector(&data.target, &params, config.eval_delta)?,
    };
    Ok(AdaptOutcome {
        params,
        discriminator: disc,
        memory: bank,
        trace,
        report,
    })
}
