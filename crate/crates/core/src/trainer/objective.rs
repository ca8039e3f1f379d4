//! One optimisation step over a mixed source/target batch.
//!
//! The step runs in three phases: a per-scene forward pass (parallel over
//! scenes), a serial phase that builds alignment pairs and evaluates the
//! batch-level losses, and a per-scene backward pass whose gradient sets are
//! summed in batch order.

use serde::{Deserialize, Serialize};

use crate::alignment::{loss_bg, loss_fg, DiscriminatorParams};
use crate::detector::{
    background_backward, background_forward, detect_from_scores, extract_backward,
    extract_features_cached, roi_backward, roi_forward, AnchorScores, Detection, DetectorParams,
    ExtractCache, FeatureMap, HeadOutput, DEFAULT_NMS_IOU,
};
use crate::error::{Error, Result};
use crate::eval::{iou_geom, EVAL_IOU};
use crate::memory::{normalized, MemoryBank};
use crate::numerics::{accumulate, norm, softmax, softmax_cross_entropy, Concern, GradSet, RngStream, Tensor};
use crate::par;
use crate::retrieval::{
    cosine, retrieve_bg_positive, retrieve_by_strategy, retrieve_topk, sample_negatives, AlignmentPair,
};
use crate::synthgen::{AnnotatedBox, BoxGeom, ProvenanceIndex, SceneSample};

use super::config::{AlignmentMode, TrainConfig};

/// Scenes of one step. `step` is the global step index and keys the
/// per-step random streams.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub source: Vec<&'a SceneSample>,
    pub target: Vec<&'a SceneSample>,
    pub step: u64,
}

/// Unweighted components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup: f64,
    pub unsup: f64,
    pub fg: f64,
    pub bg: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.sup, self.unsup, self.fg, self.bg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub pseudo_labels: usize,
    pub fg_pairs: usize,
    pub bg_pairs: usize,
    /// Target instances or images for which no partner was available.
    pub skipped: usize,
}

impl std::ops::AddAssign for StepCounts {
    fn add_assign(&mut self, o: Self) {
        self.pseudo_labels += o.pseudo_labels;
        self.fg_pairs += o.fg_pairs;
        self.bg_pairs += o.bg_pairs;
        self.skipped += o.skipped;
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub losses: LossComponents,
    pub counts: StepCounts,
    pub detector_grads: GradSet,
    /// Gradient of the unweighted `L_bg`; the background weight only scales
    /// the reversed gradient that reaches the detector.
    pub disc_grads: GradSet,
}

/// Cross-step alignment inputs: the memory bank, the provenance graph for
/// oracle strategies, and the running class prototypes.
#[derive(Clone, Debug, Default)]
pub struct AlignState<'a> {
    pub memory: Option<&'a MemoryBank>,
    pub provenance: Option<&'a ProvenanceIndex>,
    pub prototypes: Vec<Option<Vec<f64>>>,
}

/// Per-anchor max-IoU assignment: `Some(class)` when the best box reaches
/// the matching threshold, otherwise `None`.
pub fn assign_anchors(anchors: &[BoxGeom], boxes: &[(BoxGeom, usize)]) -> Vec<Option<usize>> {
    anchors
        .iter()
        .map(|a| {
            let mut best: Option<(f64, usize)> = None;
            for (b, c) in boxes {
                let v = iou_geom(a, b);
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, *c));
                }
            }
            best.filter(|(v, _)| *v >= EVAL_IOU).map(|(_, c)| c)
        })
        .collect()
}

/// Every positive anchor plus `neg_ratio` sampled negatives per positive
/// (at least `neg_ratio` when there is no positive), in anchor order.
fn select_rows(
    assignment: &[Option<usize>],
    negative_ok: impl Fn(usize) -> bool,
    background: usize,
    neg_ratio: usize,
    rng: &mut RngStream,
) -> Vec<(usize, usize)> {
    let positives: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|c| (i, c)))
        .collect();
    let pool: Vec<usize> = (0..assignment.len())
        .filter(|&i| assignment[i].is_none() && negative_ok(i))
        .collect();
    let wanted = neg_ratio * positives.len().max(1);
    let mut picked: Vec<usize> = rng
        .sample_indices(pool.len(), wanted)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    let mut rows: Vec<(usize, usize)> = positives;
    rows.extend(picked.into_iter().map(|i| (i, background)));
    rows.sort_unstable();
    rows
}

/// Mean cross-entropy over `labels` and `∂/∂logits` scaled by `weight`.
fn mean_cross_entropy(logits: &Tensor, labels: &[Option<usize>], weight: f64) -> Result<(f64, Tensor)> {
    let cols = logits.shape()[1];
    let n = labels.iter().filter(|l| l.is_some()).count();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, Tensor::matrix(labels.len(), cols, grad)?));
    }
    let mut loss = 0.0;
    for (r, label) in labels.iter().enumerate() {
        if let Some(c) = label {
            let (l, g) = softmax_cross_entropy(logits.row(r), *c)?;
            loss += l / n as f64;
            for (d, v) in grad[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                *d = weight * v / n as f64;
            }
        }
    }
    Ok((loss, Tensor::matrix(labels.len(), cols, grad)?))
}

fn anchor_rng(config: &TrainConfig, step: u64, slot: usize) -> RngStream {
    RngStream::for_concern(config.seed, Concern::Anchors, step * 64 + slot as u64)
}

#[derive(Clone, Debug)]
struct Instance {
    g: Vec<f64>,
    class_id: usize,
    uid: u64,
}

struct SourcePass {
    fmap: FeatureMap,
    cache: ExtractCache,
    rows: Vec<BoxGeom>,
    labels: Vec<Option<usize>>,
    head: HeadOutput,
    instances: Vec<Instance>,
    bg: Option<Vec<f64>>,
}

fn source_pass(
    scene: &SceneSample,
    params: &DetectorParams,
    config: &TrainConfig,
    rng: &mut RngStream,
    want_instances: bool,
    want_bg: bool,
) -> Result<SourcePass> {
    let (fmap, cache) = extract_features_cached(&scene.image, params)?;
    let anchors = params.config.anchors.anchors(scene.width(), scene.height());
    let gts: Vec<(BoxGeom, usize)> = scene.boxes.iter().map(|b| (b.geom(), b.class_id)).collect();
    let selected = select_rows(
        &assign_anchors(&anchors, &gts),
        |_| true,
        params.config.background_class(),
        config.neg_ratio,
        rng,
    );
    let rows: Vec<BoxGeom> = selected.iter().map(|&(i, _)| anchors[i]).collect();
    let labels = selected.iter().map(|&(_, c)| Some(c)).collect();
    let head = roi_forward(&fmap, &rows, params)?;
    let instances = if want_instances && !scene.boxes.is_empty() {
        let geoms: Vec<BoxGeom> = scene.boxes.iter().map(|b| b.geom()).collect();
        let out = roi_forward(&fmap, &geoms, params)?;
        scene
            .boxes
            .iter()
            .enumerate()
            .map(|(k, b)| Instance {
                g: out.g.row(k).to_vec(),
                class_id: b.class_id,
                uid: b.object_uid,
            })
            .collect()
    } else {
        Vec::new()
    };
    let bg = if want_bg {
        let geoms: Vec<BoxGeom> = scene.boxes.iter().map(|b| b.geom()).collect();
        Some(background_forward(&fmap, &geoms, params)?.g.row(0).to_vec())
    } else {
        None
    };
    Ok(SourcePass {
        fmap,
        cache,
        rows,
        labels,
        head,
        instances,
        bg,
    })
}

struct TargetPass {
    fmap: FeatureMap,
    cache: ExtractCache,
    pseudo: Vec<Detection>,
    rows: Vec<BoxGeom>,
    /// Unsupervised label per row; `None` for rows kept only for alignment.
    labels: Vec<Option<usize>>,
    head: Option<HeadOutput>,
    /// Row of `head` holding each pseudo-labelled detection.
    det_rows: Vec<usize>,
    bg_boxes: Vec<BoxGeom>,
    bg_head: Option<HeadOutput>,
}

fn target_pass(
    scene: &SceneSample,
    params: &DetectorParams,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TargetPass> {
    let classes = params.config.classes;
    let (fmap, cache) = extract_features_cached(&scene.image, params)?;
    let anchors = params.config.anchors.anchors(scene.width(), scene.height());
    let all = roi_forward(&fmap, &anchors, params)?;
    let probs: Vec<Vec<f64>> = (0..anchors.len()).map(|i| softmax(all.logits.row(i))).collect();
    let predicted_bg: Vec<bool> = probs
        .iter()
        .map(|p| {
            let best = p.iter().enumerate().fold(0, |b, (k, &v)| if v > p[b] { k } else { b });
            best == classes
        })
        .collect();
    let scores = AnchorScores { anchors, probs };
    let pseudo = detect_from_scores(&scores, classes, config.delta, DEFAULT_NMS_IOU);
    let anchors = scores.anchors;

    let pseudo_boxes: Vec<(BoxGeom, usize)> = pseudo.iter().map(|d| (d.geom, d.class_id)).collect();
    let mut selected: Vec<(usize, Option<usize>)> = if config.lambda1 > 0.0 {
        select_rows(
            &assign_anchors(&anchors, &pseudo_boxes),
            |i| predicted_bg[i],
            params.config.background_class(),
            config.neg_ratio,
            rng,
        )
        .into_iter()
        .map(|(i, c)| (i, Some(c)))
        .collect()
    } else {
        Vec::new()
    };
    let det_anchor: Vec<usize> = pseudo
        .iter()
        .map(|d| anchors.iter().position(|a| *a == d.geom).expect("detections sit on anchors"))
        .collect();
    if config.fg_weight() > 0.0 {
        for &i in &det_anchor {
            if !selected.iter().any(|&(j, _)| j == i) {
                selected.push((i, None));
            }
        }
        selected.sort_unstable_by_key(|&(i, _)| i);
    }
    let rows: Vec<BoxGeom> = selected.iter().map(|&(i, _)| anchors[i]).collect();
    let labels: Vec<Option<usize>> = selected.iter().map(|&(_, c)| c).collect();
    let det_rows = det_anchor
        .iter()
        .map(|&i| selected.iter().position(|&(j, _)| j == i).unwrap_or(usize::MAX))
        .collect();
    let head = if rows.is_empty() {
        None
    } else {
        Some(roi_forward(&fmap, &rows, params)?)
    };
    let bg_boxes: Vec<BoxGeom> = pseudo.iter().map(|d| d.geom).collect();
    let bg_head = if config.bg_weight() > 0.0 {
        Some(background_forward(&fmap, &bg_boxes, params)?)
    } else {
        None
    };
    Ok(TargetPass {
        fmap,
        cache,
        pseudo,
        rows,
        labels,
        head,
        det_rows,
        bg_boxes,
        bg_head,
    })
}

/// Target object behind a detection, by best IoU with the ground truth.
fn matched_object(det: &Detection, gts: &[AnnotatedBox]) -> Option<u64> {
    gts.iter()
        .map(|g| (iou_geom(&det.geom, &g.geom()), g.object_uid))
        .filter(|(v, _)| *v >= EVAL_IOU)
        .fold(None, |best: Option<(f64, u64)>, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, uid)| uid)
}

fn draw_from(pool: &[&Instance], m: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..m).map(|_| pool[rng.index(pool.len())].g.clone()).collect()
}

/// Most similar instance, lowest uid on ties.
fn nearest<'a>(query: &[f64], pool: &[&'a Instance]) -> Option<&'a Instance> {
    let mut best: Option<(&Instance, f64)> = None;
    for &e in pool {
        let s = cosine(query, &e.g);
        if best.is_none_or(|(b, bs)| s > bs || (s == bs && e.uid < b.uid)) {
            best = Some((e, s));
        }
    }
    best.map(|(e, _)| e)
}

/// Partners for one target instance; empty when none is available.
#[allow(clippy::too_many_arguments)]
fn partner_pairs(
    g_t: &[f64],
    det: &Detection,
    scene: &SceneSample,
    batch_instances: &[&Instance],
    state: &AlignState,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<AlignmentPair>> {
    let c = det.class_id;
    let m = config.negatives;
    let mode = config.mode;
    let tag = mode.to_string();
    let memory = || {
        state
            .memory
            .ok_or_else(|| Error::Precondition(format!("alignment mode {mode} needs a memory bank")))
    };
    let pairs = match mode {
        AlignmentMode::MemorySimilar => {
            let bank = memory()?;
            match retrieve_topk(g_t, c, bank, config.top_k) {
                Ok(hits) => hits
                    .into_iter()
                    .map(|(e, _)| {
                        let negs = sample_negatives(c, bank, rng, m);
                        AlignmentPair::new(g_t.to_vec(), e.g.clone(), negs, e.object_uid, &tag)
                    })
                    .collect(),
                Err(Error::ClassUnavailable(_)) => Vec::new(),
                Err(e) => return Err(e),
            }
        }
        AlignmentMode::Provenance(strategy) => {
            let bank = memory()?;
            let index = state
                .provenance
                .ok_or_else(|| Error::Precondition("provenance mode needs the provenance index".into()))?;
            match matched_object(det, &scene.boxes) {
                Some(uid) => {
                    let e = retrieve_by_strategy(uid, index, bank, strategy)?;
                    let negs = sample_negatives(c, bank, rng, m);
                    vec![AlignmentPair::new(g_t.to_vec(), e.g.clone(), negs, e.object_uid, &tag)]
                }
                None => Vec::new(),
            }
        }
        AlignmentMode::BatchC2c => {
            let same: Vec<&Instance> = batch_instances.iter().copied().filter(|e| e.class_id == c).collect();
            let other: Vec<&Instance> = batch_instances.iter().copied().filter(|e| e.class_id != c).collect();
            match nearest(g_t, &same) {
                Some(p) => {
                    let negs = draw_from(&other, m, rng);
                    vec![AlignmentPair::new(g_t.to_vec(), p.g.clone(), negs, p.uid, &tag)]
                }
                None => Vec::new(),
            }
        }
        AlignmentMode::CategoryAgnostic => match nearest(g_t, batch_instances) {
            Some(p) => {
                let rest: Vec<&Instance> = batch_instances.iter().copied().filter(|e| e.uid != p.uid).collect();
                let negs = draw_from(&rest, m, rng);
                vec![AlignmentPair::new(g_t.to_vec(), p.g.clone(), negs, p.uid, &tag)]
            }
            None => Vec::new(),
        },
        AlignmentMode::Prototype => match state.prototypes.get(c).and_then(|p| p.as_ref()) {
            Some(p) => {
                let others: Vec<&Vec<f64>> = state
                    .prototypes
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != c)
                    .filter_map(|(_, p)| p.as_ref())
                    .collect();
                let negs = if others.is_empty() {
                    Vec::new()
                } else {
                    (0..m).map(|_| others[rng.index(others.len())].clone()).collect()
                };
                vec![AlignmentPair::new(g_t.to_vec(), p.clone(), negs, c as u64, &tag)]
            }
            None => Vec::new(),
        },
    };
    Ok(pairs)
}

/// Replaces every vector of `p` by its unit direction. The weight is a
/// cosine and does not change.
fn project_to_sphere(p: &mut AlignmentPair) {
    p.target = normalized(&p.target);
    p.positive = normalized(&p.positive);
    for n in &mut p.negatives {
        *n = normalized(n);
    }
}

/// Chain rule through `u = g / |g|`: `(grad - u (u . grad)) / |g|`.
fn sphere_backward(g: &[f64], grad_u: &[f64]) -> Vec<f64> {
    let n = norm(g);
    if n == 0.0 {
        return vec![0.0; g.len()];
    }
    let along: f64 = g.iter().zip(grad_u).map(|(a, b)| a * b).sum::<f64>() / n;
    g.iter().zip(grad_u).map(|(a, b)| (b - along * a / n) / n).collect()
}

fn update_prototypes(state: &mut AlignState, instances: &[&Instance], decay: f64) {
    for e in instances {
        if state.prototypes.len() <= e.class_id {
            state.prototypes.resize(e.class_id + 1, None);
        }
        match &mut state.prototypes[e.class_id] {
            Some(p) => {
                for (v, &x) in p.iter_mut().zip(&e.g) {
                    *v = decay * *v + (1.0 - decay) * x;
                }
            }
            slot @ None => *slot = Some(e.g.clone()),
        }
    }
}

/// `L_sup + λ1·L_unsup + λ2·L_fg + λ3·L_bg` for one batch, with gradients
/// for the detector and the discriminator.
///
/// A component whose effective weight is zero is not evaluated and is
/// reported as zero. The background term reaches the extractor through
/// gradient reversal, so the detector gradient of that term is
/// `−λ3·∂L_bg`.
pub fn compute_objective(
    batch: &Batch,
    state: &mut AlignState,
    params: &DetectorParams,
    disc: &DiscriminatorParams,
    config: &TrainConfig,
) -> Result<Objective> {
    let (w_unsup, w_fg, w_bg) = (config.lambda1, config.fg_weight(), config.bg_weight());
    let target_needed = w_unsup > 0.0 || w_fg > 0.0 || w_bg > 0.0;
    let want_instances =
        w_fg > 0.0 && matches!(config.mode, AlignmentMode::BatchC2c | AlignmentMode::CategoryAgnostic | AlignmentMode::Prototype);
    let want_source_bg = w_bg > 0.0 && !config.mode.uses_memory();

    let src_slots: Vec<(usize, &SceneSample)> = batch.source.iter().copied().enumerate().collect();
    let sources: Vec<SourcePass> = par::map(&src_slots, |&(slot, s)| {
        let mut rng = anchor_rng(config, batch.step, slot);
        source_pass(s, params, config, &mut rng, want_instances, want_source_bg)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let tgt_slots: Vec<(usize, &SceneSample)> = if target_needed {
        batch
            .target
            .iter()
            .copied()
            .enumerate()
            .map(|(k, s)| (batch.source.len() + k, s))
            .collect()
    } else {
        Vec::new()
    };
    let targets: Vec<TargetPass> = par::map(&tgt_slots, |&(slot, s)| {
        let mut rng = anchor_rng(config, batch.step, slot);
        target_pass(s, params, config, &mut rng)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut counts = StepCounts {
        pseudo_labels: targets.iter().map(|t| t.pseudo.len()).sum(),
        ..StepCounts::default()
    };

    // supervised and self-training cross-entropy, averaged per scene
    let n_src = sources.len().max(1) as f64;
    let mut sup = 0.0;
    let mut src_grad_logits = Vec::with_capacity(sources.len());
    for s in &sources {
        let (l, g) = mean_cross_entropy(&s.head.logits, &s.labels, 1.0 / n_src)?;
        sup += l / n_src;
        src_grad_logits.push(g);
    }
    let n_tgt = targets.len().max(1) as f64;
    let mut unsup = 0.0;
    let mut tgt_grad_logits: Vec<Option<Tensor>> = Vec::with_capacity(targets.len());
    for t in &targets {
        match (&t.head, w_unsup > 0.0) {
            (Some(h), true) => {
                let (l, g) = mean_cross_entropy(&h.logits, &t.labels, w_unsup / n_tgt)?;
                unsup += l / n_tgt;
                tgt_grad_logits.push(Some(g));
            }
            _ => tgt_grad_logits.push(None),
        }
    }

    // foreground pairs
    let mut fg = 0.0;
    let mut tgt_grad_g: Vec<Option<Tensor>> = targets.iter().map(|_| None).collect();
    if w_fg > 0.0 {
        let instances: Vec<&Instance> = sources.iter().flat_map(|s| &s.instances).collect();
        if config.mode == AlignmentMode::Prototype {
            update_prototypes(state, &instances, config.prototype_decay);
        }
        let mut rng = RngStream::for_concern(config.seed, Concern::Negatives, batch.step);
        let mut pairs = Vec::new();
        let mut owners = Vec::new();
        for (ti, t) in targets.iter().enumerate() {
            let Some(head) = &t.head else { continue };
            for (det, &row) in t.pseudo.iter().zip(&t.det_rows) {
                let g_t = head.g.row(row);
                let found = partner_pairs(g_t, det, batch.target[ti], &instances, state, config, &mut rng)?;
                if found.is_empty() {
                    counts.skipped += 1;
                }
                for p in found {
                    pairs.push(p);
                    owners.push((ti, row));
                }
            }
        }
        counts.fg_pairs = pairs.len();
        if config.unit_sphere {
            for p in &mut pairs {
                project_to_sphere(p);
            }
        }
        let report = loss_fg(&pairs, config.alpha);
        fg = report.value;
        for ((ti, row), grad) in owners.into_iter().zip(report.target_grads) {
            let head = targets[ti].head.as_ref().expect("owner has a head");
            let grad = if config.unit_sphere {
                sphere_backward(head.g.row(row), &grad)
            } else {
                grad
            };
            let gg = tgt_grad_g[ti].get_or_insert_with(|| Tensor::zeros(head.g.shape()));
            let dim = head.g.shape()[1];
            for (d, v) in gg.data_mut()[row * dim..(row + 1) * dim].iter_mut().zip(grad) {
                *d += w_fg * v;
            }
        }
    }

    // background adversarial term
    let mut bg = 0.0;
    let mut tgt_grad_bg: Vec<Option<Tensor>> = targets.iter().map(|_| None).collect();
    let mut disc_grads = disc.params.zero_grads();
    if w_bg > 0.0 {
        let owners: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].bg_head.is_some()).collect();
        let tv: Vec<Vec<f64>> = owners
            .iter()
            .map(|&i| targets[i].bg_head.as_ref().expect("filtered").g.row(0).to_vec())
            .collect();
        let sv: Vec<Vec<f64>> = if config.mode.uses_memory() {
            let bank = state
                .memory
                .ok_or_else(|| Error::Precondition("background alignment needs a memory bank".into()))?;
            tv.iter()
                .map(|v| retrieve_bg_positive(v, bank).map(|(e, _)| e.bg.clone()))
                .collect::<Result<_>>()?
        } else {
            sources.iter().filter_map(|s| s.bg.clone()).collect()
        };
        let (sv, tv_in) = if config.unit_sphere {
            (
                sv.iter().map(|v| normalized(v)).collect(),
                tv.iter().map(|v| normalized(v)).collect(),
            )
        } else {
            (sv, tv.clone())
        };
        let report = loss_bg(&sv, &tv_in, disc, 1.0)?;
        if report.skipped {
            counts.skipped += tv.len();
        } else {
            counts.bg_pairs = tv.len();
            bg = report.value;
            accumulate(&mut disc_grads, &report.disc_grads, 1.0)?;
            for ((&i, grad), raw) in owners.iter().zip(report.target_grads).zip(&tv) {
                let grad = if config.unit_sphere { sphere_backward(raw, &grad) } else { grad };
                let scaled: Vec<f64> = grad.iter().map(|v| w_bg * v).collect();
                tgt_grad_bg[i] = Some(Tensor::matrix(1, scaled.len(), scaled)?);
            }
        }
    }

    // backward, one gradient set per scene, summed in batch order
    let src_jobs: Vec<(&SourcePass, &Tensor)> = sources.iter().zip(&src_grad_logits).collect();
    let src_grads: Vec<Result<GradSet>> = par::map(&src_jobs, |(s, gl)| {
        let mut grads = params.params.zero_grads();
        let mut gmap = vec![0.0; s.fmap.tensor.len()];
        roi_backward(&s.fmap, &s.rows, &s.head, None, Some(gl), params, &mut grads, &mut gmap)?;
        extract_backward(&gmap, &s.cache, params, &mut grads)?;
        Ok(grads)
    });
    let tgt_jobs: Vec<usize> = (0..targets.len()).collect();
    let tgt_grads: Vec<Result<Option<GradSet>>> = par::map(&tgt_jobs, |&i| {
        let t = &targets[i];
        let (gl, gg, gb) = (&tgt_grad_logits[i], &tgt_grad_g[i], &tgt_grad_bg[i]);
        if gl.is_none() && gg.is_none() && gb.is_none() {
            return Ok(None);
        }
        let mut grads = params.params.zero_grads();
        let mut gmap = vec![0.0; t.fmap.tensor.len()];
        if let Some(head) = &t.head {
            if gl.is_some() || gg.is_some() {
                roi_backward(&t.fmap, &t.rows, head, gg.as_ref(), gl.as_ref(), params, &mut grads, &mut gmap)?;
            }
        }
        if let (Some(head), Some(g)) = (&t.bg_head, gb) {
            background_backward(&t.fmap, &t.bg_boxes, head, g, params, &mut grads, &mut gmap)?;
        }
        extract_backward(&gmap, &t.cache, params, &mut grads)?;
        Ok(Some(grads))
    });
    let mut detector_grads = params.params.zero_grads();
    for g in src_grads {
        accumulate(&mut detector_grads, &g?, 1.0)?;
    }
    for g in tgt_grads.into_iter().filter_map(|r| r.transpose()) {
        accumulate(&mut detector_grads, &g?, 1.0)?;
    }

    let losses = LossComponents {
        sup,
        unsup,
        fg,
        bg,
        total: sup + w_unsup * unsup + w_fg * fg + w_bg * bg,
    };
    Ok(Objective {
        losses,
        counts,
        detector_grads,
        disc_grads,
    })
}

/// Confident detections as hard labels; `object_uid` is the detection's
/// rank within the scene.
pub fn pseudo_label(scene: &SceneSample, params: &DetectorParams, delta: f64) -> Result<Vec<AnnotatedBox>> {
    let dets = crate::detector::propose_and_detect(&scene.image, params, delta, DEFAULT_NMS_IOU)?;
    Ok(dets
        .iter()
        .enumerate()
        .map(|(k, d)| AnnotatedBox {
            x0: d.geom.x0,
            y0: d.geom.y0,
            x1: d.geom.x1,
            y1: d.geom.y1,
            class_id: d.class_id,
            object_uid: k as u64,
        })
        .collect())
}
