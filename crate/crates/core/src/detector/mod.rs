//! Small patch-embedding detector: a two-layer extractor, bilinear box
//! pooling, and a shared trunk that yields both the `D`-dim embedding `g`
//! and `C+1` class logits over a fixed multi-scale anchor grid.
//!
//! Class index `C` is background.

mod io;
mod nms;
mod pool;

use serde::{Deserialize, Serialize};

pub use io::{
    load_detector, load_discriminator, save_detector, save_discriminator, ModelHeader, TensorRecord, MODEL_SCHEMA,
};
pub use nms::{nms, Detection};
pub use pool::{
    adaptive_pool, adaptive_pool_backward, background_mask, box_pool, box_pool_backward,
    mask_background, FeatureMap, POOL_SIZE,
};

use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward, affine_forward, relu, relu_backward, softmax, AffineCache, GradSet, ParamSet,
    RngStream, Tensor,
};
use crate::synthgen::BoxGeom;

pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorWindow {
    pub size: u32,
    pub stride: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub windows: Vec<AnchorWindow>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            windows: vec![
                AnchorWindow { size: 16, stride: 8 },
                AnchorWindow { size: 32, stride: 16 },
            ],
        }
    }
}

impl AnchorConfig {
    /// Square windows tiled over the image, scale by scale, row-major.
    pub fn anchors(&self, width: usize, height: usize) -> Vec<BoxGeom> {
        let mut out = Vec::new();
        for w in &self.windows {
            let (size, stride) = (w.size as usize, w.stride.max(1) as usize);
            if size > width || size > height {
                continue;
            }
            for y in (0..=height - size).step_by(stride) {
                for x in (0..=width - size).step_by(stride) {
                    out.push(BoxGeom::new(
                        x as f64,
                        y as f64,
                        (x + size) as f64,
                        (y + size) as f64,
                    ));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub classes: usize,
    pub patch: usize,
    pub patch_stride: usize,
    /// Subtract each patch's mean before the first layer.
    pub center_patches: bool,
    pub extractor_hidden: usize,
    pub channels: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub anchors: AnchorConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            patch: 8,
            patch_stride: 4,
            center_patches: true,
            extractor_hidden: 16,
            channels: 16,
            head_hidden: 64,
            embed_dim: 64,
            anchors: AnchorConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn background_class(&self) -> usize {
        self.classes
    }

    pub fn pooled_len(&self) -> usize {
        POOL_SIZE * POOL_SIZE * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes == 0 {
            problems.push("classes must be at least 1".to_string());
        }
        if self.patch == 0 || self.patch_stride == 0 {
            problems.push("patch and patch_stride must be positive".to_string());
        }
        for (name, v) in [
            ("extractor_hidden", self.extractor_hidden),
            ("channels", self.channels),
            ("head_hidden", self.head_hidden),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.anchors.windows.is_empty() {
            problems.push("at least one anchor window is required".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

impl DetectorParams {
    pub fn init(config: DetectorConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let patch_len = config.patch * config.patch * 3;
        params.insert_affine("ext1", patch_len, config.extractor_hidden, rng)?;
        params.insert_affine("ext2", config.extractor_hidden, config.channels, rng)?;
        params.insert_affine("head1", config.pooled_len(), config.head_hidden, rng)?;
        params.insert_affine("head2", config.head_hidden, config.embed_dim, rng)?;
        params.insert_affine("cls", config.embed_dim, config.classes + 1, rng)?;
        Ok(Self { config, params })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    fn layer(&self, name: &str) -> Result<(&Tensor, &Tensor)> {
        Ok((
            self.params.get(&format!("{name}.w"))?,
            self.params.get(&format!("{name}.b"))?,
        ))
    }
}

fn add_grad(grads: &mut GradSet, name: String, g: Tensor) -> Result<()> {
    match grads.get_mut(&name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}

fn layer_backward(
    params: &DetectorParams,
    name: &str,
    grad_y: &Tensor,
    cache: &AffineCache,
    grads: &mut GradSet,
) -> Result<Tensor> {
    let (w, _) = params.layer(name)?;
    let (gx, gw, gb) = affine_backward(grad_y, cache, w)?;
    add_grad(grads, format!("{name}.w"), gw)?;
    add_grad(grads, format!("{name}.b"), gb)?;
    Ok(gx)
}

#[derive(Clone, Debug)]
pub struct ExtractCache {
    c1: AffineCache,
    h1: Tensor,
    c2: AffineCache,
    out: Tensor,
    dims: (usize, usize),
}

impl ExtractCache {
    /// Which ReLU units are active; piecewise-linear regions share a pattern.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.h1.data().iter().chain(self.out.data()).map(|&v| v > 0.0).collect()
    }
}

fn patch_matrix(image: &Tensor, patch: usize, stride: usize, center: bool) -> Result<(Tensor, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!(
            "image must be H×W×3, got {:?}",
            s
        )));
    }
    let (h, w) = (s[0], s[1]);
    if h < patch || w < patch {
        return Err(Error::Dimension(format!(
            "image {h}×{w} smaller than a {patch}-pixel patch"
        )));
    }
    let (ny, nx) = ((h - patch) / stride + 1, (w - patch) / stride + 1);
    let len = patch * patch * 3;
    let src = image.data();
    let mut data = Vec::with_capacity(ny * nx * len);
    for py in 0..ny {
        for px in 0..nx {
            let start = data.len();
            for dy in 0..patch {
                let row = (py * stride + dy) * w + px * stride;
                data.extend_from_slice(&src[row * 3..(row + patch) * 3]);
            }
            if center {
                let mean = data[start..].iter().sum::<f64>() / len as f64;
                data[start..].iter_mut().for_each(|v| *v -= mean);
            }
        }
    }
    Ok((Tensor::matrix(ny * nx, len, data)?, ny, nx))
}

pub fn extract_features(image: &Tensor, params: &DetectorParams) -> Result<FeatureMap> {
    Ok(extract_features_cached(image, params)?.0)
}

pub fn extract_features_cached(
    image: &Tensor,
    params: &DetectorParams,
) -> Result<(FeatureMap, ExtractCache)> {
    let cfg = &params.config;
    let (patches, ny, nx) = patch_matrix(image, cfg.patch, cfg.patch_stride, cfg.center_patches)?;
    let (w1, b1) = params.layer("ext1")?;
    let (z1, c1) = affine_forward(&patches, w1, b1)?;
    let h1 = relu(&z1);
    let (w2, b2) = params.layer("ext2")?;
    let (z2, c2) = affine_forward(&h1, w2, b2)?;
    let out = relu(&z2);
    let stride = cfg.patch_stride as f64;
    let origin = (cfg.patch as f64 - stride) / 2.0;
    let fmap = FeatureMap::new(out.clone().reshape(vec![ny, nx, cfg.channels])?, stride, origin)?;
    Ok((
        fmap,
        ExtractCache {
            c1,
            h1,
            c2,
            out,
            dims: (ny, nx),
        },
    ))
}

/// Accumulates `∂L/∂θ` given `∂L/∂f` in the feature-map layout.
pub fn extract_backward(
    grad_fmap: &[f64],
    cache: &ExtractCache,
    params: &DetectorParams,
    grads: &mut GradSet,
) -> Result<()> {
    let cells = cache.dims.0 * cache.dims.1;
    let g = Tensor::matrix(cells, params.config.channels, grad_fmap.to_vec())?;
    let g = relu_backward(&g, &cache.out)?;
    let g = layer_backward(params, "ext2", &g, &cache.c2, grads)?;
    let g = relu_backward(&g, &cache.h1)?;
    layer_backward(params, "ext1", &g, &cache.c1, grads)?;
    Ok(())
}

/// Trunk outputs for a batch of pooled regions.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Embeddings `[n × D]`.
    pub g: Tensor,
    /// Class logits `[n × (C+1)]`.
    pub logits: Tensor,
    c1: AffineCache,
    h1: Tensor,
    c2: AffineCache,
    c3: AffineCache,
}

impl HeadOutput {
    pub fn rows(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn activation_pattern(&self) -> Vec<bool> {
        self.h1.data().iter().chain(self.g.data()).map(|&v| v > 0.0).collect()
    }
}

/// `pooled` is `[n × P·P·C_f]`, or a single `P × P × C_f` tensor.
pub fn det_head(pooled: &Tensor, params: &DetectorParams) -> Result<HeadOutput> {
    let len = params.config.pooled_len();
    if !pooled.len().is_multiple_of(len) || pooled.is_empty() {
        return Err(Error::Dimension(format!(
            "pooled input of {} values is not a multiple of {len}",
            pooled.len()
        )));
    }
    let x = Tensor::matrix(pooled.len() / len, len, pooled.data().to_vec())?;
    let (w1, b1) = params.layer("head1")?;
    let (z1, c1) = affine_forward(&x, w1, b1)?;
    let h1 = relu(&z1);
    let (w2, b2) = params.layer("head2")?;
    let (z2, c2) = affine_forward(&h1, w2, b2)?;
    let g = relu(&z2);
    let (w3, b3) = params.layer("cls")?;
    let (logits, c3) = affine_forward(&g, w3, b3)?;
    Ok(HeadOutput {
        g,
        logits,
        c1,
        h1,
        c2,
        c3,
    })
}

/// Returns `∂L/∂pooled` `[n × P·P·C_f]`. Either upstream gradient may be
/// absent; the classifier receives gradient only through `grad_logits`.
pub fn det_head_backward(
    out: &HeadOutput,
    grad_g: Option<&Tensor>,
    grad_logits: Option<&Tensor>,
    params: &DetectorParams,
    grads: &mut GradSet,
) -> Result<Tensor> {
    let mut gg = match grad_g {
        Some(g) => g.clone().reshape(out.g.shape().to_vec())?,
        None => Tensor::zeros(out.g.shape()),
    };
    if let Some(gl) = grad_logits {
        let gl = gl.clone().reshape(out.logits.shape().to_vec())?;
        let from_cls = layer_backward(params, "cls", &gl, &out.c3, grads)?;
        gg.add_assign(&from_cls)?;
    }
    let g = relu_backward(&gg, &out.g)?;
    let g = layer_backward(params, "head2", &g, &out.c2, grads)?;
    let g = relu_backward(&g, &out.h1)?;
    layer_backward(params, "head1", &g, &out.c1, grads)
}

/// Pools each box and runs the trunk on the stacked batch.
pub fn roi_forward(fmap: &FeatureMap, boxes: &[BoxGeom], params: &DetectorParams) -> Result<HeadOutput> {
    let mut pooled = Vec::with_capacity(boxes.len() * params.config.pooled_len());
    for b in boxes {
        pooled.extend_from_slice(box_pool(fmap, b, POOL_SIZE)?.data());
    }
    det_head(&Tensor::from_vec(pooled), params)
}

/// Backward of [`roi_forward`], scattering into `grad_fmap`.
#[allow(clippy::too_many_arguments)]
pub fn roi_backward(
    fmap: &FeatureMap,
    boxes: &[BoxGeom],
    out: &HeadOutput,
    grad_g: Option<&Tensor>,
    grad_logits: Option<&Tensor>,
    params: &DetectorParams,
    grads: &mut GradSet,
    grad_fmap: &mut [f64],
) -> Result<()> {
    let gp = det_head_backward(out, grad_g, grad_logits, params, grads)?;
    let len = params.config.pooled_len();
    for (b, row) in boxes.iter().zip(gp.data().chunks(len)) {
        box_pool_backward(fmap, b, POOL_SIZE, row, grad_fmap)?;
    }
    Ok(())
}

/// Per-image background embedding from the map with `boxes` masked out.
pub fn background_forward(
    fmap: &FeatureMap,
    boxes: &[BoxGeom],
    params: &DetectorParams,
) -> Result<HeadOutput> {
    let masked = mask_background(fmap, boxes);
    det_head(&adaptive_pool(&masked, POOL_SIZE)?, params)
}

pub fn background_backward(
    fmap: &FeatureMap,
    boxes: &[BoxGeom],
    out: &HeadOutput,
    grad_g: &Tensor,
    params: &DetectorParams,
    grads: &mut GradSet,
    grad_fmap: &mut [f64],
) -> Result<()> {
    let gp = det_head_backward(out, Some(grad_g), None, params, grads)?;
    let mut local = vec![0.0f64; fmap.tensor.len()];
    adaptive_pool_backward(fmap.dims(), POOL_SIZE, gp.data(), &mut local);
    let mask = background_mask(fmap, boxes);
    let c = fmap.dims().2;
    for (cell, &m) in mask.iter().enumerate() {
        if !m {
            for (d, &v) in grad_fmap[cell * c..(cell + 1) * c]
                .iter_mut()
                .zip(&local[cell * c..(cell + 1) * c])
            {
                *d += v;
            }
        }
    }
    Ok(())
}

/// Class probabilities for every anchor of an image.
#[derive(Clone, Debug)]
pub struct AnchorScores {
    pub anchors: Vec<BoxGeom>,
    /// `anchors.len()` rows of `C+1` probabilities.
    pub probs: Vec<Vec<f64>>,
}

pub fn score_anchors(image: &Tensor, params: &DetectorParams) -> Result<AnchorScores> {
    let fmap = extract_features(image, params)?;
    let s = image.shape();
    let anchors = params.config.anchors.anchors(s[1], s[0]);
    let out = roi_forward(&fmap, &anchors, params)?;
    let probs = (0..anchors.len()).map(|i| softmax(out.logits.row(i))).collect();
    Ok(AnchorScores { anchors, probs })
}

/// Candidate detections before NMS: anchors whose argmax is a foreground class.
pub fn candidates(scores: &AnchorScores, classes: usize) -> Vec<Detection> {
    scores
        .anchors
        .iter()
        .zip(&scores.probs)
        .filter_map(|(a, p)| {
            let mut best = 0;
            for (k, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = k;
                }
            }
            (best < classes).then(|| Detection {
                geom: *a,
                class_id: best,
                score: p[best].clamp(0.0, 1.0),
            })
        })
        .collect()
}

pub fn detect_from_scores(
    scores: &AnchorScores,
    classes: usize,
    delta: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    nms(&candidates(scores, classes), nms_iou)
        .into_iter()
        .filter(|d| d.score >= delta)
        .collect()
}

pub fn propose_and_detect(
    image: &Tensor,
    params: &DetectorParams,
    delta: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Argument(format!("delta {delta} outside [0, 1]")));
    }
    let scores = score_anchors(image, params)?;
    Ok(detect_from_scores(&scores, params.config.classes, delta, nms_iou))
}
