use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::color::{hue_shift_for, rotate_hue};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FOG_COLOR: [f64; 3] = [0.9, 0.9, 0.9];
pub const MIN_OBJECT_SIDE: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Filled body with a dark window toward the front.
    Car,
    /// Right triangle with the right angle at the bottom-left.
    Triangle,
    /// Inscribed ellipse with an off-center highlight.
    Disc,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Car, ShapeKind::Triangle, ShapeKind::Disc];

    pub fn for_class(class_id: usize) -> ShapeKind {
        Self::ALL[class_id % Self::ALL.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Normal,
    Flipped,
}

impl Orientation {
    pub fn toggled(self) -> Self {
        match self {
            Orientation::Normal => Orientation::Flipped,
            Orientation::Flipped => Orientation::Normal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub uid: u64,
    pub class_id: usize,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub orientation: Orientation,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Axis-aligned box in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGeom {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxGeom {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub class_id: usize,
    pub object_uid: u64,
}

impl AnnotatedBox {
    pub fn geom(&self) -> BoxGeom {
        BoxGeom::new(self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformTag {
    Color,
    Rotation,
    Fog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub parent_scene_uid: u64,
    pub tags: BTreeSet<TransformTag>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    Color,
    Rotation,
    ColorRotation,
}

/// Gray background: base level, linear gradients and hashed per-pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub base: f64,
    pub gradient_x: f64,
    pub gradient_y: f64,
    pub noise_amplitude: f64,
    pub noise_seed: u64,
}

impl BackgroundParams {
    pub fn flat(level: f64) -> Self {
        Self {
            base: level,
            gradient_x: 0.0,
            gradient_y: 0.0,
            noise_amplitude: 0.0,
            noise_seed: 0,
        }
    }

    pub fn value_at(&self, x: u32, y: u32, width: u32, height: u32) -> f64 {
        let fx = (x as f64 + 0.5) / width as f64 - 0.5;
        let fy = (y as f64 + 0.5) / height as f64 - 0.5;
        let mut h = self.noise_seed ^ ((x as u64) << 32) ^ (y as u64);
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 32;
        let unit = (h >> 40) as f64 / (1u64 << 24) as f64;
        let noise = (2.0 * unit - 1.0) * self.noise_amplitude;
        (self.base + self.gradient_x * fx + self.gradient_y * fy + noise).clamp(0.0, 1.0)
    }
}

/// Everything needed to re-render a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub width: u32,
    pub height: u32,
    pub background: BackgroundParams,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub uid: u64,
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<AnnotatedBox>,
    pub domain: Domain,
    pub provenance: Option<Provenance>,
    /// Present for freshly rendered scenes; not persisted to disk.
    pub layout: Option<SceneLayout>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width() + x) * 3;
        let d = self.image.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn tags(&self) -> BTreeSet<TransformTag> {
        self.provenance
            .as_ref()
            .map(|p| p.tags.clone())
            .unwrap_or_default()
    }

    /// True when pixel center `(x, y)` lies inside any annotated box.
    pub fn covered(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        self.boxes.iter().any(|b| b.geom().contains_point(cx, cy))
    }
}

/// Whether local pixel `(i, j)` of an unflipped `w × h` shape is painted, and
/// with which shade factor.
fn shape_shade(shape: ShapeKind, i: u32, j: u32, w: u32, h: u32) -> Option<ShadeKind> {
    match shape {
        ShapeKind::Car => {
            let in_window = i * 20 >= w * 11 && i * 20 < w * 17 && j * 20 >= h * 3 && j * 2 < h;
            Some(if in_window {
                ShadeKind::Dark
            } else {
                ShadeKind::Body
            })
        }
        ShapeKind::Triangle => {
            let limit = ((j + 1) * w).div_ceil(h);
            (i < limit).then_some(ShadeKind::Body)
        }
        ShapeKind::Disc => {
            let u = (i as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
            let v = (j as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
            if u * u + v * v > 1.0 {
                return None;
            }
            let spot = i * 20 >= w * 4 && i * 20 < w * 9 && j * 20 >= h * 4 && j * 20 < h * 9;
            Some(if spot {
                ShadeKind::Light
            } else {
                ShadeKind::Body
            })
        }
    }
}

#[derive(Clone, Copy)]
enum ShadeKind {
    Body,
    Dark,
    Light,
}

fn shade(color: [f64; 3], kind: ShadeKind) -> [f64; 3] {
    match kind {
        ShadeKind::Body => color,
        ShadeKind::Dark => color.map(|c| 0.35 * c),
        ShadeKind::Light => color.map(|c| 0.5 * c + 0.5),
    }
}

/// Per-object painted mask in scene coordinates, as `(x, y, rgb)` triples.
pub fn object_pixels(spec: &ObjectSpec) -> Vec<(u32, u32, [f64; 3])> {
    let mut out = Vec::with_capacity((spec.width * spec.height) as usize);
    for j in 0..spec.height {
        for i in 0..spec.width {
            let local_i = match spec.orientation {
                Orientation::Normal => i,
                Orientation::Flipped => spec.width - 1 - i,
            };
            if let Some(kind) = shape_shade(spec.shape, local_i, j, spec.width, spec.height) {
                out.push((spec.x + i, spec.y + j, shade(spec.color, kind)));
            }
        }
    }
    out
}

pub fn render_background(layout: &SceneLayout) -> Tensor {
    let (w, h) = (layout.width, layout.height);
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let v = layout.background.value_at(x, y, w, h);
            data.extend_from_slice(&[v, v, v]);
        }
    }
    let mut t = Tensor::new(vec![h as usize, w as usize, 3], data).expect("shape matches");
    quantize(&mut t);
    t
}

fn validate_specs(layout: &SceneLayout) -> Result<()> {
    if layout.objects.len() > 8 {
        return Err(Error::Precondition(format!(
            "at most 8 objects per scene, got {}",
            layout.objects.len()
        )));
    }
    for spec in &layout.objects {
        if spec.width < MIN_OBJECT_SIDE || spec.height < MIN_OBJECT_SIDE {
            return Err(Error::Precondition(format!(
                "object {} is {}x{}, minimum is {MIN_OBJECT_SIDE}x{MIN_OBJECT_SIDE}",
                spec.uid, spec.width, spec.height
            )));
        }
        if spec.x + spec.width > layout.width || spec.y + spec.height > layout.height {
            return Err(Error::Precondition(format!(
                "object {} exceeds the {}x{} image",
                spec.uid, layout.width, layout.height
            )));
        }
    }
    Ok(())
}

/// Pixels are stored at single precision so images survive the on-disk
/// format unchanged.
fn quantize(image: &mut Tensor) {
    for v in image.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Rasterizes a layout: background first, then objects in order.
pub fn render_scene(layout: &SceneLayout, uid: u64, domain: Domain) -> Result<SceneSample> {
    validate_specs(layout)?;
    let mut image = render_background(layout);
    let w = layout.width as usize;
    let boxes = layout
        .objects
        .iter()
        .map(|spec| {
            let data = image.data_mut();
            for (x, y, rgb) in object_pixels(spec) {
                let i = (y as usize * w + x as usize) * 3;
                data[i..i + 3].copy_from_slice(&rgb);
            }
            AnnotatedBox {
                x0: spec.x as f64,
                y0: spec.y as f64,
                x1: (spec.x + spec.width) as f64,
                y1: (spec.y + spec.height) as f64,
                class_id: spec.class_id,
                object_uid: spec.uid,
            }
        })
        .collect();
    quantize(&mut image);
    Ok(SceneSample {
        uid,
        image,
        boxes,
        domain,
        provenance: None,
        layout: Some(layout.clone()),
    })
}

/// Recolors and/or horizontally flips every object, leaving the background.
pub fn transform_variant(scene: &SceneSample, mode: VariantMode) -> Result<SceneSample> {
    if scene.domain != Domain::Source {
        return Err(Error::Precondition(
            "variants are only derived from source scenes".into(),
        ));
    }
    if scene.boxes.is_empty() {
        return Err(Error::Precondition(format!(
            "scene {} has no objects to transform",
            scene.uid
        )));
    }
    let layout = scene.layout.as_ref().ok_or_else(|| {
        Error::Precondition(format!("scene {} carries no render layout", scene.uid))
    })?;
    let recolor = matches!(mode, VariantMode::Color | VariantMode::ColorRotation);
    let flip = matches!(mode, VariantMode::Rotation | VariantMode::ColorRotation);

    let mut next = layout.clone();
    for spec in &mut next.objects {
        if recolor {
            spec.color = rotate_hue(spec.color, hue_shift_for(spec.uid));
        }
        if flip {
            spec.orientation = spec.orientation.toggled();
        }
    }
    let mut out = render_scene(&next, scene.uid, Domain::Source)?;
    let mut tags = scene.tags();
    if recolor {
        tags.insert(TransformTag::Color);
    }
    if flip && !tags.remove(&TransformTag::Rotation) {
        tags.insert(TransformTag::Rotation);
    }
    out.provenance = Some(Provenance {
        parent_scene_uid: scene.uid,
        tags,
    });
    Ok(out)
}

/// `out = (1 − β)·pixel + β·fog_color`; boxes unchanged, domain becomes target.
pub fn apply_fog(scene: &SceneSample, intensity: f64) -> Result<SceneSample> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::Argument(format!(
            "fog intensity must be in [0, 1], got {intensity}"
        )));
    }
    let mut image = scene.image.clone();
    for px in image.data_mut().chunks_mut(3) {
        for (c, fog) in px.iter_mut().zip(FOG_COLOR) {
            *c = (1.0 - intensity) * *c + intensity * fog;
        }
    }
    quantize(&mut image);
    let mut tags = scene.tags();
    tags.insert(TransformTag::Fog);
    Ok(SceneSample {
        uid: scene.uid,
        image,
        boxes: scene.boxes.clone(),
        domain: Domain::Target,
        provenance: Some(Provenance {
            parent_scene_uid: scene.uid,
            tags,
        }),
        layout: scene.layout.clone(),
    })
}

/// Inverse of [`apply_fog`] for `intensity < 1`.
pub fn remove_fog(pixel: f64, intensity: f64, fog: f64) -> f64 {
    (pixel - intensity * fog) / (1.0 - intensity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square() -> SceneLayout {
        SceneLayout {
            width: 32,
            height: 32,
            background: BackgroundParams::flat(0.5),
            objects: vec![ObjectSpec {
                uid: 0,
                class_id: 0,
                shape: ShapeKind::Car,
                color: [1.0, 0.0, 0.0],
                orientation: Orientation::Normal,
                x: 12,
                y: 12,
                width: 8,
                height: 8,
            }],
        }
    }

    fn textured(objects: Vec<ObjectSpec>) -> SceneLayout {
        SceneLayout {
            width: 48,
            height: 48,
            background: BackgroundParams {
                base: 0.35,
                gradient_x: 0.1,
                gradient_y: -0.05,
                noise_amplitude: 0.04,
                noise_seed: 99,
            },
            objects,
        }
    }

    fn spec(uid: u64, shape: ShapeKind, x: u32, y: u32, w: u32, h: u32) -> ObjectSpec {
        ObjectSpec {
            uid,
            class_id: ShapeKind::ALL.iter().position(|s| *s == shape).unwrap(),
            shape,
            color: [0.9, 0.3, 0.1],
            orientation: Orientation::Normal,
            x,
            y,
            width: w,
            height: h,
        }
    }

    #[test]
    fn single_centered_square() {
        let s = render_scene(&red_square(), 1, Domain::Source).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.boxes[0].geom().area(), 64.0);
        assert_eq!(s.boxes[0].class_id, 0);
    }

    #[test]
    fn empty_scene_is_background_only() {
        let mut layout = red_square();
        layout.objects.clear();
        let s = render_scene(&layout, 1, Domain::Source).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.image.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn out_of_bounds_and_tiny_objects_rejected() {
        let mut layout = red_square();
        layout.objects[0].x = 30;
        assert!(render_scene(&layout, 0, Domain::Source).is_err());
        let mut layout = red_square();
        layout.objects[0].width = 3;
        assert!(render_scene(&layout, 0, Domain::Source).is_err());
    }

    #[test]
    fn boxes_tightly_bound_painted_pixels() {
        for shape in ShapeKind::ALL {
            for (w, h) in [(4, 4), (5, 9), (12, 16), (16, 12), (31, 24)] {
                let mut s = spec(3, shape, 1, 2, w, h);
                for orientation in [Orientation::Normal, Orientation::Flipped] {
                    s.orientation = orientation;
                    let px = object_pixels(&s);
                    let x0 = px.iter().map(|p| p.0).min().unwrap();
                    let x1 = px.iter().map(|p| p.0).max().unwrap() + 1;
                    let y0 = px.iter().map(|p| p.1).min().unwrap();
                    let y1 = px.iter().map(|p| p.1).max().unwrap() + 1;
                    assert_eq!((x0, y0, x1, y1), (1, 2, 1 + w, 2 + h), "{shape:?} {w}x{h}");
                }
            }
        }
    }

    #[test]
    fn pixels_outside_boxes_are_pure_background() {
        let layout = textured(vec![
            spec(1, ShapeKind::Disc, 3, 4, 14, 12),
            spec(2, ShapeKind::Triangle, 20, 25, 16, 16),
            spec(3, ShapeKind::Car, 30, 2, 12, 9),
        ]);
        let s = render_scene(&layout, 0, Domain::Source).unwrap();
        let bg = render_background(&layout);
        for y in 0..48usize {
            for x in 0..48usize {
                if !s.covered(x, y) {
                    let i = (y * 48 + x) * 3;
                    assert_eq!(&s.image.data()[i..i + 3], &bg.data()[i..i + 3]);
                }
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let layout = textured(vec![
            spec(1, ShapeKind::Triangle, 3, 4, 14, 12),
            spec(2, ShapeKind::Car, 10, 8, 16, 16),
        ]);
        let s = render_scene(&layout, 0, Domain::Source).unwrap();
        let once = transform_variant(&s, VariantMode::Rotation).unwrap();
        assert_ne!(once.image, s.image);
        let twice = transform_variant(&once, VariantMode::Rotation).unwrap();
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.boxes, s.boxes);
        assert!(twice.tags().is_empty());
    }

    #[test]
    fn color_variant_keeps_background_and_remaps_square() {
        let s = render_scene(&red_square(), 0, Domain::Source).unwrap();
        let v = transform_variant(&s, VariantMode::Color).unwrap();
        // uid 0 maps to the first table entry, 120°: pure red becomes pure green
        let expected = rotate_hue([1.0, 0.0, 0.0], super::super::color::HUE_SHIFT_TABLE[0]);
        assert_eq!(expected, [0.0, 1.0, 0.0]);
        for y in 0..32 {
            for x in 0..32 {
                if s.covered(x, y) {
                    let p = v.pixel(x, y);
                    let dark = expected.map(|c| (0.35 * c) as f32 as f64);
                    assert!(p == expected || p == dark, "{p:?}");
                } else {
                    assert_eq!(v.pixel(x, y), s.pixel(x, y));
                }
            }
        }
        assert_eq!(
            v.provenance.unwrap().tags,
            [TransformTag::Color].into_iter().collect()
        );
    }

    #[test]
    fn variant_preconditions() {
        let mut layout = red_square();
        layout.objects.clear();
        let empty = render_scene(&layout, 0, Domain::Source).unwrap();
        assert!(matches!(
            transform_variant(&empty, VariantMode::Color),
            Err(Error::Precondition(_))
        ));
        let fogged = apply_fog(&render_scene(&red_square(), 0, Domain::Source).unwrap(), 0.5)
            .unwrap();
        assert!(transform_variant(&fogged, VariantMode::Color).is_err());
    }

    #[test]
    fn fog_examples() {
        let s = render_scene(&red_square(), 0, Domain::Source).unwrap();
        assert_eq!(apply_fog(&s, 0.0).unwrap().image, s.image);
        let full = apply_fog(&s, 1.0).unwrap();
        assert!(full.image.data().iter().all(|&v| (v - 0.9).abs() < 1e-7));
        assert_eq!(full.domain, Domain::Target);
        assert!(full.tags().contains(&TransformTag::Fog));

        let mut black = red_square();
        black.objects.clear();
        black.background = BackgroundParams::flat(0.0);
        let b = apply_fog(&render_scene(&black, 0, Domain::Source).unwrap(), 0.5).unwrap();
        assert!(b.image.data().iter().all(|&v| (v - 0.45).abs() < 1e-7));

        assert!(matches!(apply_fog(&s, 1.5), Err(Error::Argument(_))));
        assert!(matches!(apply_fog(&s, -0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn fog_is_the_closed_form_blend() {
        let layout = textured(vec![spec(1, ShapeKind::Disc, 3, 4, 14, 12)]);
        let s = render_scene(&layout, 0, Domain::Source).unwrap();
        for beta in [0.0f64, 0.25, 0.5, 1.0] {
            let f = apply_fog(&s, beta).unwrap();
            for (o, i) in f.image.data().iter().zip(s.image.data()) {
                assert_eq!(*o, ((1.0 - beta) * i + beta * 0.9) as f32 as f64);
            }
        }
    }
}
