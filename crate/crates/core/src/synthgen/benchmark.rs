//! Two-domain benchmark construction with per-object provenance.
//!
//! Every base layout yields a family of four source-side scenes (original,
//! color, rotation, color + rotation). One member per family enters the source
//! split (the original, or a random variant for a fixed fraction of
//! families); the other three are kept as a sibling pool. The target split is
//! the fogged copy of each source scene.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{
    apply_fog, render_scene, AnnotatedBox, BackgroundParams, Domain, ObjectSpec, Orientation,
    SceneLayout, SceneSample, ShapeKind, TransformTag, VariantMode,
};
use crate::error::{Error, Result};
use crate::eval::iou_geom;
use crate::numerics::{Concern, RngStream};
use crate::par;

use super::scene::{transform_variant, BoxGeom};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub classes: usize,
    pub image_size: u32,
    pub fog_intensity: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of families whose source member is a random variant.
    pub variant_fraction: f64,
    pub max_overlap_iou: f64,
    pub layout_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 500,
            classes: 3,
            image_size: 64,
            fog_intensity: 0.6,
            min_objects: 1,
            max_objects: 4,
            variant_fraction: 0.25,
            max_overlap_iou: 0.3,
            layout_retries: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.scenes == 0 {
            problems.push("scenes must be positive".to_string());
        }
        if !(1..=ShapeKind::ALL.len()).contains(&self.classes) {
            problems.push(format!(
                "classes must be in 1..={}, got {}",
                ShapeKind::ALL.len(),
                self.classes
            ));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(16) {
            problems.push(format!(
                "image_size must be a multiple of 16 and at least 32, got {}",
                self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.fog_intensity) {
            problems.push(format!("fog_intensity {} outside [0, 1]", self.fog_intensity));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 8 {
            problems.push(format!(
                "object count range {}..={} must satisfy 1 <= min <= max <= 8",
                self.min_objects, self.max_objects
            ));
        }
        if !(0.0..=1.0).contains(&self.variant_fraction) {
            problems.push(format!(
                "variant_fraction {} outside [0, 1]",
                self.variant_fraction
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Which member of a four-scene family a source-side scene is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyMember {
    Original = 0,
    Color = 1,
    Rotation = 2,
    ColorRotation = 3,
}

impl FamilyMember {
    pub const ALL: [FamilyMember; 4] = [
        FamilyMember::Original,
        FamilyMember::Color,
        FamilyMember::Rotation,
        FamilyMember::ColorRotation,
    ];

    fn variant(self) -> Option<VariantMode> {
        match self {
            FamilyMember::Original => None,
            FamilyMember::Color => Some(VariantMode::Color),
            FamilyMember::Rotation => Some(VariantMode::Rotation),
            FamilyMember::ColorRotation => Some(VariantMode::ColorRotation),
        }
    }
}

pub const TARGET_SLOT: u64 = 4;

pub fn scene_uid(base: usize, slot: u64) -> u64 {
    base as u64 * 8 + slot
}

pub fn object_uid(scene_uid: u64, k: usize) -> u64 {
    scene_uid * 8 + k as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceObjectRecord {
    pub scene_uid: u64,
    pub class_id: usize,
    pub member: FamilyMember,
    /// Object uids of the family, indexed by [`FamilyMember`].
    pub family: [u64; 4],
}

/// Maps target scenes/objects to their source counterparts and siblings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceIndex {
    pub target_scene_to_source: BTreeMap<u64, u64>,
    pub target_object_to_source: BTreeMap<u64, u64>,
    pub source_objects: BTreeMap<u64, SourceObjectRecord>,
    pub scene_tags: BTreeMap<u64, Vec<TransformTag>>,
}

impl ProvenanceIndex {
    pub fn counterpart(&self, target_object_uid: u64) -> Option<&SourceObjectRecord> {
        self.target_object_to_source
            .get(&target_object_uid)
            .and_then(|uid| self.source_objects.get(uid))
    }

    pub fn counterpart_uid(&self, target_object_uid: u64) -> Option<u64> {
        self.target_object_to_source.get(&target_object_uid).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub source: Vec<SceneSample>,
    pub target: Vec<SceneSample>,
    /// Family members not selected into the source split.
    pub siblings: Vec<SceneSample>,
    pub provenance: ProvenanceIndex,
}

impl Dataset {
    pub fn total_source_boxes(&self) -> usize {
        self.source.iter().map(|s| s.boxes.len()).sum()
    }

    pub fn source_and_siblings(&self) -> Vec<SceneSample> {
        self.source.iter().chain(&self.siblings).cloned().collect()
    }
}

fn random_color(rng: &mut RngStream) -> [f64; 3] {
    let h = rng.uniform_range(0.0, 360.0);
    let s = rng.uniform_range(0.6, 1.0);
    let v = rng.uniform_range(0.65, 1.0);
    super::color::hsv_to_rgb([h, s, v])
}

/// Samples an object layout snapped near the detector's anchor grid: small
/// objects sit inside a 16 px window at stride 8, large ones inside a 32 px
/// window at stride 16.
pub fn sample_layout(config: &SynthConfig, base: usize, rng: &mut RngStream) -> Result<SceneLayout> {
    let size = config.image_size;
    let background = BackgroundParams {
        base: rng.uniform_range(0.15, 0.55),
        gradient_x: rng.uniform_range(-0.15, 0.15),
        gradient_y: rng.uniform_range(-0.15, 0.15),
        noise_amplitude: rng.uniform_range(0.0, 0.06),
        noise_seed: rng.next_u64(),
    };
    let count = rng.int_range(config.min_objects as i64, config.max_objects as i64) as usize;
    let scene = scene_uid(base, FamilyMember::Original as u64);

    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > config.layout_retries * count.max(1) {
            return Err(Error::Layout(format!(
                "could not place {count} objects in base scene {base} within {} attempts",
                config.layout_retries * count.max(1)
            )));
        }
        let large = rng.uniform() < 0.5;
        let (window, stride, lo, hi) = if large { (32, 16, 24, 32) } else { (16, 8, 12, 16) };
        let cells = (size - window) / stride + 1;
        let ax = rng.index(cells as usize) as u32 * stride;
        let ay = rng.index(cells as usize) as u32 * stride;
        let w = rng.int_range(lo, hi) as u32;
        let h = rng.int_range(lo, hi) as u32;
        let x = ax + rng.int_range(0, (window - w) as i64) as u32;
        let y = ay + rng.int_range(0, (window - h) as i64) as u32;
        let class_id = rng.index(config.classes);
        let color = random_color(rng);
        let candidate = BoxGeom::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        let clash = objects.iter().any(|o| {
            let g = BoxGeom::new(
                o.x as f64,
                o.y as f64,
                (o.x + o.width) as f64,
                (o.y + o.height) as f64,
            );
            iou_geom(&g, &candidate) > config.max_overlap_iou
        });
        if clash {
            continue;
        }
        objects.push(ObjectSpec {
            uid: object_uid(scene, objects.len()),
            class_id,
            shape: ShapeKind::for_class(class_id),
            color,
            orientation: Orientation::Normal,
            x,
            y,
            width: w,
            height: h,
        });
    }
    Ok(SceneLayout {
        width: size,
        height: size,
        background,
        objects,
    })
}

/// Reassigns the scene uid and renumbers object uids under it.
pub fn renumber(mut scene: SceneSample, uid: u64) -> SceneSample {
    scene.uid = uid;
    for (k, b) in scene.boxes.iter_mut().enumerate() {
        b.object_uid = object_uid(uid, k);
    }
    if let Some(layout) = scene.layout.as_mut() {
        for (k, o) in layout.objects.iter_mut().enumerate() {
            o.uid = object_uid(uid, k);
        }
    }
    scene
}

fn render_family(layout: &SceneLayout, base: usize) -> Result<[SceneSample; 4]> {
    let original = render_scene(layout, scene_uid(base, 0), Domain::Source)?;
    let mut members = Vec::with_capacity(4);
    for member in FamilyMember::ALL {
        let scene = match member.variant() {
            None => original.clone(),
            Some(mode) => {
                let mut v = transform_variant(&original, mode)?;
                v.provenance.as_mut().expect("variant provenance").parent_scene_uid =
                    original.uid;
                renumber(v, scene_uid(base, member as u64))
            }
        };
        members.push(scene);
    }
    Ok(members.try_into().expect("four members"))
}

/// Builds source, target and sibling splits plus the provenance index.
pub fn generate_benchmark(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let bases: Vec<usize> = (0..config.scenes).collect();
    let families: Vec<Result<[SceneSample; 4]>> = par::map(&bases, |&base| {
        let mut rng = RngStream::for_concern(seed, Concern::Data, base as u64);
        let layout = sample_layout(config, base, &mut rng)?;
        render_family(&layout, base)
    });

    let mut selector = RngStream::for_concern(seed, Concern::Data, u64::MAX);
    let n_variants = (config.scenes as f64 * config.variant_fraction).floor() as usize;
    let mut chosen = vec![FamilyMember::Original; config.scenes];
    for base in selector.sample_indices(config.scenes, n_variants) {
        chosen[base] = FamilyMember::ALL[1 + selector.index(3)];
    }

    let mut source = Vec::with_capacity(config.scenes);
    let mut target = Vec::with_capacity(config.scenes);
    let mut siblings = Vec::with_capacity(3 * config.scenes);
    let mut provenance = ProvenanceIndex::default();

    for (base, family) in families.into_iter().enumerate() {
        let family = family?;
        for scene in &family {
            provenance
                .scene_tags
                .insert(scene.uid, scene.tags().into_iter().collect());
        }
        let object_count = family[0].boxes.len();
        for k in 0..object_count {
            let uids = family.clone().map(|s| s.boxes[k].object_uid);
            for (m, scene) in family.iter().enumerate() {
                provenance.source_objects.insert(
                    scene.boxes[k].object_uid,
                    SourceObjectRecord {
                        scene_uid: scene.uid,
                        class_id: scene.boxes[k].class_id,
                        member: FamilyMember::ALL[m],
                        family: uids,
                    },
                );
            }
        }
        let pick = chosen[base];
        for (m, scene) in family.into_iter().enumerate() {
            if m == pick as usize {
                let fogged = renumber(
                    apply_fog(&scene, config.fog_intensity)?,
                    scene_uid(base, TARGET_SLOT),
                );
                if let Some(p) = fogged.provenance.clone() {
                    provenance
                        .scene_tags
                        .insert(fogged.uid, p.tags.into_iter().collect());
                }
                provenance
                    .target_scene_to_source
                    .insert(fogged.uid, scene.uid);
                for (tb, sb) in fogged.boxes.iter().zip(&scene.boxes) {
                    provenance
                        .target_object_to_source
                        .insert(tb.object_uid, sb.object_uid);
                }
                target.push(fogged);
                source.push(scene);
            } else {
                siblings.push(scene);
            }
        }
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        source,
        target,
        siblings,
        provenance,
    })
}

/// Boxes of a scene by object uid.
pub fn box_by_uid(scene: &SceneSample, uid: u64) -> Option<&AnnotatedBox> {
    scene.boxes.iter().find(|b| b.object_uid == uid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::scene::{remove_fog, FOG_COLOR};

    fn small(n: usize, classes: usize) -> SynthConfig {
        SynthConfig {
            scenes: n,
            classes,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_uid_resolution() {
        let ds = generate_benchmark(&small(8, 1), 3).unwrap();
        assert_eq!(ds.source.len(), 8);
        assert_eq!(ds.target.len(), 8);
        assert_eq!(ds.siblings.len(), 24);
        for t in &ds.target {
            let src_uid = ds.provenance.target_scene_to_source[&t.uid];
            assert!(ds.source.iter().any(|s| s.uid == src_uid));
            for b in &t.boxes {
                let rec = ds.provenance.counterpart(b.object_uid).unwrap();
                assert_eq!(rec.class_id, b.class_id);
                assert_eq!(rec.scene_uid, src_uid);
            }
        }
    }

    #[test]
    fn provenance_bijection_over_scenes() {
        let ds = generate_benchmark(&small(20, 3), 9).unwrap();
        let mut images: Vec<u64> = ds.provenance.target_scene_to_source.values().copied().collect();
        images.sort_unstable();
        images.dedup();
        assert_eq!(images.len(), ds.target.len());
        assert_eq!(ds.provenance.target_scene_to_source.len(), ds.target.len());
    }

    #[test]
    fn defog_recovers_source() {
        let config = small(10, 3);
        let ds = generate_benchmark(&config, 5).unwrap();
        let beta = config.fog_intensity;
        for (t, s) in ds.target.iter().zip(&ds.source) {
            assert_eq!(ds.provenance.target_scene_to_source[&t.uid], s.uid);
            for (i, (&tv, &sv)) in t.image.data().iter().zip(s.image.data()).enumerate() {
                let recovered = remove_fog(tv, beta, FOG_COLOR[i % 3]);
                assert!((recovered - sv).abs() < 1e-5, "{recovered} vs {sv}");
            }
        }
    }

    #[test]
    fn variant_fraction_respected() {
        let ds = generate_benchmark(&small(40, 3), 1).unwrap();
        let variants = ds
            .source
            .iter()
            .filter(|s| s.uid % 8 != FamilyMember::Original as u64)
            .count();
        assert_eq!(variants, 10);
    }

    #[test]
    fn families_share_background_and_geometry() {
        let ds = generate_benchmark(&small(6, 3), 2).unwrap();
        let all = ds.source_and_siblings();
        for obj in ds.provenance.source_objects.values() {
            let geoms: Vec<_> = obj
                .family
                .iter()
                .map(|uid| {
                    let rec = &ds.provenance.source_objects[uid];
                    let scene = all.iter().find(|s| s.uid == rec.scene_uid).unwrap();
                    box_by_uid(scene, *uid).unwrap().geom()
                })
                .collect();
            assert!(geoms.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_benchmark(&small(6, 2), 77).unwrap();
        let b = generate_benchmark(&small(6, 2), 77).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&small(6, 2), 78).unwrap();
        assert_ne!(a.source[0].image, c.source[0].image);
    }

    #[test]
    fn every_object_has_an_anchor_with_iou_half() {
        let ds = generate_benchmark(&small(30, 3), 4).unwrap();
        let anchors = crate::detector::AnchorConfig::default().anchors(64, 64);
        for s in &ds.source {
            for b in &s.boxes {
                let best = anchors
                    .iter()
                    .map(|a| iou_geom(a, &b.geom()))
                    .fold(0.0, f64::max);
                assert!(best >= 0.5, "{best}");
            }
        }
    }

    #[test]
    fn invalid_config_lists_problems() {
        let bad = SynthConfig {
            classes: 9,
            fog_intensity: 2.0,
            ..SynthConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("classes") && err.contains("fog_intensity"));
    }
}
