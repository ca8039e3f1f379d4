//! Controlled two-domain synthetic benchmark: clean source scenes with
//! color/orientation variants, and a fogged target domain.

pub mod benchmark;
pub mod color;
pub mod io;
pub mod scene;

pub use benchmark::{
    generate_benchmark, object_uid, sample_layout, scene_uid, Dataset, FamilyMember,
    ProvenanceIndex, SourceObjectRecord, SynthConfig,
};
pub use io::{load_dataset, save_dataset, Manifest};
pub use scene::{
    apply_fog, render_scene, transform_variant, AnnotatedBox, BackgroundParams, BoxGeom, Domain,
    ObjectSpec, Orientation, Provenance, SceneLayout, SceneSample, ShapeKind, TransformTag,
    VariantMode, FOG_COLOR,
};
