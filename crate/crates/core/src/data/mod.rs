//! Images, annotations, augmentation and synthetic scenes.

mod annotations;
mod image;
mod synth;
mod transform;

pub use annotations::{AnnotationKind, AnnotationRecord, AnnotationSet, Manifest, Split};
pub use image::{load_annotations, load_record, read_rgb, write_rgb, AnnotatedImage};
pub use synth::{assign_splits, synth_dataset, synth_scene, SynthDatasetSpec, SynthScene, SynthSpec};
pub use transform::{
    augment, crop, crop_origins, crop_spatial, hflip, pad_to_multiple, resize_with_annotations, PATCHES_PER_IMAGE,
};
