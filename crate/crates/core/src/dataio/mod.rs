//! Depth rasters, annotations, datasets and synthetic data.

mod augment;
mod dataset;
mod kdep;
mod pose;
mod synth;

pub use augment::{augment, crop, flip_horizontal, AugmentConfig, Augmented};
pub use dataset::{Dataset, DatasetManifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
pub use kdep::{read_depth_image, reflect, write_depth_image, DepthImage, DEFAULT_MM_PER_PIXEL, KDEP_MAGIC};
pub use pose::{
    joint_name, mirror_permutation, pose_from_json, pose_to_json, Annotation, Joint, NamedJoint, PoseConfig,
    DOWN_SPINE, JOINT_NAMES, NUM_JOINTS, UPPER_SPINE,
};
pub use synth::{synthesize_dataset, AngleRanges, BoneLengths, Span, SynthConfig};
