//! Labels, remote codes, preprocessing, attention masks and the synthetic
//! multi-view face dataset.

pub mod code;
pub mod image;
pub mod manifest;
pub mod mask;
pub mod pose;
pub mod synth;

pub use code::{code_for_degrees, code_for_pose, interpolate_codes, make_remote_code, RemoteCode};
pub use image::{preprocess, FaceImage, LandmarkSet, RgbImage};
pub use manifest::{
    generate_synthetic_dataset, stack_masks, Batch, DatasetManifest, IdentityLabel, LoadedDataset, Record, Split,
};
pub use mask::{build_mask, patch_sizes, AttentionMask};
pub use pose::{index_to_degrees, pose_to_index, PoseLabel, FRONTAL_INDEX, N_POSES, POSE_GRID};
pub use synth::{render, render_yaw, SyntheticFaceSpec};
