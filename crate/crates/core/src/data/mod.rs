//! Procedural paired-modality subjects, preprocessing operators, folds and
//! on-disk datasets.

mod dataset;
mod folds;
mod preprocess;
mod subject;

pub use dataset::{Dataset, DatasetConfig, Manifest, ManifestEntry};
pub use folds::{split_folds, FoldSplit};
pub use preprocess::{
    crop_voi, dilate_mask, extract_patches_with_coverage, mask_centroid, normalize_unit,
    normalize_unit_tensor, PatchWindow,
};
pub use subject::{generate_subject, Mask, Subject, SynthConfig, LATENT_DIM};
