//! Dataset discovery, volume loading, normalisation, slicing and splits.

mod cache;
mod manifest;
mod samples;
mod split;
pub mod synth;
mod volume;

pub use cache::SliceCache;
pub use manifest::{scan_dataset, scan_dataset_with, scan_subject, DatasetManifest, LabelPolicy, Layout, Split, VolumeRecord};
pub use samples::{make_batch, Batch, PreprocessConfig, SliceSample};
pub use split::{make_folds, make_splits};
pub use volume::{
    binarize, center_fit, load_volume, normalize_volume, preprocess_volume, slice_volume, LoadedVolume,
};
