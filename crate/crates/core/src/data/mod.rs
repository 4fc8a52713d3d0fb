//! Volume persistence, 2.5D stack extraction and augmentation.

pub mod augment;
pub mod io;
pub mod manifest;
mod stack;

pub use augment::{apply_affine, augment, hflip, random_affine, Affine, AugmentParams, AugmentSet, Interp};
pub use io::{load_mask, load_volume, save_mask, save_volume};
pub use manifest::{read_manifest, write_manifest, ManifestRecord, Split};
pub use stack::{channel_indices, extract_stack, SliceStack, StackMeta};
