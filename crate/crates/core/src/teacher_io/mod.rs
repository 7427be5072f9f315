//! On-disk formats. All multi-byte values are little-endian; tensors are
//! stored as `f32` and computed on as `f64`. Writes go to a temporary file
//! that is renamed into place.

mod bundle;
mod checkpoint;
mod image;
mod manifest;
mod tensor_file;

pub use bundle::{
    BundleMeta, DistilledBundle, CLASSES_FILE, CLS_FILE, GRID_FILE, LABELS_FILE, META_FILE,
};
pub use checkpoint::{
    checkpoint_entries, checkpoint_from_bytes, checkpoint_names, checkpoint_to_bytes,
    load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, STEP_ENTRY,
};
pub use image::{
    decode_ppm, denormalize_image, encode_ppm, normalize_image, read_ppm, to_byte, write_ppm,
    IMAGENET_MEAN, IMAGENET_STD,
};
pub use manifest::{parse_manifest, read_manifest, ManifestEntry};
pub use tensor_file::{
    encode_tensor, read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor, TENSOR_MAGIC,
    TENSOR_VERSION,
};
