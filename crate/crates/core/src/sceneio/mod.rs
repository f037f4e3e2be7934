//! Synthetic scene generation and every on-disk format: frames, depth maps,
//! masks, cameras and checkpoints.

mod checkpoint;
mod files;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use files::{
    depth_path, mask_path, parse_pfm, pfm_bytes, read_cameras, read_dataset, read_frames, read_mask_png, read_pfm,
    read_rgb_png, rgb_path, write_cameras, write_dataset, write_frames, write_mask_png, write_pfm, write_rgb_png,
    Dataset, DATASET_LAYOUT_VERSION,
};
pub use files::{read_json, write_json};
pub use synth::{
    intersect, synth_generate, Bump, CameraPath, Capsule, Surface, SyntheticScene, SyntheticSceneSpec, Texture,
    INSTRUMENT_COLOR, MARCH_STEP, ROOT_TOLERANCE,
};
