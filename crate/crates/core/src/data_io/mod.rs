//! Data in and out: IDX parsing, datasets, checkpoints, image grids, CSV
//! tables and the MMD sample-quality metric.

mod checkpoint;
mod datasets;
mod emit;
mod idx;
mod mmd;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, NamedArray, CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use datasets::{
    idx_dataset, make_gaussian_toy, make_synthetic_shapes, rotate_dataset, rotate_image, tensor_to_images,
    DatasetSource, ImageDataset, RotationPolicy, ROTATION_FILL,
};
pub use emit::{decode_pgm, encode_grid, read_pgm, to_byte, write_grid, CsvTable};
pub use idx::{encode_idx, load_idx, load_idx_kind, parse_idx, IdxData, IdxKind, IMAGE_MAGIC, LABEL_MAGIC};
pub use mmd::{median_bandwidth, mmd_biased, mmd_unbiased};
