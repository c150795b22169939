//! Image handling, the stride-32 grid encoder, grid tokenisation and the
//! region-feature baseline.

mod cnn;
mod grid;
mod image;
mod region;

pub use cnn::{
    image_tensor, CellAccuracy, CellClassifierHead, CnnConfig, CnnEncoder, CnnPretrainReport, CnnTrainOptions,
    GridFeatureMap, NUM_STAGES,
};
pub(crate) use cnn::bind_constant;
pub use grid::{flatten_grid, GridProjection, GridTokenSequence, MAX_GRID_SIDE};
pub use image::{pad_to_stride, resize_image, resized_dims, Image, ResizedImage, GRID_STRIDE};
pub use region::{
    generate_anchors, nms, roi_pool, BoundingBox, RegionBaseline, RegionConfig, RegionSet, ANCHORS_PER_CELL,
    ANCHOR_RATIOS, ANCHOR_SCALES,
};
