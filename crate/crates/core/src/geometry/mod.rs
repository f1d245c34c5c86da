//! Pixel-domain geometry: morphology, components, shape fitting, cross
//! matching and rasterization. Pixel `(x, y)` is the unit square centred on
//! integer coordinates; extents are measured between pixel centres.

pub mod ellipse;
mod mask;
pub mod matching;
pub mod morphology;
pub mod raster;
pub mod rect;

pub use ellipse::{
    ellipse_circumference, fit_dashed_outline, fit_ellipse, fit_ellipse_mask, fit_ellipse_moments, EllipseParams,
};
pub use mask::{BinaryMask, GrayImage};
pub use matching::{detect_keypoint_pair, match_cross_patterns, KeyPoint, KeyPointPair};
pub use morphology::{
    boundary, boundary_edge_points, close, component_count, dilate, erode, fill_holes, largest_component, Connectivity,
};
pub use raster::{draw_cross, rasterize_ellipse_mask, rasterize_line_mask};
pub use rect::{femur_length_endpoints, fit_min_rect, mask_extreme_points, min_area_rect, rect_perimeter, RectParams};
