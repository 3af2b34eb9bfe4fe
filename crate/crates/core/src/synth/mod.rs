//! Procedural box-world scenes with walking bodies, a smooth camera and
//! complete ground truth, rendered as geometric pseudo-images.

mod dataset;
mod raster;
mod scene;
mod spline;

pub use dataset::{
    check_frame, generate, render_frame, render_sequence, seq_name, Dataset, Frame, FrameGt, Manifest, PersonGt,
    SeqEntry, Split, MANIFEST_FILE, TEMPLATE_DIR,
};
pub use raster::{box_hit, head_labels, patch_of, pixel_ray, rasterize_bodies, room_hit, triangle_hit, BodyRaster, Hit};
pub use scene::{camera_path, BoxObj, PersonSpec, SceneSpec, SynthConfig};
pub use spline::NaturalSpline;
