//! Human mesh, motion, camera and depth metrics plus the report builder.

mod desk;
mod metrics;
mod report;

pub use desk::{score_model, Baselines, SceneScores};
pub use metrics::{
    ate, depth_metrics, detection_f1, global_metrics, local_metrics, mask_iou, rte, segments, static_ate,
    DepthMetrics, GlobalMetrics, LocalMetrics, SegmentMetrics, MM, RTE_FORMULA, SEGMENT_LEN,
};
pub use report::{
    evaluate_dataset, evaluate_sequence, gt_records, match_people, stream_path, EvalOptions, EvalReport, Metrics,
    SequenceReport, TrackSegments, MATCH_RADIUS,
};

#[cfg(test)]
mod tests;
