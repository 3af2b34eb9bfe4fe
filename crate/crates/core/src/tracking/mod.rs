//! Identity association across frames: token distances, dustbin
//! augmentation, entropic optimal transport and a tracklet bank.

mod bank;
mod ot;

pub use bank::{write_tracks, Association, GammaMode, TrackRecord, Tracklet, TrackerConfig, TrackletBank};
pub use ot::{
    cost_matrix, dustbin_augment, dustbin_marginals, hard_assignment, sinkhorn, SinkhornResult,
    SINKHORN_TOL,
};
