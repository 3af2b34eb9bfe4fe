use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::SE3Pose;

/// State update rule applied after each frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Take the decoder's proposed state outright.
    #[default]
    Vanilla,
    /// Per-row gated interpolation towards the proposal.
    Ttt,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "ttt" => Ok(Self::Ttt),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected vanilla or ttt)"))),
        }
    }
}

/// Row means of an `r×L` attention matrix, clamped to `[0, 1]`.
pub fn ttt_rates(attn: &Tensor) -> Result<Vec<f64>> {
    if attn.rank() != 2 || attn.shape()[1] == 0 {
        return Err(Error::Contract(format!(
            "attention must be a non-empty matrix, got shape {:?}",
            attn.shape()
        )));
    }
    let l = attn.shape()[1];
    Ok((0..attn.shape()[0])
        .map(|i| (attn.row(i).iter().sum::<f64>() / l as f64).clamp(0.0, 1.0))
        .collect())
}

/// `S_next[i] = (1 − β[i])·S_prev[i] + β[i]·S_prop[i]` with `β` the clamped
/// row means of `attn`.
pub fn ttt_update(prev: &Tensor, proposed: &Tensor, attn: &Tensor) -> Result<Tensor> {
    let beta = ttt_rates(attn)?;
    ttt_update_rates(prev, proposed, &beta)
}

/// As [`ttt_update`] with precomputed per-row rates (clamped here too).
pub fn ttt_update_rates(prev: &Tensor, proposed: &Tensor, beta: &[f64]) -> Result<Tensor> {
    if prev.shape() != proposed.shape() || prev.rank() != 2 {
        return Err(Error::shape("ttt_update", prev.shape(), proposed.shape()));
    }
    let (r, d) = (prev.shape()[0], prev.shape()[1]);
    if beta.len() != r {
        return Err(Error::shape("ttt_update rates", &[r], &[beta.len()]));
    }
    let mut out = prev.clone();
    for (i, (row, b)) in out.data_mut().chunks_mut(d).zip(beta).enumerate() {
        let b = b.clamp(0.0, 1.0);
        for (o, p) in row.iter_mut().zip(proposed.row(i)) {
            // written so that b = 0 and b = 1 are exact
            *o = if b == 1.0 { *p } else { *o + b * (p - *o) };
        }
    }
    Ok(out)
}

/// Maps chunk-local poses into the global frame.
///
/// Each chunk is anchored on the raw pose of its first frame, so that frame
/// lands exactly on the chunk origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkAligner {
    origin: SE3Pose,
    anchor_inv: Option<SE3Pose>,
}

impl Default for ChunkAligner {
    fn default() -> Self {
        Self::new()
    }
}

impl ChunkAligner {
    pub fn new() -> Self {
        Self {
            origin: SE3Pose::identity(),
            anchor_inv: None,
        }
    }

    pub fn origin(&self) -> &SE3Pose {
        &self.origin
    }

    /// Chunk-to-global transform; the identity-anchored origin before the
    /// first frame of a chunk is seen.
    pub fn chunk_to_global(&self) -> SE3Pose {
        match &self.anchor_inv {
            Some(a) => self.origin.compose(a),
            None => self.origin,
        }
    }

    /// Global pose of a raw chunk-local pose. The first call after a reset
    /// fixes the anchor.
    pub fn globalize(&mut self, raw: &SE3Pose) -> SE3Pose {
        if self.anchor_inv.is_none() {
            self.anchor_inv = Some(raw.inverse());
        }
        self.chunk_to_global().compose(raw)
    }

    /// Starts a new chunk whose first frame sits at `last_global`.
    pub fn reset(&mut self, last_global: SE3Pose) {
        self.origin = last_global;
        self.anchor_inv = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(vec![r, c], |i| f(i / c, i % c))
    }

    #[test]
    fn extreme_rates() {
        let prev = mat(3, 4, |i, j| (i * 4 + j) as f64 * 0.37 - 1.0);
        let prop = mat(3, 4, |i, j| (i + j) as f64 * -0.21 + 0.5);
        let out = ttt_update_rates(&prev, &prop, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out.row(0), prev.row(0));
        assert_eq!(out.row(1), prop.row(1));
        assert_eq!(out.row(2), prev.row(2));
    }

    #[test]
    fn uniform_attention_rate() {
        // softmax rows always average to 1/L
        let l = 1 + 64 + 2;
        let attn = Tensor::full(vec![5, l], 1.0 / l as f64);
        for b in ttt_rates(&attn).unwrap() {
            assert!((b - 1.0 / l as f64).abs() < 1e-15);
        }
        let big = Tensor::full(vec![2, 3], 4.0);
        assert_eq!(ttt_rates(&big).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 3]);
        assert!(ttt_update_rates(&a, &b, &[0.5, 0.5]).is_err());
        assert!(ttt_update_rates(&a, &a, &[0.5]).is_err());
        assert!(ttt_rates(&Tensor::zeros(vec![2, 0])).is_err());
    }

    #[test]
    fn aligner_anchors_each_chunk() {
        let mut al = ChunkAligner::new();
        let a = SE3Pose::from_axis_angle(Vec3::new(0.1, -0.2, 0.05), Vec3::new(0.3, 0.0, -0.1));
        let b = SE3Pose::from_axis_angle(Vec3::new(0.0, 0.4, 0.0), Vec3::new(1.0, 0.2, 0.5));
        let g0 = al.globalize(&a);
        assert!(g0.translation.norm() < 1e-12 && g0.rotation.angle() < 1e-7);
        let g1 = al.globalize(&b);
        let expect = a.inverse().compose(&b);
        assert!((g1.translation - expect.translation).norm() < 1e-12);
        al.reset(g1);
        let g2 = al.globalize(&a);
        assert!((g2.translation - g1.translation).norm() < 1e-12);
        assert!(g2.rotation.angle_to(&g1.rotation) < 1e-7);
    }

    use crate::geometry::Vec3;
}
