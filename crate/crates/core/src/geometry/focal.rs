use super::camera::Pointmap;
use crate::error::{Error, Result};

/// Residual floor for the reweighting, avoiding blowup at exact fits.
pub const WEISZFELD_FLOOR: f64 = 1e-8;
pub const WEISZFELD_MAX_ITERS: usize = 50;
pub const WEISZFELD_TOL: f64 = 1e-6;

/// Recovers a shared focal length from a camera-frame pointmap by
/// minimizing `Σ ‖(u − cx, v − cy) − f·(x/z, y/z)‖` with Weiszfeld-style
/// iteratively reweighted least squares.
pub fn weiszfeld_focal(pm: &Pointmap, cx: f64, cy: f64) -> Result<f64> {
    let mut obs: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for v in 0..pm.height {
        for u in 0..pm.width {
            let i = v * pm.width + u;
            let p = &pm.points[i];
            if !pm.is_valid(i) || !(p.z > 0.0) || !p.iter().all(|c| c.is_finite()) {
                continue;
            }
            obs.push(([u as f64 - cx, v as f64 - cy], [p.x / p.z, p.y / p.z]));
        }
    }
    let fit = |w: &dyn Fn(usize) -> f64| -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (p, q)) in obs.iter().enumerate() {
            let wi = w(i);
            num += wi * (p[0] * q[0] + p[1] * q[1]);
            den += wi * (q[0] * q[0] + q[1] * q[1]);
        }
        (den > 1e-18).then(|| num / den)
    };
    let mut f = fit(&|_| 1.0).ok_or_else(|| {
        Error::EstimationFailed("no off-axis rays with positive depth".into())
    })?;
    for _ in 0..WEISZFELD_MAX_ITERS {
        let weights: Vec<f64> = obs
            .iter()
            .map(|(p, q)| {
                let r = ((p[0] - f * q[0]).powi(2) + (p[1] - f * q[1]).powi(2)).sqrt();
                1.0 / r.max(WEISZFELD_FLOOR)
            })
            .collect();
        let next = fit(&|i| weights[i]).ok_or_else(|| {
            Error::EstimationFailed("reweighted system became degenerate".into())
        })?;
        let done = ((next - f) / f).abs() < WEISZFELD_TOL;
        f = next;
        if done {
            break;
        }
    }
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::EstimationFailed(format!("non-positive focal {f}")));
    }
    Ok(f)
}
