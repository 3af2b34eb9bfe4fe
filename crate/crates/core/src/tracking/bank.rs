use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ot::{cost_matrix, dustbin_augment, dustbin_marginals, hard_assignment, sinkhorn};
use crate::error::{Error, Result};

/// How the dustbin cost γ is chosen each frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaMode {
    /// Median of the real cost entries, never below `floor`.
    Median { floor: f64 },
    Fixed { gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub gamma: GammaMode,
    pub epsilon: f64,
    pub iters: usize,
    pub max_misses: usize,
    /// Blend factor for bank-token updates; `None` replaces outright.
    pub ema: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gamma: GammaMode::Median { floor: 2.0 },
            epsilon: 1e-2,
            iters: 200,
            max_misses: 5,
            ema: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.iters == 0 {
            return Err(Error::Config("tracker needs epsilon > 0 and iters ≥ 1".into()));
        }
        if let Some(e) = self.ema {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("tracker ema must be in [0, 1], got {e}")));
            }
        }
        Ok(())
    }

    pub fn gamma_for(&self, d: &DMatrix<f64>) -> f64 {
        match self.gamma {
            GammaMode::Fixed { gamma } => gamma,
            GammaMode::Median { floor } => {
                let mut v: Vec<f64> = d.iter().copied().collect();
                if v.is_empty() {
                    return floor;
                }
                v.sort_by(f64::total_cmp);
                let k = v.len() / 2;
                let med = if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) };
                med.max(floor)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub track_id: u64,
    pub token: Vec<f64>,
    pub last_seen: usize,
    pub misses: usize,
}

/// Outcome of one association round. Detection indices refer to the
/// current frame's detections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    pub matches: Vec<(u64, usize)>,
    pub new_tracks: Vec<(u64, usize)>,
    /// Tracks retired this frame.
    pub lost: Vec<u64>,
}

impl Association {
    /// Track id per detection index.
    pub fn ids(&self, n_dets: usize) -> Vec<u64> {
        let mut out = vec![0; n_dets];
        for &(id, n) in self.matches.iter().chain(&self.new_tracks) {
            out[n] = id;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackletBank {
    pub entries: Vec<Tracklet>,
    next_id: u64,
}

impl TrackletBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.token.clone()).collect()
    }

    /// Matches `dets` against the bank, then updates it in place.
    pub fn step(&mut self, frame: usize, dets: &[Vec<f64>], cfg: &TrackerConfig) -> Result<Association> {
        let d = cost_matrix(&self.tokens(), dets)?;
        let gamma = cfg.gamma_for(&d);
        let dd = dustbin_augment(&d, gamma);
        let (a, b) = dustbin_marginals(d.nrows(), d.ncols());
        let plan = sinkhorn(&dd, &a, &b, cfg.epsilon, cfg.iters)?.plan;
        Ok(self.associate(&plan, frame, dets, cfg))
    }

    /// Applies a transport plan: matched entries take the new token,
    /// unmatched detections open tracks, unmatched entries age and retire.
    pub fn associate(
        &mut self,
        plan: &DMatrix<f64>,
        frame: usize,
        dets: &[Vec<f64>],
        cfg: &TrackerConfig,
    ) -> Association {
        let pairs = hard_assignment(plan);
        let mut out = Association::default();
        let mut det_used = vec![false; dets.len()];
        let mut bank_used = vec![false; self.entries.len()];
        for &(m, n) in &pairs {
            bank_used[m] = true;
            det_used[n] = true;
            let e = &mut self.entries[m];
            match cfg.ema {
                Some(k) => {
                    for (t, x) in e.token.iter_mut().zip(&dets[n]) {
                        *t = (1.0 - k) * *t + k * x;
                    }
                }
                None => e.token.clone_from(&dets[n]),
            }
            e.last_seen = frame;
            e.misses = 0;
            out.matches.push((e.track_id, n));
        }
        let mut kept = Vec::with_capacity(self.entries.len());
        for (e, used) in self.entries.drain(..).zip(bank_used) {
            if used {
                kept.push(e);
                continue;
            }
            let e = Tracklet {
                misses: e.misses + 1,
                ..e
            };
            if e.misses > cfg.max_misses {
                out.lost.push(e.track_id);
            } else {
                kept.push(e);
            }
        }
        self.entries = kept;
        for (n, used) in det_used.into_iter().enumerate() {
            if !used {
                let id = self.next_id;
                self.next_id += 1;
                self.entries.push(Tracklet {
                    track_id: id,
                    token: dets[n].clone(),
                    last_seen: frame,
                    misses: 0,
                });
                out.new_tracks.push((id, n));
            }
        }
        out.matches.sort_by_key(|&(_, n)| n);
        out
    }
}

/// One line of a track dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub track_id: u64,
    pub source_patch: usize,
    pub body_file: Option<String>,
}

pub fn write_tracks(path: impl AsRef<Path>, records: &[TrackRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrackerConfig {
        TrackerConfig {
            gamma: GammaMode::Fixed { gamma: 1.0 },
            epsilon: 1e-2,
            iters: 300,
            max_misses: 1,
            ema: None,
        }
    }

    #[test]
    fn empty_bank_spawns_tracks() {
        let mut bank = TrackletBank::new();
        let dets = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let a = bank.step(0, &dets, &cfg()).unwrap();
        assert_eq!(a.new_tracks.len(), 3);
        assert_eq!(a.ids(3), vec![0, 1, 2]);
    }

    #[test]
    fn ids_follow_tokens_not_order() {
        let mut bank = TrackletBank::new();
        let p = vec![0.0, 0.0];
        let q = vec![10.0, 0.0];
        bank.step(0, &[p.clone(), q.clone()], &cfg()).unwrap();
        let a = bank.step(1, &[vec![10.1, 0.0], vec![0.1, 0.0]], &cfg()).unwrap();
        assert_eq!(a.ids(2), vec![1, 0]);
        assert!(a.new_tracks.is_empty());
    }

    #[test]
    fn misses_retire_tracks() {
        let mut bank = TrackletBank::new();
        bank.step(0, &[vec![0.0]], &cfg()).unwrap();
        let a = bank.step(1, &[], &cfg()).unwrap();
        assert!(a.lost.is_empty());
        let a = bank.step(2, &[], &cfg()).unwrap();
        assert_eq!(a.lost, vec![0]);
        assert!(bank.is_empty());
    }

    #[test]
    fn median_gamma_respects_floor() {
        let c = TrackerConfig {
            gamma: GammaMode::Median { floor: 0.5 },
            ..cfg()
        };
        let d = DMatrix::from_row_slice(2, 2, &[0.1, 3.0, 2.0, 0.2]);
        assert_eq!(c.gamma_for(&d), 1.1);
        assert_eq!(c.gamma_for(&DMatrix::from_element(1, 1, 0.1)), 0.5);
    }
}
