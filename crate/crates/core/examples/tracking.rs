//! Tracks three drifting tokens through a crossing, a dropout and a new
//! arrival with the optimal-transport tracklet bank.

use h4d::tracking::{GammaMode, TrackerConfig, TrackletBank};

fn main() -> h4d::Result<()> {
    let cfg = TrackerConfig {
        gamma: GammaMode::Fixed { gamma: 1.0 },
        ..TrackerConfig::default()
    };
    let mut bank = TrackletBank::new();
    for t in 0..8 {
        let x = t as f64 * 0.2;
        let mut dets = vec![vec![x, 0.0], vec![1.4 - x, 0.1]];
        if !(3..=4).contains(&t) {
            dets.push(vec![5.0, 5.0 + 0.05 * t as f64]);
        }
        if t >= 6 {
            dets.push(vec![-4.0, 2.0]);
        }
        // present detections in a different order each frame
        let k = t % dets.len();
        dets.rotate_left(k);
        let a = bank.step(t, &dets, &cfg)?;
        println!(
            "frame {t}: ids {:?}, new {:?}, lost {:?}, bank {}",
            a.ids(dets.len()),
            a.new_tracks.iter().map(|p| p.0).collect::<Vec<_>>(),
            a.lost,
            bank.len()
        );
    }
    Ok(())
}
