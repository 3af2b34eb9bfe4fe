//! Renders one synthetic sequence in memory and prints its first frame as
//! ASCII art: `#` person pixels, digits the inverse-depth channel.

use h4d::body::BodyTemplate;
use h4d::synth::{render_sequence, SynthConfig};

fn main() -> h4d::Result<()> {
    let cfg = SynthConfig::default();
    let tpl = BodyTemplate::desk(cfg.template_seed);
    let index = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let frames = render_sequence(&cfg, &tpl, index, cfg.frames)?;
    let f = &frames[0];
    let ids = f.ids();
    for v in 0..f.height() {
        let row: String = (0..f.width())
            .map(|u| {
                let i = v * f.width() + u;
                match ids[i] {
                    Some(k) => char::from(b'A' + k as u8),
                    None => char::from(b'0' + ((1.0 / f.depth[i]) * 9.0).min(9.0) as u8),
                }
            })
            .collect();
        println!("{row}");
    }
    for p in &f.gt.people {
        println!(
            "person {}: {} px, head patch {:?}, root {:?}",
            p.track_id,
            p.pixels,
            p.head_patch,
            p.params_cam.root.pose().translation.as_slice()
        );
    }
    let visible: usize = frames.iter().map(|f| f.gt.people.iter().filter(|p| p.head_patch.is_some()).count()).sum();
    let total: usize = frames.iter().map(|f| f.gt.people.len()).sum();
    println!("visible heads over the sequence: {visible}/{total}");
    Ok(())
}
