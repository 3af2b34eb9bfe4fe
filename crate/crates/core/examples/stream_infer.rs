//! Streams a rendered sequence through an untrained model in both update
//! modes and prints per-frame detections, chunk indices and throughput.
//!
//! `cargo run --release --example stream_infer -- [frames] [reset]`

use std::time::Instant;

use h4d::body::BodyTemplate;
use h4d::netcore::{Model, ModelConfig};
use h4d::recurrence::{StreamContext, StreamOptions, UpdateMode};
use h4d::synth::{render_sequence, SynthConfig};

fn main() -> h4d::Result<()> {
    let mut args = std::env::args().skip(1);
    let frames: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(120);
    let reset: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);

    let synth = SynthConfig::default();
    let tpl = BodyTemplate::desk(synth.template_seed);
    let seq = render_sequence(&synth, &tpl, 0, frames)?;
    let model = Model::new(ModelConfig::desk(), 0)?;

    for mode in [UpdateMode::Vanilla, UpdateMode::Ttt] {
        let opts = StreamOptions {
            mode,
            reset,
            tau: Some(0.45),
            ..StreamOptions::default()
        };
        let mut stream = StreamContext::new(&model, opts)?;
        let t0 = Instant::now();
        let mut people = 0;
        for f in &seq {
            let out = stream.step(&f.image)?;
            people += out.humans.len();
            if out.pose_chunk_end.is_some() {
                println!("{mode:?}: chunk {} starts at frame {}", out.chunk, out.t);
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{mode:?}: {frames} frames, {people} person readouts, {:.1} frames/s",
            frames as f64 / secs
        );
    }
    Ok(())
}
