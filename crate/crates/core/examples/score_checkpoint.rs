//! Scores a trained checkpoint on the validation split of a dataset and
//! prints each score next to its trivial baseline.
//!
//! `cargo run --release --example score_checkpoint -- <dataset> <checkpoint> [tau]`

use h4d::eval::{score_model, Baselines};
use h4d::netcore::load_checkpoint;
use h4d::recurrence::StreamOptions;
use h4d::synth::Dataset;
use h4d::train::TrainData;

fn main() -> h4d::Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(data), Some(ckpt)) = (args.next(), args.next()) else {
        eprintln!("usage: score_checkpoint <dataset> <checkpoint> [tau]");
        std::process::exit(2);
    };
    let ds = Dataset::open(&data)?;
    let td = TrainData::load(&ds, None, None)?;
    let (model, manifest) = load_checkpoint(&ckpt)?;
    println!("checkpoint step {}", manifest.step);
    let base = Baselines::from_frames(td.train.iter().map(|s| s.as_slice()), &td.tpl)?;
    let mut opts = StreamOptions::default();
    if let Some(tau) = args.next() {
        opts.tau = Some(tau.parse().expect("tau must be a number"));
    }
    let s = score_model(&model, &td.val, &td.tpl, &base, &opts)?;
    println!("frames      {}", s.frames);
    println!("detection   P {:.3} R {:.3} F1 {:.3}", s.det_precision, s.det_recall, s.det_f1);
    println!("mask IoU    {:.3}", s.mask_iou);
    println!("MPJPE       {:.1} mm (mean body {:.1} mm, {} matches)", s.mpjpe, s.mpjpe_mean_body, s.matched);
    println!("ATE         {:.4} m (static {:.4} m)", s.ate, s.ate_static);
    println!("AbsRel      {:.4} (mean depth {:.4})", s.abs_rel, s.abs_rel_mean_depth);
    Ok(())
}
