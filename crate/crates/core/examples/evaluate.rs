//! Generates a tiny dataset, writes its ground truth as prediction streams
//! with a perturbed copy of one sequence, and prints the evaluation table.

use h4d::eval::{evaluate_dataset, gt_records, stream_path, EvalOptions};
use h4d::geometry::Vec3;
use h4d::recurrence::StreamWriter;
use h4d::synth::{generate, Dataset, SynthConfig};

fn main() -> h4d::Result<()> {
    let root = std::env::temp_dir().join("h4d_evaluate");
    let cfg = SynthConfig {
        sequences: 3,
        val_sequences: 1,
        frames: 12,
        ..SynthConfig::default()
    };
    generate(&cfg, root.join("data"), None)?;
    let ds = Dataset::open(root.join("data"))?;
    let pred = root.join("pred");
    let names: Vec<String> = ds.manifest.sequences.iter().map(|e| e.name.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let frames = ds.load_sequence(name)?;
        let mut recs = gt_records(&frames, &ds.template, &pred, name, true)?;
        if k == 0 {
            // shift every person 5 cm and bend the camera path
            for (t, r) in recs.iter_mut().enumerate() {
                r.pose.tx += 0.01 * t as f64;
                for p in r.people.iter_mut() {
                    for j in p.joints_cam.iter_mut().flatten().chain(p.verts_cam.iter_mut().flatten()) {
                        let v = Vec3::new(j[0], j[1], j[2]) + Vec3::new(0.05, 0.0, 0.0);
                        *j = [v.x, v.y, v.z];
                    }
                }
            }
        }
        let mut w = StreamWriter::create(stream_path(&pred, name))?;
        for r in &recs {
            w.write(r)?;
        }
        w.finish()?;
    }
    let rep = evaluate_dataset(&ds, &names, &pred, &EvalOptions::default(), None)?;
    print!("{}", rep.table());
    println!("coverage {:.2}, person coverage {:.2}", rep.coverage, rep.person_coverage);
    Ok(())
}
