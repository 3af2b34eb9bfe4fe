use super::*;
use crate::recurrence::{StreamWriter, FrameRecord};
use crate::synth::{generate, Dataset, SynthConfig};

fn dataset(dir: &std::path::Path) -> Dataset {
    let cfg = SynthConfig {
        sequences: 2,
        val_sequences: 1,
        frames: 6,
        ..SynthConfig::default()
    };
    generate(&cfg, dir, Some(1)).unwrap();
    Dataset::open(dir).unwrap()
}

fn write(path: &std::path::Path, recs: &[FrameRecord]) {
    let mut w = StreamWriter::create(path).unwrap();
    for r in recs {
        w.write(r).unwrap();
    }
    w.finish().unwrap();
}

#[test]
fn gt_against_gt_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let pred = tmp.path().join("pred");
    let names: Vec<String> = ds.manifest.sequences.iter().map(|e| e.name.clone()).collect();
    for n in &names {
        let frames = ds.load_sequence(n).unwrap();
        let recs = gt_records(&frames, &ds.template, &pred, n, true).unwrap();
        write(&stream_path(&pred, n), &recs);
    }
    let rep = evaluate_dataset(&ds, &names, &pred, &EvalOptions::default(), Some(1)).unwrap();
    let a = &rep.aggregate;
    assert_eq!(rep.coverage, 1.0);
    assert_eq!(rep.person_coverage, 1.0);
    for v in [a.mpjpe, a.pa_mpjpe, a.pve, a.mrpe, a.w_mpjpe, a.wa_mpjpe, a.rte, a.ate, a.abs_rel] {
        assert_eq!(v, Some(0.0));
    }
    assert_eq!(a.delta, Some(1.0));
    rep.check_strict().unwrap();
    assert!(rep.sequences[0].tracks[0].segments.len() == 1);
    let out = tmp.path().join("report");
    rep.write(&out).unwrap();
    assert!(std::fs::read_to_string(out.join("report.txt")).unwrap().contains("ALL"));
}

#[test]
fn truncated_stream_loses_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let pred = tmp.path().join("pred");
    let n = ds.manifest.sequences[0].name.clone();
    let frames = ds.load_sequence(&n).unwrap();
    let recs = gt_records(&frames, &ds.template, &pred, &n, false).unwrap();
    write(&stream_path(&pred, &n), &recs[..3]);
    let rep = evaluate_dataset(&ds, &[n], &pred, &EvalOptions::default(), Some(1)).unwrap();
    assert_eq!(rep.coverage, 0.5);
    assert!(rep.undefined().contains(&"abs_rel"));
    assert!(rep.check_strict().is_err());
}
