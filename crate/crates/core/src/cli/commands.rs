use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{echo, layered, ov, EvalArgs, GenArgs, InferArgs, TrainArgs};
use crate::body::BodyTemplate;
use crate::diffcore::{load_all, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, stream_path, EvalOptions, EvalReport};
use crate::netcore::{load_checkpoint, Model, ModelConfig};
use crate::recurrence::{ExportOptions, StreamContext, StreamOptions, StreamWriter, UpdateMode, DEFAULT_RESET};
use crate::synth::{generate, Dataset, Manifest, SynthConfig};
use crate::tracking::TrackerConfig;
use crate::train::{
    pretrain_prior, train_loop, LossWeights, PriorConfig, TrainConfig, TrainData, TrainOutcome, TrainSession,
    CHECKPOINT_DIR,
};

pub type GenRun = SynthConfig;

/// Renders a dataset.
pub fn cmd_gen(a: &GenArgs) -> Result<Manifest> {
    let cfg: GenRun = layered(
        &SynthConfig::default(),
        a.config.as_deref(),
        vec![
            ov("seed", a.seed),
            ov("sequences", a.sequences),
            ov("val_sequences", a.val_sequences),
            ov("frames", a.frames),
            ov("width", a.width),
            ov("height", a.height),
            ov("focal", a.focal),
            ov("people_min", a.people_min),
            ov("people_max", a.people_max),
            ov("n_boxes", a.n_boxes),
        ],
    )?;
    echo("gen", &cfg);
    println!("# workers {}", a.workers.map_or("all".to_string(), |w| w.to_string()));
    cfg.validate()?;
    let t = Instant::now();
    let m = generate(&cfg, &a.out, a.workers)?;
    println!(
        "wrote {} sequences ({} train, {} val) to {} in {:.1}s",
        m.sequences.len(),
        m.train.len(),
        m.val.len(),
        a.out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub train: TrainConfig,
    pub prior: PriorConfig,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub use_prior: bool,
    pub max_train: Option<usize>,
    pub max_val: Option<usize>,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            prior: PriorConfig::default(),
            weights: LossWeights::default(),
            model: ModelConfig::desk(),
            model_seed: 0,
            use_prior: true,
            max_train: None,
            max_val: None,
        }
    }
}

/// Model configuration matched to a dataset's frames.
pub fn model_config_for(base: &ModelConfig, synth: &SynthConfig, use_prior: bool) -> ModelConfig {
    let mut m = base.clone();
    m.width = synth.width;
    m.height = synth.height;
    m.channels = synth.channels();
    m.patch = synth.patch;
    if !use_prior {
        m.c_prior = 0;
    }
    m
}

/// Trains (or resumes) a model and writes checkpoint and metrics.
pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let ds = Dataset::open(&a.data)?;
    let mut run: TrainRun = layered(
        &TrainRun::default(),
        a.config.as_deref(),
        vec![
            ov("train.steps", a.steps),
            ov("train.lr", a.lr),
            ov("train.warmup", a.warmup),
            ov("train.batch", a.batch),
            ov("train.window", a.window),
            ov("train.weight_decay", a.weight_decay),
            ov("train.seed", a.seed),
            ov("train.freeze_backbone", a.freeze_backbone.then_some(true)),
            ov("train.ckpt_every", a.ckpt_every),
            ov("train.val_every", a.val_every),
            ov("train.grad_clip", a.grad_clip),
            ov("prior.steps", a.prior_steps),
            ov("use_prior", a.no_prior.then_some(false)),
            ov("max_train", a.max_train),
            ov("max_val", a.max_val),
        ],
    )?;
    run.model = model_config_for(&run.model, ds.config(), run.use_prior);
    echo("train", &run);
    run.train.validate()?;
    run.weights.validate()?;
    run.model.validate()?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cp = a.out.join("effective_config.json");
    let js = serde_json::to_string_pretty(&run).map_err(|e| Error::json(&cp, e))?;
    fs::write(&cp, js).map_err(|e| Error::io(&cp, e))?;

    let data = TrainData::load(&ds, run.max_train, run.max_val)?;
    let mut session = if a.resume {
        let s = TrainSession::resume(a.out.join(CHECKPOINT_DIR), &run.train)?;
        if s.model.cfg != run.model {
            return Err(Error::Config("checkpoint model config differs from the effective config".into()));
        }
        println!("resuming at step {}", s.step);
        s
    } else {
        let mut model = Model::new(run.model.clone(), run.model_seed)?;
        if model.prior.is_some() && run.prior.steps > 0 {
            let h = pretrain_prior(&mut model, &data, &run.prior)?;
            println!(
                "prior pretraining L1 {:.4} -> {:.4}",
                h.first().copied().unwrap_or(f64::NAN),
                h.last().copied().unwrap_or(f64::NAN)
            );
        }
        TrainSession::new(model, &run.train)
    };
    let out = train_loop(&mut session, &data, &run.train, &run.weights, Some(&a.out))?;
    if let (Some(v0), Some(v1)) = (out.val_initial, out.val_final) {
        println!("validation loss {v0:.4} -> {v1:.4}");
    }
    println!(
        "trained to step {} in {:.1}s; checkpoint {}",
        session.step,
        out.seconds,
        a.out.join(CHECKPOINT_DIR).display()
    );
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRun {
    pub split: String,
    pub mode: UpdateMode,
    pub reset: usize,
    pub tau: Option<f64>,
    pub export: ExportOptions,
    pub tracker: TrackerConfig,
}

impl Default for InferRun {
    fn default() -> Self {
        Self {
            split: "val".into(),
            mode: UpdateMode::Vanilla,
            reset: DEFAULT_RESET,
            tau: None,
            export: ExportOptions::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

/// Throughput of an inference run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub sequences: usize,
    pub frames: usize,
    /// Time spent inside the per-frame step, seconds.
    pub seconds: f64,
    pub fps: f64,
}

fn split_names(ds: &Dataset, split: &str) -> Result<Vec<String>> {
    let m = &ds.manifest;
    match split {
        "train" => Ok(m.train.clone()),
        "val" => Ok(m.val.clone()),
        "all" => Ok(m.sequences.iter().map(|e| e.name.clone()).collect()),
        s => Err(Error::Config(format!("unknown split {s:?} (expected train, val or all)"))),
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "t4dr"))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Config(format!("no .t4dr frames in {}", dir.display())));
    }
    Ok(v)
}

fn stream_one(
    model: &Model,
    opts: &StreamOptions,
    run: &InferRun,
    tpl: Option<&BodyTemplate>,
    out: &Path,
    name: &str,
    images: impl Iterator<Item = Result<Tensor>>,
) -> Result<(usize, f64)> {
    let mut ctx = StreamContext::new(model, opts.clone())?;
    let mut w = StreamWriter::create(stream_path(out, name))?;
    let (mut n, mut secs) = (0, 0.0);
    for img in images {
        let img = img?;
        let t = Instant::now();
        let fo = ctx.step(&img)?;
        secs += t.elapsed().as_secs_f64();
        w.write(&fo.to_record(tpl, &run.export, out, name)?)?;
        n += 1;
    }
    w.finish()?;
    Ok((n, secs))
}

/// Streams sequences through a checkpoint, writing `<out>/<seq>.jsonl`.
pub fn cmd_infer(a: &InferArgs) -> Result<InferSummary> {
    let run: InferRun = layered(
        &InferRun::default(),
        a.config.as_deref(),
        vec![
            ov("split", a.split.clone()),
            ov("mode", a.mode),
            ov("reset", a.reset),
            ov("tau", a.tau),
            ov("export.depth", a.export_depth.then_some(true)),
            ov("export.mask", a.export_mask.then_some(true)),
            ov("export.ply", a.export_ply.then_some(true)),
            ov("export.obj", a.export_obj.then_some(true)),
        ],
    )?;
    echo("infer", &run);
    let (model, manifest) = load_checkpoint(&a.ckpt)?;
    println!("# checkpoint step {}", manifest.step);
    let opts = StreamOptions {
        mode: run.mode,
        reset: run.reset,
        tau: run.tau,
        tracker: run.tracker,
    };
    // validates the period and threshold before any work
    StreamContext::new(&model, opts.clone())?;
    let c = &model.cfg;
    let (mut frames, mut secs, mut seqs) = (0, 0.0, 0);
    match (&a.data, &a.images) {
        (Some(root), None) => {
            let ds = Dataset::open(root)?;
            let sc = ds.config();
            let want = [c.height, c.width, c.channels];
            let got = [sc.height, sc.width, sc.channels()];
            if want != got {
                return Err(Error::shape("infer frames", &want, &got));
            }
            let names = if a.seqs.is_empty() { split_names(&ds, &run.split)? } else { a.seqs.clone() };
            for name in &names {
                let e = ds.entry(name)?;
                let imgs = (0..e.frames).map(|t| ds.load_frame(name, t).map(|f| f.image));
                let (n, s) = stream_one(&model, &opts, &run, Some(&ds.template), &a.out, name, imgs)?;
                frames += n;
                secs += s;
                seqs += 1;
            }
        }
        (None, Some(dir)) => {
            let tpl = a.template.as_ref().map(BodyTemplate::load).transpose()?;
            let name = dir.file_name().map_or("stream".into(), |s| s.to_string_lossy().into_owned());
            let imgs = image_files(dir)?.into_iter().map(|p| {
                load_all(&p)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Format(format!("{} holds no tensors", p.display())))
            });
            let (n, s) = stream_one(&model, &opts, &run, tpl.as_ref(), &a.out, &name, imgs)?;
            frames += n;
            secs += s;
            seqs += 1;
        }
        _ => return Err(Error::Config("give exactly one of --data or --images".into())),
    }
    let fps = if secs > 0.0 { frames as f64 / secs } else { 0.0 };
    println!("throughput: {fps:.1} frames/s ({frames} frames over {seqs} sequences in {secs:.2}s)");
    Ok(InferSummary {
        sequences: seqs,
        frames,
        seconds: secs,
        fps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub split: String,
    pub options: EvalOptions,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            split: "val".into(),
            options: EvalOptions::default(),
        }
    }
}

/// Scores prediction streams and writes the report.
pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let run: EvalRun = layered(
        &EvalRun::default(),
        a.config.as_deref(),
        vec![
            ov("split", a.split.clone()),
            ov("options.w_align_scale", a.w_align_scale.then_some(true)),
        ],
    )?;
    echo("eval", &run);
    let ds = Dataset::open(&a.data)?;
    if !a.pred.is_dir() {
        return Err(Error::io(&a.pred, std::io::Error::new(std::io::ErrorKind::NotFound, "no prediction directory")));
    }
    let names = split_names(&ds, &run.split)?;
    let rep = evaluate_dataset(&ds, &names, &a.pred, &run.options, a.workers)?;
    print!("{}", rep.table());
    if let Some(out) = &a.out {
        rep.write(out)?;
    }
    if a.strict {
        rep.check_strict()?;
    }
    Ok(rep)
}
