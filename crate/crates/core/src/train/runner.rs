use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{window_loss, window_targets, LossTerms};
use super::losses::LossWeights;
use super::optim::{clip_grad_norm, lr_at, AdamW};
use crate::body::BodyTemplate;
use crate::error::{Error, Result};
use crate::netcore::{load_checkpoint, save_checkpoint, Group, Model};
use crate::synth::{Dataset, Frame};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const OPTIM_FILE: &str = "optim.t4dr";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    /// Total steps; also the cosine horizon.
    pub steps: u64,
    pub batch: usize,
    pub window: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train only the human-specific layers.
    pub freeze_backbone: bool,
    pub ckpt_every: u64,
    /// Validation cadence in steps; 0 validates only at the start and end.
    pub val_every: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup: 50,
            steps: 1000,
            batch: 8,
            window: 4,
            weight_decay: 0.01,
            seed: 0,
            freeze_backbone: false,
            ckpt_every: 100,
            val_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || self.batch == 0 || self.window == 0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr, steps, batch and window must be positive; weight decay non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Groups kept fixed: the prior encoder always, the backbone on request.
    pub fn frozen(&self) -> Vec<Group> {
        if self.freeze_backbone {
            vec![Group::Prior, Group::Backbone]
        } else {
            vec![Group::Prior]
        }
    }
}

/// Frames held in memory for training and validation.
pub struct TrainData {
    pub tpl: BodyTemplate,
    pub patch: usize,
    pub train: Vec<Vec<Frame>>,
    pub val: Vec<Vec<Frame>>,
}

impl TrainData {
    pub fn load(ds: &Dataset, max_train: Option<usize>, max_val: Option<usize>) -> Result<Self> {
        let take = |names: &[String], cap: Option<usize>| -> Result<Vec<Vec<Frame>>> {
            names
                .iter()
                .take(cap.unwrap_or(usize::MAX))
                .map(|n| ds.load_sequence(n))
                .collect()
        };
        Ok(Self {
            tpl: ds.template.clone(),
            patch: ds.config().patch,
            train: take(&ds.manifest.train, max_train)?,
            val: take(&ds.manifest.val, max_val)?,
        })
    }
}

/// Sorted random subset of `window` frame indices out of `len`.
pub fn sample_window(rng: &mut impl Rng, len: usize, window: usize) -> Vec<usize> {
    let mut idx = sample(rng, len, window.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Evenly spaced window used for validation.
pub fn val_window(len: usize, window: usize) -> Vec<usize> {
    let k = window.min(len);
    if k <= 1 {
        return vec![0];
    }
    (0..k).map(|i| i * (len - 1) / (k - 1)).collect()
}

fn run_window(
    model: &Model,
    data: &TrainData,
    seq: &[Frame],
    idx: &[usize],
    w: &LossWeights,
    frozen: Option<&[Group]>,
) -> Result<super::batch::WindowResult> {
    let frames: Vec<&Frame> = idx.iter().map(|&i| &seq[i]).collect();
    let targets = window_targets(&frames, &data.tpl, data.patch)?;
    let images: Vec<_> = frames.iter().map(|f| &f.image).collect();
    window_loss(model, &data.tpl, &images, &targets, w, frozen)
}

/// Mean window loss over the validation split.
pub fn validation_loss(model: &Model, data: &TrainData, window: usize, w: &LossWeights) -> Result<(f64, LossTerms)> {
    if data.val.is_empty() {
        return Err(Error::Config("dataset has no validation sequences".into()));
    }
    let mut terms = LossTerms::default();
    let mut total = 0.0;
    for seq in &data.val {
        let r = run_window(model, data, seq, &val_window(seq.len(), window), w, None)?;
        total += r.total;
        terms.add(&r.terms, 1.0);
    }
    let n = data.val.len() as f64;
    let mut mean = LossTerms::default();
    mean.add(&terms, 1.0 / n);
    Ok((total / n, mean))
}

/// Model, optimizer and step counter.
pub struct TrainSession {
    pub model: Model,
    pub opt: AdamW,
    pub step: u64,
}

impl TrainSession {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&model.store, cfg.weight_decay);
        Self { model, opt, step: 0 }
    }

    /// Continues from a checkpoint directory written by [`train_loop`].
    pub fn resume(dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let (model, m) = load_checkpoint(dir)?;
        let mut opt = AdamW::new(&model.store, cfg.weight_decay);
        let op = dir.join(OPTIM_FILE);
        if op.exists() {
            opt.load(&op)?;
        }
        Ok(Self {
            model,
            opt,
            step: m.step,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        save_checkpoint(dir, &self.model, self.step, seed)?;
        self.opt.save(dir.join(OPTIM_FILE))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// `(step, total, terms)` per optimizer step.
    pub history: Vec<(u64, f64, LossTerms)>,
    pub val_initial: Option<f64>,
    pub val_final: Option<f64>,
    pub val_terms_final: Option<LossTerms>,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

struct Metrics {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl Metrics {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                out: None,
                path: PathBuf::new(),
            });
        };
        let path = dir.join(METRICS_FILE);
        let fresh = !append || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut m = Self {
            out: Some(BufWriter::new(file)),
            path,
        };
        if fresh {
            let head = format!("step,total,{},lr,val_total", LossTerms::NAMES.join(","));
            m.line(&head)?;
        }
        Ok(m)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            writeln!(w, "{s}").and_then(|_| w.flush()).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Optimizes the session for `cfg.steps` total steps. Each step averages
/// gradients over `cfg.batch` windows of `cfg.window` frames drawn with a
/// per-step seed, so resumed runs see the same batches.
pub fn train_loop(
    session: &mut TrainSession,
    data: &TrainData,
    cfg: &TrainConfig,
    w: &LossWeights,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("dataset has no training sequences".into()));
    }
    let start = std::time::Instant::now();
    let resumed = session.step > 0;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics = Metrics::open(out, resumed)?;
    let ckpt_dir = out.map(|d| d.join(CHECKPOINT_DIR));
    let frozen = cfg.frozen();
    let trainable: Vec<bool> = session
        .model
        .store
        .entries
        .iter()
        .map(|e| !frozen.contains(&e.group))
        .collect();
    let has_val = !data.val.is_empty();
    let mut outcome = TrainOutcome::default();
    if has_val {
        outcome.val_initial = Some(validation_loss(&session.model, data, cfg.window, w)?.0);
    }
    let mut last_good: Option<PathBuf> = None;

    while session.step < cfg.steps {
        let step = session.step;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step + 1);
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut terms = LossTerms::default();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let seq = &data.train[rng.gen_range(0..data.train.len())];
            let idx = sample_window(&mut rng, seq.len(), cfg.window);
            let r = run_window(&session.model, data, seq, &idx, w, Some(&frozen))?;
            total += r.total / cfg.batch as f64;
            terms.add(&r.terms, 1.0 / cfg.batch as f64);
            let g = r.grads.expect("recorded");
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(a, b)| *a += b),
            }
        }
        if !total.is_finite() {
            let where_ = last_good
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into());
            return Err(Error::NonFinite(format!(
                "training loss at step {step}; last good checkpoint: {where_}"
            )));
        }
        let mut grads = grads.expect("batch ≥ 1");
        let inv = 1.0 / cfg.batch as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(step, cfg.lr, cfg.warmup, cfg.steps);
        session.opt.step(&mut session.model.store, &grads, lr, &trainable);
        session.step += 1;
        outcome.history.push((step, total, terms));

        let mut val_cell = String::new();
        if has_val && cfg.val_every > 0 && session.step.is_multiple_of(cfg.val_every) && session.step < cfg.steps {
            let v = validation_loss(&session.model, data, cfg.window, w)?.0;
            val_cell = format!("{v}");
            log::info!("step {} val {:.4}", session.step, v);
        }
        let vals: Vec<String> = terms.values().iter().map(|v| format!("{v}")).collect();
        metrics.line(&format!("{step},{total},{},{lr},{val_cell}", vals.join(",")))?;
        if step.is_multiple_of(25) {
            log::info!("step {step} loss {total:.4} lr {lr:.2e}");
        }
        if let Some(dir) = &ckpt_dir {
            if cfg.ckpt_every > 0 && session.step.is_multiple_of(cfg.ckpt_every) {
                session.save(dir, cfg.seed)?;
                last_good = Some(dir.clone());
            }
        }
    }
    if let Some(dir) = &ckpt_dir {
        session.save(dir, cfg.seed)?;
        outcome.checkpoint = Some(dir.clone());
    }
    if has_val {
        let (v, t) = validation_loss(&session.model, data, cfg.window, w)?;
        outcome.val_final = Some(v);
        outcome.val_terms_final = Some(t);
    }
    outcome.seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}
