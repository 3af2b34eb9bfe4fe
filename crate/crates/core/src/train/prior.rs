use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::person_targets;
use super::optim::{lr_at, AdamW};
use super::runner::TrainData;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netcore::{Graph, Group, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub steps: u64,
    pub lr: f64,
    /// Crops per step.
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 2e-3,
            batch: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// One single-person crop: the frame, the head patch and the regression target.
struct Crop<'a> {
    image: &'a Tensor,
    patch: usize,
    target: Vec<f64>,
}

fn crops(data: &TrainData) -> Result<Vec<Crop<'_>>> {
    let mut out = Vec::new();
    for seq in &data.train {
        for f in seq {
            for p in person_targets(f, &data.tpl)? {
                let mut target = p.coeffs.clone();
                target.extend_from_slice(&p.rot);
                out.push(Crop {
                    image: &f.image,
                    patch: p.patch,
                    target,
                });
            }
        }
    }
    Ok(out)
}

/// L1 of the prior readout over `idx` crops; gradients flow to the prior only.
fn crop_loss(model: &Model, crops: &[Crop], idx: &[usize], record: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new(&model.store, record, &[Group::Backbone, Group::Human]);
    let mut rows = Vec::with_capacity(idx.len());
    let mut target = Vec::new();
    for &i in idx {
        let c = &crops[i];
        let tok = model
            .prior_encode(&mut g, c.image, &[c.patch])?
            .ok_or_else(|| Error::Config("prior encoder disabled".into()))?;
        rows.push(tok);
        target.extend_from_slice(&c.target);
    }
    let toks = g.tape.concat(&rows, 0)?;
    let pred = model.prior_head(&mut g, toks)?;
    let k = target.len() / idx.len();
    let t = g.tape.constant(Tensor::new(vec![idx.len(), k], target)?);
    let d = g.tape.sub(pred, t)?;
    let l = g.tape.l1(d);
    let v = g.tape.value(l).item();
    if record {
        g.tape.backward(l)?;
        return Ok((v, Some(g.param_grads())));
    }
    Ok((v, None))
}

/// Trains the prior encoder alone on single-person crops around labelled
/// head patches, regressing θ, β, α and the camera-frame root rotation.
/// Returns the per-step losses; every other parameter is left untouched.
pub fn pretrain_prior(model: &mut Model, data: &TrainData, cfg: &PriorConfig) -> Result<Vec<f64>> {
    if model.prior.is_none() {
        return Err(Error::Config("prior encoder disabled (c_prior = 0)".into()));
    }
    let crops = crops(data)?;
    if crops.is_empty() {
        return Err(Error::Config("no labelled people to pretrain the prior on".into()));
    }
    let trainable: Vec<bool> = model.store.entries.iter().map(|e| e.group == Group::Prior).collect();
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..crops.len())).collect();
        let (l, grads) = crop_loss(model, &crops, &idx, true)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("prior pretraining loss at step {step}")));
        }
        let lr = lr_at(step, cfg.lr, cfg.steps / 20, cfg.steps);
        opt.step(&mut model.store, &grads.expect("recorded"), lr, &trainable);
        losses.push(l);
    }
    Ok(losses)
}

/// Mean prior readout L1 over up to `limit` validation crops.
pub fn prior_val_l1(model: &Model, data: &TrainData, limit: usize) -> Result<f64> {
    let val = TrainData {
        tpl: data.tpl.clone(),
        patch: data.patch,
        train: data.val.clone(),
        val: Vec::new(),
    };
    let crops = crops(&val)?;
    let n = crops.len().min(limit);
    if n == 0 {
        return Err(Error::Config("no validation crops".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(crop_loss(model, &crops, &idx, false)?.0)
}
