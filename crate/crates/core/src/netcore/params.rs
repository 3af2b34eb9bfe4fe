use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};

/// Parameter groups; freezing works at group granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Tokenizer, encoder, decoders, state, camera token and scene heads.
    Backbone,
    /// Prompt projection, human readout, detector and mask heads.
    Human,
    /// The separately pretrained prior encoder.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub group: Group,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Normal init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        group: Group,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std.max(1e-300)).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| if std > 0.0 { dist.sample(rng) } else { 0.0 }).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), group)
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        self.entries[id.0].value = Arc::new(t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    frozen: Vec<Group>,
}

impl<'s> Graph<'s> {
    /// `record = false` builds a gradient-free tape for inference.
    pub fn new(store: &'s ParamStore, record: bool, frozen: &[Group]) -> Self {
        Self {
            tape: if record { Tape::new() } else { Tape::no_grad() },
            store,
            vars: vec![None; store.len()],
            frozen: frozen.to_vec(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let trainable = !self.frozen.contains(&e.group);
        let v = self.tape.param(Arc::clone(&e.value), id.0, trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Gradients per parameter (zeros for untouched or frozen ones).
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .store
            .entries
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        for (id, g) in self.tape.param_grads() {
            for (o, v) in out[id].iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }
}
