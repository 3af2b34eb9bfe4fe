use rand::Rng;

use super::params::{Graph, Group, ParamId, ParamStore};
use crate::diffcore::{Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / d_in.max(1) as f64).sqrt();
        Self::with_std(store, name, d_in, d_out, std, group, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], std, group, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]), group);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let b = g.p(self.b);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: Group) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d]), group),
        }
    }

    /// Normalizes each row of an `n×d` matrix.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.p(self.gamma);
        let bt = g.p(self.beta);
        g.tape.layernorm(x, gm, bt, 1)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, group, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, group, rng),
        }
    }

    /// As [`Mlp::new`] with a custom init scale on the output layer.
    #[allow(clippy::too_many_arguments)]
    pub fn with_out_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        out_std: f64,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, group, rng),
            l2: Linear::with_std(store, &format!("{name}.fc2"), hidden, d_out, out_std, group, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.l2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

/// Attention output plus, when requested, the head-averaged sigmoid of the
/// raw logits averaged over keys (one value per query row).
pub struct AttnOut {
    pub out: Var,
    pub gate: Option<Vec<f64>>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, group: Group, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, group, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, group, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, group, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, group, rng),
            n_heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, want_gate: bool) -> Result<AttnOut> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let d = g.tape.shape(q)[1];
        let nq = g.tape.shape(q)[0];
        let nk = g.tape.shape(k)[0];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut gate = want_gate.then(|| vec![0.0; nq]);
        for h in 0..self.n_heads {
            let qh = g.tape.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.tape.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.tape.slice(v, 1, h * dh, (h + 1) * dh)?;
            let s = g.tape.matmul_t(qh, kh, false, true)?;
            let s = g.tape.scale(s, scale);
            if let Some(gate) = gate.as_mut() {
                let sv = g.tape.value(s).data();
                for (i, gi) in gate.iter_mut().enumerate() {
                    let row = &sv[i * nk..(i + 1) * nk];
                    let m: f64 = row.iter().map(|&x| crate::diffcore::sigmoid(x)).sum::<f64>() / nk as f64;
                    *gi += m / self.n_heads as f64;
                }
            }
            let a = g.tape.softmax(s, 1)?;
            heads.push(g.tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.tape.concat(&heads, 1)? };
        Ok(AttnOut {
            out: self.o.forward(g, cat)?,
            gate,
        })
    }
}

/// Pre-norm transformer block: self-attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, hidden: usize, group: Group, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, group),
            attn: Attention::new(store, &format!("{name}.attn"), d, n_heads, group, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, group),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, d, group, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, false)?.out;
        let x = g.tape.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(x, m)
    }
}

/// Fixed 2D sinusoidal encoding: the first half of the channels encodes
/// the patch row, the second half the column.
pub fn sincos_2d(rows: usize, cols: usize, d: usize) -> Tensor {
    let q = d / 4;
    Tensor::from_fn(vec![rows * cols, d], |idx| {
        let (t, c) = (idx / d, idx % d);
        let (i, j) = (t / cols, t % cols);
        let (pos, c) = if c < 2 * q { (i, c) } else { (j, c - 2 * q) };
        let k = c % q;
        let freq = 1.0 / 100f64.powf(k as f64 / q.max(1) as f64);
        let a = pos as f64 * freq;
        if c < q {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sincos_rows_are_distinct() {
        let pe = sincos_2d(8, 8, 64);
        for a in 0..64 {
            for b in 0..a {
                let d: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-3);
            }
        }
    }

    #[test]
    fn uniform_gate_for_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 2, Group::Backbone, &mut rng);
        // zero query weights give zero logits, hence gate sigmoid(0)
        store.set(attn.q.w, Tensor::zeros(vec![8, 8]));
        let mut g = Graph::new(&store, false, &[]);
        let x = g.tape.constant(Tensor::full(vec![3, 8], 0.3));
        let kv = g.tape.constant(Tensor::full(vec![5, 8], -0.1));
        let out = attn.forward(&mut g, x, kv, true).unwrap();
        for v in out.gate.unwrap() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(g.tape.shape(out.out), &[3, 8]);
    }
}
