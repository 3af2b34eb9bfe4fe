use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{sincos_2d, Attention, Block, LayerNorm, Linear, Mlp};
use super::params::{Graph, Group, ParamId, ParamStore};
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};

/// Prior window around a head patch: rows `i-1..=i+4`, columns `j-1..=j+1`.
pub const PRIOR_ROWS: (isize, isize) = (-1, 4);
pub const PRIOR_COLS: (isize, isize) = (-1, 1);

pub fn prior_slots() -> usize {
    ((PRIOR_ROWS.1 - PRIOR_ROWS.0 + 1) * (PRIOR_COLS.1 - PRIOR_COLS.0 + 1)) as usize
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    t_ln1: LayerNorm,
    t_self: Attention,
    t_ln2: LayerNorm,
    t_ln_kv: LayerNorm,
    t_cross: Attention,
    t_ln3: LayerNorm,
    t_mlp: Mlp,
    s_ln1: LayerNorm,
    s_self: Attention,
    s_ln2: LayerNorm,
    s_ln_kv: LayerNorm,
    s_cross: Attention,
    s_ln3: LayerNorm,
    s_mlp: Mlp,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, nh, hid) = (cfg.d_model, cfg.n_heads, cfg.hidden());
        let g = Group::Backbone;
        let ln = |store: &mut ParamStore, s: &str| LayerNorm::new(store, &format!("{name}.{s}"), d, g);
        Self {
            t_ln1: ln(store, "t_ln1"),
            t_self: Attention::new(store, &format!("{name}.t_self"), d, nh, g, rng),
            t_ln2: ln(store, "t_ln2"),
            t_ln_kv: ln(store, "t_ln_kv"),
            t_cross: Attention::new(store, &format!("{name}.t_cross"), d, nh, g, rng),
            t_ln3: ln(store, "t_ln3"),
            t_mlp: Mlp::new(store, &format!("{name}.t_mlp"), d, hid, d, g, rng),
            s_ln1: ln(store, "s_ln1"),
            s_self: Attention::new(store, &format!("{name}.s_self"), d, nh, g, rng),
            s_ln2: ln(store, "s_ln2"),
            s_ln_kv: ln(store, "s_ln_kv"),
            s_cross: Attention::new(store, &format!("{name}.s_cross"), d, nh, g, rng),
            s_ln3: ln(store, "s_ln3"),
            s_mlp: Mlp::new(store, &format!("{name}.s_mlp"), d, hid, d, g, rng),
        }
    }

    /// One interleaved layer. Both branches read the other's layer input.
    /// `state_kv` is the slice of `tokens` the state branch attends to.
    fn forward(
        &self,
        g: &mut Graph,
        tokens: Var,
        state: Var,
        state_kv_rows: usize,
        want_gate: bool,
    ) -> Result<(Var, Var, Option<Vec<f64>>)> {
        // token branch
        let h = self.t_ln1.forward(g, tokens)?;
        let a = self.t_self.forward(g, h, h, false)?.out;
        let t = g.tape.add(tokens, a)?;
        let h = self.t_ln2.forward(g, t)?;
        let kv = self.t_ln_kv.forward(g, state)?;
        let a = self.t_cross.forward(g, h, kv, false)?.out;
        let t = g.tape.add(t, a)?;
        let h = self.t_ln3.forward(g, t)?;
        let m = self.t_mlp.forward(g, h)?;
        let t_out = g.tape.add(t, m)?;

        // state branch
        let h = self.s_ln1.forward(g, state)?;
        let a = self.s_self.forward(g, h, h, false)?.out;
        let s = g.tape.add(state, a)?;
        let h = self.s_ln2.forward(g, s)?;
        let src = if state_kv_rows == g.tape.shape(tokens)[0] {
            tokens
        } else {
            g.tape.slice(tokens, 0, 0, state_kv_rows)?
        };
        let kv = self.s_ln_kv.forward(g, src)?;
        let ca = self.s_cross.forward(g, h, kv, want_gate)?;
        let s = g.tape.add(s, ca.out)?;
        let h = self.s_ln3.forward(g, s)?;
        let m = self.s_mlp.forward(g, h)?;
        let s_out = g.tape.add(s, m)?;
        Ok((t_out, s_out, ca.gate))
    }
}

/// Second tokenizer over a window of raw patches below a head patch,
/// pretrained separately to regress body parameters and then frozen.
#[derive(Clone, Debug)]
pub struct PriorEncoder {
    pub embed: Linear,
    pub mlp: Mlp,
    /// Pretraining readout; unused by the main model.
    pub head: Linear,
}

/// Pretraining targets of the prior: θ, β, α and the 9 root rotation entries.
pub fn prior_target_len(cfg: &ModelConfig) -> usize {
    cfg.body.n_theta() * 3 + cfg.body.n_beta + cfg.body.n_alpha + 9
}

/// Decoder outputs for one frame.
pub struct Decoded {
    pub z: Var,
    pub f: Var,
    pub h: Option<Var>,
    pub state: Var,
    /// Per state row: head-averaged sigmoid of final cross-attention logits,
    /// averaged over keys.
    pub gate: Option<Vec<f64>>,
}

/// Every head output of one frame, still on the tape.
pub struct FrameVars {
    /// Encoder tokens `hw×c` (input to the detector and mask heads).
    pub f: Var,
    /// Detection logits `hw×1`.
    pub det_logits: Var,
    /// Mask logits `hw×p²`, patch order.
    pub mask_logits: Var,
    /// `hw×(p²·4)`: per pixel (x, y, z, raw confidence), patch order.
    pub cam_raw: Var,
    pub world_raw: Var,
    /// `1×7`: raw quaternion (w, x, y, z) and translation.
    pub pose_raw: Var,
    /// `n×human_out` raw body parameters, one row per prompt.
    pub human_raw: Option<Var>,
    pub h_refined: Option<Var>,
    pub state: Var,
    pub gate: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    embed: Linear,
    pe: Tensor,
    enc: Vec<Block>,
    cam_token: ParamId,
    state0: ParamId,
    dec: Vec<DecoderLayer>,
    tok_ln: LayerNorm,
    state_ln: LayerNorm,
    det_head: Mlp,
    mask_head: Mlp,
    cam_head: Mlp,
    world_l1: Linear,
    world_lz: Linear,
    world_l2: Linear,
    pose_head: Mlp,
    proj: Mlp,
    human_head: Mlp,
    pub prior: Option<PriorEncoder>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let (d, hid) = (cfg.d_model, cfg.hidden());
        let pp = cfg.mask_pixels();
        let bb = Group::Backbone;
        let hu = Group::Human;
        let (gh, gw) = cfg.grid();

        let embed = Linear::new(&mut st, "tok.embed", cfg.patch_dim(), d, bb, &mut rng);
        let enc = (0..cfg.n_enc)
            .map(|i| Block::new(&mut st, &format!("enc.{i}"), d, cfg.n_heads, hid, bb, &mut rng))
            .collect();
        let cam_token = st.add_normal("cam_token", &[1, d], 1.0, bb, &mut rng);
        let state0 = st.add_normal("state0", &[cfg.n_state, d], 1.0, bb, &mut rng);
        let dec = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(&mut st, &format!("dec.{i}"), &cfg, &mut rng))
            .collect();
        let tok_ln = LayerNorm::new(&mut st, "dec.out_ln", d, bb);
        let state_ln = LayerNorm::new(&mut st, "dec.state_ln", d, bb);

        let det_head = Mlp::new(&mut st, "head.det", d, hid, 1, hu, &mut rng);
        let mask_head = Mlp::new(&mut st, "head.mask", d, hid, pp, hu, &mut rng);
        let cam_head = Mlp::new(&mut st, "head.cam", d, hid, pp * 4, bb, &mut rng);
        let world_l1 = Linear::new(&mut st, "head.world.fc1", d, hid, bb, &mut rng);
        let world_lz = Linear::new(&mut st, "head.world.fcz", d, hid, bb, &mut rng);
        let world_l2 = Linear::new(&mut st, "head.world.fc2", hid, pp * 4, bb, &mut rng);
        let pose_head = Mlp::with_out_std(&mut st, "head.pose", d, hid, 7, 1e-2 / (hid as f64).sqrt(), bb, &mut rng);
        st.set(pose_head.l2.b, Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));

        let proj = Mlp::new(&mut st, "head.proj", d + cfg.c_prior, hid, d, hu, &mut rng);
        let human_head = Mlp::with_out_std(
            &mut st,
            "head.human",
            d,
            hid,
            cfg.human_out(),
            0.1 / (hid as f64).sqrt(),
            hu,
            &mut rng,
        );
        // upright, facing the camera, a few meters ahead
        let mut bias = vec![0.0; cfg.human_out()];
        let q0 = cfg.human_out() - 7;
        bias[q0 + 1] = 1.0;
        bias[q0 + 6] = 3.5;
        st.set(human_head.l2.b, Tensor::vector(bias));

        let prior = (cfg.c_prior > 0).then(|| {
            let e = cfg.prior_embed;
            let pg = Group::Prior;
            PriorEncoder {
                embed: Linear::new(&mut st, "prior.embed", cfg.patch_dim(), e, pg, &mut rng),
                mlp: Mlp::new(&mut st, "prior.mlp", e * prior_slots(), hid, cfg.c_prior, pg, &mut rng),
                head: Linear::new(&mut st, "prior.head", cfg.c_prior, prior_target_len(&cfg), pg, &mut rng),
            }
        });

        let pe = sincos_2d(gh, gw, d);
        Ok(Self {
            cfg,
            store: st,
            embed,
            pe,
            enc,
            cam_token,
            state0,
            dec,
            tok_ln,
            state_ln,
            det_head,
            mask_head,
            cam_head,
            world_l1,
            world_lz,
            world_l2,
            pose_head,
            proj,
            human_head,
            prior,
        })
    }

    pub fn state0_id(&self) -> ParamId {
        self.state0
    }

    pub fn initial_state(&self) -> Tensor {
        (**self.store.get(self.state0)).clone()
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.cfg;
        let want = [c.height, c.width, c.channels];
        if image.shape() != want {
            return Err(Error::shape("image", &want, image.shape()));
        }
        Ok(())
    }

    /// Linear patch embedding plus the 2D positional encoding, `hw×c`.
    pub fn tokenize(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let x = patchify(image, self.cfg.patch)?;
        if x.shape()[1] != self.cfg.patch_dim() {
            return Err(Error::shape("tokenize", &[self.cfg.patch_dim()], &[x.shape()[1]]));
        }
        let x = g.tape.constant(x);
        let t = self.embed.forward(g, x)?;
        let pe = g.tape.constant(self.pe.clone());
        g.tape.add(t, pe)
    }

    /// Tokenizer followed by the encoder blocks.
    pub fn encode(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let mut f = self.tokenize(g, image)?;
        for b in &self.enc {
            f = b.forward(g, f)?;
        }
        Ok(f)
    }

    pub fn detect_logits(&self, g: &mut Graph, f: Var) -> Result<Var> {
        self.det_head.forward(g, f)
    }

    pub fn mask_logits(&self, g: &mut Graph, f: Var) -> Result<Var> {
        self.mask_head.forward(g, f)
    }

    /// Prior tokens `n×c_prior` for head patches `u`, or `None` when the
    /// prior is disabled or `u` is empty.
    pub fn prior_encode(&self, g: &mut Graph, image: &Tensor, u: &[usize]) -> Result<Option<Var>> {
        let Some(p) = &self.prior else { return Ok(None) };
        if u.is_empty() {
            return Ok(None);
        }
        let win = prior_windows(image, self.cfg.patch, u)?;
        let x = g.tape.constant(win);
        let e = p.embed.forward(g, x)?;
        let e = g.tape.gelu(e);
        let e = g.tape.reshape(e, &[u.len(), prior_slots() * self.cfg.prior_embed])?;
        Ok(Some(p.mlp.forward(g, e)?))
    }

    /// Human prompts `n×c` from encoder tokens at `u` and optional prior tokens.
    pub fn build_prompts(&self, g: &mut Graph, f: Var, u: &[usize], prior: Option<Var>) -> Result<Option<Var>> {
        if u.is_empty() {
            return Ok(None);
        }
        let mut seen = u.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != u.len() {
            return Err(Error::Contract("prompt source patches must be distinct".into()));
        }
        let fu = g.tape.rows(f, u)?;
        let x = match prior {
            Some(p) => {
                let n = g.tape.shape(p)[0];
                if n != u.len() {
                    return Err(Error::shape("build_prompts", &[u.len()], &[n]));
                }
                g.tape.concat(&[fu, p], 1)?
            }
            None if self.cfg.c_prior > 0 => {
                return Err(Error::Contract("prior tokens missing for an enabled prior".into()))
            }
            None => fu,
        };
        let h = self.proj.forward(g, x)?;
        let d = self.cfg.d_model;
        let mut pe = Vec::with_capacity(u.len() * d);
        for &i in u {
            pe.extend_from_slice(self.pe.row(i));
        }
        let pe = g.tape.constant(Tensor::new(vec![u.len(), d], pe)?);
        Ok(Some(g.tape.add(h, pe)?))
    }

    /// Runs both decoders over `[z; F; H]` and the previous state.
    pub fn decoders_step(&self, g: &mut Graph, f: Var, h: Option<Var>, state: Var, want_gate: bool) -> Result<Decoded> {
        let d = self.cfg.d_model;
        let hw = g.tape.shape(f)[0];
        if g.tape.shape(f)[1] != d || g.tape.shape(state) != [self.cfg.n_state, d] {
            return Err(Error::shape("decoders_step", &[hw, d], g.tape.shape(state)));
        }
        let z = g.p(self.cam_token);
        let mut parts = vec![z, f];
        let n = match h {
            Some(h) => {
                parts.push(h);
                g.tape.shape(h)[0]
            }
            None => 0,
        };
        let mut tokens = g.tape.concat(&parts, 0)?;
        let kv_rows = if self.cfg.state_sees_humans { 1 + hw + n } else { 1 + hw };
        let mut s = state;
        let mut gate = None;
        let last = self.dec.len() - 1;
        for (l, layer) in self.dec.iter().enumerate() {
            let (t, s2, gt) = layer.forward(g, tokens, s, kv_rows, want_gate && l == last)?;
            tokens = t;
            s = s2;
            if l == last {
                gate = gt;
            }
        }
        let tokens = self.tok_ln.forward(g, tokens)?;
        let s = self.state_ln.forward(g, s)?;
        let z = g.tape.slice(tokens, 0, 0, 1)?;
        let fo = g.tape.slice(tokens, 0, 1, 1 + hw)?;
        let ho = if n > 0 { Some(g.tape.slice(tokens, 0, 1 + hw, 1 + hw + n)?) } else { None };
        Ok(Decoded {
            z,
            f: fo,
            h: ho,
            state: s,
            gate,
        })
    }

    pub fn head_cam(&self, g: &mut Graph, f: Var) -> Result<Var> {
        self.cam_head.forward(g, f)
    }

    pub fn head_world(&self, g: &mut Graph, f: Var, z: Var) -> Result<Var> {
        let a = self.world_l1.forward(g, f)?;
        let zb = self.world_lz.forward(g, z)?;
        let hid = self.cfg.hidden();
        let zb = g.tape.reshape(zb, &[hid])?;
        let h = g.tape.add_bias(a, zb)?;
        let h = g.tape.gelu(h);
        self.world_l2.forward(g, h)
    }

    pub fn head_pose(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.pose_head.forward(g, z)
    }

    pub fn head_human(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.human_head.forward(g, h)
    }

    /// The full per-frame forward pass with prompts at patches `u`.
    pub fn frame_forward(
        &self,
        g: &mut Graph,
        image: &Tensor,
        u: &[usize],
        state: Var,
        want_gate: bool,
    ) -> Result<FrameVars> {
        let f = self.encode(g, image)?;
        self.frame_forward_encoded(g, image, f, u, state, want_gate)
    }

    /// As [`Model::frame_forward`] for an already encoded frame.
    pub fn frame_forward_encoded(
        &self,
        g: &mut Graph,
        image: &Tensor,
        f: Var,
        u: &[usize],
        state: Var,
        want_gate: bool,
    ) -> Result<FrameVars> {
        let det_logits = self.detect_logits(g, f)?;
        let mask_logits = self.mask_logits(g, f)?;
        let prior = self.prior_encode(g, image, u)?;
        let h = self.build_prompts(g, f, u, prior)?;
        let dec = self.decoders_step(g, f, h, state, want_gate)?;
        let cam_raw = self.head_cam(g, dec.f)?;
        let world_raw = self.head_world(g, dec.f, dec.z)?;
        let pose_raw = self.head_pose(g, dec.z)?;
        let human_raw = match dec.h {
            Some(h) => Some(self.head_human(g, h)?),
            None => None,
        };
        Ok(FrameVars {
            f,
            det_logits,
            mask_logits,
            cam_raw,
            world_raw,
            pose_raw,
            human_raw,
            h_refined: dec.h,
            state: dec.state,
            gate: dec.gate,
        })
    }

    /// Prior-encoder pretraining readout on prior tokens.
    pub fn prior_head(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let p = self
            .prior
            .as_ref()
            .ok_or_else(|| Error::Config("prior encoder disabled".into()))?;
        p.head.forward(g, tokens)
    }
}

/// Rearranges an `H×W×C` image into `hw` rows of `p·p·C` patch pixels,
/// row-major over patches and `(dy, dx, channel)` within a patch.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape("patchify", &[0, 0, 0], image.shape()));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Contract(format!("image {w}x{h} is not a multiple of patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..gh {
        for j in 0..gw {
            for dy in 0..p {
                let row = ((i * p + dy) * w + j * p) * c;
                out.extend_from_slice(&src[row..row + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], out)
}

/// Patch windows for the prior encoder, zero outside the image:
/// `(n·slots) × (p·p·C)`.
pub fn prior_windows(image: &Tensor, p: usize, u: &[usize]) -> Result<Tensor> {
    let patches = patchify(image, p)?;
    let (gh, gw) = (image.shape()[0] / p, image.shape()[1] / p);
    let pd = patches.shape()[1];
    let mut out = Vec::with_capacity(u.len() * prior_slots() * pd);
    for &idx in u {
        let (i, j) = ((idx / gw) as isize, (idx % gw) as isize);
        for di in PRIOR_ROWS.0..=PRIOR_ROWS.1 {
            for dj in PRIOR_COLS.0..=PRIOR_COLS.1 {
                let (r, c) = (i + di, j + dj);
                if r >= 0 && c >= 0 && (r as usize) < gh && (c as usize) < gw {
                    out.extend_from_slice(patches.row(r as usize * gw + c as usize));
                } else {
                    out.extend(std::iter::repeat_n(0.0, pd));
                }
            }
        }
    }
    Tensor::new(vec![u.len() * prior_slots(), pd], out)
}

/// Moves per-patch values (`hw × p² × k`, patch order) to image order
/// (`H × W × k`): value `q` of patch `(i, j)` lands at pixel
/// `(i·p + q / p, j·p + q % p)`.
pub fn pixel_shuffle(vals: &[f64], grid: (usize, usize), p: usize, k: usize) -> Vec<f64> {
    let (gh, gw) = grid;
    let w = gw * p;
    let mut out = vec![0.0; vals.len()];
    for i in 0..gh {
        for j in 0..gw {
            for q in 0..p * p {
                let (y, x) = (i * p + q / p, j * p + q % p);
                let src = ((i * gw + j) * p * p + q) * k;
                let dst = (y * w + x) * k;
                out[dst..dst + k].copy_from_slice(&vals[src..src + k]);
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`].
pub fn to_patch_order(vals: &[f64], grid: (usize, usize), p: usize, k: usize) -> Vec<f64> {
    let (gh, gw) = grid;
    let w = gw * p;
    let mut out = vec![0.0; vals.len()];
    for i in 0..gh {
        for j in 0..gw {
            for q in 0..p * p {
                let (y, x) = (i * p + q / p, j * p + q % p);
                let dst = ((i * gw + j) * p * p + q) * k;
                let src = (y * w + x) * k;
                out[dst..dst + k].copy_from_slice(&vals[src..src + k]);
            }
        }
    }
    out
}

/// Head patches: scores at or above `tau` that strictly exceed every
/// neighbour in their 3×3 patch neighbourhood.
pub fn detect_heads(scores: &[f64], grid: (usize, usize), tau: f64) -> Vec<usize> {
    let (gh, gw) = grid;
    let mut out = Vec::new();
    for i in 0..gh {
        for j in 0..gw {
            let s = scores[i * gw + j];
            if s < tau {
                continue;
            }
            let mut peak = true;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (r, c) = (i as isize + di, j as isize + dj);
                    if (di, dj) == (0, 0) || r < 0 || c < 0 || r as usize >= gh || c as usize >= gw {
                        continue;
                    }
                    if scores[r as usize * gw + c as usize] >= s {
                        peak = false;
                    }
                }
            }
            if peak {
                out.push(i * gw + j);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_state: 16,
            n_heads: 2,
            n_state: 4,
            n_enc: 1,
            n_layers: 2,
            c_prior: 8,
            prior_embed: 4,
            ..ModelConfig::desk()
        }
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![cfg.height, cfg.width, cfg.channels], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn tokenize_shape_and_zero_image() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new(&model.store, false, &[]);
        let zero = Tensor::zeros(vec![64, 64, cfg.channels]);
        let f = model.tokenize(&mut g, &zero).unwrap();
        assert_eq!(g.tape.shape(f), &[64, 16]);
        let bias = model.store.get(model.embed.b).data().to_vec();
        let fv = g.tape.value(f);
        for t in 0..64 {
            for c in 0..16 {
                assert_eq!(fv.row(t)[c], model.pe.row(t)[c] + bias[c]);
            }
        }
    }

    #[test]
    fn odd_image_rejected() {
        let img = Tensor::zeros(vec![60, 64, 6]);
        assert!(matches!(patchify(&img, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn shift_by_patch_permutes_tokens() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let img = random_image(&cfg, 2);
        // shift right by one patch, zero fill
        let (h, w, c) = (64, 64, cfg.channels);
        let shifted = Tensor::from_fn(vec![h, w, c], |i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            if x >= 8 {
                img.data()[(y * w + x - 8) * c + ch]
            } else {
                0.0
            }
        });
        let mut g = Graph::new(&model.store, false, &[]);
        let a = model.tokenize(&mut g, &img).unwrap();
        let b = model.tokenize(&mut g, &shifted).unwrap();
        let (av, bv) = (g.tape.value(a).clone(), g.tape.value(b).clone());
        for i in 0..8 {
            for j in 0..7 {
                let (ta, tb) = (i * 8 + j, i * 8 + j + 1);
                for k in 0..16 {
                    let da = av.row(ta)[k] - model.pe.row(ta)[k];
                    let db = bv.row(tb)[k] - model.pe.row(tb)[k];
                    assert!((da - db).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn detector_rules() {
        let grid = (4, 4);
        assert!(detect_heads(&[0.1; 16], grid, 0.5).is_empty());
        let mut s = vec![0.1; 16];
        s[5] = 0.9;
        s[6] = 0.8;
        assert_eq!(detect_heads(&s, grid, 0.5), vec![5]);
        s[15] = 0.7;
        assert_eq!(detect_heads(&s, grid, 0.5), vec![5, 15]);
        // plateau: neither strictly exceeds the other
        let mut s = vec![0.0; 16];
        s[0] = 0.9;
        s[1] = 0.9;
        assert!(detect_heads(&s, grid, 0.5).is_empty());
    }

    #[test]
    fn pixel_shuffle_index_map() {
        let (p, grid) = (4, (2, 3));
        let n = grid.0 * grid.1 * p * p;
        let probe: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let img = pixel_shuffle(&probe, grid, p, 1);
        let w = grid.1 * p;
        for i in 0..grid.0 {
            for j in 0..grid.1 {
                for k in 0..p * p {
                    let v = ((i * grid.1 + j) * p * p + k) as f64;
                    assert_eq!(img[(i * p + k / p) * w + j * p + k % p], v);
                }
            }
        }
        assert_eq!(to_patch_order(&img, grid, p, 1), probe);
        let img3: Vec<f64> = (0..n * 3).map(|i| (i * 7 % 11) as f64).collect();
        assert_eq!(pixel_shuffle(&to_patch_order(&img3, grid, p, 3), grid, p, 3), img3);
    }

    #[test]
    fn patchify_matches_prior_window_center() {
        let cfg = tiny();
        let img = random_image(&cfg, 4);
        let patches = patchify(&img, 8).unwrap();
        let win = prior_windows(&img, 8, &[9, 0]).unwrap();
        let pd = patches.shape()[1];
        // slot (di=0, dj=0) is index 1*3+1 = 4
        assert_eq!(win.row(4), patches.row(9));
        // top-left neighbours of patch 0 are outside the image
        assert!(win.row(prior_slots()).iter().all(|&v| v == 0.0));
        assert_eq!(win.shape(), &[2 * prior_slots(), pd]);
    }

    #[test]
    fn prompt_permutation_equivariance() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let img = random_image(&cfg, 6);
        let run = |u: &[usize]| {
            let mut g = Graph::new(&model.store, false, &[]);
            let s = g.p(model.state0);
            let out = model.frame_forward(&mut g, &img, u, s, true).unwrap();
            let val = |v: Var| g.tape.value(v).clone();
            (
                val(out.cam_raw),
                val(out.pose_raw),
                val(out.state),
                val(out.human_raw.unwrap()),
                out.gate.unwrap(),
            )
        };
        let a = run(&[10, 27, 50]);
        let b = run(&[50, 10, 27]);
        assert!(a.0.max_abs_diff(&b.0) < 1e-9);
        assert!(a.1.max_abs_diff(&b.1) < 1e-9);
        assert!(a.2.max_abs_diff(&b.2) < 1e-9);
        let k = cfg.human_out();
        for (ra, rb) in [(0, 1), (1, 2), (2, 0)] {
            for c in 0..k {
                assert!((a.3.row(ra)[c] - b.3.row(rb)[c]).abs() < 1e-9);
            }
        }
        for (x, y) in a.4.iter().zip(&b.4) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_prompts_match_scene_only_path() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let img = random_image(&cfg, 8);
        let mut g = Graph::new(&model.store, false, &[]);
        let s = g.p(model.state0);
        let out = model.frame_forward(&mut g, &img, &[], s, false).unwrap();
        assert!(out.human_raw.is_none());
        let f = model.encode(&mut g, &img).unwrap();
        let d = model.decoders_step(&mut g, f, None, s, false).unwrap();
        let cam = model.head_cam(&mut g, d.f).unwrap();
        assert_eq!(g.tape.value(cam).data(), g.tape.value(out.cam_raw).data());
    }

    #[test]
    fn prompt_contracts() {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), 9).unwrap();
        let img = random_image(&cfg, 1);
        let mut g = Graph::new(&model.store, false, &[]);
        let f = model.encode(&mut g, &img).unwrap();
        assert!(model.build_prompts(&mut g, f, &[], None).unwrap().is_none());
        assert!(model.build_prompts(&mut g, f, &[3, 3], None).is_err());
        let pr = model.prior_encode(&mut g, &img, &[3]).unwrap();
        assert!(model.build_prompts(&mut g, f, &[3, 4], pr).is_err());
        assert!(model.build_prompts(&mut g, f, &[3], None).is_err());

        let mut no_prior = tiny();
        no_prior.c_prior = 0;
        let model = Model::new(no_prior, 9).unwrap();
        let mut g = Graph::new(&model.store, false, &[]);
        let f = model.encode(&mut g, &img).unwrap();
        assert!(model.prior_encode(&mut g, &img, &[3]).unwrap().is_none());
        let h = model.build_prompts(&mut g, f, &[3, 9], None).unwrap().unwrap();
        assert_eq!(g.tape.shape(h), &[2, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let a = Model::new(cfg.clone(), 11).unwrap();
        let b = Model::new(cfg.clone(), 11).unwrap();
        let img = random_image(&cfg, 3);
        let run = |m: &Model| {
            let mut g = Graph::new(&m.store, false, &[]);
            let s = g.p(m.state0);
            let o = m.frame_forward(&mut g, &img, &[12], s, false).unwrap();
            g.tape.value(o.world_raw).clone()
        };
        assert_eq!(run(&a).data(), run(&b).data());
    }
}
