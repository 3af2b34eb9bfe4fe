use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Named joint indices of the desk-scale skeleton.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const L_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const R_SHOULDER: usize = 6;
    pub const R_ELBOW: usize = 7;
    pub const L_HIP: usize = 8;
    pub const L_KNEE: usize = 9;
    pub const R_HIP: usize = 10;
    pub const R_KNEE: usize = 11;
}

/// Model dimensions. `desk` is what the procedural generator builds; `full`
/// records the reference-scale sizes for configuration and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyDims {
    pub n_verts: usize,
    pub n_joints: usize,
    pub n_beta: usize,
    pub n_alpha: usize,
}

impl BodyDims {
    pub const fn desk() -> Self {
        Self {
            n_verts: 64,
            n_joints: 12,
            n_beta: 4,
            n_alpha: 0,
        }
    }

    pub const fn full() -> Self {
        Self {
            n_verts: 10_475,
            n_joints: 54,
            n_beta: 10,
            n_alpha: 10,
        }
    }

    /// Number of posed (non-root) joints, i.e. rows of θ.
    pub const fn n_theta(&self) -> usize {
        self.n_joints - 1
    }
}

/// A linear-blend-skinned body model. Per-vertex arrays are flat and
/// row-major: `template[v*3 + c]`, `shape_basis[(v*3 + c)*n_beta + b]`,
/// `joint_regressor[k*V + v]`, `skin_weights[v*K + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    pub dims: BodyDims,
    pub template: Vec<f64>,
    pub shape_basis: Vec<f64>,
    pub expr_basis: Vec<f64>,
    pub joint_regressor: Vec<f64>,
    pub skin_weights: Vec<f64>,
    pub parents: Vec<Option<usize>>,
    pub faces: Vec<[usize; 3]>,
    pub head_joint: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_verts: usize,
    n_joints: usize,
    n_beta: usize,
    n_alpha: usize,
    parents: Vec<Option<usize>>,
    head_joint: usize,
    seed: u64,
    faces: Vec<[usize; 3]>,
}

/// Procedural mesh under construction: vertices plus per-vertex bookkeeping
/// used to derive bases and weights.
struct Builder {
    verts: Vec<[f64; 3]>,
    // (ring center, part) per vertex
    center: Vec<[f64; 3]>,
    part: Vec<Part>,
    weights: Vec<Vec<(usize, f64)>>,
    faces: Vec<[usize; 3]>,
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Torso,
    Head,
    Arm { shoulder: [f64; 3] },
    Leg { hip: [f64; 3] },
}

impl Builder {
    fn ring(
        &mut self,
        c: [f64; 3],
        rx: f64,
        rz: f64,
        n: usize,
        part: Part,
        w: &[(usize, f64)],
    ) -> Vec<usize> {
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            ids.push(self.verts.len());
            self.verts.push([c[0] + rx * a.cos(), c[1], c[2] + rz * a.sin()]);
            self.center.push(c);
            self.part.push(part);
            self.weights.push(w.to_vec());
        }
        ids
    }

    fn point(&mut self, p: [f64; 3], c: [f64; 3], part: Part, w: &[(usize, f64)]) -> usize {
        self.verts.push(p);
        self.center.push(c);
        self.part.push(part);
        self.weights.push(w.to_vec());
        self.verts.len() - 1
    }

    fn bridge(&mut self, a: &[usize], b: &[usize]) {
        let n = a.len();
        for i in 0..n {
            let j = (i + 1) % n;
            self.faces.push([a[i], b[i], b[j]]);
            self.faces.push([a[i], b[j], a[j]]);
        }
    }

    fn fan(&mut self, ring: &[usize], apex: usize) {
        let n = ring.len();
        for i in 0..n {
            self.faces.push([ring[i], ring[(i + 1) % n], apex]);
        }
    }
}

impl BodyTemplate {
    /// Builds the desk-scale humanoid. The seed perturbs limb radii only,
    /// so the skeleton and topology are identical across seeds.
    pub fn desk(seed: u64) -> Self {
        use joints::*;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jit = |r: f64| r * rng.gen_range(0.95..1.05);
        let mut b = Builder {
            verts: Vec::new(),
            center: Vec::new(),
            part: Vec::new(),
            weights: Vec::new(),
            faces: Vec::new(),
        };

        let t0 = b.ring([0.0, 0.0, 0.0], jit(0.15), jit(0.10), 4, Part::Torso, &[(PELVIS, 1.0)]);
        let t1 = b.ring(
            [0.0, 0.25, 0.0],
            jit(0.14),
            jit(0.09),
            4,
            Part::Torso,
            &[(PELVIS, 0.5), (SPINE, 0.5)],
        );
        let t2 = b.ring(
            [0.0, 0.50, 0.0],
            jit(0.16),
            jit(0.09),
            4,
            Part::Torso,
            &[(SPINE, 0.5), (NECK, 0.5)],
        );
        let h0 = b.ring(
            [0.0, 0.65, 0.0],
            jit(0.09),
            jit(0.10),
            4,
            Part::Head,
            &[(NECK, 0.5), (HEAD, 0.5)],
        );
        let apex = b.point([0.0, 0.84, 0.0], [0.0, 0.65, 0.0], Part::Head, &[(HEAD, 1.0)]);
        b.bridge(&t0, &t1);
        b.bridge(&t1, &t2);
        b.bridge(&t2, &h0);
        b.fan(&h0, apex);

        for (side, sh, el) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
            let s = [side * 0.20, 0.46, 0.0];
            let part = Part::Arm { shoulder: s };
            let r0 = b.ring(s, jit(0.05), jit(0.05), 3, part, &[(NECK, 0.5), (sh, 0.5)]);
            let r1 = b.ring(
                [side * 0.24, 0.18, 0.0],
                jit(0.04),
                jit(0.04),
                3,
                part,
                &[(sh, 0.5), (el, 0.5)],
            );
            let r2 = b.ring([side * 0.26, -0.08, 0.0], jit(0.03), jit(0.03), 3, part, &[(el, 1.0)]);
            let hand = b.point([side * 0.27, -0.18, 0.0], [side * 0.26, -0.08, 0.0], part, &[(el, 1.0)]);
            b.bridge(&r0, &r1);
            b.bridge(&r1, &r2);
            b.fan(&r2, hand);
        }
        for (side, hip, knee) in [(1.0, L_HIP, L_KNEE), (-1.0, R_HIP, R_KNEE)] {
            let h = [side * 0.10, -0.08, 0.0];
            let part = Part::Leg { hip: h };
            let r0 = b.ring(h, jit(0.08), jit(0.08), 4, part, &[(PELVIS, 0.5), (hip, 0.5)]);
            let r1 = b.ring(
                [side * 0.10, -0.48, 0.0],
                jit(0.06),
                jit(0.06),
                4,
                part,
                &[(hip, 0.5), (knee, 0.5)],
            );
            let r2 = b.ring([side * 0.10, -0.86, 0.0], jit(0.045), jit(0.05), 4, part, &[(knee, 1.0)]);
            let toe = b.point([side * 0.10, -0.90, 0.14], [side * 0.10, -0.86, 0.0], part, &[(knee, 1.0)]);
            b.bridge(&r0, &r1);
            b.bridge(&r1, &r2);
            b.fan(&r2, toe);
        }
        let crotch = b.point([0.0, -0.12, 0.0], [0.0, 0.0, 0.0], Part::Torso, &[(PELVIS, 1.0)]);
        b.fan(&t0, crotch);

        let dims = BodyDims::desk();
        let (nv, nk, nb) = (dims.n_verts, dims.n_joints, dims.n_beta);
        assert_eq!(b.verts.len(), nv, "desk topology drifted");

        // joints are ring centroids
        let ring_of_joint: [&[usize]; 12] = [
            &t0,
            &t1,
            &t2,
            &h0,
            &[17, 18, 19],
            &[20, 21, 22],
            &[27, 28, 29],
            &[30, 31, 32],
            &[37, 38, 39, 40],
            &[41, 42, 43, 44],
            &[50, 51, 52, 53],
            &[54, 55, 56, 57],
        ];
        let mut joint_regressor = vec![0.0; nk * nv];
        for (k, ring) in ring_of_joint.iter().enumerate() {
            for &v in ring.iter() {
                joint_regressor[k * nv + v] = 1.0 / ring.len() as f64;
            }
        }

        let mut skin_weights = vec![0.0; nv * nk];
        for (v, w) in b.weights.iter().enumerate() {
            for &(k, x) in w {
                skin_weights[v * nk + k] += x;
            }
        }

        // shape bases: height, girth, arm length, leg length
        let mut shape_basis = vec![0.0; nv * 3 * nb];
        for v in 0..nv {
            let p = b.verts[v];
            let c = b.center[v];
            let set = |sb: &mut Vec<f64>, comp: usize, basis: usize, val: f64| {
                sb[(v * 3 + comp) * nb + basis] = val;
            };
            set(&mut shape_basis, 1, 0, 0.05 * p[1]);
            for comp in [0, 2] {
                set(&mut shape_basis, comp, 1, 0.12 * (p[comp] - c[comp]));
            }
            match b.part[v] {
                Part::Arm { shoulder } => {
                    for comp in 0..3 {
                        set(&mut shape_basis, comp, 2, 0.06 * (p[comp] - shoulder[comp]));
                    }
                }
                Part::Leg { hip } => {
                    for comp in 0..3 {
                        set(&mut shape_basis, comp, 3, 0.05 * (p[comp] - hip[comp]));
                    }
                }
                _ => {}
            }
        }

        let tpl = BodyTemplate {
            dims,
            template: b.verts.iter().flatten().copied().collect(),
            shape_basis,
            expr_basis: Vec::new(),
            joint_regressor,
            skin_weights,
            parents: vec![
                None,
                Some(PELVIS),
                Some(SPINE),
                Some(NECK),
                Some(NECK),
                Some(L_SHOULDER),
                Some(NECK),
                Some(R_SHOULDER),
                Some(PELVIS),
                Some(L_HIP),
                Some(PELVIS),
                Some(R_HIP),
            ],
            faces: b.faces,
            head_joint: HEAD,
            seed,
        };
        debug_assert!(tpl.validate().is_ok());
        tpl
    }

    pub fn n_verts(&self) -> usize {
        self.dims.n_verts
    }

    pub fn n_joints(&self) -> usize {
        self.dims.n_joints
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let BodyDims {
            n_verts: nv,
            n_joints: nk,
            n_beta: nb,
            n_alpha: na,
        } = self.dims;
        let lens = [
            (self.template.len(), nv * 3),
            (self.shape_basis.len(), nv * 3 * nb),
            (self.expr_basis.len(), nv * 3 * na),
            (self.joint_regressor.len(), nk * nv),
            (self.skin_weights.len(), nv * nk),
            (self.parents.len(), nk),
        ];
        for (got, want) in lens {
            if got != want {
                return Err(Error::Contract(format!(
                    "body template array has {got} entries, expected {want}"
                )));
            }
        }
        if nk == 0 || self.parents[0].is_some() {
            return Err(Error::Contract("joint 0 must be the root".into()));
        }
        for (k, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "joint {k} needs a parent with a smaller index"
                    )))
                }
            }
        }
        let row_ok = |row: &[f64]| {
            row.iter().all(|&w| w >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if !self.skin_weights.chunks(nk).all(row_ok) {
            return Err(Error::Contract("skin weight rows must be convex".into()));
        }
        if !self.joint_regressor.chunks(nv).all(row_ok) {
            return Err(Error::Contract("joint regressor rows must sum to 1".into()));
        }
        if self.head_joint >= nk || self.faces.iter().flatten().any(|&v| v >= nv) {
            return Err(Error::Contract("index out of range in template".into()));
        }
        Ok(())
    }

    /// Writes the template as a directory of T4DR tensors plus `header.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.dims;
        let header = Header {
            n_verts: d.n_verts,
            n_joints: d.n_joints,
            n_beta: d.n_beta,
            n_alpha: d.n_alpha,
            parents: self.parents.clone(),
            head_joint: self.head_joint,
            seed: self.seed,
            faces: self.faces.clone(),
        };
        let hp = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hp, e))?;
        fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
        let arrays: [(&str, &Vec<f64>, Vec<usize>); 5] = [
            ("template", &self.template, vec![d.n_verts, 3]),
            ("shape_basis", &self.shape_basis, vec![d.n_verts, 3, d.n_beta]),
            ("expr_basis", &self.expr_basis, vec![d.n_verts, 3, d.n_alpha]),
            ("joint_regressor", &self.joint_regressor, vec![d.n_joints, d.n_verts]),
            ("skin_weights", &self.skin_weights, vec![d.n_verts, d.n_joints]),
        ];
        for (name, data, shape) in arrays {
            Tensor::new(shape, data.clone())?.save(dir.join(format!("{name}.t4dr")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let hp = dir.join("header.json");
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let h: Header = serde_json::from_str(&text).map_err(|e| Error::json(&hp, e))?;
        let load = |name: &str| -> Result<Vec<f64>> {
            Ok(Tensor::load(dir.join(format!("{name}.t4dr")))?.into_data())
        };
        let tpl = BodyTemplate {
            dims: BodyDims {
                n_verts: h.n_verts,
                n_joints: h.n_joints,
                n_beta: h.n_beta,
                n_alpha: h.n_alpha,
            },
            template: load("template")?,
            shape_basis: load("shape_basis")?,
            expr_basis: load("expr_basis")?,
            joint_regressor: load("joint_regressor")?,
            skin_weights: load("skin_weights")?,
            parents: h.parents,
            faces: h.faces,
            head_joint: h.head_joint,
            seed: h.seed,
        };
        tpl.validate().map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        Ok(tpl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_template_is_valid() {
        let t = BodyTemplate::desk(0);
        t.validate().unwrap();
        assert_eq!(t.n_verts(), 64);
        assert_eq!(t.n_joints(), 12);
    }

    #[test]
    fn pelvis_regresses_to_origin() {
        let t = BodyTemplate::desk(7);
        let nv = t.n_verts();
        for c in 0..3 {
            let j: f64 = (0..nv).map(|v| t.joint_regressor[v] * t.template[v * 3 + c]).sum();
            assert!(j.abs() < 1e-12);
        }
    }

    #[test]
    fn seeds_share_topology() {
        let a = BodyTemplate::desk(1);
        let b = BodyTemplate::desk(2);
        assert_eq!(a.faces, b.faces);
        assert_eq!(a.parents, b.parents);
        assert_ne!(a.template, b.template);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = BodyTemplate::desk(3);
        t.save(dir.path()).unwrap();
        assert_eq!(BodyTemplate::load(dir.path()).unwrap(), t);
    }
}
