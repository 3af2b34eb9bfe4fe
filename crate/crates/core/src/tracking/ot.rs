use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Pairwise Euclidean distances between bank tokens (rows) and detection
/// tokens (columns).
pub fn cost_matrix(bank: &[Vec<f64>], dets: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = bank.first().or(dets.first()).map_or(0, |t| t.len());
    for t in bank.iter().chain(dets) {
        if t.len() != dim {
            return Err(Error::shape("cost_matrix", &[dim], &[t.len()]));
        }
    }
    Ok(DMatrix::from_fn(bank.len(), dets.len(), |m, n| {
        bank[m]
            .iter()
            .zip(&dets[n])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Appends a dustbin row and column, every new entry (corner included) `γ`.
pub fn dustbin_augment(d: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let (m, n) = d.shape();
    DMatrix::from_fn(m + 1, n + 1, |i, j| if i < m && j < n { d[(i, j)] } else { gamma })
}

/// Marginals `a = [1_M; N]`, `b = [1_N; M]` for an augmented `(M+1)×(N+1)` matrix.
pub fn dustbin_marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![1.0; m];
    a.push(n as f64);
    let mut b = vec![1.0; n];
    b.push(m as f64);
    (a, b)
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: DMatrix<f64>,
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub marginal_err: f64,
    pub converged: bool,
    pub iters: usize,
}

pub const SINKHORN_TOL: f64 = 1e-6;

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport in the log domain.
///
/// Dual potentials are kept in cost units so the regularization can be
/// annealed geometrically from the cost range down to `eps`. After a short
/// run of plain alternating normalizations at `eps`, damped Newton steps on
/// the dual finish the job: at small `eps` the plan is nearly a vertex and
/// alternating updates alone stall far from the marginals. Every sweep or
/// Newton step counts against `iters`.
pub fn sinkhorn(d: &DMatrix<f64>, a: &[f64], b: &[f64], eps: f64, iters: usize) -> Result<SinkhornResult> {
    let (m, n) = d.shape();
    if a.len() != m || b.len() != n {
        return Err(Error::shape("sinkhorn", &[m, n], &[a.len(), b.len()]));
    }
    if !(eps > 0.0) || iters == 0 {
        return Err(Error::Config(format!("sinkhorn needs eps > 0 and iters ≥ 1, got {eps}, {iters}")));
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (sa - sb).abs() > 1e-9 * sa.max(1.0) {
        return Err(Error::Contract(format!("unbalanced marginals {sa} vs {sb}")));
    }
    if sa == 0.0 || m == 0 || n == 0 {
        return Ok(SinkhornResult {
            plan: DMatrix::zeros(m, n),
            marginal_err: 0.0,
            converged: true,
            iters: 0,
        });
    }
    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let la: Vec<f64> = a.iter().map(|&x| ln(x)).collect();
    let lb: Vec<f64> = b.iter().map(|&x| ln(x)).collect();

    let range = d.iter().fold(0.0f64, |acc, &x| acc.max(x.abs())).max(eps);
    let n_stages = ((range / eps).ln() / 2f64.ln()).ceil().max(0.0) as usize;
    let anneal_iters = n_stages.min(iters / 2);
    let shrink = if anneal_iters > 0 { (eps / range).powf(1.0 / anneal_iters as f64) } else { 1.0 };

    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let sweep = |e: f64, u: &mut Vec<f64>, v: &mut Vec<f64>| {
        for i in 0..m {
            u[i] = if la[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                e * (la[i] - lse((0..n).map(|j| (v[j] - d[(i, j)]) / e)))
            };
        }
        for j in 0..n {
            v[j] = if lb[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                e * (lb[j] - lse((0..m).map(|i| (u[i] - d[(i, j)]) / e)))
            };
        }
    };

    let mut e = range;
    for _ in 0..anneal_iters {
        e = (e * shrink).max(eps);
        sweep(e, &mut u, &mut v);
    }
    let mut done = anneal_iters;
    let plain = (iters - done).min(20);
    for _ in 0..plain {
        sweep(eps, &mut u, &mut v);
    }
    done += plain;

    // Newton on the scaled dual f = u/eps, g = v/eps over entries with
    // positive marginal mass; zero-mass rows and columns stay at -inf.
    let mut f: Vec<f64> = u.iter().map(|x| x / eps).collect();
    let mut g: Vec<f64> = v.iter().map(|x| x / eps).collect();
    let rows: Vec<usize> = (0..m).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| b[j] > 0.0).collect();
    let (mr, nc) = (rows.len(), cols.len());
    let plan_at = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(m, n, |i, j| {
            if a[i] > 0.0 && b[j] > 0.0 {
                (f[i] + g[j] - d[(i, j)] / eps).exp()
            } else {
                0.0
            }
        })
    };
    let dual = |f: &[f64], g: &[f64]| {
        let p = plan_at(f, g);
        let lin: f64 = rows.iter().map(|&i| a[i] * f[i]).sum::<f64>()
            + cols.iter().map(|&j| b[j] * g[j]).sum::<f64>();
        lin - p.sum()
    };
    let mut plan = plan_at(&f, &g);
    let mut err = marginal_error(&plan, a, b);
    while done < iters && err > SINKHORN_TOL * 1e-3 {
        let k = mr + nc;
        let mut h = DMatrix::<f64>::zeros(k, k);
        let mut r = nalgebra::DVector::<f64>::zeros(k);
        for (p, &i) in rows.iter().enumerate() {
            let s: f64 = cols.iter().map(|&j| plan[(i, j)]).sum();
            h[(p, p)] = s;
            r[p] = a[i] - s;
            for (q, &j) in cols.iter().enumerate() {
                h[(p, mr + q)] = plan[(i, j)];
                h[(mr + q, p)] = plan[(i, j)];
            }
        }
        for (q, &j) in cols.iter().enumerate() {
            let s: f64 = rows.iter().map(|&i| plan[(i, j)]).sum();
            h[(mr + q, mr + q)] = s;
            r[mr + q] = b[j] - s;
        }
        let ridge = 1e-12 * h.trace().max(1e-300);
        for p in 0..k {
            h[(p, p)] += ridge;
        }
        let Some(step) = h.lu().solve(&r) else { break };
        let slope = r.dot(&step);
        let base = dual(&f, &g);
        let mut t = 1.0;
        let (mut f2, mut g2) = (f.clone(), g.clone());
        while t > 1e-10 {
            for (p, &i) in rows.iter().enumerate() {
                f2[i] = f[i] + t * step[p];
            }
            for (q, &j) in cols.iter().enumerate() {
                g2[j] = g[j] + t * step[mr + q];
            }
            let val = dual(&f2, &g2);
            if val.is_finite() && val >= base + 1e-4 * t * slope {
                break;
            }
            t *= 0.5;
        }
        done += 1;
        if t <= 1e-10 {
            break;
        }
        f = f2;
        g = g2;
        plan = plan_at(&f, &g);
        err = marginal_error(&plan, a, b);
    }
    if err > SINKHORN_TOL {
        log::warn!("sinkhorn stopped after {done} iterations with marginal error {err:.3e}");
    }
    Ok(SinkhornResult {
        plan,
        marginal_err: err,
        converged: err <= SINKHORN_TOL,
        iters: done,
    })
}

fn marginal_error(p: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let mut e = 0.0f64;
    for (i, &ai) in a.iter().enumerate() {
        e = e.max((p.row(i).sum() - ai).abs());
    }
    for (j, &bj) in b.iter().enumerate() {
        e = e.max((p.column(j).sum() - bj).abs());
    }
    e
}

/// Discretizes an augmented plan: `(m, n)` is a match when its entry is the
/// maximum of both its row and column among real entries and strictly
/// exceeds both dustbin entries `plan[m, N]` and `plan[M, n]`.
pub fn hard_assignment(plan: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = plan.shape();
    if rows < 2 || cols < 2 {
        return Vec::new();
    }
    let (m, n) = (rows - 1, cols - 1);
    let mut out = Vec::new();
    for i in 0..m {
        let mut best = 0;
        for j in 1..n {
            if plan[(i, j)] > plan[(i, best)] {
                best = j;
            }
        }
        let x = plan[(i, best)];
        let col_max = (0..m).all(|k| k == i || plan[(k, best)] < x);
        if col_max && x > plan[(i, n)] && x > plan[(m, best)] {
            out.push((i, best));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cost_matrix_basics() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let d = cost_matrix(&[e(0), e(1)], &[e(0), e(1), e(2)]).unwrap();
        assert_eq!(d[(0, 0)], 0.0);
        assert!((d[(0, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert!(cost_matrix(&[vec![0.0; 2]], &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn dustbin_shapes() {
        let d = dustbin_augment(&DMatrix::zeros(0, 0), 0.7);
        assert_eq!(d.shape(), (1, 1));
        assert_eq!(d[(0, 0)], 0.7);
        let d = dustbin_augment(&DMatrix::from_element(2, 3, 0.1), 0.7);
        assert_eq!(d.shape(), (3, 4));
        assert_eq!(d[(2, 3)], 0.7);
        assert_eq!(d[(1, 3)], 0.7);
    }

    #[test]
    fn single_cheap_pair_matches() {
        let d = dustbin_augment(&DMatrix::from_element(1, 1, 0.05), 1.0);
        let (a, b) = dustbin_marginals(1, 1);
        let r = sinkhorn(&d, &a, &b, 1e-3, 200).unwrap();
        assert!((r.plan[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(r.plan[(0, 1)] < 1e-6 && r.plan[(1, 0)] < 1e-6);
        assert_eq!(hard_assignment(&r.plan), vec![(0, 0)]);
    }

    #[test]
    fn marginals_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let d = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(0.0..2.0));
            let dd = dustbin_augment(&d, 1.0);
            let (a, b) = dustbin_marginals(6, 4);
            let r = sinkhorn(&dd, &a, &b, 0.05, 500).unwrap();
            assert!(r.converged, "{}", r.marginal_err);
            assert!(r.plan.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn empty_sides() {
        for (m, n) in [(0, 3), (2, 0), (0, 0)] {
            let dd = dustbin_augment(&DMatrix::from_element(m, n, 0.1), 0.5);
            let (a, b) = dustbin_marginals(m, n);
            let r = sinkhorn(&dd, &a, &b, 1e-3, 100).unwrap();
            assert!(r.converged);
            assert!(hard_assignment(&r.plan).is_empty());
        }
    }

    fn brute_force(d: &DMatrix<f64>, gamma: f64) -> Vec<(usize, usize)> {
        // exhaustive partial matchings; each match saves gamma - d
        fn rec(d: &DMatrix<f64>, g: f64, i: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, acc: f64, best: &mut (f64, Vec<(usize, usize)>)) {
            if i == d.nrows() {
                if acc < best.0 {
                    *best = (acc, cur.clone());
                }
                return;
            }
            rec(d, g, i + 1, used, cur, acc, best);
            for j in 0..d.ncols() {
                if !used[j] {
                    used[j] = true;
                    cur.push((i, j));
                    rec(d, g, i + 1, used, cur, acc + d[(i, j)] - g, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (0.0, Vec::new());
        rec(d, gamma, 0, &mut vec![false; d.ncols()], &mut Vec::new(), 0.0, &mut best);
        best.1
    }

    #[test]
    fn small_eps_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let d = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(0.0..1.0));
            let dd = dustbin_augment(&d, 0.5);
            let (a, b) = dustbin_marginals(5, 5);
            let r = sinkhorn(&dd, &a, &b, 1e-3, 500).unwrap();
            assert!(r.marginal_err <= 1e-6);
            assert_eq!(hard_assignment(&r.plan), brute_force(&d, 0.5));
        }
    }
}
