use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which a gradient component is compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Component-wise comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
}

/// Checks the tape gradient of scalar `f` at `x` against central differences
/// with step `eps`. `f` receives a fresh tape and the input leaf.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf(t.clone(), false);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .collect();
    let max_rel_err = rel_err.iter().cloned().fold(0.0, f64::max);
    Ok(GradReport {
        analytic,
        numeric,
        rel_err,
        max_rel_err,
    })
}
