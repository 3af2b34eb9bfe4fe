//! Builds a small two-layer network on the tape, checks its gradient against
//! central differences and takes a few gradient steps.

use h4d::diffcore::{grad_check, Tape, Tensor, Var};

fn net(t: &mut Tape, x: Var, w: &Tensor, target: &Tensor) -> h4d::Result<Var> {
    let w = t.constant(w.clone());
    let h = t.matmul(x, w)?;
    let h = t.gelu(h);
    let p = t.softmax(h, 1)?;
    let y = t.constant(target.clone());
    let d = t.sub(p, y)?;
    Ok(t.l2(d))
}

fn main() -> h4d::Result<()> {
    let w = Tensor::from_fn(vec![4, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.4);
    let target = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0])?;
    let mut x = Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.37).sin());

    let rep = grad_check(|t, v| net(t, v, &w, &target), &x, 1e-6)?;
    println!("max relative gradient error {:.2e}", rep.max_rel_err);

    for step in 0..5 {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let loss = net(&mut t, xv, &w, &target)?;
        t.backward(loss)?;
        let g = t.grad(xv).expect("leaf gradient").to_vec();
        println!("step {step}: loss {:.5}", t.value(loss).item());
        for (a, b) in x.data_mut().iter_mut().zip(&g) {
            *a -= 2.0 * b;
        }
    }
    Ok(())
}
