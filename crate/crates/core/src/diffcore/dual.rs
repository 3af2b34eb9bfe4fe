//! Scalar abstraction shared by plain `f64` evaluation and forward-mode
//! dual numbers, so small geometric kernels can be written once and
//! differentiated exactly.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn powi2(self) -> Self {
        self * self
    }
    /// Value-based max; the derivative follows the selected branch.
    fn max_c(self, c: f64) -> Self {
        if self.value() >= c {
            self
        } else {
            Self::cst(c)
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Dual number `v + d·ε` with ε² = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
    pub fn var(v: f64) -> Self {
        Self { v, d: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual::new(self.v * inv, (self.d - self.v * inv * o.d) * inv)
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}
impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}
impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}
impl MulAssign for Dual {
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let d = if s > 0.0 { self.d / (2.0 * s) } else { 0.0 };
        Dual::new(s, d)
    }
    fn sin(self) -> Self {
        Dual::new(self.v.sin(), self.d * self.v.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.v.cos(), -self.d * self.v.sin())
    }
    fn abs(self) -> Self {
        if self.v >= 0.0 {
            self
        } else {
            -self
        }
    }
    fn atan2(self, x: Self) -> Self {
        let den = x.v * x.v + self.v * self.v;
        let d = if den > 0.0 {
            (x.v * self.d - self.v * x.d) / den
        } else {
            0.0
        };
        Dual::new(self.v.atan2(x.v), d)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
}

/// A smooth vector function evaluated generically, so the tape can obtain
/// its exact Jacobian by forward-mode passes.
pub trait SmoothFn {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn eval<R: Real>(&self, x: &[R]) -> Vec<R>;
}

/// Value and row-major Jacobian (`n_out × n_in`) of `f` at `x`.
pub fn jacobian<F: SmoothFn>(f: &F, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n_in = f.n_in();
    let n_out = f.n_out();
    let value = f.eval(x);
    let mut jac = vec![0.0; n_out * n_in];
    let mut xd: Vec<Dual> = x.iter().map(|&v| Dual::cst(v)).collect();
    for j in 0..n_in {
        xd[j].d = 1.0;
        let out = f.eval(&xd);
        for (i, o) in out.iter().enumerate() {
            jac[i * n_in + j] = o.d;
        }
        xd[j].d = 0.0;
    }
    (value, jac)
}
