use crate::geometry::Vec3;

/// Natural cubic spline through points at knots `0, 1, …, n−1`.
/// Two points give linear interpolation.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    pts: Vec<Vec3>,
    m: Vec<Vec3>,
}

impl NaturalSpline {
    pub fn new(pts: Vec<Vec3>) -> Self {
        assert!(pts.len() >= 2, "spline needs two points");
        let n = pts.len();
        let mut m = vec![Vec3::zeros(); n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas algorithm)
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![Vec3::zeros(); k];
            for i in 0..k {
                let rhs = 6.0 * (pts[i + 2] - 2.0 * pts[i + 1] + pts[i]);
                let (lo, di) = if i == 0 { (0.0, 4.0) } else { (1.0, 4.0 - c[i - 1]) };
                c[i] = 1.0 / di;
                d[i] = if i == 0 { rhs / di } else { (rhs - lo * d[i - 1]) / di };
            }
            for i in (0..k).rev() {
                let next = if i + 1 < k { m[i + 2] } else { Vec3::zeros() };
                m[i + 1] = d[i] - c[i] * next;
            }
        }
        Self { pts, m }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn max_param(&self) -> f64 {
        (self.pts.len() - 1) as f64
    }

    pub fn eval(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.max_param());
        let i = (s.floor() as usize).min(self.pts.len() - 2);
        let t = s - i as f64;
        let (a, b) = (1.0 - t, t);
        a * self.pts[i]
            + b * self.pts[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) / 6.0
    }

    pub fn derivative(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.max_param());
        let i = (s.floor() as usize).min(self.pts.len() - 2);
        let t = s - i as f64;
        let (a, b) = (1.0 - t, t);
        self.pts[i + 1] - self.pts[i] + ((-3.0 * a * a + 1.0) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1]) / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knots() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, (i * i) as f64, -(i as f64))).collect();
        let s = NaturalSpline::new(pts.clone());
        for (i, p) in pts.iter().enumerate() {
            assert!((s.eval(i as f64) - p).norm() < 1e-12);
        }
    }

    #[test]
    fn two_points_are_linear() {
        let s = NaturalSpline::new(vec![Vec3::zeros(), Vec3::new(2.0, 4.0, 6.0)]);
        assert!((s.eval(0.25) - Vec3::new(0.5, 1.0, 1.5)).norm() < 1e-15);
    }

    #[test]
    fn second_derivative_is_continuous() {
        let pts = vec![
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, -1.0, 2.0),
            Vec3::new(3.0, 0.5, 1.0),
            Vec3::new(2.0, 2.0, -1.0),
        ];
        let s = NaturalSpline::new(pts);
        let h = 1e-4;
        for k in 1..3 {
            let x = k as f64;
            let left = (s.derivative(x - h) - s.derivative(x - 2.0 * h)) / h;
            let right = (s.derivative(x + 2.0 * h) - s.derivative(x + h)) / h;
            assert!((left - right).norm() < 1e-2);
            // first derivative matches finite differences
            let fd = (s.eval(x + h) - s.eval(x - h)) / (2.0 * h);
            assert!((fd - s.derivative(x)).norm() < 1e-6);
        }
        // natural end conditions
        let h = 1e-3;
        let dd0 = (s.derivative(h) - s.derivative(0.0)) / h;
        assert!(dd0.norm() < 1e-2);
    }
}
