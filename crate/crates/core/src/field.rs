//! Values on a uniform (time × rate) grid.
//!
//! Interpolation is linear in t and cubic Hermite in r, with node slopes
//! from second-order differences, so the r-derivative of the interpolant is
//! continuous and second-order accurate.

use crate::error::{McsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    horizon: f64,
    n_t: usize,
    r_min: f64,
    r_max: f64,
    n_r: usize,
    /// Row-major: `values[it * n_r + ir]`.
    values: Vec<f64>,
    /// Node slopes in value per r-cell, same layout.
    slopes: Vec<f64>,
    inv_dr: f64,
}

impl Field2D {
    pub fn new(horizon: f64, n_t: usize, r_min: f64, r_max: f64, n_r: usize, values: Vec<f64>) -> Result<Self> {
        if n_t < 2 || n_r < 2 || !(r_max > r_min) || !(horizon > 0.0) {
            return Err(McsError::InvalidGrid(format!(
                "field needs n_t, n_r >= 2 and r_min < r_max (n_t = {n_t}, n_r = {n_r}, r = [{r_min}, {r_max}])"
            )));
        }
        if values.len() != n_t * n_r {
            return Err(McsError::InvalidGrid(format!(
                "field expects {} values, got {}",
                n_t * n_r,
                values.len()
            )));
        }
        let mut field = Self {
            horizon,
            n_t,
            r_min,
            r_max,
            n_r,
            values,
            slopes: Vec::new(),
            inv_dr: (n_r - 1) as f64 / (r_max - r_min),
        };
        field.refresh_slopes();
        Ok(field)
    }

    fn refresh_slopes(&mut self) {
        let h = self.dr();
        let mut slopes = Vec::with_capacity(self.values.len());
        for it in 0..self.n_t {
            for ir in 0..self.n_r {
                slopes.push(self.d_dr(it, ir) * h);
            }
        }
        self.slopes = slopes;
    }

    pub fn from_fn(
        horizon: f64,
        n_t: usize,
        r_min: f64,
        r_max: f64,
        n_r: usize,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        let dt = horizon / (n_t - 1) as f64;
        let dr = (r_max - r_min) / (n_r - 1) as f64;
        let mut values = Vec::with_capacity(n_t * n_r);
        for it in 0..n_t {
            for ir in 0..n_r {
                values.push(f(it as f64 * dt, r_min + ir as f64 * dr));
            }
        }
        Self::new(horizon, n_t, r_min, r_max, n_r, values)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_t(&self) -> usize {
        self.n_t
    }
    pub fn n_r(&self) -> usize {
        self.n_r
    }
    pub fn r_min(&self) -> f64 {
        self.r_min
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_t - 1) as f64
    }
    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / (self.n_r - 1) as f64
    }
    pub fn t_at(&self, it: usize) -> f64 {
        if it == self.n_t - 1 {
            self.horizon
        } else {
            it as f64 * self.dt()
        }
    }
    pub fn r_at(&self, ir: usize) -> f64 {
        self.r_min + ir as f64 * self.dr()
    }

    #[inline]
    pub fn at(&self, it: usize, ir: usize) -> f64 {
        self.values[it * self.n_r + ir]
    }

    pub fn row(&self, it: usize) -> &[f64] {
        &self.values[it * self.n_r..(it + 1) * self.n_r]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// ∂/∂r at a node: central inside, second-order one-sided at the edges.
    pub fn d_dr(&self, it: usize, ir: usize) -> f64 {
        let h = self.dr();
        let v = |j: usize| self.at(it, j);
        let n = self.n_r;
        if n == 2 {
            return (v(1) - v(0)) / h;
        }
        if ir == 0 {
            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
        } else if ir == n - 1 {
            (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h)
        } else {
            (v(ir + 1) - v(ir - 1)) / (2.0 * h)
        }
    }

    /// ∂²/∂r² at a node; edge nodes reuse the adjacent interior stencil.
    pub fn d_drr(&self, it: usize, ir: usize) -> f64 {
        let h = self.dr();
        let n = self.n_r;
        if n < 3 {
            return 0.0;
        }
        let c = ir.clamp(1, n - 2);
        (self.at(it, c + 1) - 2.0 * self.at(it, c) + self.at(it, c - 1)) / (h * h)
    }

    /// ∂/∂t at a node: central inside, second-order one-sided at t = 0 and t = T.
    pub fn d_dt(&self, it: usize, ir: usize) -> f64 {
        let k = self.dt();
        let v = |i: usize| self.at(i, ir);
        let n = self.n_t;
        if n == 2 {
            return (v(1) - v(0)) / k;
        }
        if it == 0 {
            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * k)
        } else if it == n - 1 {
            (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * k)
        } else {
            (v(it + 1) - v(it - 1)) / (2.0 * k)
        }
    }

    /// Interpolated value; r is clamped to the grid.
    #[inline]
    pub fn eval(&self, t: f64, r: f64) -> f64 {
        self.eval_with_dr(t, r).0
    }

    /// Interpolated value and its r-derivative (zero slope outside the grid).
    #[inline]
    pub fn eval_with_dr(&self, t: f64, r: f64) -> (f64, f64) {
        let (it, wt) = locate(t / self.dt(), self.n_t);
        let x = (r - self.r_min) / self.dr();
        let inside = x >= 0.0 && x <= (self.n_r - 1) as f64;
        let (ir, s) = locate(x, self.n_r);
        let s2 = s * s;
        let s3 = s2 * s;
        let w = [
            2.0 * s3 - 3.0 * s2 + 1.0,
            s3 - 2.0 * s2 + s,
            -2.0 * s3 + 3.0 * s2,
            s3 - s2,
        ];
        let dw = [
            6.0 * s2 - 6.0 * s,
            3.0 * s2 - 4.0 * s + 1.0,
            -6.0 * s2 + 6.0 * s,
            3.0 * s2 - 2.0 * s,
        ];
        let row = |i: usize| {
            let k = i * self.n_r + ir;
            let c = [self.values[k], self.slopes[k], self.values[k + 1], self.slopes[k + 1]];
            let v = w[0] * c[0] + w[1] * c[1] + w[2] * c[2] + w[3] * c[3];
            let d = dw[0] * c[0] + dw[1] * c[1] + dw[2] * c[2] + dw[3] * c[3];
            (v, d)
        };
        let (v0, d0) = row(it);
        let (v1, d1) = row(it + 1);
        let v = v0 + wt * (v1 - v0);
        let d = if inside { (d0 + wt * (d1 - d0)) / self.dr() } else { 0.0 };
        (v, d)
    }

    /// Row index and weight of time `t` for [`Field2D::eval_in_rows`].
    #[inline]
    pub fn locate_t(&self, t: f64) -> (usize, f64) {
        locate(t / self.dt(), self.n_t)
    }

    /// Value between rows `it` and `it + 1` with time weight `wt`; cheaper than
    /// [`Field2D::eval`] when many rates share one time.
    #[inline]
    pub fn eval_in_rows(&self, it: usize, wt: f64, r: f64) -> f64 {
        let (ir, s) = locate((r - self.r_min) * self.inv_dr, self.n_r);
        let s2 = s * s;
        let s3 = s2 * s;
        let w = [
            2.0 * s3 - 3.0 * s2 + 1.0,
            s3 - 2.0 * s2 + s,
            -2.0 * s3 + 3.0 * s2,
            s3 - s2,
        ];
        let row = |i: usize| {
            let k = i * self.n_r + ir;
            w[0] * self.values[k] + w[1] * self.slopes[k] + w[2] * self.values[k + 1] + w[3] * self.slopes[k + 1]
        };
        let v0 = row(it);
        v0 + wt * (row(it + 1) - v0)
    }

    /// r-derivative of the interpolant.
    pub fn eval_d_dr(&self, t: f64, r: f64) -> f64 {
        self.eval_with_dr(t, r).1
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for it in 0..self.n_t {
            for ir in 0..self.n_r {
                out.values[it * self.n_r + ir] = f(it, ir, self.at(it, ir));
            }
        }
        out.refresh_slopes();
        out
    }
}

/// Cell index and weight for a fractional coordinate, clamped to [0, n − 1].
#[inline]
fn locate(x: f64, n: usize) -> (usize, f64) {
    let max = (n - 1) as f64;
    let x = x.clamp(0.0, max);
    // truncation is floor on [0, max]
    let i = (x as usize).min(n - 2);
    (i, x - i as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_is_exact_for_bilinear_functions() {
        let f = Field2D::from_fn(2.0, 5, -0.1, 0.1, 9, |t, r| 1.0 + 2.0 * t - 3.0 * r + t * r).unwrap();
        for &(t, r) in &[(0.0, -0.1), (0.37, 0.013), (2.0, 0.1), (1.999, -0.0999)] {
            let exact = 1.0 + 2.0 * t - 3.0 * r + t * r;
            assert!((f.eval(t, r) - exact).abs() < 1e-13);
        }
        // clamped outside the r-range
        assert!((f.eval(1.0, 0.5) - f.eval(1.0, 0.1)).abs() < 1e-15);
    }

    #[test]
    fn derivatives_are_exact_for_quadratics() {
        let f = Field2D::from_fn(1.0, 6, 0.0, 1.0, 7, |t, r| t * t + 2.0 * r * r - r).unwrap();
        for ir in 0..7 {
            let r = f.r_at(ir);
            assert!((f.d_dr(2, ir) - (4.0 * r - 1.0)).abs() < 1e-12);
            assert!((f.d_drr(2, ir) - 4.0).abs() < 1e-9);
        }
        for it in 0..6 {
            assert!((f.d_dt(it, 3) - 2.0 * f.t_at(it)).abs() < 1e-12);
        }
    }

    #[test]
    fn hermite_reproduces_quadratics_in_r() {
        let f = Field2D::from_fn(1.0, 3, -1.0, 1.0, 6, |_, r| 3.0 * r * r - r + 0.5).unwrap();
        for &r in &[-0.93, -0.2, 0.0, 0.41, 0.999] {
            let (v, d) = f.eval_with_dr(0.3, r);
            assert!((v - (3.0 * r * r - r + 0.5)).abs() < 1e-13);
            assert!((d - (6.0 * r - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Field2D::new(1.0, 2, 0.0, 0.0, 2, vec![0.0; 4]).is_err());
        assert!(Field2D::new(1.0, 2, 0.0, 1.0, 2, vec![0.0; 3]).is_err());
    }
}
