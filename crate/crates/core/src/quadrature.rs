//! Gauss–Legendre quadrature, fixed-order and adaptive.

use std::sync::OnceLock;

const ADAPTIVE_ORDER: usize = 10;
const MAX_DEPTH: u32 = 40;

/// Nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes the `n`-point rule by Newton iteration on P_n.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

fn adaptive_rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(ADAPTIVE_ORDER))
}

/// Adaptive Gauss–Legendre on [a, b] to absolute tolerance `tol`.
///
/// Each panel is accepted when the 10-point estimate and the sum of the
/// two half-panel estimates agree to the panel's share of the tolerance.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let rule = adaptive_rule();
    let whole = rule.integrate(&mut f, a, b);
    refine(rule, &mut f, a, b, whole, tol.max(1e-15), 0)
}

fn refine<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    f: &mut F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(&mut *f, a, mid);
    let right = rule.integrate(&mut *f, mid, b);
    let split = left + right;
    if (split - whole).abs() <= tol || depth >= MAX_DEPTH {
        return split;
    }
    refine(rule, f, a, mid, left, 0.5 * tol, depth + 1) + refine(rule, f, mid, b, right, 0.5 * tol, depth + 1)
}

/// Adaptive integration with panel boundaries forced at `breaks` that fall
/// strictly inside (a, b).
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, breaks: &[f64], tol: f64) -> f64 {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    if cuts.is_empty() {
        return integrate(f, a, b, tol);
    }
    cuts.sort_by(|x, y| x.total_cmp(y));
    let share = tol / (cuts.len() + 1) as f64;
    let mut lo = a;
    let mut total = 0.0;
    for hi in cuts.into_iter().chain(std::iter::once(b)) {
        total += integrate(&mut f, lo, hi, share);
        lo = hi;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_is_exact_for_polynomials_up_to_degree_2n_minus_1() {
        let rule = GaussLegendre::new(5);
        let v = rule.integrate(|x| x.powi(9) + 3.0 * x.powi(8), 0.0, 1.0);
        assert!((v - (0.1 + 3.0 / 9.0)).abs() < 1e-14);
        let w: f64 = rule.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_sharp_integrands() {
        let v = integrate(|x: f64| (-50.0 * x).exp(), 0.0, 10.0, 1e-12);
        assert!((v - (1.0 - (-500.0f64).exp()) / 50.0).abs() < 1e-12);
        let s = integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10);
        assert!((s - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn breaks_split_discontinuities() {
        let f = |x: f64| if x < 0.3 { 1.0 } else { 2.0 };
        let v = integrate_with_breaks(f, 0.0, 1.0, &[0.3], 1e-12);
        assert!((v - 1.7).abs() < 1e-13);
    }
}
