//! Discount-weighted time quadrature.
//!
//! The objective integrals carry the weight `e^{-rt}`. Plain trapezoidal
//! quadrature of `e^{-rt} v(t)` would break the geometric discount identity
//! (a constant path must evaluate to exactly `v/r` including the salvage
//! term), so the integrand is treated as piecewise linear in `v` with the
//! discount factor integrated in closed form on every interval.

/// Integral of `e^{-rt} v(t)` over the mesh, with `v` piecewise linear
/// through the nodal values.
pub fn discounted_integral(t: &[f64], v: &[f64], r: f64) -> f64 {
    debug_assert_eq!(t.len(), v.len());
    let mut total = 0.0;
    for j in 0..t.len() - 1 {
        let h = t[j + 1] - t[j];
        // A = int_0^h e^{-rs} ds, B = int_0^h s e^{-rs} ds
        let emrh = (-r * h).exp();
        let a = -(-r * h).exp_m1() / r;
        let b = (a - h * emrh) / r;
        total += (-r * t[j]).exp() * (v[j] * a + (v[j + 1] - v[j]) * b / h);
    }
    total
}

/// Closed-form tail `(e^{-rT}/r) v(T)` correcting the truncated objective.
pub fn salvage(v_terminal: f64, r: f64, t_end: f64) -> f64 {
    (-r * t_end).exp() / r * v_terminal
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_integrand_recovers_geometric_discount() {
        let r = 0.03;
        let t: Vec<f64> = (0..=20).map(|i| 5.0 * i as f64).collect();
        let v = vec![-2.3787; 21];
        let j = discounted_integral(&t, &v, r) + salvage(-2.3787, r, 100.0);
        assert_relative_eq!(j, -2.3787 / r, max_relative = 1e-12);
    }

    #[test]
    fn linear_integrand_is_exact() {
        // v(t) = 2 + 3t on [0, 1]; the rule is exact for linear v no matter
        // how the interior nodes fall
        let r = 0.7;
        let t = vec![0.0, 0.35, 1.0];
        let v: Vec<f64> = t.iter().map(|&s| 2.0 + 3.0 * s).collect();
        let got = discounted_integral(&t, &v, r);
        let a = (1.0 - (-r).exp()) / r;
        let b = (a - (-r).exp()) / r;
        let exact = 2.0 * a + 3.0 * b;
        assert_relative_eq!(got, exact, max_relative = 1e-13);
    }

    #[test]
    fn tiny_intervals_stay_accurate() {
        let r = 0.03;
        let mut t = vec![0.0];
        for i in 0..2000 {
            t.push(t[i] + 1e-4);
        }
        let v = vec![1.0; t.len()];
        let got = discounted_integral(&t, &v, r);
        let exact = (1.0 - (-r * t.last().unwrap()).exp()) / r;
        assert_relative_eq!(got, exact, max_relative = 1e-11);
    }
}
