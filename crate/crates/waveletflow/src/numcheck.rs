//! Numerical verification helpers: finite differences, quadrature, and
//! moment statistics. These back the oracle assertions in the test suite and
//! are exported so integration tests can reuse them.

use crate::Result;

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf)?;
        buf[i] = orig - h;
        let fm = f(&buf)?;
        buf[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error with a floor on the denominator so that near-zero pairs
/// are compared absolutely (gradient-check convention).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Trapezoid rule on a uniform grid of `n` intervals over `[a, b]`.
pub fn trapezoid<F>(mut f: F, a: f64, b: f64, n: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a)? + f(b)?);
    for i in 1..n {
        s += f(a + h * i as f64)?;
    }
    Ok(s * h)
}

/// Sample mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Monte Carlo standard error of the mean.
pub fn mc_se(xs: &[f64]) -> f64 {
    let (_, var) = mean_var(xs);
    (var / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff(|x| Ok(x[0] * x[0]), &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn trapezoid_integrates_gaussian_to_one() {
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let v = trapezoid(|x| Ok(c * (-0.5 * x * x).exp()), -8.0, 8.0, 1600).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn mean_var_basics() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_eq!(v, 1.25);
    }
}
