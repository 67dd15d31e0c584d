//! Composite Simpson quadrature.

use crate::error::{Error, Result};

/// Successive-estimate tolerance used by [`quad_integrate_adaptive`] when the
/// caller has no tighter requirement.
pub const DEFAULT_ADAPTIVE_TOL: f64 = 1e-10;

const MAX_PANELS: usize = 1 << 22;

fn eval<F: Fn(f64) -> f64>(f: &F, x: f64) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation { at: x, value: v })
    }
}

/// Composite Simpson rule on `n_panels` equal panels (rounded up to even).
pub fn quad_integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n_panels: usize) -> Result<f64> {
    if n_panels < 2 {
        return Err(Error::Parameter(format!(
            "Simpson needs at least 2 panels, got {n_panels}"
        )));
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!("bounds must be finite: [{lo}, {hi}]")));
    }
    simpson(&f, lo, hi, n_panels + (n_panels & 1))
}

fn simpson<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, n: usize) -> Result<f64> {
    let h = (hi - lo) / n as f64;
    let mut acc = eval(f, lo)? + eval(f, hi)?;
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * eval(f, lo + h * i as f64)?;
    }
    Ok(acc * h / 3.0)
}

/// Simpson with panel doubling from `n_panels` until two successive
/// estimates differ by less than `tol`.
pub fn quad_integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    n_panels: usize,
    tol: f64,
) -> Result<f64> {
    let mut n = n_panels.max(2);
    n += n & 1;
    let mut prev = quad_integrate(&f, lo, hi, n)?;
    while n < MAX_PANELS {
        n *= 2;
        let next = simpson(&f, lo, hi, n)?;
        if (next - prev).abs() < tol {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

/// Integrates over `[lo, hi]` split into `segments` equal pieces, each
/// refined adaptively. Suits oscillatory integrands whose period is known:
/// one segment per period keeps the refinement local.
pub fn quad_integrate_segmented<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    segments: usize,
    panels_per_segment: usize,
    tol: f64,
) -> Result<f64> {
    if segments == 0 {
        return Err(Error::Parameter("need at least one segment".into()));
    }
    let w = (hi - lo) / segments as f64;
    let mut total = 0.0;
    for s in 0..segments {
        let a = lo + w * s as f64;
        let b = if s + 1 == segments { hi } else { a + w };
        total += quad_integrate_adaptive(&f, a, b, panels_per_segment, tol)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sine_over_half_period() {
        let v = quad_integrate_adaptive(f64::sin, 0.0, PI, 8, DEFAULT_ADAPTIVE_TOL).unwrap();
        assert!((v - 2.0).abs() < 1e-10, "{v}");
    }

    #[test]
    fn odd_integrand_vanishes() {
        let v = quad_integrate(|x| x, -1.0, 1.0, 10).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let p = |x: f64| 2.0 - 3.0 * x + 0.5 * x * x + 1.25 * x * x * x;
        let antiderivative =
            |x: f64| 2.0 * x - 1.5 * x * x + x.powi(3) / 6.0 + 1.25 * x.powi(4) / 4.0;
        let (lo, hi) = (-1.3, 2.1);
        let v = quad_integrate(p, lo, hi, 2).unwrap();
        assert!((v - (antiderivative(hi) - antiderivative(lo))).abs() < 1e-13);
    }

    #[test]
    fn sinc_squared_window_approaches_pi() {
        let sinc2 = |x: f64| {
            if x == 0.0 {
                1.0
            } else {
                (x.sin() / x).powi(2)
            }
        };
        let mut prev_gap = f64::INFINITY;
        for half in [12.5 * PI, 25.0 * PI, 50.0 * PI] {
            let segs = (2.0 * half / PI).round() as usize;
            let v = quad_integrate_segmented(sinc2, -half, half, segs, 16, 1e-12).unwrap();
            let gap = PI - v;
            // Analytic tail of ∫ sinc² beyond ±Z is about 1/Z.
            assert!(gap > 0.0 && (gap - 1.0 / half).abs() < 0.05 / half, "{gap}");
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = quad_integrate(|x| 1.0 / x, -1.0, 1.0, 2);
        assert!(matches!(r, Err(Error::Evaluation { .. })));
    }

    #[test]
    fn too_few_panels() {
        assert!(matches!(
            quad_integrate(|x| x, 0.0, 1.0, 1),
            Err(Error::Parameter(_))
        ));
    }
}
