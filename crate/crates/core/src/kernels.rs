//! The sinc-product Fourier kernel.
//!
//! A pair `(q, k)` is weighted by `∏_d φ(sinc(R_d (q_d − k_d)))` with
//! `φ(x) = x^l`. For even `l` every factor is nonnegative and the weight is
//! evaluated in the log domain; odd `l` is only reachable through the signed
//! (linear-domain) path.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::quad_integrate_segmented;

/// Below this `|u|`, `sinc(u)` is evaluated by its Taylor series.
pub const DEFAULT_TAYLOR_THRESHOLD: f64 = 1e-4;

/// A sinc factor whose magnitude is below this counts as a zero: the pair
/// gets weight 0 and no gradient.
pub const SINC_ZERO_TOL: f64 = 1e-12;

/// Below this `|u|`, `cot u − 1/u` is evaluated by its series to avoid
/// cancellation between the two terms.
const COT_SERIES_THRESHOLD: f64 = 0.05;

/// Required accuracy of the normalization constant `A`.
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SincConfig {
    taylor_threshold: f64,
}

impl Default for SincConfig {
    fn default() -> Self {
        Self {
            taylor_threshold: DEFAULT_TAYLOR_THRESHOLD,
        }
    }
}

impl SincConfig {
    pub fn new(taylor_threshold: f64) -> Result<Self> {
        if !(taylor_threshold > 0.0 && taylor_threshold < 0.1) {
            return Err(Error::Parameter(format!(
                "taylor threshold must lie in (0, 0.1), got {taylor_threshold}"
            )));
        }
        Ok(Self { taylor_threshold })
    }

    pub fn taylor_threshold(&self) -> f64 {
        self.taylor_threshold
    }

    pub fn sinc(&self, u: f64) -> f64 {
        if u.abs() < self.taylor_threshold {
            let u2 = u * u;
            1.0 - u2 / 6.0 + u2 * u2 / 120.0
        } else {
            u.sin() / u
        }
    }
}

/// `sin(u)/u` with the removable singularity filled in.
pub fn sinc(u: f64) -> f64 {
    if u.abs() < DEFAULT_TAYLOR_THRESHOLD {
        let u2 = u * u;
        1.0 - u2 / 6.0 + u2 * u2 / 120.0
    } else {
        u.sin() / u
    }
}

/// `d/du ln|sinc u| = cot u − 1/u`.
fn log_sinc_slope(u: f64) -> f64 {
    if u.abs() < COT_SERIES_THRESHOLD {
        let u2 = u * u;
        -u * (1.0 / 3.0 + u2 * (1.0 / 45.0 + u2 * (2.0 / 945.0 + u2 / 4725.0)))
    } else {
        u.cos() / u.sin() - 1.0 / u
    }
}

/// The outer function `φ(x) = x^l` together with its metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiKernel {
    exponent: u32,
    normalization: Option<f64>,
    moment_order: u32,
    nonnegative: bool,
}

impl PhiKernel {
    /// `φ(x) = x^exponent`. For even exponents the normalization constant is
    /// computed (once per process) by quadrature.
    pub fn new(exponent: u32) -> Result<Self> {
        if exponent == 0 {
            return Err(Error::Parameter("phi exponent must be >= 1".into()));
        }
        let nonnegative = exponent % 2 == 0;
        let normalization = if nonnegative {
            Some(phi_normalization(exponent)?)
        } else {
            None
        };
        // Odd moments vanish by symmetry for even l, and the second moment is
        // strictly positive, so at most m = 1. The bias bound additionally
        // needs ∫|φ(sinc z)||z|^{m+1} < ∞, i.e. l > m + 2.
        let moment_order = if nonnegative && exponent >= 4 { 1 } else { 0 };
        Ok(Self {
            exponent,
            normalization,
            moment_order,
            nonnegative,
        })
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn moment_order(&self) -> u32 {
        self.moment_order
    }

    /// `A = ∫ φ(sin z / z) dz`; defined only for even exponents.
    pub fn normalization(&self) -> Result<f64> {
        self.normalization
            .ok_or(Error::UnsupportedNormalization(self.exponent))
    }

    pub fn apply(&self, x: f64) -> f64 {
        x.powi(self.exponent as i32)
    }

    fn require_nonnegative(&self) -> Result<()> {
        if !self.nonnegative {
            return Err(Error::Mode(format!(
                "phi(x) = x^{} can be negative; use the signed path",
                self.exponent
            )));
        }
        Ok(())
    }
}

fn normalization_cache() -> &'static Mutex<HashMap<u32, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<u32, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `A_l = ∫_ℝ (sin z / z)^l dz` for even `l`.
///
/// The integral is split as `2 ∫_0^Z + 2 ∫_Z^∞` with `Z = Kπ`. The far part
/// is handled analytically: writing `sin^l z = c₀ + Σ_k c_k cos(2kz)`, the
/// constant term contributes `c₀ Z^{1−l}/(l−1)` exactly, and at `Z = Kπ` each
/// cosine term is bounded by `1/(2k Z^l)`, so the two-sided remainder is below
/// `Z^{−l}`. `K` doubles until that bound drops under 1e-9; the near part is
/// integrated one half-period at a time.
pub fn phi_normalization(exponent: u32) -> Result<f64> {
    if exponent == 0 {
        return Err(Error::Parameter("phi exponent must be >= 1".into()));
    }
    if exponent % 2 == 1 {
        return Err(Error::UnsupportedNormalization(exponent));
    }
    if let Some(&a) = normalization_cache().lock().unwrap().get(&exponent) {
        return Ok(a);
    }
    let l = exponent as i32;
    let mut periods = 8usize;
    while (periods as f64 * PI).powi(-l) >= NORMALIZATION_TOL {
        periods *= 2;
    }
    let z = periods as f64 * PI;
    let near = quad_integrate_segmented(|x| sinc(x).powi(l), 0.0, z, periods, 16, 1e-14)?;
    let c0 = binomial(exponent, exponent / 2) / 2f64.powi(l);
    let far = c0 * z.powi(1 - l) / (l - 1) as f64;
    let a = 2.0 * (near + far);
    normalization_cache().lock().unwrap().insert(exponent, a);
    Ok(a)
}

/// Per-dimension bandwidth `R`: one shared scalar or one value per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Bandwidth {
    pub fn at(&self, d: usize) -> f64 {
        match self {
            Bandwidth::Scalar(r) => *r,
            Bandwidth::Vector(v) => v[d],
        }
    }

    /// Number of free values (1 for scalar).
    pub fn n_params(&self) -> usize {
        match self {
            Bandwidth::Scalar(_) => 1,
            Bandwidth::Vector(v) => v.len(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Bandwidth::Scalar(r) => vec![*r],
            Bandwidth::Vector(v) => v.clone(),
        }
    }

    /// Rebuilds a bandwidth of the same kind from its free values.
    pub fn from_values(values: &[f64], vector: bool) -> Self {
        if vector {
            Bandwidth::Vector(values.to_vec())
        } else {
            Bandwidth::Scalar(values[0])
        }
    }

    pub fn is_vector(&self) -> bool {
        matches!(self, Bandwidth::Vector(_))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let vals = match self {
            Bandwidth::Scalar(r) => std::slice::from_ref(r),
            Bandwidth::Vector(v) => {
                if v.len() != dim {
                    return Err(Error::Dimension(format!(
                        "bandwidth vector has {} entries for dimension {dim}",
                        v.len()
                    )));
                }
                v.as_slice()
            }
        };
        if let Some(bad) = vals.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::Parameter(format!("bandwidth must be > 0, got {bad}")));
        }
        Ok(())
    }
}

/// Products of sinc factors are folded into the log accumulator once they
/// drop below this, so the running product never underflows.
const FOLD_BELOW: f64 = 1e-200;

/// `Σ_d l·ln|sinc(R_d δ_d)|` without validation; `-inf` at a sinc zero.
#[inline]
pub(crate) fn log_weight_unchecked(q: &[f64], k: &[f64], r: &Bandwidth, exponent: u32) -> f64 {
    let mut acc = 0.0;
    let mut prod = 1.0;
    for (d, (qd, kd)) in q.iter().zip(k).enumerate() {
        let s = sinc(r.at(d) * (qd - kd)).abs();
        if s < SINC_ZERO_TOL {
            return f64::NEG_INFINITY;
        }
        prod *= s;
        if prod < FOLD_BELOW {
            acc += prod.ln();
            prod = 1.0;
        }
    }
    exponent as f64 * (acc + prod.ln())
}

/// Log-weight and `∂ ln w / ∂q` in one pass sharing `sin`/`cos`. At a sinc
/// zero returns `-inf` and leaves `dq` zeroed.
#[inline]
pub(crate) fn log_weight_with_dq(
    q: &[f64],
    k: &[f64],
    r: &Bandwidth,
    exponent: u32,
    dq: &mut [f64],
) -> f64 {
    let l = exponent as f64;
    let mut acc = 0.0;
    let mut prod = 1.0;
    for (d, (qd, kd)) in q.iter().zip(k).enumerate() {
        let rd = r.at(d);
        let u = rd * (qd - kd);
        let (sin_u, cos_u) = u.sin_cos();
        let s = sinc_from_sin(u, sin_u);
        if s.abs() < SINC_ZERO_TOL {
            dq.fill(0.0);
            return f64::NEG_INFINITY;
        }
        prod *= s.abs();
        if prod < FOLD_BELOW {
            acc += prod.ln();
            prod = 1.0;
        }
        dq[d] = l * rd * slope_from_sin_cos(u, sin_u, cos_u);
    }
    l * (acc + prod.ln())
}

/// Signed product weight and `∂ ln|w| / ∂q` in one pass. When a factor sits
/// at a sinc zero the gradient is zeroed.
#[inline]
pub(crate) fn signed_weight_with_dq(
    q: &[f64],
    k: &[f64],
    r: &Bandwidth,
    exponent: u32,
    dq: &mut [f64],
) -> f64 {
    let l = exponent as f64;
    let mut prod = 1.0;
    let mut singular = false;
    for (d, (qd, kd)) in q.iter().zip(k).enumerate() {
        let rd = r.at(d);
        let u = rd * (qd - kd);
        let (sin_u, cos_u) = u.sin_cos();
        let s = sinc_from_sin(u, sin_u);
        prod *= s;
        if s.abs() < SINC_ZERO_TOL {
            singular = true;
        } else {
            dq[d] = l * rd * slope_from_sin_cos(u, sin_u, cos_u);
        }
    }
    if singular {
        dq.fill(0.0);
    }
    prod.powi(exponent as i32)
}

#[inline]
fn sinc_from_sin(u: f64, sin_u: f64) -> f64 {
    if u.abs() < DEFAULT_TAYLOR_THRESHOLD {
        let u2 = u * u;
        1.0 - u2 / 6.0 + u2 * u2 / 120.0
    } else {
        sin_u / u
    }
}

#[inline]
fn slope_from_sin_cos(u: f64, sin_u: f64, cos_u: f64) -> f64 {
    if u.abs() < COT_SERIES_THRESHOLD {
        log_sinc_slope(u)
    } else {
        cos_u / sin_u - 1.0 / u
    }
}

/// `∏_d φ(sinc(R_d δ_d))` without validation.
#[inline]
pub(crate) fn signed_weight_unchecked(q: &[f64], k: &[f64], r: &Bandwidth, exponent: u32) -> f64 {
    let mut acc = 1.0;
    for (d, (qd, kd)) in q.iter().zip(k).enumerate() {
        acc *= sinc(r.at(d) * (qd - kd));
    }
    acc.powi(exponent as i32)
}

fn check_pair(q: &[f64], k: &[f64], r: &Bandwidth) -> Result<()> {
    if q.len() != k.len() {
        return Err(Error::Dimension(format!(
            "query has {} coordinates, key has {}",
            q.len(),
            k.len()
        )));
    }
    r.validate(q.len())
}

/// `ln d_f(q, k)`; exactly `-inf` when a sinc factor vanishes.
pub fn fourier_log_weight(q: &[f64], k: &[f64], r: &Bandwidth, kernel: &PhiKernel) -> Result<f64> {
    check_pair(q, k, r)?;
    kernel.require_nonnegative()?;
    Ok(log_weight_unchecked(q, k, r, kernel.exponent))
}

/// Direct product `∏_d φ(sinc(R_d δ_d))`, valid for any exponent and
/// possibly negative for odd ones.
pub fn fourier_weight_signed(q: &[f64], k: &[f64], r: &Bandwidth, kernel: &PhiKernel) -> f64 {
    assert_eq!(q.len(), k.len(), "query/key dimension mismatch");
    signed_weight_unchecked(q, k, r, kernel.exponent)
}

/// Partial derivatives of `ln d_f` with respect to the query, the key and the
/// bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeightGrad {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    /// One entry for a scalar bandwidth (summed over coordinates), else `D`.
    pub dr: Vec<f64>,
}

/// With `u_d = R_d δ_d` and `g(u) = cot u − 1/u`:
/// `∂/∂q_d = l R_d g(u_d)`, `∂/∂k_d = −∂/∂q_d`, `∂/∂R_d = l δ_d g(u_d)`.
pub fn fourier_log_weight_grad(
    q: &[f64],
    k: &[f64],
    r: &Bandwidth,
    kernel: &PhiKernel,
) -> Result<LogWeightGrad> {
    check_pair(q, k, r)?;
    kernel.require_nonnegative()?;
    let l = kernel.exponent as f64;
    let dim = q.len();
    let mut dq = vec![0.0; dim];
    let mut dr_full = vec![0.0; dim];
    for d in 0..dim {
        let rd = r.at(d);
        let delta = q[d] - k[d];
        let u = rd * delta;
        let s = sinc(u);
        if s.abs() < SINC_ZERO_TOL {
            return Err(Error::SingularGradient {
                coord: d,
                factor: s,
            });
        }
        let g = log_sinc_slope(u);
        dq[d] = l * rd * g;
        dr_full[d] = l * delta * g;
    }
    let dk = dq.iter().map(|x| -x).collect();
    let dr = match r {
        Bandwidth::Scalar(_) => vec![dr_full.iter().sum()],
        Bandwidth::Vector(_) => dr_full,
    };
    Ok(LogWeightGrad { dq, dk, dr })
}

/// Numerical 1-D transform `(1/π) ∫ R φ(sinc(Rx)) cos(tx) dx` for `l ∈ {1, 2}`.
///
/// The closed forms are the box `1{|t| ≤ R}` for `l = 1` and the triangle
/// `(2 − |t|/R)/2` on `|t| ≤ 2R` for `l = 2`.
pub fn kernel_fourier_transform_check(exponent: u32, r: f64, t: f64) -> Result<f64> {
    if !(exponent == 1 || exponent == 2) {
        return Err(Error::Parameter(format!(
            "band-limit check supports exponents 1 and 2, got {exponent}"
        )));
    }
    if !(r > 0.0) {
        return Err(Error::Parameter(format!("bandwidth must be > 0, got {r}")));
    }
    let l = exponent as i32;
    // The l = 1 integrand only decays like 1/x; the window keeps the
    // truncation error near 1e-3 at 0.05 from the jump.
    let half_width = if exponent == 1 { 4000.0 } else { 400.0 };
    let freq = exponent as f64 * r + t.abs();
    let segments = (half_width * freq / PI).ceil().max(1.0) as usize;
    let integral = quad_integrate_segmented(
        |x| r * sinc(r * x).powi(l) * (t * x).cos(),
        0.0,
        half_width,
        segments,
        8,
        1e-12,
    )?;
    Ok(2.0 * integral / PI)
}

/// Closed form of the band-limit identity, for comparison.
pub fn band_limit_closed_form(exponent: u32, r: f64, t: f64) -> Option<f64> {
    match exponent {
        1 => Some(if t.abs() < r {
            1.0
        } else if t.abs() == r {
            0.5
        } else {
            0.0
        }),
        2 => Some(if t.abs() <= 2.0 * r {
            (2.0 - (t / r).abs()) / 2.0
        } else {
            0.0
        }),
        _ => None,
    }
}
