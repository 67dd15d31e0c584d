//! Density and regression estimators: Gaussian KDE, the generalized Fourier
//! density estimator, Gaussian and Fourier Nadaraya–Watson regression, MISE
//! evaluation and Monte Carlo rate experiments.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dot_product_attention, MaskMode};
use crate::error::{Error, Result};
use crate::kernels::{log_weight_unchecked, sinc, Bandwidth, PhiKernel, SINC_ZERO_TOL};
use crate::numerics::{dot, fit_slope, log_sum_exp, mean_and_stderr, Rng, Tensor};

/// Fourier-tail decay class of a density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    /// `|p̂(t)| ≲ exp(−c|t|^α)`.
    Supersmooth { alpha: f64 },
    /// `|p̂(t)| ≲ (1 + |t|^β)^{−1}`.
    OrdinarySmooth { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    /// Location shared by every coordinate.
    pub mean: f64,
    pub sigma: f64,
}

/// Product densities on `ℝ^D` (i.i.d. coordinates), plus an isotropic
/// Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DensityModel {
    Gaussian { dim: usize, sigma: f64 },
    Cauchy { dim: usize, scale: f64 },
    Laplace { dim: usize, scale: f64 },
    GaussianMixture { dim: usize, components: Vec<MixtureComponent> },
}

fn normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

impl DensityModel {
    pub fn standard_normal(dim: usize) -> Self {
        DensityModel::Gaussian { dim, sigma: 1.0 }
    }

    /// Equal-weight two-component mixture at `±shift`.
    pub fn bimodal(dim: usize, shift: f64, sigma: f64) -> Self {
        DensityModel::GaussianMixture {
            dim,
            components: vec![
                MixtureComponent { weight: 0.5, mean: -shift, sigma },
                MixtureComponent { weight: 0.5, mean: shift, sigma },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DensityModel::Gaussian { dim, .. }
            | DensityModel::Cauchy { dim, .. }
            | DensityModel::Laplace { dim, .. }
            | DensityModel::GaussianMixture { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Parameter("density dimension must be >= 1".into()));
        }
        let bad = |v: f64| !(v > 0.0 && v.is_finite());
        match self {
            DensityModel::Gaussian { sigma: s, .. }
            | DensityModel::Cauchy { scale: s, .. }
            | DensityModel::Laplace { scale: s, .. } => {
                if bad(*s) {
                    return Err(Error::Parameter(format!("scale must be > 0, got {s}")));
                }
            }
            DensityModel::GaussianMixture { components, .. } => {
                if components.is_empty() {
                    return Err(Error::Parameter("mixture needs components".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| bad(c.weight) || bad(c.sigma)) {
                    return Err(Error::Parameter("mixture weights and sigmas must be > 0".into()));
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Parameter(format!("mixture weights sum to {total}")));
                }
            }
        }
        Ok(())
    }

    pub fn smoothness(&self) -> Smoothness {
        match self {
            DensityModel::Gaussian { .. } | DensityModel::GaussianMixture { .. } => {
                Smoothness::Supersmooth { alpha: 2.0 }
            }
            DensityModel::Cauchy { .. } => Smoothness::Supersmooth { alpha: 1.0 },
            DensityModel::Laplace { .. } => Smoothness::OrdinarySmooth { beta: 2.0 },
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            DensityModel::Gaussian { sigma, .. } => x.iter().map(|&v| normal_pdf(v, 0.0, *sigma)).product(),
            DensityModel::Cauchy { scale, .. } => x
                .iter()
                .map(|&v| 1.0 / (PI * scale * (1.0 + (v / scale).powi(2))))
                .product(),
            DensityModel::Laplace { scale, .. } => x
                .iter()
                .map(|&v| (-v.abs() / scale).exp() / (2.0 * scale))
                .product(),
            DensityModel::GaussianMixture { components, .. } => components
                .iter()
                .map(|c| c.weight * x.iter().map(|&v| normal_pdf(v, c.mean, c.sigma)).product::<f64>())
                .sum(),
        }
    }

    /// `n` i.i.d. draws as an `n×D` tensor. Cauchy uses the inverse CDF and
    /// Laplace a difference of two exponentials.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Tensor> {
        self.validate()?;
        let dim = self.dim();
        let mut out = Tensor::zeros(&[n, dim]);
        let exp_draw = |rng: &mut Rng| -(1.0 - rng.uniform()).ln();
        for i in 0..n {
            let component = match self {
                DensityModel::GaussianMixture { components, .. } => {
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let mut pick = components.len() - 1;
                    for (c, comp) in components.iter().enumerate() {
                        acc += comp.weight;
                        if u < acc {
                            pick = c;
                            break;
                        }
                    }
                    Some(&components[pick])
                }
                _ => None,
            };
            for x in out.row_mut(i) {
                *x = match self {
                    DensityModel::Gaussian { sigma, .. } => sigma * rng.normal(),
                    DensityModel::Cauchy { scale, .. } => scale * (PI * (rng.uniform() - 0.5)).tan(),
                    DensityModel::Laplace { scale, .. } => scale * (exp_draw(rng) - exp_draw(rng)),
                    DensityModel::GaussianMixture { .. } => {
                        let c = component.unwrap();
                        c.mean + c.sigma * rng.normal()
                    }
                };
            }
        }
        Ok(out)
    }
}

/// Isotropic Gaussian kernel width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBandwidth {
    sigma: f64,
}

impl GaussianBandwidth {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

fn check_samples(samples: &Tensor, x: &[f64]) -> Result<()> {
    if !samples.is_matrix() || samples.rows() == 0 {
        return Err(Error::InsufficientData("need at least one sample".into()));
    }
    if samples.cols() != x.len() {
        return Err(Error::Dimension(format!(
            "samples have {} coordinates, point has {}",
            samples.cols(),
            x.len()
        )));
    }
    Ok(())
}

/// `(1/N) Σ_j N(x; k_j, σ² I)`.
pub fn gaussian_kde(samples: &Tensor, sigma: GaussianBandwidth, x: &[f64]) -> Result<f64> {
    check_samples(samples, x)?;
    let s = sigma.sigma();
    let dim = x.len() as i32;
    let norm = (2.0 * PI * s * s).powf(-0.5 * dim as f64);
    let mut acc = 0.0;
    for j in 0..samples.rows() {
        let d2: f64 = x.iter().zip(samples.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
        acc += (-d2 / (2.0 * s * s)).exp();
    }
    Ok(norm * acc / samples.rows() as f64)
}

/// `∫ sinc^l` from the alternating binomial sum; valid for every `l ≥ 1`
/// (conditionally convergent for `l = 1`).
fn sinc_power_integral(l: u32) -> f64 {
    let n = l as i32;
    let mut binom = 1.0;
    let mut acc = 0.0;
    let mut k = 0;
    while 2 * k < n {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binom * ((n - 2 * k) as f64).powi(n - 1);
        binom *= (n - k) as f64 / (k + 1) as f64;
        k += 1;
    }
    let fact: f64 = (1..n).map(|i| i as f64).product();
    PI * acc / (2f64.powi(n - 1) * fact)
}

/// Product weight with the shared convention that a factor within
/// `SINC_ZERO_TOL` of zero contributes exactly zero.
fn product_weight(x: &[f64], k: &[f64], r: f64, exponent: u32) -> f64 {
    let mut acc = 1.0;
    for (a, b) in x.iter().zip(k) {
        let s = sinc(r * (a - b));
        if s.abs() < SINC_ZERO_TOL {
            return 0.0;
        }
        acc *= s;
    }
    acc.powi(exponent as i32)
}

/// `(R^D / (N A^D)) Σ_i ∏_d φ(sinc(R(x_d − k_id)))`.
///
/// Odd exponents give a signed estimate; the normalization then uses the
/// conditionally convergent `∫ sinc^l` and a warning is logged.
pub fn fourier_density(samples: &Tensor, r: f64, kernel: &PhiKernel, x: &[f64]) -> Result<f64> {
    check_samples(samples, x)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("R must be > 0, got {r}")));
    }
    let l = kernel.exponent();
    let a = if kernel.is_nonnegative() {
        kernel.normalization()?
    } else {
        log::warn!("fourier_density with odd exponent {l}: estimate is signed");
        sinc_power_integral(l)
    };
    let dim = x.len() as i32;
    let mut acc = 0.0;
    for j in 0..samples.rows() {
        acc += product_weight(x, samples.row(j), r, l);
    }
    Ok((r / a).powi(dim) * acc / samples.rows() as f64)
}

/// Uniform evaluation lattice on `[lo, hi]^D` for `D ∈ {1, 2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    /// Points per axis, endpoints included.
    pub points: usize,
}

/// Minimum probability mass the grid must cover.
pub const GRID_COVERAGE: f64 = 1.0 - 1e-4;

impl Grid {
    pub fn new(dim: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Parameter(format!("grids support D in {{1, 2}}, got {dim}")));
        }
        if !(hi > lo) || points < 2 {
            return Err(Error::Parameter(format!(
                "grid [{lo}, {hi}] with {points} points is empty"
            )));
        }
        Ok(Self { dim, lo, hi, points })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn axis(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.points).map(|i| self.lo + h * i as f64).collect()
    }

    /// Lattice points, row-major.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        let axis = self.axis();
        match self.dim {
            1 => axis.iter().map(|&x| vec![x]).collect(),
            _ => axis
                .iter()
                .flat_map(|&x| axis.iter().map(move |&y| vec![x, y]))
                .collect(),
        }
    }

    /// Trapezoid rule over values laid out like [`Grid::nodes`].
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let n = self.points;
        let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let h = self.step();
        match self.dim {
            1 => values.iter().enumerate().map(|(i, v)| w(i) * v).sum::<f64>() * h,
            _ => {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += w(i) * w(j) * values[i * n + j];
                    }
                }
                acc * h * h
            }
        }
    }

    pub fn check_coverage(&self, truth: &DensityModel) -> Result<()> {
        if truth.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "grid is {}-D, density is {}-D",
                self.dim,
                truth.dim()
            )));
        }
        let vals: Vec<f64> = self.nodes().iter().map(|x| truth.pdf(x)).collect();
        let mass = self.integrate(&vals);
        if mass < GRID_COVERAGE {
            return Err(Error::Coverage { mass });
        }
        Ok(())
    }
}

/// `∫ (p̂ − p)²` on the grid.
pub fn integrated_squared_error<F>(estimate: F, truth: &DensityModel, grid: &Grid) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    grid.check_coverage(truth)?;
    let vals = grid
        .nodes()
        .iter()
        .map(|x| estimate(x).map(|e| (e - truth.pdf(x)).powi(2)))
        .collect::<Result<Vec<_>>>()?;
    Ok(grid.integrate(&vals))
}

/// How a density estimate is built from a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityEstimator {
    GaussianKde { sigma: f64 },
    Fourier { r: f64, exponent: u32 },
}

impl DensityEstimator {
    pub fn evaluate(&self, samples: &Tensor, x: &[f64]) -> Result<f64> {
        match self {
            DensityEstimator::GaussianKde { sigma } => {
                gaussian_kde(samples, GaussianBandwidth::new(*sigma)?, x)
            }
            DensityEstimator::Fourier { r, exponent } => {
                fourier_density(samples, *r, &PhiKernel::new(*exponent)?, x)
            }
        }
    }
}

/// Monte Carlo mean of the integrated squared error and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiseEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// MISE of `estimator` fitted to `n` draws from `truth`, averaged over
/// `reps` independent samples. Rep `i` uses substream `i` of `rng`, and the
/// per-rep errors are reduced in rep order, so the result does not depend on
/// the thread count.
pub fn mise(
    estimator: &DensityEstimator,
    truth: &DensityModel,
    grid: &Grid,
    n: usize,
    reps: usize,
    rng: &Rng,
) -> Result<MiseEstimate> {
    if reps == 0 || n == 0 {
        return Err(Error::InsufficientData("MISE needs n >= 1 and reps >= 1".into()));
    }
    grid.check_coverage(truth)?;
    let errors = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut sub = rng.substream(rep as u64);
            let samples = truth.sample(&mut sub, n)?;
            integrated_squared_error(|x| estimator.evaluate(&samples, x), truth, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = mean_and_stderr(&errors);
    Ok(MiseEstimate { mean, stderr })
}

// ---------------------------------------------------------------------------
// Regression

/// Normalized Gaussian weights `softmax(−‖q − k_j‖² / 2σ²)`.
fn gaussian_nw_weights(keys: &Tensor, sigma: f64, query: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..keys.rows())
        .map(|j| {
            let d2: f64 = query.iter().zip(keys.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            -d2 / (2.0 * sigma * sigma)
        })
        .collect();
    let lse = log_sum_exp(&logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn weighted_average(values: &Tensor, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.cols()];
    for (j, &w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(values.row(j)) {
            *o += w * v;
        }
    }
    out
}

fn check_regression(keys: &Tensor, values: &Tensor, query: &[f64]) -> Result<()> {
    check_samples(keys, query)?;
    if !values.is_matrix() || values.rows() != keys.rows() {
        return Err(Error::Dimension(format!(
            "{} keys but values have shape {:?}",
            keys.rows(),
            values.shape()
        )));
    }
    Ok(())
}

/// `Σ_j v_j φ_σ(q − k_j) / Σ_j φ_σ(q − k_j)`.
pub fn gaussian_nw_regress(
    keys: &Tensor,
    values: &Tensor,
    sigma: GaussianBandwidth,
    query: &[f64],
) -> Result<Vec<f64>> {
    check_regression(keys, values, query)?;
    let w = gaussian_nw_weights(keys, sigma.sigma(), query);
    Ok(weighted_average(values, &w))
}

/// Allowed deviation of a key's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// Runs Gaussian NW regression with `σ² = √D` and softmax attention on the
/// same inputs and returns the largest elementwise gap.
pub fn softmax_equivalence_check(keys: &Tensor, values: &Tensor, queries: &Tensor) -> Result<f64> {
    if !queries.is_matrix() || queries.cols() != keys.cols() {
        return Err(Error::Dimension("queries and keys must share a width".into()));
    }
    for j in 0..keys.rows() {
        let norm = dot(keys.row(j), keys.row(j)).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Precondition(format!("key {j} has norm {norm}, expected 1")));
        }
    }
    let sigma = GaussianBandwidth::new((keys.cols() as f64).sqrt().sqrt())?;
    let attn = dot_product_attention(queries, keys, values, MaskMode::None)?;
    let mut gap: f64 = 0.0;
    for i in 0..queries.rows() {
        let nw = gaussian_nw_regress(keys, values, sigma, queries.row(i))?;
        for (a, b) in nw.iter().zip(attn.row(i)) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

/// Smallest admissible `Σ_j w_j` for Fourier NW regression.
pub const MIN_WEIGHT_SUM: f64 = 1e-300;

/// Fourier NW estimate at every row of `queries`; even exponents only.
/// An all-zero weight row reports its query index.
pub fn fourier_nw_regress_batch(
    keys: &Tensor,
    values: &Tensor,
    r: f64,
    kernel: &PhiKernel,
    queries: &Tensor,
) -> Result<Tensor> {
    if !kernel.is_nonnegative() {
        return Err(Error::Mode(format!(
            "Fourier regression needs an even exponent, got {}",
            kernel.exponent()
        )));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("R must be > 0, got {r}")));
    }
    if !queries.is_matrix() {
        return Err(Error::Dimension("queries must be a matrix".into()));
    }
    let mut out = Tensor::zeros(&[queries.rows(), values.cols()]);
    let bw = Bandwidth::Scalar(r);
    let mut logw = vec![0.0; keys.rows()];
    for i in 0..queries.rows() {
        let q = queries.row(i);
        check_regression(keys, values, q)?;
        for (j, lw) in logw.iter_mut().enumerate() {
            *lw = log_weight_unchecked(q, keys.row(j), &bw, kernel.exponent());
        }
        let lse = log_sum_exp(&logw);
        if !(lse >= MIN_WEIGHT_SUM.ln()) {
            return Err(Error::EmptyNeighborhood { query: i });
        }
        let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
        out.row_mut(i).copy_from_slice(&weighted_average(values, &w));
    }
    Ok(out)
}

/// Single-query form of [`fourier_nw_regress_batch`].
pub fn fourier_nw_regress(
    keys: &Tensor,
    values: &Tensor,
    r: f64,
    kernel: &PhiKernel,
    query: &[f64],
) -> Result<Vec<f64>> {
    let q = Tensor::new(vec![1, query.len()], query.to_vec())?;
    Ok(fourier_nw_regress_batch(keys, values, r, kernel, &q)?.into_data())
}

/// Named regression targets `f: ℝ^D → ℝ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrueFunction {
    /// `Σ_d sin x_d`.
    Sin,
    Constant { value: f64 },
    /// `Σ_d x_d`.
    Linear,
}

impl TrueFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TrueFunction::Sin => x.iter().map(|v| v.sin()).sum(),
            TrueFunction::Constant { value } => *value,
            TrueFunction::Linear => x.iter().sum(),
        }
    }
}

/// `v_j = f(k_j) + ε_j` with Gaussian `ε_j ~ N(0, σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    pub keys: Tensor,
    pub values: Tensor,
    pub true_f: TrueFunction,
    pub noise_sigma: f64,
}

impl RegressionProblem {
    /// Keys are drawn before noise, both from `rng`.
    pub fn generate(
        keys_from: &DensityModel,
        true_f: TrueFunction,
        noise_sigma: f64,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        let keys = keys_from.sample(rng, n)?;
        let mut values = Tensor::zeros(&[n, 1]);
        for j in 0..n {
            let noise = if noise_sigma > 0.0 { noise_sigma * rng.normal() } else { 0.0 };
            values.set(j, 0, true_f.eval(keys.row(j)) + noise);
        }
        Ok(Self { keys, values, true_f, noise_sigma })
    }

    /// Mean squared error of the Fourier NW estimate at `points`.
    pub fn fourier_mse(&self, r: f64, kernel: &PhiKernel, points: &Tensor) -> Result<f64> {
        let est = fourier_nw_regress_batch(&self.keys, &self.values, r, kernel, points)?;
        let n = points.rows() as f64;
        Ok((0..points.rows())
            .map(|i| (est.get(i, 0) - self.true_f.eval(points.row(i))).powi(2))
            .sum::<f64>()
            / n)
    }
}

// ---------------------------------------------------------------------------
// Rate experiments

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateKind {
    DensityMise,
    RegressionMse,
}

/// Bandwidth `R = c · N^{rate}` (or the log form for `φ(z) = z` with a
/// supersmooth density) and the error exponent theory predicts for it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    /// `None` marks the logarithmic bandwidth `(ln N)^{1/α}`.
    pub r_exponent: Option<f64>,
    pub target_slope: f64,
}

impl RateSchedule {
    pub fn new(kind: RateKind, kernel: &PhiKernel, smoothness: Smoothness, dim: usize) -> Result<Self> {
        let d = dim as f64;
        let l = kernel.exponent();
        let m = kernel.moment_order() as f64;
        Ok(match kind {
            RateKind::DensityMise => match l {
                1 => match smoothness {
                    Smoothness::Supersmooth { .. } => Self { r_exponent: None, target_slope: -1.0 },
                    Smoothness::OrdinarySmooth { beta } => Self {
                        r_exponent: Some(1.0 / (d + beta - 1.0)),
                        target_slope: -(beta - 1.0) / (d + beta - 1.0),
                    },
                },
                2 => Self {
                    r_exponent: Some(1.0 / (d + 2.0)),
                    target_slope: -2.0 / (d + 2.0),
                },
                _ if kernel.is_nonnegative() => Self {
                    r_exponent: Some(1.0 / (d + m + 1.0)),
                    target_slope: -(m + 1.0) / (d + m + 1.0),
                },
                _ => {
                    return Err(Error::Parameter(format!(
                        "no density rate for odd exponent {l} > 1"
                    )))
                }
            },
            RateKind::RegressionMse => {
                let denom = 2.0 * (m + 1.0) + d;
                Self {
                    r_exponent: Some(1.0 / denom),
                    target_slope: -2.0 * (m + 1.0) / denom,
                }
            }
        })
    }

    pub fn bandwidth(&self, n: usize, constant: f64, smoothness: Smoothness) -> f64 {
        let nf = n as f64;
        match self.r_exponent {
            Some(e) => constant * nf.powf(e),
            None => {
                let alpha = match smoothness {
                    Smoothness::Supersmooth { alpha } => alpha,
                    Smoothness::OrdinarySmooth { beta } => beta,
                };
                constant * nf.ln().powf(1.0 / alpha)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub kind: RateKind,
    pub ladder: Vec<usize>,
    pub reps: usize,
    pub exponent: u32,
    /// Proportionality constant in `R = c · N^{rate}`.
    pub r_constant: f64,
    /// Sample (density) or key (regression) distribution.
    pub truth: DensityModel,
    /// Density only.
    pub grid: Option<Grid>,
    /// Regression only.
    pub true_f: TrueFunction,
    pub noise_sigma: f64,
    /// Regression test points: `test_points` evenly spaced in `[−test_half_width, test_half_width]`
    /// along the diagonal.
    pub test_points: usize,
    pub test_half_width: f64,
    pub seed: u64,
}

impl RateConfig {
    pub fn density(ladder: Vec<usize>, reps: usize, exponent: u32, seed: u64) -> Result<Self> {
        Ok(Self {
            kind: RateKind::DensityMise,
            ladder,
            reps,
            exponent,
            r_constant: 1.0,
            truth: DensityModel::standard_normal(1),
            grid: Some(Grid::new(1, -6.0, 6.0, 1201)?),
            true_f: TrueFunction::Sin,
            noise_sigma: 0.0,
            test_points: 0,
            test_half_width: 0.0,
            seed,
        })
    }

    pub fn regression(ladder: Vec<usize>, reps: usize, exponent: u32, seed: u64) -> Self {
        Self {
            kind: RateKind::RegressionMse,
            ladder,
            reps,
            exponent,
            r_constant: 1.0,
            truth: DensityModel::standard_normal(1),
            grid: None,
            true_f: TrueFunction::Sin,
            noise_sigma: 0.1,
            test_points: 20,
            test_half_width: 1.5,
            seed,
        }
    }

    pub fn test_grid(&self) -> Tensor {
        let dim = self.truth.dim();
        let n = self.test_points;
        let mut t = Tensor::zeros(&[n, dim]);
        for i in 0..n {
            let x = if n == 1 {
                0.0
            } else {
                -self.test_half_width + 2.0 * self.test_half_width * i as f64 / (n - 1) as f64
            };
            t.row_mut(i).fill(x);
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub r: f64,
    pub error_mean: f64,
    pub error_stderr: f64,
    /// Log-log slope fitted over this row and every earlier one.
    pub slope_so_far: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub kind: RateKind,
    pub rows: Vec<RateRow>,
    pub slope: f64,
    pub target_slope: f64,
}

impl RateTable {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].error_mean < w[0].error_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,R,error_mean,error_stderr,slope_so_far\n");
        for r in &self.rows {
            let slope = r.slope_so_far.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                r.n, r.r, r.error_mean, r.error_stderr, slope
            ));
        }
        s
    }
}

/// Sweeps the sample-size ladder with the theory-optimal bandwidth. Rung `t`,
/// rep `i` draws from substream `(t, i)` of the seed, so tables are
/// reproducible for any thread count.
pub fn rate_experiment(config: &RateConfig) -> Result<RateTable> {
    if config.ladder.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate ladder needs >= 3 sizes, got {}",
            config.ladder.len()
        )));
    }
    if config.ladder.windows(2).any(|w| w[1] <= w[0]) || config.ladder[0] == 0 {
        return Err(Error::Parameter("rate ladder must be strictly increasing and positive".into()));
    }
    let dim = config.truth.dim();
    if !(1..=2).contains(&dim) {
        return Err(Error::Parameter(format!("rate experiments support D in {{1, 2}}, got {dim}")));
    }
    if config.reps == 0 {
        return Err(Error::InsufficientData("reps must be >= 1".into()));
    }
    let kernel = PhiKernel::new(config.exponent)?;
    let smooth = config.truth.smoothness();
    let schedule = RateSchedule::new(config.kind, &kernel, smooth, dim)?;
    let root = Rng::new(config.seed);
    let mut rows: Vec<RateRow> = Vec::with_capacity(config.ladder.len());
    for (t, &n) in config.ladder.iter().enumerate() {
        let r = schedule.bandwidth(n, config.r_constant, smooth);
        let rung = root.substream(t as u64);
        let (mean, stderr) = match config.kind {
            RateKind::DensityMise => {
                let grid = config
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::Config("density rate needs a grid".into()))?;
                let est = DensityEstimator::Fourier { r, exponent: config.exponent };
                let m = mise(&est, &config.truth, grid, n, config.reps, &rung)?;
                (m.mean, m.stderr)
            }
            RateKind::RegressionMse => {
                if config.test_points == 0 {
                    return Err(Error::Config("regression rate needs test points".into()));
                }
                let points = config.test_grid();
                let errs = (0..config.reps)
                    .into_par_iter()
                    .map(|rep| {
                        let mut sub = rung.substream(rep as u64);
                        let prob = RegressionProblem::generate(
                            &config.truth,
                            config.true_f.clone(),
                            config.noise_sigma,
                            n,
                            &mut sub,
                        )?;
                        prob.fourier_mse(r, &kernel, &points)
                    })
                    .collect::<Result<Vec<_>>>()?;
                mean_and_stderr(&errs)
            }
        };
        let mut row = RateRow { n, r, error_mean: mean, error_stderr: stderr, slope_so_far: None };
        rows.push(row);
        if rows.len() >= 2 {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .map(|r| ((r.n as f64).ln(), r.error_mean.ln()))
                .unzip();
            row.slope_so_far = Some(fit_slope(&xs, &ys));
            *rows.last_mut().unwrap() = row;
        }
    }
    let slope = rows.last().and_then(|r| r.slope_so_far).unwrap_or(f64::NAN);
    Ok(RateTable {
        kind: config.kind,
        rows,
        slope,
        target_slope: schedule.target_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(xs: &[f64]) -> Tensor {
        Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap()
    }

    #[test]
    fn kde_single_sample_peak() {
        let s = col(&[0.7]);
        let v = gaussian_kde(&s, GaussianBandwidth::new(1.0).unwrap(), &[0.7]).unwrap();
        assert!((v - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kde_two_symmetric_samples_average() {
        let s = col(&[-0.5, 0.5]);
        let v = gaussian_kde(&s, GaussianBandwidth::new(0.8).unwrap(), &[0.0]).unwrap();
        let expect = 0.5 * (normal_pdf(0.0, -0.5, 0.8) + normal_pdf(0.0, 0.5, 0.8));
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(GaussianBandwidth::new(0.0).is_err());
        assert!(GaussianBandwidth::new(-1.0).is_err());
    }

    #[test]
    fn fourier_density_single_sample() {
        let k2 = PhiKernel::new(2).unwrap();
        let s = col(&[0.3]);
        let v = fourier_density(&s, PI, &k2, &[0.3]).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        let zero = fourier_density(&s, PI, &k2, &[1.3]).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn sinc_power_integral_closed_forms() {
        assert!((sinc_power_integral(1) - PI).abs() < 1e-15);
        assert!((sinc_power_integral(2) - PI).abs() < 1e-15);
        assert!((sinc_power_integral(3) - 0.75 * PI).abs() < 1e-15);
        assert!((sinc_power_integral(4) - 2.0 * PI / 3.0).abs() < 1e-15);
    }

    #[test]
    fn smoothness_tags() {
        assert!(matches!(
            DensityModel::standard_normal(1).smoothness(),
            Smoothness::Supersmooth { alpha } if alpha == 2.0
        ));
        assert!(matches!(
            DensityModel::Cauchy { dim: 1, scale: 1.0 }.smoothness(),
            Smoothness::Supersmooth { alpha } if alpha == 1.0
        ));
        assert!(matches!(
            DensityModel::Laplace { dim: 1, scale: 1.0 }.smoothness(),
            Smoothness::OrdinarySmooth { beta } if beta == 2.0
        ));
    }

    #[test]
    fn grid_integrates_pdfs_to_one() {
        let g1 = Grid::new(1, -40.0, 40.0, 80001).unwrap();
        for m in [
            DensityModel::standard_normal(1),
            DensityModel::Laplace { dim: 1, scale: 0.7 },
            DensityModel::bimodal(1, 1.5, 0.6),
        ] {
            let vals: Vec<f64> = g1.nodes().iter().map(|x| m.pdf(x)).collect();
            assert!((g1.integrate(&vals) - 1.0).abs() < 1e-6, "{m:?}");
        }
        let g2 = Grid::new(2, -8.0, 8.0, 401).unwrap();
        let m = DensityModel::standard_normal(2);
        let vals: Vec<f64> = g2.nodes().iter().map(|x| m.pdf(x)).collect();
        assert!((g2.integrate(&vals) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cauchy_fails_narrow_coverage() {
        let g = Grid::new(1, -6.0, 6.0, 601).unwrap();
        let c = DensityModel::Cauchy { dim: 1, scale: 1.0 };
        assert!(matches!(g.check_coverage(&c), Err(Error::Coverage { .. })));
    }

    #[test]
    fn ise_of_truth_and_of_zero() {
        let truth = DensityModel::standard_normal(1);
        let g = Grid::new(1, -6.0, 6.0, 2001).unwrap();
        let exact = integrated_squared_error(|x| Ok(truth.pdf(x)), &truth, &g).unwrap();
        assert!(exact.abs() < 1e-10);
        let zero = integrated_squared_error(|_| Ok(0.0), &truth, &g).unwrap();
        assert!((zero - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-6, "{zero}");
    }

    #[test]
    fn sampler_moments() {
        let mut rng = Rng::new(3);
        let n = 20000;
        let lap = DensityModel::Laplace { dim: 1, scale: 1.0 }.sample(&mut rng, n).unwrap();
        let var = lap.data().iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var - 2.0).abs() < 0.15, "{var}");
        let cau = DensityModel::Cauchy { dim: 1, scale: 1.0 }.sample(&mut rng, n).unwrap();
        let inside = cau.data().iter().filter(|x| x.abs() < 1.0).count() as f64 / n as f64;
        assert!((inside - 0.5).abs() < 0.02, "{inside}");
        let mix = DensityModel::bimodal(1, 3.0, 0.5).sample(&mut rng, n).unwrap();
        let pos = mix.data().iter().filter(|&&x| x > 0.0).count() as f64 / n as f64;
        assert!((pos - 0.5).abs() < 0.02);
    }

    #[test]
    fn nw_examples() {
        let s = GaussianBandwidth::new(1.0).unwrap();
        let keys = col(&[-1.0, 1.0]);
        let vals = col(&[0.0, 1.0]);
        let v = gaussian_nw_regress(&keys, &vals, s, &[0.0]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        let one = gaussian_nw_regress(&col(&[2.0]), &col(&[-4.0]), s, &[9.0]).unwrap();
        assert_eq!(one, vec![-4.0]);
        let c = gaussian_nw_regress(&keys, &col(&[3.0, 3.0]), s, &[0.4]).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn equivalence_small_cases() {
        let mut rng = Rng::new(4);
        let mut keys = rng.normal_tensor(&[4, 4], 1.0);
        for i in 0..4 {
            let n = dot(keys.row(i), keys.row(i)).sqrt();
            keys.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        let q = rng.normal_tensor(&[4, 4], 1.0);
        let v = rng.normal_tensor(&[4, 3], 1.0);
        assert!(softmax_equivalence_check(&keys, &v, &q).unwrap() <= 1e-10);
        assert_eq!(softmax_equivalence_check(&keys, &Tensor::zeros(&[4, 3]), &q).unwrap(), 0.0);
        let bad = keys.scale(2.0);
        assert!(matches!(
            softmax_equivalence_check(&bad, &v, &q),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fourier_nw_selects_isolated_key() {
        let k2 = PhiKernel::new(2).unwrap();
        let keys = col(&[0.0, PI, -PI]);
        let vals = col(&[5.0, 1.0, 2.0]);
        assert_eq!(fourier_nw_regress(&keys, &vals, 1.0, &k2, &[0.0]).unwrap(), vec![5.0]);
        let c = fourier_nw_regress(&keys, &col(&[2.5, 2.5, 2.5]), 1.0, &k2, &[0.4]).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn fourier_nw_empty_neighborhood_reports_query() {
        let k2 = PhiKernel::new(2).unwrap();
        let keys = col(&[0.0]);
        let queries = col(&[0.1, PI]);
        assert!(matches!(
            fourier_nw_regress_batch(&keys, &col(&[1.0]), 1.0, &k2, &queries),
            Err(Error::EmptyNeighborhood { query: 1 })
        ));
    }

    #[test]
    fn rate_ladder_validation() {
        let cfg = RateConfig::regression(vec![100, 400], 1, 4, 0);
        assert!(matches!(rate_experiment(&cfg), Err(Error::InsufficientData(_))));
        let cfg = RateConfig::regression(vec![100, 400, 300], 1, 4, 0);
        assert!(matches!(rate_experiment(&cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn schedules() {
        let g = Smoothness::Supersmooth { alpha: 2.0 };
        let k4 = PhiKernel::new(4).unwrap();
        let s = RateSchedule::new(RateKind::RegressionMse, &k4, g, 1).unwrap();
        assert!((s.r_exponent.unwrap() - 0.2).abs() < 1e-15);
        let k2 = PhiKernel::new(2).unwrap();
        let s = RateSchedule::new(RateKind::DensityMise, &k2, g, 1).unwrap();
        assert!((s.r_exponent.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.target_slope + 2.0 / 3.0).abs() < 1e-15);
        let k1 = PhiKernel::new(1).unwrap();
        let s = RateSchedule::new(RateKind::DensityMise, &k1, g, 1).unwrap();
        assert!(s.r_exponent.is_none());
        let r = s.bandwidth(1000, 1.0, g);
        assert!((r - 1000f64.ln().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_function_is_reproduced() {
        let mut cfg = RateConfig::regression(vec![50, 100, 200], 2, 4, 9);
        cfg.true_f = TrueFunction::Constant { value: 1.5 };
        cfg.noise_sigma = 0.0;
        let t = rate_experiment(&cfg).unwrap();
        assert!(t.rows.iter().all(|r| r.error_mean <= 1e-3));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = RateConfig::regression(vec![50, 100, 200], 2, 4, 1);
        let t = rate_experiment(&cfg).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "N,R,error_mean,error_stderr,slope_so_far");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(','));
    }
}
