//! Self-attention: scaled dot-product and Fourier (sinc-product kernel)
//! variants, causal masking, multi-head assembly and tape integration.
//!
//! Fourier attention weights pair `(i, j)` by `exp(ln d_f(q_i, k_j))` and
//! normalizes over keys with a log-sum-exp, so the density constants `A^D`
//! and `R^D` cancel. The backward pass is fused: one sweep over pairs
//! produces the query, key, value and bandwidth gradients together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels::{log_weight_with_dq, signed_weight_with_dq, Bandwidth, PhiKernel};
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    None,
    Causal,
}

impl MaskMode {
    #[inline]
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            MaskMode::None => true,
            MaskMode::Causal => key <= query,
        }
    }
}

/// What to do with a query whose every attended weight is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    /// Average the unmasked values and count the event.
    Uniform,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Dot,
    Fourier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierAttentionParams {
    pub r: Bandwidth,
    pub kernel: PhiKernel,
    pub mask: MaskMode,
    pub fallback: Fallback,
    /// Normalize in the log domain (even exponents only). The linear-domain
    /// path multiplies raw factors and is the only one accepting odd φ.
    pub log_domain: bool,
}

impl FourierAttentionParams {
    /// Log-domain, unmasked, uniform fallback.
    pub fn new(r: Bandwidth, kernel: PhiKernel) -> Self {
        let log_domain = kernel.is_nonnegative();
        Self {
            r,
            kernel,
            mask: MaskMode::None,
            fallback: Fallback::Uniform,
            log_domain,
        }
    }

    pub fn with_mask(mut self, mask: MaskMode) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn linear_domain(mut self) -> Self {
        self.log_domain = false;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.r.validate(dim)?;
        if self.log_domain && !self.kernel.is_nonnegative() {
            return Err(Error::Mode(format!(
                "log-domain Fourier attention needs an even exponent, got {}",
                self.kernel.exponent()
            )));
        }
        Ok(())
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if !(q.is_matrix() && k.is_matrix() && v.is_matrix()) {
        return Err(Error::Dimension("Q, K and V must be matrices".into()));
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "Q {:?}, K {:?}, V {:?} are inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dot-product attention

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DotAttentionState {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    scale: f64,
}

impl DotAttentionState {
    pub fn weights(&self) -> &Tensor {
        &self.probs
    }
}

/// `softmax(QKᵀ/√D + mask) V`.
pub fn dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: MaskMode) -> Result<Tensor> {
    dot_product_attention_forward(q, k, v, mask).map(|(o, _)| o)
}

pub fn dot_product_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: MaskMode,
) -> Result<(Tensor, DotAttentionState)> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_nt(q, k)?;
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = if mask.allows(i, j) {
                *s * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        if !softmax_in_place(row) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    let out = matmul(&scores, v)?;
    Ok((
        out,
        DotAttentionState {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs: scores,
            scale,
        },
    ))
}

/// Gradients `(dQ, dK, dV)`.
pub fn dot_product_attention_backward(
    upstream: &Tensor,
    state: &DotAttentionState,
) -> Result<(Tensor, Tensor, Tensor)> {
    if upstream.shape() != [state.q.rows(), state.v.cols()] {
        return Err(Error::Contract(format!(
            "upstream {:?} does not match the saved forward pass",
            upstream.shape()
        )));
    }
    let p = &state.probs;
    let dv = matmul_tn(p, upstream)?;
    let dp = matmul_nt(upstream, &state.v)?;
    let mut ds = Tensor::zeros(p.shape());
    for i in 0..p.rows() {
        let (pr, dpr) = (p.row(i), dp.row(i));
        let inner = dot(pr, dpr);
        for (j, d) in ds.row_mut(i).iter_mut().enumerate() {
            *d = pr[j] * (dpr[j] - inner) * state.scale;
        }
    }
    let dq = matmul(&ds, &state.k)?;
    let dk = matmul_tn(&ds, &state.q)?;
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// Fourier attention

/// Everything the fused backward needs, plus diagnostics.
#[derive(Clone, Debug)]
pub struct FourierAttentionState {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    r: Bandwidth,
    output: Tensor,
    /// Normalized weights, `N×N`.
    weights: Tensor,
    /// `∂ ln w_ij / ∂q_i`, flattened `N×N×D`; zero for masked or singular pairs.
    pair_dq: Vec<f64>,
    /// Rows whose weights came from the uniform fallback (no q/k/R gradient).
    fallback_rows: Vec<bool>,
    negative_weights: usize,
}

impl FourierAttentionState {
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback_rows.iter().filter(|&&f| f).count()
    }

    /// Number of (unmasked) pairs with a strictly negative raw weight; only
    /// possible on the linear-domain path with odd φ.
    pub fn negative_weight_count(&self) -> usize {
        self.negative_weights
    }
}

#[derive(Clone, Debug)]
pub struct FourierAttentionOutput {
    pub output: Tensor,
    pub state: FourierAttentionState,
}

/// Gradients of a scalar objective through Fourier attention.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierAttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    /// Matches the bandwidth kind: one entry for scalar `R`, else `D`.
    pub dr: Vec<f64>,
}

/// `ĥ_i = Σ_j w_ij v_j / Σ_j w_ij` with `w_ij = ∏_d φ(sinc(R_d(q_id − k_jd)))`.
pub fn fourier_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &FourierAttentionParams,
) -> Result<FourierAttentionOutput> {
    check_qkv(q, k, v)?;
    let dim = q.cols();
    params.validate(dim)?;
    let n = q.rows();
    let nk = k.rows();
    let exponent = params.kernel.exponent();
    let mut weights = Tensor::zeros(&[n, nk]);
    let mut pair_dq = vec![0.0; n * nk * dim];
    let mut fallback_rows = vec![false; n];
    let mut negative_weights = 0;

    for i in 0..n {
        let qi = q.row(i);
        let row = weights.row_mut(i);
        let mut any_allowed = false;
        if params.log_domain {
            for (j, w) in row.iter_mut().enumerate() {
                if !params.mask.allows(i, j) {
                    *w = f64::NEG_INFINITY;
                    continue;
                }
                any_allowed = true;
                let g = &mut pair_dq[(i * nk + j) * dim..(i * nk + j + 1) * dim];
                *w = log_weight_with_dq(qi, k.row(j), &params.r, exponent, g);
            }
            if !any_allowed {
                return Err(Error::DegenerateRow { row: i });
            }
            if !softmax_in_place(row) {
                fallback_rows[i] = true;
            }
        } else {
            let mut total = 0.0;
            for (j, w) in row.iter_mut().enumerate() {
                if !params.mask.allows(i, j) {
                    continue;
                }
                any_allowed = true;
                let g = &mut pair_dq[(i * nk + j) * dim..(i * nk + j + 1) * dim];
                *w = signed_weight_with_dq(qi, k.row(j), &params.r, exponent, g);
                if *w < 0.0 {
                    negative_weights += 1;
                }
                total += *w;
            }
            if !any_allowed {
                return Err(Error::DegenerateRow { row: i });
            }
            if total == 0.0 {
                fallback_rows[i] = true;
            } else {
                for w in row.iter_mut() {
                    *w /= total;
                }
            }
        }
        if fallback_rows[i] {
            if params.fallback == Fallback::Error {
                return Err(Error::EmptyNeighborhood { query: i });
            }
            log::debug!("fourier attention: uniform fallback for query {i}");
            let allowed = (0..nk).filter(|&j| params.mask.allows(i, j)).count() as f64;
            for (j, w) in row.iter_mut().enumerate() {
                *w = if params.mask.allows(i, j) {
                    1.0 / allowed
                } else {
                    0.0
                };
            }
        }
    }
    let output = matmul(&weights, v)?;
    Ok(FourierAttentionOutput {
        output: output.clone(),
        state: FourierAttentionState {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            r: params.r.clone(),
            output,
            weights,
            pair_dq,
            fallback_rows,
            negative_weights,
        },
    })
}

/// Fused reverse pass.
///
/// With `p_ij` the normalized weights and `G` the upstream gradient, both the
/// log-domain and the linear-domain forward give
/// `∂L/∂θ = Σ_ij c_ij ∂ln w_ij/∂θ` where `c_ij = p_ij G_i·(v_j − ĥ_i)`.
/// `∂ln w/∂k = −∂ln w/∂q` and `∂ln w/∂R_d = (δ_d/R_d) ∂ln w/∂q_d`, so one
/// saved gradient per pair serves all three.
pub fn fourier_attention_backward(
    upstream: &Tensor,
    state: &FourierAttentionState,
) -> Result<FourierAttentionGrads> {
    let (n, nk, dim) = (state.q.rows(), state.k.rows(), state.q.cols());
    if upstream.shape() != state.output.shape() {
        return Err(Error::Contract(format!(
            "upstream {:?} does not match saved output {:?}",
            upstream.shape(),
            state.output.shape()
        )));
    }
    let mut dq = Tensor::zeros(state.q.shape());
    let mut dk = Tensor::zeros(state.k.shape());
    let mut dv = Tensor::zeros(state.v.shape());
    let mut dr = vec![0.0; state.r.n_params()];
    let vector_r = state.r.is_vector();
    let r_vals: Vec<f64> = (0..dim).map(|d| state.r.at(d)).collect();

    for i in 0..n {
        let gi = upstream.row(i);
        let pi = state.weights.row(i);
        let g_out = dot(gi, state.output.row(i));
        let qi = state.q.row(i);
        for j in 0..nk {
            let p = pi[j];
            if p == 0.0 {
                continue;
            }
            for (d, g) in dv.row_mut(j).iter_mut().zip(gi) {
                *d += p * g;
            }
            if state.fallback_rows[i] {
                continue;
            }
            let c = p * (dot(gi, state.v.row(j)) - g_out);
            let pair = &state.pair_dq[(i * nk + j) * dim..(i * nk + j + 1) * dim];
            let kj = state.k.row(j);
            let dq_row = dq.row_mut(i);
            for d in 0..dim {
                let t = c * pair[d];
                dq_row[d] += t;
                let dr_term = t * (qi[d] - kj[d]) / r_vals[d];
                if vector_r {
                    dr[d] += dr_term;
                } else {
                    dr[0] += dr_term;
                }
            }
            for (d, x) in dk.row_mut(j).iter_mut().enumerate() {
                *x -= c * pair[d];
            }
        }
    }
    Ok(FourierAttentionGrads { dq, dk, dv, dr })
}

// ---------------------------------------------------------------------------
// Multi-head assembly (inference path)

/// Projection weights of one head; `Q = X·w_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub fourier: FourierAttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    /// `(H·D_v) × (H·D_v)` output projection.
    pub w_o: Tensor,
    /// Applies to every head; overrides the per-head Fourier mask.
    pub mask: MaskMode,
}

impl MultiHeadParams {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Dimension("multi-head attention needs H >= 1".into()));
        }
        let mut total_v = 0;
        for (h, head) in self.heads.iter().enumerate() {
            let ok = head.w_q.is_matrix()
                && head.w_k.is_matrix()
                && head.w_v.is_matrix()
                && head.w_q.rows() == input_dim
                && head.w_k.rows() == input_dim
                && head.w_v.rows() == input_dim
                && head.w_q.cols() == head.w_k.cols();
            if !ok {
                return Err(Error::Dimension(format!(
                    "head {h}: W_Q {:?}, W_K {:?}, W_V {:?} for input width {input_dim}",
                    head.w_q.shape(),
                    head.w_k.shape(),
                    head.w_v.shape()
                )));
            }
            total_v += head.w_v.cols();
        }
        if self.w_o.shape() != [total_v, total_v] {
            return Err(Error::Dimension(format!(
                "W_O is {:?}, expected [{total_v}, {total_v}]",
                self.w_o.shape()
            )));
        }
        Ok(())
    }
}

/// Output of a single head of [`multi_head`].
pub fn single_head(x: &Tensor, head: &HeadParams, mask: MaskMode, variant: AttentionVariant) -> Result<Tensor> {
    let q = matmul(x, &head.w_q)?;
    let k = matmul(x, &head.w_k)?;
    let v = matmul(x, &head.w_v)?;
    match variant {
        AttentionVariant::Dot => dot_product_attention(&q, &k, &v, mask),
        AttentionVariant::Fourier => {
            let params = head.fourier.clone().with_mask(mask);
            Ok(fourier_attention(&q, &k, &v, &params)?.output)
        }
    }
}

/// `Concat(H_1, …, H_H) W_O`.
pub fn multi_head(x: &Tensor, params: &MultiHeadParams, variant: AttentionVariant) -> Result<Tensor> {
    if !x.is_matrix() {
        return Err(Error::Dimension("multi-head input must be a matrix".into()));
    }
    params.validate(x.cols())?;
    let outs = params
        .heads
        .iter()
        .map(|h| single_head(x, h, params.mask, variant))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = outs.iter().collect();
    matmul(&Tensor::concat_cols(&refs)?, &params.w_o)
}

// ---------------------------------------------------------------------------
// Tape integration. Rows are grouped into independent sequences of
// `seq_len` positions; attention never crosses a sequence boundary.

fn check_blocks(rows: usize, seq_len: usize) -> Result<usize> {
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::Dimension(format!(
            "{rows} rows cannot be split into sequences of {seq_len}"
        )));
    }
    Ok(rows / seq_len)
}

#[derive(Debug)]
struct DotAttentionOp {
    seq_len: usize,
    states: Vec<DotAttentionState>,
}

impl CustomOp for DotAttentionOp {
    fn name(&self) -> &'static str {
        "dot_attention"
    }

    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let t = self.seq_len;
        for (b, st) in self.states.iter().enumerate() {
            let g = upstream.slice_rows(b * t, (b + 1) * t)?;
            let (dq, dk, dv) = dot_product_attention_backward(&g, st)?;
            for (grad, part) in grads.iter_mut().zip([dq, dk, dv]) {
                let w = part.cols();
                grad.data_mut()[b * t * w..(b + 1) * t * w].copy_from_slice(part.data());
            }
        }
        Ok(grads)
    }
}

/// Dot-product attention on the tape over `rows / seq_len` sequences.
pub fn tape_dot_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: MaskMode,
    seq_len: usize,
) -> Result<NodeId> {
    let blocks = check_blocks(tape.value(q).rows(), seq_len)?;
    let mut states = Vec::with_capacity(blocks);
    let mut out = Tensor::zeros(&[tape.value(q).rows(), tape.value(v).cols()]);
    for b in 0..blocks {
        let (s, e) = (b * seq_len, (b + 1) * seq_len);
        let (o, st) = dot_product_attention_forward(
            &tape.value(q).slice_rows(s, e)?,
            &tape.value(k).slice_rows(s, e)?,
            &tape.value(v).slice_rows(s, e)?,
            mask,
        )?;
        let w = o.cols();
        out.data_mut()[s * w..e * w].copy_from_slice(o.data());
        states.push(st);
    }
    tape.custom(&[q, k, v], out, Box::new(DotAttentionOp { seq_len, states }))
}

#[derive(Debug)]
struct FourierAttentionOp {
    seq_len: usize,
    states: Vec<FourierAttentionState>,
}

impl CustomOp for FourierAttentionOp {
    fn name(&self) -> &'static str {
        "fourier_attention"
    }

    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let t = self.seq_len;
        for (b, st) in self.states.iter().enumerate() {
            let g = upstream.slice_rows(b * t, (b + 1) * t)?;
            let fg = fourier_attention_backward(&g, st)?;
            for (grad, part) in grads.iter_mut().zip([fg.dq, fg.dk, fg.dv]) {
                let w = part.cols();
                grad.data_mut()[b * t * w..(b + 1) * t * w].copy_from_slice(part.data());
            }
            for (acc, d) in grads[3].data_mut().iter_mut().zip(&fg.dr) {
                *acc += d;
            }
        }
        Ok(grads)
    }
}

/// Counters gathered during a Fourier attention forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    pub fallback_rows: usize,
    pub negative_weights: usize,
}

impl std::ops::AddAssign for AttentionDiagnostics {
    fn add_assign(&mut self, rhs: Self) {
        self.fallback_rows += rhs.fallback_rows;
        self.negative_weights += rhs.negative_weights;
    }
}

/// Fourier attention on the tape. `r` holds the bandwidth values (shape `[1]`
/// for scalar, `[D]` for vector); `template` supplies φ, mask, fallback and
/// domain, and its own `r` is ignored.
pub fn tape_fourier_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    r: NodeId,
    template: &FourierAttentionParams,
    seq_len: usize,
) -> Result<(NodeId, AttentionDiagnostics)> {
    let blocks = check_blocks(tape.value(q).rows(), seq_len)?;
    let dim = tape.value(q).cols();
    let r_vals = tape.value(r).data().to_vec();
    let bandwidth = match r_vals.len() {
        1 => Bandwidth::Scalar(r_vals[0]),
        n if n == dim => Bandwidth::Vector(r_vals),
        n => {
            return Err(Error::Dimension(format!(
                "bandwidth node has {n} values for head dimension {dim}"
            )))
        }
    };
    let params = FourierAttentionParams {
        r: bandwidth,
        ..template.clone()
    };
    let mut states = Vec::with_capacity(blocks);
    let mut diag = AttentionDiagnostics::default();
    let mut out = Tensor::zeros(&[tape.value(q).rows(), tape.value(v).cols()]);
    for b in 0..blocks {
        let (s, e) = (b * seq_len, (b + 1) * seq_len);
        let res = fourier_attention(
            &tape.value(q).slice_rows(s, e)?,
            &tape.value(k).slice_rows(s, e)?,
            &tape.value(v).slice_rows(s, e)?,
            &params,
        )?;
        let w = res.output.cols();
        out.data_mut()[s * w..e * w].copy_from_slice(res.output.data());
        diag += AttentionDiagnostics {
            fallback_rows: res.state.fallback_count(),
            negative_weights: res.state.negative_weight_count(),
        };
        states.push(res.state);
    }
    let id = tape.custom(&[q, k, v, r], out, Box::new(FourierAttentionOp { seq_len, states }))?;
    Ok((id, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use std::f64::consts::PI;

    fn kernel(l: u32) -> PhiKernel {
        PhiKernel::new(l).unwrap()
    }

    /// Literal per-element softmax attention.
    fn dot_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let n = q.rows();
        let d = q.cols() as f64;
        let mut out = Tensor::zeros(&[n, v.cols()]);
        for i in 0..n {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (dot(q.row(i), k.row(j)) / d.sqrt()).exp())
                .collect();
            let z: f64 = scores.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    let cur = out.get(i, c);
                    out.set(i, c, cur + scores[j] / z * v.get(j, c));
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_its_value() {
        let q = Tensor::from_rows(&[[0.3, -0.2]]).unwrap();
        let v = Tensor::from_rows(&[[5.0, -1.0, 2.0]]).unwrap();
        let o = dot_product_attention(&q, &q, &v, MaskMode::None).unwrap();
        assert_eq!(o, v);
    }

    #[test]
    fn dominant_key_wins_as_scale_grows() {
        let v = Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let mut last_gap = f64::INFINITY;
        for scale in [1.0, 4.0, 16.0] {
            let q = Tensor::from_rows(&[[scale, 0.0], [scale, 0.0], [scale, 0.0]]).unwrap();
            let k = Tensor::from_rows(&[[scale, 0.0], [0.0, scale], [-scale, 0.0]]).unwrap();
            let o = dot_product_attention(&q, &k, &v, MaskMode::None).unwrap();
            let gap = (o.get(0, 0) - 1.0).abs();
            assert!(gap < last_gap);
            last_gap = gap;
        }
        assert!(last_gap < 1e-6);
    }

    #[test]
    fn dot_attention_matches_literal_formula() {
        let mut rng = Rng::new(11);
        let q = rng.normal_tensor(&[5, 4], 1.0);
        let k = rng.normal_tensor(&[5, 4], 1.0);
        let v = rng.normal_tensor(&[5, 3], 1.0);
        let o = dot_product_attention(&q, &k, &v, MaskMode::None).unwrap();
        assert!(o.max_abs_diff(&dot_attention_oracle(&q, &k, &v)).unwrap() < 1e-12);
    }

    #[test]
    fn equal_keys_average_the_values() {
        let q = Tensor::from_rows(&[[0.2, 0.4], [0.2, 0.4]]).unwrap();
        let v = Tensor::from_rows(&[[1.0, 0.0], [3.0, 4.0]]).unwrap();
        let params = FourierAttentionParams::new(Bandwidth::Scalar(2.0), kernel(4));
        let o = fourier_attention(&q, &q, &v, &params).unwrap().output;
        for i in 0..2 {
            assert!((o.get(i, 0) - 2.0).abs() < 1e-15);
            assert!((o.get(i, 1) - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sinc_zero_key_is_ignored() {
        let q = Tensor::from_rows(&[[0.0], [PI]]).unwrap();
        let k = Tensor::from_rows(&[[0.0], [-PI]]).unwrap();
        let v = Tensor::from_rows(&[[7.0], [-3.0]]).unwrap();
        let params = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(2));
        let o = fourier_attention(&q, &k, &v, &params).unwrap().output;
        assert_eq!(o.get(0, 0), 7.0);
    }

    #[test]
    fn log_and_linear_domains_agree() {
        let mut rng = Rng::new(5);
        let q = rng.normal_tensor(&[6, 4], 0.7);
        let k = rng.normal_tensor(&[6, 4], 0.7);
        let v = rng.normal_tensor(&[6, 3], 1.0);
        let params = FourierAttentionParams::new(Bandwidth::Scalar(1.3), kernel(4));
        let a = fourier_attention(&q, &k, &v, &params).unwrap().output;
        let b = fourier_attention(&q, &k, &v, &params.clone().linear_domain())
            .unwrap()
            .output;
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn all_zero_row_falls_back_or_errors() {
        let q = Tensor::from_rows(&[[PI]]).unwrap();
        let k = Tensor::from_rows(&[[0.0]]).unwrap();
        let v = Tensor::from_rows(&[[2.5]]).unwrap();
        let params = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(2));
        let res = fourier_attention(&q, &k, &v, &params).unwrap();
        assert_eq!(res.output.get(0, 0), 2.5);
        assert_eq!(res.state.fallback_count(), 1);
        let strict = params.with_fallback(Fallback::Error);
        assert!(matches!(
            fourier_attention(&q, &k, &v, &strict),
            Err(Error::EmptyNeighborhood { query: 0 })
        ));
    }

    #[test]
    fn odd_exponent_needs_linear_domain() {
        let q = Tensor::from_rows(&[[0.1], [3.0 * PI / 2.0]]).unwrap();
        let v = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        let mut params = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(1));
        assert!(!params.log_domain);
        let res = fourier_attention(&q, &q, &v, &params).unwrap();
        assert!(res.state.negative_weight_count() > 0);
        params.log_domain = true;
        assert!(matches!(fourier_attention(&q, &q, &v, &params), Err(Error::Mode(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let q = rng.normal_tensor(&[4, 3], 0.5);
        let k = rng.normal_tensor(&[4, 3], 0.5);
        let v = rng.normal_tensor(&[4, 2], 1.0);
        let params = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(4));
        let res = fourier_attention(&q, &k, &v, &params).unwrap();
        let g = fourier_attention_backward(&Tensor::zeros(&[4, 2]), &res.state).unwrap();
        assert!(g.dq.max_abs() == 0.0 && g.dk.max_abs() == 0.0 && g.dv.max_abs() == 0.0);
        assert_eq!(g.dr, vec![0.0]);
    }

    #[test]
    fn value_gradient_is_transposed_weights() {
        let mut rng = Rng::new(9);
        let q = rng.normal_tensor(&[4, 3], 0.5);
        let k = rng.normal_tensor(&[4, 3], 0.5);
        let v = rng.normal_tensor(&[4, 4], 1.0);
        let params = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(2));
        let res = fourier_attention(&q, &k, &v, &params).unwrap();
        let g = fourier_attention_backward(&Tensor::identity(4), &res.state).unwrap();
        let wt = res.state.weights().transpose().unwrap();
        assert!(g.dv.max_abs_diff(&wt).unwrap() < 1e-15);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let q = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        let params = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(2));
        let res = fourier_attention(&q, &q, &q, &params).unwrap();
        assert!(matches!(
            fourier_attention_backward(&Tensor::zeros(&[3, 1]), &res.state),
            Err(Error::Contract(_))
        ));
    }

    fn projected_loss(tape: &mut Tape, out: NodeId, weights: &Tensor) -> Result<NodeId> {
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }

    #[test]
    fn fourier_backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let cases = [
            (kernel(4), Bandwidth::Scalar(1.0), MaskMode::None, true),
            (kernel(2), Bandwidth::Vector(vec![0.8, 1.4, 1.1]), MaskMode::Causal, true),
            (kernel(1), Bandwidth::Scalar(0.9), MaskMode::None, false),
        ];
        for (kern, r, mask, log_domain) in cases {
            let inputs = vec![
                rng.normal_tensor(&[6, 3], 0.6),
                rng.normal_tensor(&[6, 3], 0.6),
                rng.normal_tensor(&[6, 2], 1.0),
                Tensor::vector(r.values()),
            ];
            let weights = rng.normal_tensor(&[6, 2], 1.0);
            let mut template = FourierAttentionParams::new(r.clone(), kern).with_mask(mask);
            template.log_domain = log_domain;
            let reports = crate::autodiff::check_tape_gradients(
                |tape, ids| {
                    let (o, _) =
                        tape_fourier_attention(tape, ids[0], ids[1], ids[2], ids[3], &template, 3)?;
                    projected_loss(tape, o, &weights)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            for rep in reports {
                assert!(rep.max_rel_err < 1e-6, "{rep:?}");
            }
        }
    }

    #[test]
    fn dot_backward_matches_finite_differences() {
        let mut rng = Rng::new(22);
        let inputs = vec![
            rng.normal_tensor(&[4, 3], 1.0),
            rng.normal_tensor(&[4, 3], 1.0),
            rng.normal_tensor(&[4, 2], 1.0),
        ];
        let weights = rng.normal_tensor(&[4, 2], 1.0);
        let reports = crate::autodiff::check_tape_gradients(
            |tape, ids| {
                let o = tape_dot_attention(tape, ids[0], ids[1], ids[2], MaskMode::Causal, 2)?;
                projected_loss(tape, o, &weights)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        for rep in reports {
            assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn multi_head_single_identity_head() {
        let mut rng = Rng::new(12);
        let x = rng.normal_tensor(&[5, 4], 1.0);
        let head = HeadParams {
            w_q: rng.normal_tensor(&[4, 3], 0.5),
            w_k: rng.normal_tensor(&[4, 3], 0.5),
            w_v: rng.normal_tensor(&[4, 2], 0.5),
            fourier: FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(4)),
        };
        let params = MultiHeadParams {
            heads: vec![head.clone()],
            w_o: Tensor::identity(2),
            mask: MaskMode::Causal,
        };
        for variant in [AttentionVariant::Dot, AttentionVariant::Fourier] {
            let mh = multi_head(&x, &params, variant).unwrap();
            let sh = single_head(&x, &head, MaskMode::Causal, variant).unwrap();
            assert_eq!(mh, sh);
        }
    }

    #[test]
    fn multi_head_rejects_bad_shapes() {
        let head = HeadParams {
            w_q: Tensor::zeros(&[4, 3]),
            w_k: Tensor::zeros(&[4, 3]),
            w_v: Tensor::zeros(&[4, 2]),
            fourier: FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel(2)),
        };
        let params = MultiHeadParams {
            heads: vec![head],
            w_o: Tensor::identity(3),
            mask: MaskMode::None,
        };
        assert!(matches!(
            multi_head(&Tensor::zeros(&[2, 4]), &params, AttentionVariant::Dot),
            Err(Error::Dimension(_))
        ));
    }
}
