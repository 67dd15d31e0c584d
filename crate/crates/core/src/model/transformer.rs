//! Byte-level pre-norm transformer built on the tape.
//!
//! Parameter layout, in order:
//!
//! ```text
//! tok_emb                              256 × D
//! per layer ℓ:
//!   ln1.gain, ln1.bias                 D, D
//!   head h: w_q, w_k, w_v              D × D_h each        (D_h = D / H)
//!   head h: rho (Fourier only)         1 or D_h            (R = exp(rho))
//!   w_o                                D × D
//!   ln2.gain, ln2.bias                 D, D
//!   ff.w1, ff.b1, ff.w2, ff.b2         D × F, F, F × D, D
//! lnf.gain, lnf.bias                   D, D
//! out.w, out.b                         D × 256, 256
//! ```
//!
//! so the parameter count is
//! `256·D + L·(4D² + 2DF + F + 5D + H·r) + 2D + 257·256`, with `r` the
//! bandwidth width per head (0 for dot attention, 1 for scalar `R`, `D_h`
//! for vector `R`).

use serde::{Deserialize, Serialize};

use crate::attention::{
    dot_product_attention_forward, fourier_attention, tape_dot_attention, tape_fourier_attention,
    AttentionDiagnostics, AttentionVariant, Fallback, FourierAttentionParams, MaskMode,
};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels::{Bandwidth, PhiKernel};
use crate::numerics::{Rng, Tensor};

pub const VOCAB: usize = 256;
const LN_EPS: f64 = 1e-5;
/// Output-projection init scale relative to the fan-in bound; keeps the
/// untrained model close to the uniform byte distribution.
const OUTPUT_INIT_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierSettings {
    pub exponent: u32,
    pub r_init: f64,
    /// One bandwidth per head coordinate instead of one per head.
    pub vector_r: bool,
}

impl Default for FourierSettings {
    fn default() -> Self {
        Self { exponent: 4, r_init: 2.0, vector_r: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub variant: AttentionVariant,
    pub fourier: FourierSettings,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            context_len: 64,
            variant: AttentionVariant::Fourier,
            fourier: FourierSettings::default(),
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be >= 1".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config(format!("context_len must be >= 2, got {}", self.context_len)));
        }
        if self.variant == AttentionVariant::Fourier {
            PhiKernel::new(self.fourier.exponent).map_err(|e| Error::Config(e.to_string()))?;
            if !(self.fourier.r_init > 0.0 && self.fourier.r_init.is_finite()) {
                return Err(Error::Config(format!("r_init must be > 0, got {}", self.fourier.r_init)));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn r_width(&self) -> usize {
        match (self.variant, self.fourier.vector_r) {
            (AttentionVariant::Dot, _) => 0,
            (AttentionVariant::Fourier, false) => 1,
            (AttentionVariant::Fourier, true) => self.head_dim(),
        }
    }

    /// Closed-form parameter count (see the module docs).
    pub fn parameter_count(&self) -> usize {
        let (d, f, h) = (self.d_model, self.d_ff, self.heads);
        let per_layer = 4 * d * d + 2 * d * f + f + 5 * d + h * self.r_width();
        VOCAB * d + self.layers * per_layer + 2 * d + (d + 1) * VOCAB
    }

    /// Attention template for Fourier heads; the bandwidth is replaced per
    /// head at run time.
    pub fn attention_template(&self) -> Result<FourierAttentionParams> {
        let kernel = PhiKernel::new(self.fourier.exponent)?;
        let log_domain = kernel.is_nonnegative();
        Ok(FourierAttentionParams {
            r: Bandwidth::Scalar(self.fourier.r_init),
            kernel,
            mask: MaskMode::Causal,
            fallback: Fallback::Uniform,
            log_domain,
        })
    }
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: TransformerConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Indices into the parameter list for one layer.
#[derive(Clone, Debug)]
struct LayerIdx {
    ln1: (usize, usize),
    heads: Vec<HeadIdx>,
    w_o: usize,
    ln2: (usize, usize),
    ff: [usize; 4],
}

#[derive(Clone, Copy, Debug)]
struct HeadIdx {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    rho: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    layers: Vec<LayerIdx>,
    lnf: (usize, usize),
    out: (usize, usize),
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Per layer, per head: the head's attention output (before `W_O`).
    pub head_outputs: Vec<Vec<NodeId>>,
    /// Per layer, per head: the attention input projections `(q, k, v)`.
    pub head_inputs: Vec<Vec<(NodeId, NodeId, NodeId)>>,
    pub diagnostics: AttentionDiagnostics,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    rng.uniform_tensor(shape, -bound, bound)
}

/// Sinusoidal encoding: `sin(p / 10000^{2i/D})` on even columns, `cos` on odd.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for p in 0..len {
        for c in 0..dim {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            t.set(p, c, if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

impl Transformer {
    /// Fan-in scaled uniform init `U(−1/√fan_in, 1/√fan_in)`; embeddings use
    /// `U(−1, 1)`, layer-norm gains 1, biases 0 and `rho = ln r_init`.
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (d, f, dh) = (config.d_model, config.d_ff, config.head_dim());
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        push("tok_emb".into(), uniform(&mut rng, &[VOCAB, d], 1.0));
        for l in 0..config.layers {
            push(format!("layer{l}.ln1.gain"), Tensor::full(&[d], 1.0));
            push(format!("layer{l}.ln1.bias"), Tensor::zeros(&[d]));
            for h in 0..config.heads {
                for w in ["w_q", "w_k", "w_v"] {
                    push(format!("layer{l}.head{h}.{w}"), uniform(&mut rng, &[d, dh], fan(d)));
                }
                let rw = config.r_width();
                if rw > 0 {
                    push(
                        format!("layer{l}.head{h}.rho"),
                        Tensor::full(&[rw], config.fourier.r_init.ln()),
                    );
                }
            }
            push(format!("layer{l}.w_o"), uniform(&mut rng, &[d, d], fan(d)));
            push(format!("layer{l}.ln2.gain"), Tensor::full(&[d], 1.0));
            push(format!("layer{l}.ln2.bias"), Tensor::zeros(&[d]));
            push(format!("layer{l}.ff.w1"), uniform(&mut rng, &[d, f], fan(d)));
            push(format!("layer{l}.ff.b1"), Tensor::zeros(&[f]));
            push(format!("layer{l}.ff.w2"), uniform(&mut rng, &[f, d], fan(f)));
            push(format!("layer{l}.ff.b2"), Tensor::zeros(&[d]));
        }
        push("lnf.gain".into(), Tensor::full(&[d], 1.0));
        push("lnf.bias".into(), Tensor::zeros(&[d]));
        push("out.w".into(), uniform(&mut rng, &[d, VOCAB], OUTPUT_INIT_GAIN * fan(d)));
        push("out.b".into(), Tensor::zeros(&[VOCAB]));
        Ok(Self { config, names, params })
    }

    /// Rebuilds a model from saved tensors; names and shapes must match the
    /// layout `config` implies.
    pub fn from_parts(config: TransformerConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if named.len() != fresh.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                fresh.params.len(),
                named.len()
            )));
        }
        for ((name, t), (want, like)) in named.iter().zip(fresh.names.iter().zip(&fresh.params)) {
            if name != want || t.shape() != like.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config: fresh.config, names, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Current bandwidths `exp(rho)` in layout order (empty for dot attention).
    pub fn r_values(&self) -> Vec<f64> {
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| n.ends_with(".rho"))
            .flat_map(|(_, t)| t.data().iter().map(|v| v.exp()))
            .collect()
    }

    fn layout(&self) -> Layout {
        let mut i = 0;
        let mut next = || {
            i += 1;
            i - 1
        };
        let tok_emb = next();
        let mut layers = Vec::with_capacity(self.config.layers);
        for _ in 0..self.config.layers {
            let ln1 = (next(), next());
            let heads = (0..self.config.heads)
                .map(|_| HeadIdx {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    rho: (self.config.r_width() > 0).then(&mut next),
                })
                .collect();
            let w_o = next();
            let ln2 = (next(), next());
            let ff = [next(), next(), next(), next()];
            layers.push(LayerIdx { ln1, heads, w_o, ln2, ff });
        }
        let lnf = (next(), next());
        let out = (next(), next());
        Layout { tok_emb, layers, lnf, out }
    }

    /// Pushes every parameter as a leaf, in layout order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Forward pass over `ids.len() / seq_len` independent sequences using the
    /// given parameter nodes (as returned by [`Transformer::leaves`]).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        ids: &[usize],
        seq_len: usize,
    ) -> Result<ForwardPass> {
        if p.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter nodes for {} parameters",
                p.len(),
                self.params.len()
            )));
        }
        if seq_len == 0 || seq_len > self.config.context_len || ids.len() % seq_len != 0 || ids.is_empty() {
            return Err(Error::Dimension(format!(
                "{} ids cannot be split into sequences of {seq_len} (context {})",
                ids.len(),
                self.config.context_len
            )));
        }
        let lay = self.layout();
        let d = self.config.d_model;
        let pe = positional_encoding(seq_len, d);
        let mut tiled = Tensor::zeros(&[ids.len(), d]);
        for r in 0..ids.len() {
            tiled.row_mut(r).copy_from_slice(pe.row(r % seq_len));
        }
        let emb = tape.embedding(p[lay.tok_emb], ids)?;
        let pos = tape.leaf(tiled);
        let mut x = tape.add(emb, pos)?;
        let template = match self.config.variant {
            AttentionVariant::Fourier => Some(self.config.attention_template()?),
            AttentionVariant::Dot => None,
        };
        let mut head_outputs = Vec::with_capacity(lay.layers.len());
        let mut head_inputs = Vec::with_capacity(lay.layers.len());
        let mut diagnostics = AttentionDiagnostics::default();
        for layer in &lay.layers {
            let h = tape.layer_norm(x, p[layer.ln1.0], p[layer.ln1.1], LN_EPS)?;
            let mut outs = Vec::with_capacity(layer.heads.len());
            let mut ins = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let q = tape.matmul(h, p[head.w_q])?;
                let k = tape.matmul(h, p[head.w_k])?;
                let v = tape.matmul(h, p[head.w_v])?;
                let o = match (&template, head.rho) {
                    (Some(t), Some(rho)) => {
                        let r = tape.exp(p[rho])?;
                        let (o, diag) = tape_fourier_attention(tape, q, k, v, r, t, seq_len)?;
                        diagnostics += diag;
                        o
                    }
                    _ => tape_dot_attention(tape, q, k, v, MaskMode::Causal, seq_len)?,
                };
                outs.push(o);
                ins.push((q, k, v));
            }
            let cat = tape.concat_cols(&outs)?;
            let attn = tape.matmul(cat, p[layer.w_o])?;
            x = tape.add(x, attn)?;
            let h2 = tape.layer_norm(x, p[layer.ln2.0], p[layer.ln2.1], LN_EPS)?;
            let f1 = tape.matmul(h2, p[layer.ff[0]])?;
            let f1 = tape.add_row(f1, p[layer.ff[1]])?;
            let f1 = tape.relu(f1)?;
            let f2 = tape.matmul(f1, p[layer.ff[2]])?;
            let f2 = tape.add_row(f2, p[layer.ff[3]])?;
            x = tape.add(x, f2)?;
            head_outputs.push(outs);
            head_inputs.push(ins);
        }
        let xf = tape.layer_norm(x, p[lay.lnf.0], p[lay.lnf.1], LN_EPS)?;
        let logits = tape.matmul(xf, p[lay.out.0])?;
        let logits = tape.add_row(logits, p[lay.out.1])?;
        Ok(ForwardPass { logits, head_outputs, head_inputs, diagnostics })
    }

    /// Builds a fresh tape, runs the forward pass and returns it with the
    /// parameter leaves.
    pub fn forward(&self, ids: &[usize], seq_len: usize) -> Result<(Tape, Vec<NodeId>, ForwardPass)> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let pass = self.forward_with(&mut tape, &leaves, ids, seq_len)?;
        Ok((tape, leaves, pass))
    }

    /// Per layer, per head: the `N×N` attention weights of every sequence,
    /// stacked row-wise. Recomputed from the traced projections.
    pub fn attention_matrices(
        &self,
        tape: &Tape,
        pass: &ForwardPass,
        seq_len: usize,
    ) -> Result<Vec<Vec<Tensor>>> {
        let lay = self.layout();
        let mut out = Vec::with_capacity(pass.head_inputs.len());
        for (layer, heads) in lay.layers.iter().zip(&pass.head_inputs) {
            let mut per_head = Vec::with_capacity(heads.len());
            for (head, &(q, k, v)) in layer.heads.iter().zip(heads) {
                let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
                let blocks = qv.rows() / seq_len;
                let mut stacked = Tensor::zeros(&[qv.rows(), seq_len]);
                for b in 0..blocks {
                    let (s, e) = (b * seq_len, (b + 1) * seq_len);
                    let (qb, kb, vb) = (qv.slice_rows(s, e)?, kv.slice_rows(s, e)?, vv.slice_rows(s, e)?);
                    let w = match head.rho {
                        Some(rho) => {
                            let r = self.params[rho].data().iter().map(|x| x.exp()).collect::<Vec<_>>();
                            let params = FourierAttentionParams {
                                r: Bandwidth::from_values(&r, self.config.fourier.vector_r),
                                ..self.config.attention_template()?
                            };
                            fourier_attention(&qb, &kb, &vb, &params)?.state.weights().clone()
                        }
                        None => dot_product_attention_forward(&qb, &kb, &vb, MaskMode::Causal)?
                            .1
                            .weights()
                            .clone(),
                    };
                    stacked.data_mut()[s * seq_len..e * seq_len].copy_from_slice(w.data());
                }
                per_head.push(stacked);
            }
            out.push(per_head);
        }
        Ok(out)
    }
}
