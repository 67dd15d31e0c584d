//! Adam training loop for the byte-level language model.

use serde::{Deserialize, Serialize};

use super::analysis::{head_distance, HeadDistanceReport, HeadDistanceSource};
use super::transformer::Transformer;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Validation is run every `eval_every` steps and after the last step.
    pub eval_every: usize,
    /// Cap on non-overlapping validation windows.
    pub valid_windows: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            eval_every: 500,
            valid_windows: 64,
            seed: 0,
        }
    }
}

/// Consecutive steps above twice the initial loss that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub r_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub valid_loss: f64,
    pub valid_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    NonFinite { step: usize },
    LossBlowup { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_valid_loss: f64,
    pub final_valid_ppl: f64,
    pub divergence: Option<Divergence>,
    /// Whether the first batch produced a negative raw attention weight.
    pub negative_weight_probe: bool,
    pub negative_weights_total: usize,
    pub fallback_rows_total: usize,
    pub head_distance: Option<HeadDistanceReport>,
    pub parameter_count: usize,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Contiguous 90/10 split of a byte corpus.
#[derive(Clone, Debug)]
pub struct CorpusSplit<'a> {
    pub train: &'a [u8],
    pub valid: &'a [u8],
}

pub fn split_corpus(corpus: &[u8], context_len: usize) -> Result<CorpusSplit<'_>> {
    if corpus.len() < 10 * context_len {
        return Err(Error::Data(format!(
            "corpus has {} bytes, need at least {} (10 x context)",
            corpus.len(),
            10 * context_len
        )));
    }
    let cut = corpus.len() * 9 / 10;
    let (train, valid) = corpus.split_at(cut);
    if valid.len() < context_len + 1 {
        return Err(Error::Data("validation split shorter than one window".into()));
    }
    Ok(CorpusSplit { train, valid })
}

/// Inputs and next-byte targets for windows starting at `starts`.
fn windows(data: &[u8], starts: &[usize], len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::with_capacity(starts.len() * len);
    let mut targets = Vec::with_capacity(starts.len() * len);
    for &s in starts {
        ids.extend(data[s..s + len].iter().map(|&b| b as usize));
        targets.extend(data[s + 1..s + len + 1].iter().map(|&b| b as usize));
    }
    (ids, targets)
}

/// Non-overlapping validation windows, at most `cap`.
pub fn validation_starts(valid: &[u8], len: usize, cap: usize) -> Vec<usize> {
    let n = ((valid.len() - 1) / len).min(cap.max(1));
    (0..n).map(|i| i * len).collect()
}

/// Mean next-byte cross-entropy (nats) over the given windows.
pub fn evaluate(model: &Transformer, data: &[u8], starts: &[usize]) -> Result<f64> {
    let len = model.config().context_len;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in starts.chunks(16) {
        let (ids, targets) = windows(data, chunk, len);
        let (mut tape, _, pass) = model.forward(&ids, len)?;
        let loss = tape.cross_entropy(pass.logits, &targets)?;
        total += tape.value(loss).data()[0] * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One optimizer step on the given windows; returns the pre-update loss and
/// the attention diagnostics.
pub fn train_step(
    model: &mut Transformer,
    opt: &mut Adam,
    ids: &[usize],
    targets: &[usize],
    clip: f64,
) -> Result<(f64, crate::attention::AttentionDiagnostics)> {
    let len = model.config().context_len;
    let (mut tape, leaves, pass) = model.forward(ids, len)?;
    let loss = tape.cross_entropy(pass.logits, targets)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, pass.diagnostics));
    }
    let g = tape.backward(loss)?;
    let mut grads: Vec<Tensor> = leaves
        .iter()
        .zip(model.params())
        .map(|(&id, p)| g.get_or_zeros(id, p))
        .collect();
    clip_global_norm(&mut grads, clip);
    opt.step(model.params_mut(), &grads);
    Ok((value, pass.diagnostics))
}

/// Trains `model` on the first 90% of `corpus` and validates on the rest.
/// Divergence stops training early and is recorded in the report.
pub fn train_lm(model: &mut Transformer, corpus: &[u8], cfg: &TrainConfig) -> Result<TrainReport> {
    let len = model.config().context_len;
    let split = split_corpus(corpus, len)?;
    if split.train.len() < len + 1 {
        return Err(Error::Data("training split shorter than one window".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let valid_starts = validation_starts(split.valid, len, cfg.valid_windows);
    let mut rng = Rng::new(cfg.seed).substream(1);
    let mut opt = Adam::new(model.params(), cfg);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut divergence = None;
    let mut initial = None;
    let mut over = 0usize;
    let mut probe = false;
    let mut negatives = 0;
    let mut fallbacks = 0;
    let max_start = split.train.len() - len - 1;

    for step in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(max_start + 1)).collect();
        let (ids, targets) = windows(split.train, &starts, len);
        let (loss, diag) = train_step(model, &mut opt, &ids, &targets, cfg.clip)?;
        if step == 0 {
            probe = diag.negative_weights > 0;
        }
        negatives += diag.negative_weights;
        fallbacks += diag.fallback_rows;
        steps.push(StepRecord { step, train_loss: loss, r_values: model.r_values() });
        if !loss.is_finite() {
            divergence = Some(Divergence::NonFinite { step });
            break;
        }
        let init = *initial.get_or_insert(loss);
        over = if loss > 2.0 * init { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            divergence = Some(Divergence::LossBlowup { step });
            break;
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            let vl = evaluate(model, split.valid, &valid_starts)?;
            evals.push(EvalRecord { step: step + 1, valid_loss: vl, valid_ppl: vl.exp() });
        }
    }
    let final_valid_loss = evaluate(model, split.valid, &valid_starts)?;
    let done = steps.len();
    evals.push(EvalRecord { step: done, valid_loss: final_valid_loss, valid_ppl: final_valid_loss.exp() });
    if divergence.is_none() && !final_valid_loss.is_finite() {
        divergence = Some(Divergence::NonFinite { step: done });
    }
    let head_distance = if model.config().heads >= 2 && model.config().layers > 0 {
        let probe_starts: Vec<usize> = valid_starts.iter().copied().take(cfg.batch_size).collect();
        let (ids, _) = windows(split.valid, &probe_starts, len);
        head_distance(model, &ids, HeadDistanceSource::HeadOutputs).ok()
    } else {
        None
    };
    Ok(TrainReport {
        steps,
        evals,
        final_valid_loss,
        final_valid_ppl: final_valid_loss.exp(),
        divergence,
        negative_weight_probe: probe,
        negative_weights_total: negatives,
        fallback_rows_total: fallbacks,
        head_distance,
        parameter_count: model.parameter_count(),
    })
}
