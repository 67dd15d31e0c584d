//! Head-redundancy metric and ablation grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train_lm, TrainConfig};
use super::transformer::{FourierSettings, Transformer, TransformerConfig};
use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::numerics::{mean_and_stderr, Tensor};

/// What gets compared between heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadDistanceSource {
    /// Attention outputs before the output projection.
    HeadOutputs,
    AttentionMatrices,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistance {
    /// Mean over unordered head pairs of `‖a − b‖₂`.
    pub mean: f64,
    /// Population standard deviation over those pairs.
    pub std: f64,
    /// Same mean with each distance divided by `√(elements)`.
    pub normalized_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDistanceReport {
    pub source: HeadDistanceSource,
    pub layers: Vec<LayerDistance>,
    /// Mean of the per-layer means.
    pub mean: f64,
    /// Standard deviation of the per-layer means across layers.
    pub std: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Pairwise L2 distances between equally shaped head tensors.
pub fn pairwise_head_distance(heads: &[Tensor]) -> Result<LayerDistance> {
    if heads.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "head distance needs at least 2 heads, got {}",
            heads.len()
        )));
    }
    let mut dists = Vec::new();
    for a in 0..heads.len() {
        for b in a + 1..heads.len() {
            let d = heads[a].sub(&heads[b])?.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            dists.push(d);
        }
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let scale = (heads[0].len().max(1) as f64).sqrt();
    Ok(LayerDistance { mean, std: population_std(&dists), normalized_mean: mean / scale })
}

/// Per-layer and layer-averaged head distances on `ids` (whole sequences of
/// the model's context length).
pub fn head_distance(model: &Transformer, ids: &[usize], source: HeadDistanceSource) -> Result<HeadDistanceReport> {
    let cfg = model.config();
    if cfg.heads < 2 {
        return Err(Error::UndefinedMetric("head distance needs H >= 2".into()));
    }
    if cfg.layers == 0 {
        return Err(Error::UndefinedMetric("model has no attention layers".into()));
    }
    let len = cfg.context_len;
    let (tape, _, pass) = model.forward(ids, len)?;
    let per_layer: Vec<Vec<Tensor>> = match source {
        HeadDistanceSource::HeadOutputs => pass
            .head_outputs
            .iter()
            .map(|hs| hs.iter().map(|&h| tape.value(h).clone()).collect())
            .collect(),
        HeadDistanceSource::AttentionMatrices => model.attention_matrices(&tape, &pass, len)?,
    };
    let layers = per_layer
        .iter()
        .map(|hs| pairwise_head_distance(hs))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(source, layers))
}

pub fn summarize(source: HeadDistanceSource, layers: Vec<LayerDistance>) -> HeadDistanceReport {
    let means: Vec<f64> = layers.iter().map(|l| l.mean).collect();
    let norm: Vec<f64> = layers.iter().map(|l| l.normalized_mean).collect();
    HeadDistanceReport {
        source,
        mean: mean_and_stderr(&means).0,
        std: population_std(&means),
        normalized_mean: mean_and_stderr(&norm).0,
        normalized_std: population_std(&norm),
        layers,
    }
}

/// One configuration in an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub exponent: u32,
    pub r_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub exponent: u32,
    pub r_init: f64,
    pub steps_run: usize,
    pub final_valid_ppl: f64,
    pub diverged: bool,
    /// Whether the first batch produced a negative attention weight.
    pub negative_weight_probe: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,exponent,r_init,steps_run,final_valid_ppl,diverged,negative_weight_probe\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{},{:e},{},{}\n",
                r.label, r.exponent, r.r_init, r.steps_run, r.final_valid_ppl, r.diverged, r.negative_weight_probe
            ));
        }
        s
    }
}

/// Cells for a φ-exponent sweep at a fixed `R` init.
pub fn exponent_grid(exponents: &[u32], r_init: f64) -> Vec<AblationCell> {
    exponents
        .iter()
        .map(|&l| AblationCell { label: format!("phi=x^{l}"), exponent: l, r_init })
        .collect()
}

/// Cells for an `R`-init sweep at a fixed exponent.
pub fn r_init_grid(r_inits: &[f64], exponent: u32) -> Vec<AblationCell> {
    r_inits
        .iter()
        .map(|&r| AblationCell { label: format!("R_init={r}"), exponent, r_init: r })
        .collect()
}

/// Trains one Fourier model per cell with the shared seed and corpus. Cells
/// run in parallel; rows keep grid order.
pub fn ablate(
    base: &TransformerConfig,
    train: &TrainConfig,
    cells: &[AblationCell],
    corpus: &[u8],
) -> Result<AblationTable> {
    if cells.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let rows = cells
        .par_iter()
        .map(|cell| {
            let cfg = TransformerConfig {
                variant: AttentionVariant::Fourier,
                fourier: FourierSettings {
                    exponent: cell.exponent,
                    r_init: cell.r_init,
                    ..base.fourier.clone()
                },
                ..base.clone()
            };
            let mut model = Transformer::new(cfg)?;
            let report = train_lm(&mut model, corpus, train)?;
            Ok(AblationRow {
                label: cell.label.clone(),
                exponent: cell.exponent,
                r_init: cell.r_init,
                steps_run: report.steps.len(),
                final_valid_ppl: report.final_valid_ppl,
                diverged: report.diverged(),
                negative_weight_probe: report.negative_weight_probe,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_distance() {
        let a = Tensor::from_rows(&[[0.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0]]).unwrap();
        let d = pairwise_head_distance(&[a, b]).unwrap();
        assert_eq!(d.mean, 3.0);
        assert_eq!(d.std, 0.0);
    }

    #[test]
    fn identical_heads_have_zero_distance() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_head_distance(&[a.clone(), a]).unwrap().mean, 0.0);
    }

    #[test]
    fn single_head_is_undefined() {
        let a = Tensor::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(pairwise_head_distance(&[a]), Err(Error::UndefinedMetric(_))));
        let m = Transformer::new(TransformerConfig { heads: 1, ..Default::default() }).unwrap();
        assert!(matches!(
            head_distance(&m, &[0; 64], HeadDistanceSource::HeadOutputs),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn summary_is_mean_and_spread_of_layer_means() {
        let l = |m: f64| LayerDistance { mean: m, std: 0.0, normalized_mean: m / 2.0 };
        let s = summarize(HeadDistanceSource::HeadOutputs, vec![l(1.0), l(3.0)]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.normalized_mean, 1.0);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let r = ablate(&TransformerConfig::default(), &TrainConfig::default(), &[], &[0; 10]);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
