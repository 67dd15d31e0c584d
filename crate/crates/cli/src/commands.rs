//! Subcommand bodies. Each returns whether its check passed; artifacts are
//! written to the output directory.

use std::fs;
use std::path::Path;

use fourierformer_core::attention::{tape_fourier_attention, AttentionVariant, FourierAttentionParams, MaskMode};
use fourierformer_core::autodiff::check_tape_gradients;
use fourierformer_core::estimators::{
    rate_experiment, softmax_equivalence_check, DensityModel, Grid, RateConfig, RateTable,
};
use fourierformer_core::kernels::{band_limit_closed_form, kernel_fourier_transform_check, Bandwidth, PhiKernel};
use fourierformer_core::model::{
    ablate, exponent_grid, head_distance, order0_perplexity, r_init_grid, read_checkpoint, split_corpus,
    synthetic_corpus, train_lm, validation_starts, write_checkpoint, AblationTable, FourierSettings,
    HeadDistanceSource, TrainConfig, Transformer, TransformerConfig,
};
use fourierformer_core::numerics::{dot, Rng};
use serde_json::{json, Value};

use crate::{CliError, ExperimentConfig, CONFIG_ECHO};

pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

type CmdResult = Result<Outcome, CliError>;

pub fn dispatch(sub: &str, cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    match sub {
        "gradcheck" => gradcheck(cfg, out),
        "density-rate" => density_rate(cfg, out),
        "regression-rate" => regression_rate(cfg, out),
        "equivalence" => equivalence(cfg, out),
        "bandlimit" => bandlimit(cfg, out),
        "train-lm" => train(cfg, out),
        "ablate-phi" => ablate_phi(cfg, out),
        "ablate-r" => ablate_r(cfg, out),
        "head-distance" => head_distances(cfg, out),
        other => Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
}

fn write_json(out: &Path, name: &str, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(out.join(name), text + "\n")?;
    Ok(())
}

fn finish(out: &Path, name: &str, passed: bool, report: Value) -> CmdResult {
    write_json(out, name, &report)?;
    Ok(Outcome { passed, summary: serde_json::to_string(&report).unwrap_or_default() })
}

fn gradcheck(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let d: usize = cfg.get("dims")?;
    let seeds: u64 = cfg.get("seeds")?;
    let max_n: usize = cfg.get("max_n")?;
    let h: f64 = cfg.get("h")?;
    let tol: f64 = cfg.get("tol")?;
    if d == 0 || max_n == 0 {
        return Err(CliError::Usage("dims and max_n must be >= 1".into()));
    }
    let root = Rng::new(cfg.get("seed")?);
    let mut cases = Vec::new();
    let mut worst = 0.0f64;
    let mut config_index = 0u64;
    for l in cfg.get_list::<u32>("exponents")? {
        let kernel = PhiKernel::new(l)?;
        for vector in [false, true] {
            for mask in [MaskMode::Causal, MaskMode::None] {
                let template = FourierAttentionParams::new(Bandwidth::Scalar(1.0), kernel.clone()).with_mask(mask);
                template.validate(d)?;
                let mut case_max = 0.0f64;
                for s in 0..seeds {
                    let mut rng = root.substream(config_index * seeds + s);
                    let n = 1 + rng.below(max_n);
                    let inputs = vec![
                        rng.normal_tensor(&[n, d], 0.5),
                        rng.normal_tensor(&[n, d], 0.5),
                        rng.normal_tensor(&[n, d], 1.0),
                        rng.uniform_tensor(&[if vector { d } else { 1 }], 0.6, 1.4),
                    ];
                    let w = rng.normal_tensor(&[n, d], 1.0);
                    let reports = check_tape_gradients(
                        |t, ids| {
                            let (o, _) = tape_fourier_attention(t, ids[0], ids[1], ids[2], ids[3], &template, n)?;
                            let wn = t.leaf(w.clone());
                            let p = t.mul(o, wn)?;
                            t.sum(p)
                        },
                        &inputs,
                        h,
                    )?;
                    for r in reports {
                        case_max = case_max.max(r.max_rel_err);
                    }
                }
                worst = worst.max(case_max);
                cases.push(json!({
                    "exponent": l,
                    "bandwidth": if vector { "vector" } else { "scalar" },
                    "mask": if mask == MaskMode::Causal { "causal" } else { "none" },
                    "seeds": seeds,
                    "max_rel_err": case_max,
                }));
                config_index += 1;
            }
        }
    }
    let passed = worst <= tol;
    finish(out, "gradcheck.json", passed, json!({ "dims": d, "max_rel_err": worst, "tol": tol, "pass": passed, "cases": cases }))
}

fn density_model(name: &str, dim: usize) -> Result<DensityModel, CliError> {
    Ok(match name {
        "gaussian" => DensityModel::standard_normal(dim),
        "cauchy" => DensityModel::Cauchy { dim, scale: 1.0 },
        "laplace" => DensityModel::Laplace { dim, scale: 1.0 },
        "mixture" => DensityModel::bimodal(dim, 1.5, 0.7),
        other => return Err(CliError::Usage(format!("unknown truth `{other}`"))),
    })
}

fn table_json(t: &RateTable) -> Value {
    json!({
        "slope": t.slope,
        "target_slope": t.target_slope,
        "strictly_decreasing": t.is_strictly_decreasing(),
        "error_mean": t.rows.iter().map(|r| r.error_mean).collect::<Vec<_>>(),
    })
}

fn density_rate(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let dim: usize = cfg.get("dim")?;
    let w: f64 = cfg.get("grid_half_width")?;
    let mut rc = RateConfig::density(cfg.get_list("ladder")?, cfg.get("reps")?, cfg.get("exponent")?, cfg.get("seed")?)?;
    rc.truth = density_model(cfg.raw("truth")?, dim)?;
    rc.grid = Some(Grid::new(dim, -w, w, cfg.get("grid_points")?)?);
    rc.r_constant = cfg.get("r_constant")?;
    let table = rate_experiment(&rc)?;
    fs::write(out.join("density_rate.csv"), table.to_csv())?;
    let max_slope: f64 = cfg.get("max_slope")?;
    let passed = table.is_strictly_decreasing() && table.slope <= max_slope;
    let mut report = table_json(&table);
    report["max_slope"] = json!(max_slope);
    report["pass"] = json!(passed);
    finish(out, "density_rate.json", passed, report)
}

fn regression_rate(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let repeats: u64 = cfg.get("repeats")?;
    let seed: u64 = cfg.get("seed")?;
    let root = Rng::new(seed);
    let mut csv = String::new();
    let mut decreasing = 0usize;
    let mut slopes = Vec::new();
    for rep in 0..repeats {
        let rep_seed = root.substream(rep).next_u64();
        let mut rc = RateConfig::regression(cfg.get_list("ladder")?, cfg.get("reps")?, cfg.get("exponent")?, rep_seed);
        rc.r_constant = cfg.get("r_constant")?;
        rc.noise_sigma = cfg.get("noise_sigma")?;
        rc.test_points = cfg.get("test_points")?;
        rc.test_half_width = cfg.get("test_half_width")?;
        let table = rate_experiment(&rc)?;
        for (i, line) in table.to_csv().lines().enumerate() {
            if i == 0 {
                if rep == 0 {
                    csv.push_str(&format!("repeat,{line}\n"));
                }
            } else {
                csv.push_str(&format!("{rep},{line}\n"));
            }
        }
        if table.is_strictly_decreasing() {
            decreasing += 1;
        }
        slopes.push(table.slope);
    }
    fs::write(out.join("regression_rate.csv"), csv)?;
    let fraction = if repeats == 0 { 0.0 } else { decreasing as f64 / repeats as f64 };
    let min_fraction: f64 = cfg.get("min_fraction")?;
    let passed = repeats > 0 && fraction >= min_fraction;
    finish(
        out,
        "regression_rate.json",
        passed,
        json!({
            "repeats": repeats,
            "strictly_decreasing": decreasing,
            "fraction": fraction,
            "min_fraction": min_fraction,
            "slopes": slopes,
            "pass": passed,
        }),
    )
}

fn equivalence(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let n: usize = cfg.get("n")?;
    let max_n: usize = cfg.get("max_n")?;
    let max_d: usize = cfg.get("max_d")?;
    let tol: f64 = cfg.get("tol")?;
    if max_n == 0 || max_d == 0 {
        return Err(CliError::Usage("max_n and max_d must be >= 1".into()));
    }
    let mut rng = Rng::new(cfg.get("seed")?);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let rows = 1 + rng.below(max_n);
        let d = 1 + rng.below(max_d);
        let mut keys = rng.normal_tensor(&[rows, d], 1.0);
        for i in 0..rows {
            let norm = dot(keys.row(i), keys.row(i)).sqrt();
            keys.row_mut(i).iter_mut().for_each(|x| *x /= norm);
        }
        let queries = rng.normal_tensor(&[rows, d], 1.0);
        let dv = 1 + rng.below(4);
        let values = rng.normal_tensor(&[rows, dv], 1.0);
        worst = worst.max(softmax_equivalence_check(&keys, &values, &queries)?);
    }
    let passed = worst <= tol;
    finish(out, "equivalence.json", passed, json!({ "instances": n, "max_gap": worst, "tol": tol, "pass": passed }))
}

fn bandlimit(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let points: usize = cfg.get("points")?;
    let margin: f64 = cfg.get("margin")?;
    let tol: f64 = cfg.get("tol")?;
    if points < 2 {
        return Err(CliError::Usage("points must be >= 2".into()));
    }
    let mut csv = String::from("exponent,R,t,numeric,closed_form,abs_err,checked\n");
    let mut worst = 0.0f64;
    let mut checked_count = 0usize;
    for l in cfg.get_list::<u32>("exponents")? {
        for r in cfg.get_list::<f64>("radii")? {
            let kinks: Vec<f64> = if l == 1 { vec![-r, r] } else { vec![-2.0 * r, 0.0, 2.0 * r] };
            for i in 0..points {
                let t = -3.0 * r + 6.0 * r * i as f64 / (points - 1) as f64;
                let numeric = kernel_fourier_transform_check(l, r, t)?;
                let closed = band_limit_closed_form(l, r, t)
                    .ok_or_else(|| CliError::Usage(format!("no closed form for exponent {l}")))?;
                let err = (numeric - closed).abs();
                let checked = kinks.iter().all(|k| (t - k).abs() > margin);
                if checked {
                    worst = worst.max(err);
                    checked_count += 1;
                }
                csv.push_str(&format!("{l},{r},{t},{numeric},{closed},{err},{checked}\n"));
            }
        }
    }
    fs::write(out.join("bandlimit.csv"), csv)?;
    let passed = checked_count > 0 && worst <= tol;
    finish(out, "bandlimit.json", passed, json!({ "checked_points": checked_count, "max_abs_err": worst, "tol": tol, "pass": passed }))
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<u8>, CliError> {
    let path = cfg.raw("corpus")?;
    if path.is_empty() {
        Ok(synthetic_corpus(cfg.get("corpus_bytes")?, cfg.get("corpus_seed")?))
    } else {
        fs::read(path).map_err(|e| CliError::Usage(format!("cannot read corpus {path}: {e}")))
    }
}

fn variant(name: &str) -> Result<AttentionVariant, CliError> {
    match name {
        "fourier" => Ok(AttentionVariant::Fourier),
        "dot" => Ok(AttentionVariant::Dot),
        other => Err(CliError::Usage(format!("unknown variant `{other}`"))),
    }
}

fn model_config(cfg: &ExperimentConfig, variant: AttentionVariant) -> Result<TransformerConfig, CliError> {
    let exponent = if cfg.contains("exponent") { cfg.get("exponent")? } else { 4 };
    let r_init = if cfg.contains("r_init") { cfg.get("r_init")? } else { 2.0 };
    let mc = TransformerConfig {
        layers: cfg.get("layers")?,
        d_model: cfg.get("d_model")?,
        heads: cfg.get("heads")?,
        d_ff: cfg.get("d_ff")?,
        context_len: cfg.get("context")?,
        variant,
        fourier: FourierSettings { exponent, r_init, vector_r: cfg.get_bool("vector_r")? },
        seed: cfg.get("seed")?,
    };
    mc.validate()?;
    Ok(mc)
}

fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        steps: cfg.get("steps")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        eval_every: cfg.get("eval_every")?,
        valid_windows: cfg.get("valid_windows")?,
        seed: cfg.get("seed")?,
        ..TrainConfig::default()
    })
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn train(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let corpus = load_corpus(cfg)?;
    let mc = model_config(cfg, variant(cfg.raw("variant")?)?)?;
    let tc = train_config(cfg)?;
    let mut model = Transformer::new(mc)?;
    let report = train_lm(&mut model, &corpus, &tc)?;
    let baseline = order0_perplexity(&corpus);

    let mut steps_csv = String::from("step,train_loss,r_values\n");
    for s in &report.steps {
        let rs: Vec<String> = s.r_values.iter().map(|r| r.to_string()).collect();
        steps_csv.push_str(&format!("{},{},{}\n", s.step, s.train_loss, rs.join(";")));
    }
    fs::write(out.join("train_steps.csv"), steps_csv)?;
    let mut eval_csv = String::from("step,valid_loss,valid_ppl\n");
    for e in &report.evals {
        eval_csv.push_str(&format!("{},{},{}\n", e.step, e.valid_loss, e.valid_ppl));
    }
    fs::write(out.join("train_eval.csv"), eval_csv)?;
    write_checkpoint(&model, fs::File::create(out.join("model.fckp"))?)?;

    let beats = report.final_valid_ppl < baseline;
    let passed = !report.diverged() && (beats || !cfg.get_bool("require_baseline")?);
    let mut full = to_value(&report);
    full["order0_baseline_ppl"] = json!(baseline);
    full["beats_baseline"] = json!(beats);
    full["pass"] = json!(passed);
    write_json(out, "train_report.json", &full)?;
    let summary = json!({
        "final_valid_ppl": report.final_valid_ppl,
        "order0_baseline_ppl": baseline,
        "steps_run": report.steps.len(),
        "diverged": report.diverged(),
        "negative_weight_probe": report.negative_weight_probe,
        "pass": passed,
    });
    Ok(Outcome { passed, summary: summary.to_string() })
}

fn write_ablation(out: &Path, stem: &str, table: &AblationTable, passed: bool) -> CmdResult {
    fs::write(out.join(format!("{stem}.csv")), table.to_csv())?;
    finish(out, &format!("{stem}.json"), passed, json!({ "rows": to_value(&table.rows), "pass": passed }))
}

fn ablate_phi(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let corpus = load_corpus(cfg)?;
    let base = model_config(cfg, AttentionVariant::Fourier)?;
    let cells = exponent_grid(&cfg.get_list("exponents")?, cfg.get("r_init")?);
    let table = ablate(&base, &train_config(cfg)?, &cells, &corpus)?;
    // Even exponents must train cleanly; odd ones must show negative weights
    // on the first batch.
    let passed = table.rows.iter().all(|r| {
        if r.exponent % 2 == 0 {
            !r.diverged
        } else {
            r.negative_weight_probe
        }
    });
    write_ablation(out, "ablate_phi", &table, passed)
}

fn ablate_r(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let corpus = load_corpus(cfg)?;
    let base = model_config(cfg, AttentionVariant::Fourier)?;
    let cells = r_init_grid(&cfg.get_list("r_inits")?, cfg.get("exponent")?);
    let table = ablate(&base, &train_config(cfg)?, &cells, &corpus)?;
    write_ablation(out, "ablate_r", &table, true)
}

fn head_distances(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let corpus = load_corpus(cfg)?;
    let source = match cfg.raw("source")? {
        "outputs" => HeadDistanceSource::HeadOutputs,
        "attention" => HeadDistanceSource::AttentionMatrices,
        other => return Err(CliError::Usage(format!("unknown source `{other}`"))),
    };
    let checkpoint = cfg.raw("checkpoint")?;
    let models: Vec<(String, Transformer)> = if checkpoint.is_empty() {
        let tc = train_config(cfg)?;
        let mut v = Vec::new();
        for (label, var) in [("dot", AttentionVariant::Dot), ("fourier", AttentionVariant::Fourier)] {
            let mut m = Transformer::new(model_config(cfg, var)?)?;
            train_lm(&mut m, &corpus, &tc)?;
            v.push((label.to_string(), m));
        }
        v
    } else {
        let path = Path::new(checkpoint);
        let echo_path = path.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO);
        let text = fs::read_to_string(&echo_path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", echo_path.display())))?;
        let saved = ExperimentConfig::parse(&text)?;
        let var = variant(saved.raw("variant")?)?;
        let file = fs::File::open(path).map_err(|e| CliError::Usage(format!("cannot open {checkpoint}: {e}")))?;
        let m = read_checkpoint(model_config(&saved, var)?, file)?;
        vec![(saved.raw("variant")?.to_string(), m)]
    };

    let mut rows = Vec::new();
    let mut csv = String::from("model,layer,mean,std,normalized_mean\n");
    for (label, model) in &models {
        let len = model.config().context_len;
        let split = split_corpus(&corpus, len)?;
        let starts = validation_starts(split.valid, len, cfg.get("windows")?);
        if starts.is_empty() {
            return Err(CliError::Failed("validation split holds no full window".into()));
        }
        let ids: Vec<usize> = starts
            .iter()
            .flat_map(|&s| split.valid[s..s + len].iter().map(|&b| b as usize))
            .collect();
        let report = head_distance(model, &ids, source)?;
        for (i, layer) in report.layers.iter().enumerate() {
            csv.push_str(&format!("{label},{i},{},{},{}\n", layer.mean, layer.std, layer.normalized_mean));
        }
        rows.push(json!({ "model": label, "report": to_value(&report) }));
    }
    fs::write(out.join("head_distance.csv"), csv)?;
    finish(out, "head_distance.json", true, json!({ "models": rows }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_reads_every_key() {
        let mut cfg = ExperimentConfig::new();
        for k in crate::keys("train-lm") {
            cfg.set(k.name, &k.default);
        }
        cfg.set("vector_r", "true");
        let mc = model_config(&cfg, AttentionVariant::Fourier).unwrap();
        assert_eq!((mc.layers, mc.d_model, mc.context_len), (2, 32, 64));
        assert!(mc.fourier.vector_r);
        cfg.set("heads", "3");
        assert!(matches!(model_config(&cfg, AttentionVariant::Dot), Err(CliError::Usage(_))));
    }

    #[test]
    fn truth_names() {
        assert!(density_model("laplace", 1).is_ok());
        assert!(matches!(density_model("uniform", 1), Err(CliError::Usage(_))));
    }
}
