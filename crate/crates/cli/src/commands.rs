//! The five CLI verbs. Each returns its results so tests can inspect them,
//! and the `*_to` variants write them under an output directory together
//! with the resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use cocolora_core::checkpoint;
use cocolora_core::data::{generate_synthetic, kfold_split, load_jsonl, read_meta, write_jsonl, write_meta, Fold};
use cocolora_core::eval::evaluate;
use cocolora_core::training::{
    gradient_check, perturb_parameters, train, GradCheckOptions, GradCheckReport, LossWeights,
};
use cocolora_core::{Dataset, EpochStats, EvalSummary, Family, Model, ModelConfig};

use crate::config::RunConfig;
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

pub const CONFIG_ECHO: &str = "config.txt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join(CONFIG_ECHO), cfg.echo())
}

/// The dataset for `seed`: the configured file, or a synthetic draw.
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data.input {
        Some(path) => {
            let mut ds = load_jsonl(path, Some(cfg.data.spec.classes))?;
            if ds.is_empty() {
                return Err(cocolora_core::Error::Dataset(format!("{} holds no samples", path.display())).into());
            }
            if let Some(meta) = &cfg.data.meta {
                ds.attach_meta(&read_meta(meta)?)?;
            }
            Ok(ds)
        }
        None => {
            let spec = cocolora_core::SyntheticSpec {
                seed,
                ..cfg.data.spec.clone()
            };
            Ok(generate_synthetic(&spec)?)
        }
    }
}

/// Model settings for `family` sized to `data`, with the backbone drawn from
/// `seed`.
pub fn model_config(cfg: &RunConfig, family: Family, data: &Dataset, seed: u64) -> ModelConfig {
    ModelConfig {
        family,
        width: data.text_dim().unwrap_or(0),
        audio_dim: data.audio_dim().unwrap_or(1),
        classes: cfg.data.spec.classes,
        backbone_seed: seed,
        ..cfg.model.clone()
    }
}

pub fn generate_data(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.input.is_some() {
        return Err(CliError::Config(vec![
            "generate-data writes synthetic data; unset data.input".into(),
        ]));
    }
    load_data(cfg, cfg.seed)
}

/// Writes `data.jsonl` and the `meta.csv` sidecar.
pub fn generate_data_to(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_data(cfg)?;
    prepare_out(cfg, out)?;
    write_jsonl(&ds, &out.join("data.jsonl"))?;
    write_meta(&ds, &out.join("meta.csv"))?;
    Ok(ds)
}

/// Trains `model.family` on the whole dataset.
pub fn train_model(cfg: &RunConfig) -> Result<(Model, Vec<EpochStats>)> {
    let data = load_data(cfg, cfg.seed)?;
    let family = cfg.model.family;
    let model = Model::new(model_config(cfg, family, &data, cfg.seed), cfg.seed)?;
    Ok(train(&model, &data, &cfg.train_config(family, cfg.seed))?)
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,nll,kl\n");
    for e in history {
        writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.nll, e.kl).unwrap();
    }
    s
}

/// Writes `model.cclr` and `history.csv`.
pub fn train_to(cfg: &RunConfig, out: &Path) -> Result<(Model, Vec<EpochStats>)> {
    let (model, history) = train_model(cfg)?;
    prepare_out(cfg, out)?;
    checkpoint::save(&model, &out.join("model.cclr"))?;
    write(&out.join("history.csv"), history_csv(&history))?;
    Ok((model, history))
}

pub fn eval_model(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalSummary> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = load_data(cfg, cfg.seed)?;
    Ok(evaluate(
        &model,
        &data,
        cfg.eval.mc_samples,
        cfg.seed,
        cfg.eval.ece_bins,
    )?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn eval_csv(s: &EvalSummary) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in [
        ("n", s.n.to_string()),
        ("auc", opt(s.auc)),
        ("nll", s.nll.to_string()),
        ("nll_clamped", s.nll_clamped.to_string()),
        ("ece", s.ece.to_string()),
        ("spearman", opt(s.spearman)),
        ("sigma_spearman", opt(s.sigma_spearman)),
    ] {
        writeln!(out, "{k},{v}").unwrap();
    }
    out
}

pub fn buckets_csv(s: &EvalSummary) -> String {
    let mut out = String::from("rho,count,mean_entropy,mean_sigma_norm\n");
    for b in &s.per_bucket {
        writeln!(out, "{},{},{},{}", b.rho, b.count, b.mean_entropy, b.mean_sigma_norm).unwrap();
    }
    out
}

/// Writes `eval.json`, `eval.csv` and, with noise metadata, `buckets.csv`.
pub fn eval_to(cfg: &RunConfig, checkpoint_path: &Path, out: &Path) -> Result<EvalSummary> {
    let summary = eval_model(cfg, checkpoint_path)?;
    prepare_out(cfg, out)?;
    write(&out.join("eval.json"), summary.to_json() + "\n")?;
    write(&out.join("eval.csv"), eval_csv(&summary))?;
    if !summary.per_bucket.is_empty() {
        write(&out.join("buckets.csv"), buckets_csv(&summary))?;
    }
    Ok(summary)
}

/// Test metrics of one (family, fold, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub family: Family,
    pub fold: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub nll: f64,
    pub ece: f64,
    pub spearman: Option<f64>,
    pub sigma_spearman: Option<f64>,
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<MeanSd> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanSd { mean, sd, n: v.len() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub family: Family,
    pub auc: Option<MeanSd>,
    pub nll: Option<MeanSd>,
    pub ece: Option<MeanSd>,
    pub spearman: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub summaries: Vec<CompareSummary>,
    /// The shared split used for each seed, in `eval.seeds` order.
    pub splits: Vec<(u64, Vec<Fold>)>,
}

impl CompareReport {
    pub fn summary(&self, family: Family) -> Option<&CompareSummary> {
        self.summaries.iter().find(|s| s.family == family)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,fold,seed,auc,nll,ece,spearman\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.family,
                r.fold,
                r.seed,
                opt(r.auc),
                r.nll,
                r.ece,
                opt(r.spearman)
            )
            .unwrap();
        }
        let ms = |m: Option<MeanSd>| m.map(|m| format!("{}±{}", m.mean, m.sd)).unwrap_or_default();
        for x in &self.summaries {
            writeln!(
                s,
                "{},mean±sd,all,{},{},{},{}",
                x.family,
                ms(x.auc),
                ms(x.nll),
                ms(x.ece),
                ms(x.spearman)
            )
            .unwrap();
        }
        s
    }

    /// Fixed-width table: the detail rows, then one summary row per family.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let ms = |m: Option<MeanSd>| {
            m.map(|m| format!("{:.4} ± {:.4}", m.mean, m.sd))
                .unwrap_or_else(|| "-".into())
        };
        let mut s = format!(
            "{:<8} {:>5} {:>5} {:>17} {:>17} {:>17} {:>17}\n",
            "family", "fold", "seed", "auc", "nll", "ece", "spearman"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:<8} {:>5} {:>5} {:>17} {:>17} {:>17} {:>17}",
                r.family.name(),
                r.fold,
                r.seed,
                f(r.auc),
                f(Some(r.nll)),
                f(Some(r.ece)),
                f(r.spearman)
            )
            .unwrap();
        }
        s.push('\n');
        for x in &self.summaries {
            writeln!(
                s,
                "{:<8} {:>5} {:>5} {:>17} {:>17} {:>17} {:>17}",
                x.family.name(),
                "all",
                "all",
                ms(x.auc),
                ms(x.nll),
                ms(x.ece),
                ms(x.spearman)
            )
            .unwrap();
        }
        s
    }
}

/// Trains and evaluates every family on every fold of every seed. For each
/// seed all families see the same data and the same split. Cells run in
/// parallel; rows come back in (seed, fold, family) order.
pub fn compare(cfg: &RunConfig) -> Result<CompareReport> {
    let mut datasets = Vec::new();
    let mut splits = Vec::new();
    for &seed in &cfg.eval.seeds {
        let ds = load_data(cfg, seed)?;
        splits.push((seed, kfold_split(ds.len(), cfg.eval.folds, seed)?));
        datasets.push(ds);
    }
    let mut cells = Vec::new();
    for (si, (_, folds)) in splits.iter().enumerate() {
        for fold in 0..folds.len() {
            for &family in &cfg.eval.families {
                cells.push((si, fold, family));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(si, fold, family)| -> Result<CompareRow> {
            let (seed, folds) = &splits[si];
            let data = &datasets[si];
            let split = &folds[fold];
            let model = Model::new(model_config(cfg, family, data, *seed), *seed)?;
            let (model, _) = train(&model, &data.subset(&split.train), &cfg.train_config(family, *seed))?;
            let s = evaluate(
                &model,
                &data.subset(&split.test),
                cfg.eval.mc_samples,
                *seed,
                cfg.eval.ece_bins,
            )?;
            Ok(CompareRow {
                family,
                fold,
                seed: *seed,
                auc: s.auc,
                nll: s.nll,
                ece: s.ece,
                spearman: s.spearman,
                sigma_spearman: s.sigma_spearman,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = cfg
        .eval
        .families
        .iter()
        .map(|&family| {
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.family == family).collect();
            CompareSummary {
                family,
                auc: MeanSd::of(mine.iter().filter_map(|r| r.auc)),
                nll: MeanSd::of(mine.iter().map(|r| r.nll)),
                ece: MeanSd::of(mine.iter().map(|r| r.ece)),
                spearman: MeanSd::of(mine.iter().filter_map(|r| r.spearman)),
            }
        })
        .collect();
    Ok(CompareReport {
        rows,
        summaries,
        splits,
    })
}

/// Writes `compare.csv` and `compare.txt`.
pub fn compare_to(cfg: &RunConfig, out: &Path) -> Result<CompareReport> {
    let report = compare(cfg)?;
    prepare_out(cfg, out)?;
    write(&out.join("compare.csv"), report.to_csv())?;
    write(&out.join("compare.txt"), report.to_text())?;
    Ok(report)
}

/// Gradient check of every family in `eval.families` on a perturbed,
/// freshly initialized model and the first `grad_check.batch` samples.
pub fn grad_check(cfg: &RunConfig) -> Result<Vec<(Family, GradCheckReport)>> {
    let data = load_data(cfg, cfg.seed)?;
    let n = cfg.grad_check.batch.min(data.len());
    let batch = &data.samples[..n];
    cfg.eval
        .families
        .iter()
        .map(|&family| {
            let mut model = Model::new(model_config(cfg, family, &data, cfg.seed), cfg.seed)?;
            perturb_parameters(&mut model, cfg.grad_check.perturb, cfg.seed);
            let opts = GradCheckOptions {
                coordinates: cfg.grad_check.coordinates,
                weights: LossWeights::elbo(cfg.train.gamma),
                seed: cfg.seed,
                ..GradCheckOptions::default()
            };
            Ok((family, gradient_check(&model, batch, &opts)?))
        })
        .collect()
}

pub fn grad_check_csv(reports: &[(Family, GradCheckReport)], tolerance: f64) -> String {
    let mut s = String::from("family,max_relative_error,worst_tensor,worst_index,analytic,numeric,checked,passed\n");
    for (family, r) in reports {
        writeln!(
            s,
            "{family},{},{},{},{},{},{},{}",
            r.max_relative_error,
            r.worst.0,
            r.worst.1,
            r.worst_values.0,
            r.worst_values.1,
            r.checked,
            r.passes(tolerance)
        )
        .unwrap();
    }
    s
}

/// Writes `grad_check.csv`, then fails if any family misses the tolerance.
pub fn grad_check_to(cfg: &RunConfig, out: &Path) -> Result<Vec<(Family, GradCheckReport)>> {
    let reports = grad_check(cfg)?;
    prepare_out(cfg, out)?;
    let tol = cfg.grad_check.tolerance;
    write(&out.join("grad_check.csv"), grad_check_csv(&reports, tol))?;
    let failures: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passes(tol))
        .map(|(f, r)| {
            format!(
                "  {f}: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                r.max_relative_error, r.worst.0, r.worst.1, r.worst_values.0, r.worst_values.1
            )
        })
        .collect();
    if failures.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::GradCheck(failures.join("\n")))
    }
}

/// Where `eval` finds its checkpoint: the flag, else `eval.checkpoint`.
pub fn checkpoint_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.eval.checkpoint.clone())
        .ok_or_else(|| CliError::Config(vec!["eval needs --checkpoint or eval.checkpoint".into()]))
}
