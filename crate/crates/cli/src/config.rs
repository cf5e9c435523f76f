//! Flat `section.key = value` configuration with command-line overrides.
//!
//! A config file holds one `key = value` pair per line; `#` starts a comment.
//! Every key can also be given on the command line as `--key=value`, which
//! wins over the file. The resolved configuration (defaults expanded) is
//! echoed next to every output so a run can be reproduced from it alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cocolora_core::data::SyntheticSpec;
use cocolora_core::eval::{DEFAULT_ECE_BINS, DEFAULT_MC_SAMPLES};
use cocolora_core::{Family, ModelConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// JSONL file to read instead of generating synthetic data.
    pub input: Option<PathBuf>,
    /// Optional `index,rho` sidecar for `input`.
    pub meta: Option<PathBuf>,
    /// Generator settings. `classes` also bounds labels read from `input`.
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Monte-Carlo draws `M` of the predictive.
    pub mc_samples: usize,
    pub ece_bins: usize,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub families: Vec<Family>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub coordinates: usize,
    pub tolerance: f64,
    /// Samples in the checked batch.
    pub batch: usize,
    /// Standard deviation of the noise added to the initial parameters.
    pub perturb: f64,
}

/// Everything a command needs. `seed` drives data generation, the frozen
/// backbone, initialization, shuffling and predictive sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Width, audio dimension, class count and backbone seed are filled in
    /// from the data and `seed` when a model is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Per-family batch sizes that replace `train.batch_size`.
    pub batch_overrides: BTreeMap<Family, usize>,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig {
                input: None,
                meta: None,
                spec: SyntheticSpec::default(),
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            batch_overrides: BTreeMap::new(),
            eval: EvalConfig {
                mc_samples: DEFAULT_MC_SAMPLES,
                ece_bins: DEFAULT_ECE_BINS,
                folds: 5,
                seeds: vec![0, 1, 2],
                families: Family::ALL.to_vec(),
                checkpoint: None,
            },
            grad_check: GradCheckConfig {
                coordinates: 200,
                tolerance: 1e-4,
                batch: 4,
                perturb: 0.1,
            },
        }
    }
}

/// Model keys that are not set directly.
const DERIVED_MODEL_KEYS: [(&str, &str); 4] = [
    ("model.width", "taken from the text-feature length of the data"),
    ("model.audio_dim", "taken from the audio-embedding length of the data"),
    ("model.classes", "set `data.classes` instead"),
    ("model.backbone_seed", "derived from `seed`"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| format!("{key}: cannot parse `{}`: {e}", value.trim()))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors so typos do not pass silently.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        if let Some((_, why)) = DERIVED_MODEL_KEYS.iter().find(|(k, _)| *k == key) {
            return Err(format!("{key} cannot be set: {why}"));
        }
        if key.starts_with("model.") {
            return self.model.apply(key, v);
        }
        if let Some(family) = key.strip_prefix("train.batch_size.") {
            let family: Family = family.parse().map_err(|e| format!("{key}: {e}"))?;
            self.batch_overrides.insert(family, parse(key, v)?);
            return Ok(());
        }
        let spec = &mut self.data.spec;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.input" => self.data.input = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.meta" => self.data.meta = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.n_samples" => spec.n_samples = parse(key, v)?,
            "data.d_text" => spec.d_text = parse(key, v)?,
            "data.d_a" => spec.d_a = parse(key, v)?,
            "data.classes" => spec.classes = parse(key, v)?,
            "data.noise_levels" => spec.noise_levels = parse_list(key, v)?,
            "data.class_prior" => spec.class_prior = parse_list(key, v)?,
            "data.separation" => spec.separation = parse(key, v)?,
            "train.gamma" => self.train.gamma = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "eval.mc_samples" => self.eval.mc_samples = parse(key, v)?,
            "eval.ece_bins" => self.eval.ece_bins = parse(key, v)?,
            "eval.folds" => self.eval.folds = parse(key, v)?,
            "eval.seeds" => self.eval.seeds = parse_list(key, v)?,
            "eval.families" => self.eval.families = parse_list(key, v)?,
            "eval.checkpoint" => self.eval.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "grad_check.coordinates" => self.grad_check.coordinates = parse(key, v)?,
            "grad_check.tolerance" => self.grad_check.tolerance = parse(key, v)?,
            "grad_check.batch" => self.grad_check.batch = parse(key, v)?,
            "grad_check.perturb" => self.grad_check.perturb = parse(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Reads `key = value` lines, collecting every bad line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Vec<String> {
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(format!("{origin}:{}: {e}", i + 1));
                    }
                }
                None => errs.push(format!("{origin}:{}: expected `key = value`", i + 1)),
            }
        }
        errs
    }

    /// Defaults, then the optional file, then `overrides` in order. Returns
    /// every problem at once.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            errs.extend(cfg.apply_text(&text, &path.display().to_string()));
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                errs.push(format!("--{k}: {e}"));
            }
        }
        if let Err(e) = cfg.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errs))
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.data.input.is_none() {
            if let Err(e) = self.data.spec.validate() {
                errs.extend(e);
            }
        }
        if self.data.meta.is_some() && self.data.input.is_none() {
            errs.push("data.meta requires data.input".into());
        }
        if let Some(p) = &self.data.input {
            if !p.exists() {
                errs.push(format!("data.input: {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.data.meta {
            if !p.exists() {
                errs.push(format!("data.meta: {} does not exist", p.display()));
            }
        }
        if let Err(e) = self.train.validate() {
            errs.extend(e);
        }
        for (family, &b) in &self.batch_overrides {
            if b == 0 {
                errs.push(format!("train.batch_size.{family} must be >= 1"));
            }
        }
        // With file input the data fixes the model width, so the model is
        // checked when it is built instead.
        if self.data.input.is_none() {
            let mut model = self.model.clone();
            model.width = self.data.spec.d_text;
            model.audio_dim = self.data.spec.d_a;
            model.classes = self.data.spec.classes;
            if let Err(e) = model.validate() {
                errs.extend(e);
            }
        }
        if self.eval.mc_samples == 0 {
            errs.push("eval.mc_samples must be >= 1".into());
        }
        if self.eval.ece_bins == 0 {
            errs.push("eval.ece_bins must be >= 1".into());
        }
        if self.eval.folds < 2 {
            errs.push("eval.folds must be >= 2".into());
        }
        if self.eval.seeds.is_empty() {
            errs.push("eval.seeds must not be empty".into());
        }
        if self.eval.families.is_empty() {
            errs.push("eval.families must not be empty".into());
        }
        if self.grad_check.coordinates == 0 || self.grad_check.batch == 0 {
            errs.push("grad_check.coordinates and grad_check.batch must be >= 1".into());
        }
        if !(self.grad_check.tolerance > 0.0) || !(self.grad_check.perturb >= 0.0) {
            errs.push("grad_check.tolerance must be > 0 and grad_check.perturb >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Batch size used when training `family`.
    pub fn batch_size(&self, family: Family) -> usize {
        self.batch_overrides
            .get(&family)
            .copied()
            .unwrap_or(self.train.batch_size)
    }

    /// Training settings for one run of `family` with `seed`.
    pub fn train_config(&self, family: Family, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size(family),
            seed,
            ..self.train.clone()
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.data.spec;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("data.input".into(), path(&self.data.input)),
            ("data.meta".into(), path(&self.data.meta)),
            ("data.n_samples".into(), s.n_samples.to_string()),
            ("data.d_text".into(), s.d_text.to_string()),
            ("data.d_a".into(), s.d_a.to_string()),
            ("data.classes".into(), s.classes.to_string()),
            ("data.noise_levels".into(), join(&s.noise_levels)),
            ("data.class_prior".into(), join(&s.class_prior)),
            ("data.separation".into(), s.separation.to_string()),
        ];
        out.extend(
            self.model
                .entries()
                .into_iter()
                .filter(|(k, _)| !DERIVED_MODEL_KEYS.iter().any(|(d, _)| d == k)),
        );
        let t = &self.train;
        out.extend([
            ("train.gamma".into(), t.gamma.to_string()),
            ("train.lr".into(), t.lr.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
        ]);
        for family in Family::ALL {
            out.push((
                format!("train.batch_size.{family}"),
                self.batch_size(family).to_string(),
            ));
        }
        let e = &self.eval;
        out.extend([
            ("eval.mc_samples".into(), e.mc_samples.to_string()),
            ("eval.ece_bins".into(), e.ece_bins.to_string()),
            ("eval.folds".into(), e.folds.to_string()),
            ("eval.seeds".into(), join(&e.seeds)),
            ("eval.families".into(), join(&e.families)),
            ("eval.checkpoint".into(), path(&e.checkpoint)),
            ("grad_check.coordinates".into(), self.grad_check.coordinates.to_string()),
            ("grad_check.tolerance".into(), self.grad_check.tolerance.to_string()),
            ("grad_check.batch".into(), self.grad_check.batch.to_string()),
            ("grad_check.perturb".into(), self.grad_check.perturb.to_string()),
        ]);
        out
    }

    /// The resolved configuration in the file format accepted by [`RunConfig::load`].
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Splits `--section.key=value` arguments (any long flag whose name contains
/// a dot) from the rest of the command line.
pub fn split_overrides<I: IntoIterator<Item = String>>(args: I) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            Some((k, v)) if k.contains('.') => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}
