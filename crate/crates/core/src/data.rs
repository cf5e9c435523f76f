//! Multimodal samples, the synthetic label-noise generator, JSONL ingestion
//! and k-fold splitting.
//!
//! The synthetic task hides a per-sample noise level `ρ` in the first audio
//! coordinate: observed labels are flipped with probability `ρ`, so a model
//! that reads the audio can tell reliable samples from unreliable ones while a
//! text-only model cannot.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Purpose, SeededRng, StreamId};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Text features.
    pub x: Vec<f64>,
    /// Pooled audio embedding; optional for text-only data.
    pub a: Option<Vec<f64>>,
    pub y: usize,
    /// Label-noise level used to generate the sample. Never shown to a model.
    pub meta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    pub fn audio_dim(&self) -> Option<usize> {
        self.samples.first().and_then(|s| s.a.as_ref().map(Vec::len))
    }

    pub fn has_audio(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.a.is_some())
    }

    pub fn has_meta(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.meta.is_some())
    }

    /// One more than the largest label.
    pub fn label_span(&self) -> usize {
        self.samples.iter().map(|s| s.y + 1).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Attaches noise levels read from a sidecar.
    pub fn attach_meta(&mut self, rho: &[f64]) -> Result<()> {
        if rho.len() != self.samples.len() {
            return Err(Error::Dataset(format!(
                "meta has {} entries for {} samples",
                rho.len(),
                self.samples.len()
            )));
        }
        for (s, r) in self.samples.iter_mut().zip(rho) {
            s.meta = Some(*r);
        }
        Ok(())
    }
}

/// Parameters of the synthetic multimodal task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub d_text: usize,
    pub d_a: usize,
    pub classes: usize,
    /// Candidate label-flip probabilities, each in `[0, 0.5]`.
    pub noise_levels: Vec<f64>,
    pub class_prior: Vec<f64>,
    /// Euclidean distance between class means (unit-variance clusters).
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 4000,
            d_text: 16,
            d_a: 16,
            classes: 2,
            noise_levels: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            class_prior: vec![0.5, 0.5],
            separation: 4.0,
            seed: 0,
        }
    }
}

/// Standard deviation of the distractor audio coordinates (variance 0.1).
pub const DISTRACTOR_STD: f64 = 0.316_227_766_016_837_94;

impl SyntheticSpec {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.classes < 2 {
            errs.push("data.classes must be >= 2".to_string());
        }
        if self.d_text < self.classes {
            errs.push(format!(
                "data.d_text ({}) must be at least data.classes ({})",
                self.d_text, self.classes
            ));
        }
        if self.d_a < 1 {
            errs.push("data.d_a must be >= 1".to_string());
        }
        if self.noise_levels.is_empty() {
            errs.push("data.noise_levels must not be empty".to_string());
        }
        if let Some(r) = self.noise_levels.iter().find(|r| !(0.0..=0.5).contains(*r)) {
            errs.push(format!("noise level {r} outside [0, 0.5]"));
        }
        if self.class_prior.len() != self.classes {
            errs.push(format!(
                "data.class_prior has {} entries for {} classes",
                self.class_prior.len(),
                self.classes
            ));
        }
        let total: f64 = self.class_prior.iter().sum();
        if self.class_prior.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            errs.push(format!(
                "data.class_prior must be non-negative and sum to 1 (sum {total})"
            ));
        }
        if !(self.separation >= 0.0) {
            errs.push("data.separation must be >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Draws a synthetic dataset. A pure function of `spec` (including its seed).
///
/// Class `k` has mean `(separation/√2)·e_k`, so any two class means are
/// `separation` apart. The audio embedding is `[4ρ − 1, distractors…]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate().map_err(|e| Error::Config(e.join("; ")))?;
    let offset = spec.separation / std::f64::consts::SQRT_2;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = SeededRng::new(spec.seed, StreamId::new(Purpose::Data, 0, i as u64, 0));
            let latent = draw_categorical(&spec.class_prior, rng.uniform());
            let mut x = rng.standard_normal(spec.d_text);
            x[latent] += offset;
            let rho = spec.noise_levels[rng.index(spec.noise_levels.len())];
            let y = if rng.uniform() < rho {
                (latent + 1 + rng.index(spec.classes - 1)) % spec.classes
            } else {
                latent
            };
            let mut a = Vec::with_capacity(spec.d_a);
            a.push(4.0 * rho - 1.0);
            a.extend(
                rng.standard_normal(spec.d_a - 1)
                    .into_iter()
                    .map(|v| v * DISTRACTOR_STD),
            );
            Sample {
                x,
                a: Some(a),
                y,
                meta: Some(rho),
            }
        })
        .collect();
    Ok(Dataset { samples })
}

fn draw_categorical(prior: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.len() - 1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<f64>>,
    y: i64,
}

/// Reads one JSON object per line. Blank lines are skipped. When `classes`
/// is given, labels must lie in `0..classes`.
pub fn load_jsonl(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples: Vec<Sample> = Vec::new();
    let fail = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(lineno, e.to_string()))?;
        if rec.y < 0 || classes.is_some_and(|c| rec.y as usize >= c) {
            return Err(fail(lineno, format!("label {} out of range", rec.y)));
        }
        if let Some(first) = samples.first() {
            if rec.x.len() != first.x.len() {
                return Err(fail(
                    lineno,
                    format!("x has length {}, expected {}", rec.x.len(), first.x.len()),
                ));
            }
            let expect_a = first.a.as_ref().map(Vec::len);
            let got_a = rec.a.as_ref().map(Vec::len);
            if expect_a != got_a {
                return Err(fail(lineno, format!("a has length {got_a:?}, expected {expect_a:?}")));
            }
        }
        samples.push(Sample {
            x: rec.x,
            a: rec.a,
            y: rec.y as usize,
            meta: None,
        });
    }
    Ok(Dataset { samples })
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        let rec = Record {
            x: s.x.clone(),
            a: s.a.clone(),
            y: s.y as i64,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Dataset(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the per-sample noise levels as `index,rho` CSV.
pub fn write_meta(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "index,rho").map_err(|e| Error::io(path, e))?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let rho = s
            .meta
            .ok_or_else(|| Error::Dataset(format!("sample {i} has no noise level")))?;
        writeln!(w, "{i},{rho}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (idx, rho) = line
            .split_once(',')
            .ok_or_else(|| fail("expected `index,rho`".into()))?;
        let idx: usize = idx.trim().parse().map_err(|e| fail(format!("bad index: {e}")))?;
        if idx != out.len() {
            return Err(fail(format!("index {idx} out of order")));
        }
        out.push(rho.trim().parse().map_err(|e| fail(format!("bad rho: {e}")))?);
    }
    Ok(out)
}

/// Train/test index sets of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded k-fold partition of `0..n`. Test sets differ in size by at most one
/// and both index lists of each fold are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("k ({k}) exceeds sample count ({n})")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    SeededRng::new(seed, StreamId::of(Purpose::Folds)).shuffle(&mut perm);
    let mut fold_of = vec![0usize; n];
    for f in 0..k {
        for &i in &perm[f * n / k..(f + 1) * n / k] {
            fold_of[i] = f;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train) = (0..n).partition(|&i| fold_of[i] == f);
            Fold { train, test }
        })
        .collect())
}
