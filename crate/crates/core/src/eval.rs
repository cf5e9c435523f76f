//! Monte-Carlo predictive inference, discrimination and calibration metrics,
//! and the audio-sensitivity diagnostic.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{KeyedNoise, Mode, Model};
use crate::numerics::{entropy, softmax, Purpose};

/// Default number of predictive Monte-Carlo draws.
pub const DEFAULT_MC_SAMPLES: usize = 10;
/// Default number of equal-width confidence bins for [`ece`].
pub const DEFAULT_ECE_BINS: usize = 10;

/// Model-averaged class distribution for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub mean_sigma_norm: f64,
}

/// Averages `softmax(logits)` over `m` posterior draws. Draw `j` uses noise
/// stream `(Predict, layer, sample_index, j)` under `seed`. Deterministic
/// families are evaluated once.
pub fn predict(
    model: &Model,
    x: &[f64],
    a: Option<&[f64]>,
    m: usize,
    seed: u64,
    sample_index: u64,
) -> Result<PredictiveResult> {
    if m == 0 {
        return Err(Error::Config("eval.mc_samples must be >= 1".into()));
    }
    let draws = if model.family().is_stochastic() { m } else { 1 };
    let mut probs = vec![0.0; model.config.classes];
    for j in 0..draws {
        let noise = KeyedNoise {
            seed,
            purpose: Purpose::Predict,
            sample: sample_index,
            draw: j as u64,
        };
        let out = model.forward(x, a, Mode::Sample(&noise))?;
        for (p, q) in probs.iter_mut().zip(softmax(&out.logits)) {
            *p += q;
        }
    }
    let inv = 1.0 / draws as f64;
    for p in &mut probs {
        *p *= inv;
    }
    Ok(PredictiveResult {
        entropy: entropy(&probs),
        probs,
        mean_sigma_norm: model.mean_sigma_norm(x, a)?,
    })
}

/// [`predict`] over every sample, keyed by dataset index.
pub fn predict_dataset(model: &Model, dataset: &Dataset, m: usize, seed: u64) -> Result<Vec<PredictiveResult>> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| predict(model, &s.x, s.a.as_deref(), m, seed, i as u64))
        .collect()
}

/// Ranks starting at 1, with tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Binary ROC AUC in Mann–Whitney form: the chance a random positive
/// (`label == 1`) scores above a random negative, with ties worth one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", (scores.len(), 1), (labels.len(), 1)));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Dataset("auc expects labels in {0, 1}".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes present"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Macro-averaged one-vs-rest AUC over the classes that have both positives
/// and negatives. For two classes this equals [`auc`] on `p(y = 1)`.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("macro_auc", (probs.len(), 1), (labels.len(), 1)));
    }
    let classes = probs.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let onehot: Vec<usize> = labels.iter().map(|&y| usize::from(y == k)).collect();
        match auc(&scores, &onehot) {
            Ok(v) => {
                total += v;
                used += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("auc needs at least two classes present"));
    }
    Ok(total / used as f64)
}

/// Probability floor applied inside [`nll_metric`].
pub const NLL_CLAMP: f64 = 1e-12;

/// Mean negative log-likelihood and how many true-label probabilities had
/// to be clamped up to [`NLL_CLAMP`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllMetric {
    pub value: f64,
    pub clamped: usize,
}

pub fn nll_metric(probs: &[Vec<f64>], labels: &[usize]) -> Result<NllMetric> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("nll_metric", (probs.len(), 1), (labels.len(), 1)));
    }
    let mut clamped = 0;
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Dataset(format!("label {y} out of range")))?;
        if py < NLL_CLAMP {
            clamped += 1;
        }
        total -= py.max(NLL_CLAMP).ln();
    }
    Ok(NllMetric {
        value: total / probs.len() as f64,
        clamped,
    })
}

/// Expected calibration error over `bins` equal-width bins of the max-class
/// probability. Confidence 1.0 falls in the last bin.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("eval.ece_bins must be >= 1".into()));
    }
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("ece", (probs.len(), 1), (labels.len(), 1)));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (arg, &c) = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .ok_or_else(|| Error::Dataset("empty probability vector".into()))?;
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if arg == y {
            correct[b] += 1.0;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// Spearman rank correlation with average ranks for ties. `None` when it is
/// undefined (fewer than two points or a constant input).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Uncertainty summary for one noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseBucket {
    pub rho: f64,
    pub count: usize,
    pub mean_entropy: f64,
    pub mean_sigma_norm: f64,
}

/// How predictive uncertainty tracks the per-sample label-noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeteroscedasticityReport {
    /// Spearman(ρ, predictive entropy); absent when undefined.
    pub spearman: Option<f64>,
    /// Spearman(ρ, mean sigma-norm); absent when undefined.
    pub sigma_spearman: Option<f64>,
    pub per_bucket: Vec<NoiseBucket>,
}

/// Buckets samples by their noise level `ρ`.
pub fn heteroscedasticity_report(
    model: &Model,
    dataset: &Dataset,
    m: usize,
    seed: u64,
) -> Result<HeteroscedasticityReport> {
    let preds = predict_dataset(model, dataset, m, seed)?;
    heteroscedasticity_from_predictions(dataset, &preds)
}

/// [`heteroscedasticity_report`] over precomputed predictions.
pub fn heteroscedasticity_from_predictions(
    dataset: &Dataset,
    preds: &[PredictiveResult],
) -> Result<HeteroscedasticityReport> {
    let rho: Vec<f64> = dataset
        .samples
        .iter()
        .map(|s| s.meta)
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Dataset("heteroscedasticity report needs per-sample noise levels".into()))?;
    if preds.len() != rho.len() {
        return Err(Error::shape("heteroscedasticity", (preds.len(), 1), (rho.len(), 1)));
    }
    let ent: Vec<f64> = preds.iter().map(|p| p.entropy).collect();
    let sig: Vec<f64> = preds.iter().map(|p| p.mean_sigma_norm).collect();
    let mut levels = rho.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let per_bucket = levels
        .iter()
        .map(|&r| {
            let idx: Vec<usize> = (0..rho.len()).filter(|&i| rho[i] == r).collect();
            let n = idx.len() as f64;
            NoiseBucket {
                rho: r,
                count: idx.len(),
                mean_entropy: idx.iter().map(|&i| ent[i]).sum::<f64>() / n,
                mean_sigma_norm: idx.iter().map(|&i| sig[i]).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(HeteroscedasticityReport {
        spearman: spearman(&rho, &ent),
        sigma_spearman: spearman(&rho, &sig),
        per_bucket,
    })
}

/// Metrics for one evaluated model, serialized as the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub family: String,
    pub seed: u64,
    pub n: usize,
    pub auc: Option<f64>,
    pub nll: f64,
    pub nll_clamped: usize,
    pub ece: f64,
    pub spearman: Option<f64>,
    pub sigma_spearman: Option<f64>,
    pub per_bucket: Vec<NoiseBucket>,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Predicts every sample and computes all metrics. AUC is absent when a
/// class is missing; the noise diagnostic is skipped without metadata.
pub fn evaluate(model: &Model, dataset: &Dataset, m: usize, seed: u64, bins: usize) -> Result<EvalSummary> {
    let preds = predict_dataset(model, dataset, m, seed)?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let labels = dataset.labels();
    let auc = match macro_auc(&probs, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let nll = nll_metric(&probs, &labels)?;
    let hetero = if dataset.has_meta() {
        Some(heteroscedasticity_from_predictions(dataset, &preds)?)
    } else {
        None
    };
    Ok(EvalSummary {
        family: model.family().name().to_string(),
        seed,
        n: dataset.len(),
        auc,
        nll: nll.value,
        nll_clamped: nll.clamped,
        ece: ece(&probs, &labels, bins)?,
        spearman: hetero.as_ref().and_then(|h| h.spearman),
        sigma_spearman: hetero.as_ref().and_then(|h| h.sigma_spearman),
        per_bucket: hetero.map(|h| h.per_bucket).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Family;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::numerics::{SeededRng, StreamId};
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn model(family: Family) -> Model {
        let cfg = ModelConfig {
            family,
            width: 16,
            depth: 2,
            rank: 4,
            context_dim: 8,
            audio_dim: 16,
            ..ModelConfig::default()
        };
        Model::new(cfg, 0).unwrap()
    }

    #[test]
    fn auc_hand_case() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn auc_separated_and_constant() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn macro_auc_matches_binary_for_two_classes() {
        let p1 = [0.1, 0.4, 0.35, 0.8, 0.5];
        let y = [0, 0, 1, 1, 0];
        let probs: Vec<Vec<f64>> = p1.iter().map(|&p| vec![1.0 - p, p]).collect();
        assert!((macro_auc(&probs, &y).unwrap() - auc(&p1, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nll_cases() {
        let uniform = vec![vec![0.5, 0.5]; 3];
        assert!((nll_metric(&uniform, &[0, 1, 0]).unwrap().value - std::f64::consts::LN_2).abs() < 1e-12);
        let onehot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(nll_metric(&onehot, &[0, 1]).unwrap().value, 0.0);
        let hand = nll_metric(&[vec![0.8, 0.2]], &[0]).unwrap();
        assert!((hand.value - 0.223_143_551_314_209_7).abs() < 1e-12);
        let zero = nll_metric(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert_eq!(zero.clamped, 1);
        assert!((zero.value - 1e-12_f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn ece_cases() {
        // Confidence 0.75 with 3 of 4 right.
        let p = vec![vec![0.75, 0.25]; 4];
        assert!(ece(&p, &[0, 0, 0, 1], 10).unwrap().abs() < 1e-12);
        let sure = vec![vec![1.0, 0.0]; 4];
        assert!((ece(&sure, &[0, 0, 1, 1], 10).unwrap() - 0.5).abs() < 1e-12);
        // Two bins: {0.6, 0.6} with 1 right and {0.9} wrong.
        let p = vec![vec![0.6, 0.4], vec![0.4, 0.6], vec![0.9, 0.1]];
        let expected = (2.0 / 3.0) * (0.5_f64 - 0.6).abs() + (1.0 / 3.0) * (0.0_f64 - 0.9).abs();
        assert!((ece(&p, &[0, 0, 1], 2).unwrap() - expected).abs() < 1e-12);
        assert!(ece(&p, &[0, 0, 1], 0).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        // Ties take average ranks: x ranks [1.5, 1.5, 3], y ranks [1, 2, 3].
        let r = spearman(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_normalized() {
        for family in Family::ALL {
            let m = model(family);
            let mut rng = SeededRng::new(9, StreamId::of(crate::numerics::Purpose::Oracle));
            for i in 0..50 {
                let x = rng.standard_normal(16);
                let a = rng.standard_normal(16);
                let p = predict(&m, &x, Some(&a), 10, 1, i).unwrap();
                assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(p.entropy >= 0.0 && p.entropy <= std::f64::consts::LN_2 + 1e-12);
            }
        }
    }

    #[test]
    fn floor_sigma_matches_mean_softmax() {
        let mut m = model(Family::CLora);
        crate::training::perturb_parameters(&mut m, 0.3, 2);
        m.params.adapters.pin_sigma_to_floor();
        let mut rng = SeededRng::new(2, StreamId::of(crate::numerics::Purpose::Oracle));
        let x = rng.standard_normal(16);
        let p = predict(&m, &x, None, 10, 0, 0).unwrap();
        let mean = softmax(&m.forward(&x, None, Mode::Mean).unwrap().logits);
        for (a, b) in p.probs.iter().zip(mean) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn prediction_requires_draws() {
        assert!(predict(&model(Family::Lora), &[0.0; 16], None, 0, 0, 0).is_err());
    }

    #[test]
    fn single_bucket_spearman_is_absent() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 50,
            noise_levels: vec![0.2],
            ..SyntheticSpec::default()
        })
        .unwrap();
        let r = heteroscedasticity_report(&model(Family::Coco), &ds, 2, 0).unwrap();
        assert_eq!(r.spearman, None);
        assert_eq!(r.per_bucket.len(), 1);
        assert_eq!(r.per_bucket[0].count, 50);
    }

    #[test]
    fn report_requires_meta() {
        let mut ds = generate_synthetic(&SyntheticSpec {
            n_samples: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        ds.samples[3].meta = None;
        assert!(heteroscedasticity_report(&model(Family::Coco), &ds, 2, 0).is_err());
    }

    #[test]
    fn untrained_model_has_no_noise_correlation() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 2000,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let r = heteroscedasticity_report(&model(Family::Coco), &ds, 10, 0).unwrap();
        assert!(r.spearman.unwrap().abs() < 0.1, "{r:?}");
    }

    #[test]
    fn summary_serializes() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 40,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let s = evaluate(&model(Family::Coco), &ds, 2, 0, DEFAULT_ECE_BINS).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["family"], "coco");
        assert_eq!(v["per_bucket"].as_array().unwrap().len(), 5);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(raw in proptest::collection::vec((0u8..6, 0usize..2), 2..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0)).collect();
            let labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_maps(
            raw in proptest::collection::vec((-5.0f64..5.0, 0usize..2), 2..60),
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| (scale * s + shift).tanh() + s.powi(3)).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn ece_zero_for_correct_one_hot(labels in proptest::collection::vec(0usize..3, 1..50)) {
            let probs: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|k| f64::from(u8::from(k == y))).collect()).collect();
            prop_assert_eq!(ece(&probs, &labels, 10).unwrap(), 0.0);
        }
    }
}
