//! KL-reweighted ELBO, AdamW with decoupled weight decay, the training loop
//! and the finite-difference gradient check.

use crate::adapters::{Family, ParamGroup};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{KeyedNoise, Mode, Model, TrainableParams};
use crate::numerics::{central_difference, log_softmax, softmax, Purpose, SeededRng, StreamId};

/// Optimization hyperparameters. Posterior-shape values (`β`, `ε`, `δ`) live
/// on [`crate::ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// KL weight `γ`.
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.008,
            lr: 0.001,
            weight_decay: 0.001,
            epochs: 2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Monte-Carlo draws of the likelihood term per sample during training.
    pub const MC_TRAIN_SAMPLES: usize = 1;

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.gamma >= 0.0) {
            errs.push("train.gamma must be >= 0".to_string());
        }
        if !(self.lr > 0.0) {
            errs.push("train.lr must be > 0".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("train.weight_decay must be >= 0".to_string());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Relative weights of the two ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub nll: f64,
    pub kl: f64,
}

impl LossWeights {
    pub fn elbo(gamma: f64) -> Self {
        LossWeights { nll: 1.0, kl: gamma }
    }
}

/// Batch-averaged loss and its two terms (each unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

/// Where the per-sample noise comes from: sample `i` of a batch uses stream
/// `(purpose, layer, ids[i], draw)` under `seed`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub draw: u64,
}

fn check_sample(model: &Model, s: &Sample) -> Result<()> {
    if model.family().consumes_audio() && s.a.is_none() {
        return Err(Error::MissingAudio {
            family: model.family().name(),
        });
    }
    if s.y >= model.config.classes {
        return Err(Error::Dataset(format!(
            "label {} out of range for {} classes",
            s.y, model.config.classes
        )));
    }
    Ok(())
}

/// Loss (and optionally gradient) over `batch`, where `ids[i]` keys the noise
/// of `batch[i]`.
pub(crate) fn batch_objective(
    model: &Model,
    batch: &[&Sample],
    ids: &[u64],
    weights: LossWeights,
    key: NoiseKey,
    mut grad: Option<&mut TrainableParams>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut out = LossBreakdown::default();
    for (s, &id) in batch.iter().zip(ids) {
        check_sample(model, s)?;
        let noise = KeyedNoise {
            seed: key.seed,
            purpose: key.purpose,
            sample: id,
            draw: key.draw,
        };
        let tape = model.trace(&s.x, s.a.as_deref(), Mode::Sample(&noise))?;
        let logp = log_softmax(&tape.logits);
        let nll = -logp[s.y];
        out.nll += nll * inv;
        out.kl += tape.kl * inv;
        if let Some(g) = grad.as_deref_mut() {
            let mut g_logits = softmax(&tape.logits);
            g_logits[s.y] -= 1.0;
            for v in &mut g_logits {
                *v *= weights.nll * inv;
            }
            model.backward(&tape, s.a.as_deref(), &g_logits, weights.kl * inv, g);
        }
    }
    out.loss = weights.nll * out.nll + weights.kl * out.kl;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss(out.loss));
    }
    Ok(out)
}

/// `(1/|B|) Σ_i [ NLL_i + γ Σ_ℓ KL_iℓ ]` with one fresh noise draw per
/// (sample, layer). Sample `i` of `batch` uses noise stream index `i`.
pub fn elbo_loss(model: &Model, batch: &[Sample], gamma: f64, key: NoiseKey) -> Result<LossBreakdown> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let ids: Vec<u64> = (0..batch.len() as u64).collect();
    batch_objective(model, &refs, &ids, LossWeights::elbo(gamma), key, None)
}

/// [`elbo_loss`] together with its gradient with respect to every trainable
/// parameter, flattened in [`TrainableParams::to_flat`] order.
pub fn elbo_loss_and_grad(
    model: &Model,
    batch: &[Sample],
    weights: LossWeights,
    key: NoiseKey,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let ids: Vec<u64> = (0..batch.len() as u64).collect();
    let mut grad = model.params.zeros_like();
    let loss = batch_objective(model, &refs, &ids, weights, key, Some(&mut grad))?;
    Ok((loss, grad.to_flat()))
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update. Decay `p ← p − lr·wd·p` is applied
/// separately from the adaptive step.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, opt: &AdamW) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::shape(
            "optimizer_step",
            (params.len(), grads.len()),
            (state.m.len(), state.v.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= opt.lr * opt.weight_decay * params[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// Epoch-averaged training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

/// Mini-batch AdamW on the ELBO. Each epoch shuffles with stream
/// `(Shuffle, epoch)`; sample `i` of `dataset` draws its noise from stream
/// `(Train, layer, i, epoch)`.
pub fn train(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    train_with_weights(model, dataset, config, LossWeights::elbo(config.gamma))
}

/// [`train`] with explicit term weights, e.g. a KL-only objective.
pub fn train_with_weights(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    weights: LossWeights,
) -> Result<(Model, Vec<EpochStats>)> {
    config.validate().map_err(|e| Error::Config(e.join("; ")))?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mut model = model.clone();
    let opt = AdamW::new(config.lr, config.weight_decay);
    let mut flat = model.params.to_flat();
    let mut state = OptimizerState::new(flat.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        SeededRng::new(config.seed, StreamId::new(Purpose::Shuffle, 0, 0, epoch as u64)).shuffle(&mut order);
        let key = NoiseKey {
            seed: config.seed,
            purpose: Purpose::Train,
            draw: epoch as u64,
        };
        let mut totals = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let mut grad = model.params.zeros_like();
            let b = batch_objective(&model, &batch, &ids, weights, key, Some(&mut grad))?;
            optimizer_step(&mut flat, &grad.to_flat(), &mut state, &opt)?;
            model.params.set_flat(&flat);
            let w = chunk.len() as f64 / dataset.len() as f64;
            totals.loss += b.loss * w;
            totals.nll += b.nll * w;
            totals.kl += b.kl * w;
        }
        history.push(EpochStats {
            epoch,
            loss: totals.loss,
            nll: totals.nll,
            kl: totals.kl,
        });
    }
    Ok((model, history))
}

/// Adds `N(0, std²)` noise to every trainable parameter, e.g. to move a
/// freshly initialized model (with `B = 0`) to a generic point before a
/// gradient check.
pub fn perturb_parameters(model: &mut Model, std: f64, seed: u64) {
    let mut rng = SeededRng::new(seed, StreamId::of(Purpose::Oracle));
    for t in model.params.tensors_mut() {
        let noise = rng.standard_normal(t.len());
        for (v, n) in t.data_mut().iter_mut().zip(noise) {
            *v += std * n;
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Name and element index of the worst coordinate.
    pub worst: (String, usize),
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Worst relative error per parameter group.
    pub per_group: Vec<(ParamGroup, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Default scale below which a gradient entry is compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Options for [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Minimum number of coordinates to sample (capped by the parameter count).
    pub coordinates: usize,
    pub step: f64,
    /// Denominator floor of [`relative_error`]. Central differences carry a
    /// roundoff of roughly `eps·|loss|/step`, so tighter tolerances need a
    /// larger floor.
    pub floor: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coordinates: 200,
            step: 1e-5,
            floor: GRAD_CHECK_FLOOR,
            weights: LossWeights::elbo(0.008),
            seed: 0,
        }
    }
}

/// Picks at least `target` coordinates, spread over every tensor in
/// proportion to its size with at least three from each tensor.
pub fn sample_coordinates(
    params: &TrainableParams,
    target: usize,
    seed: u64,
) -> Vec<(String, ParamGroup, usize, usize)> {
    let layout = params.layout();
    let total: usize = layout.iter().map(|e| e.3).sum();
    let mut rng = SeededRng::new(seed, StreamId::new(Purpose::Oracle, 0, 0, 1));
    let mut picks = Vec::new();
    for (name, group, offset, len) in layout {
        let share = (target * len).div_ceil(total.max(1));
        let k = share.max(3).min(len);
        let mut idx: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        for i in idx {
            picks.push((name.clone(), group, offset + i, i));
        }
    }
    picks
}

/// Compares analytic gradients of the weighted ELBO on `batch` against
/// central differences. Noise is keyed by `options.seed`, so every evaluation
/// sees the same `ξ` and the loss is a deterministic function of the
/// parameters.
pub fn gradient_check(model: &Model, batch: &[Sample], options: &GradCheckOptions) -> Result<GradCheckReport> {
    let key = NoiseKey {
        seed: options.seed,
        purpose: Purpose::Oracle,
        draw: 0,
    };
    let (_, analytic) = elbo_loss_and_grad(model, batch, options.weights, key)?;
    gradient_check_against(model, batch, options, &analytic)
}

/// [`gradient_check`] against a caller-supplied analytic gradient.
pub fn gradient_check_against(
    model: &Model,
    batch: &[Sample],
    options: &GradCheckOptions,
    analytic: &[f64],
) -> Result<GradCheckReport> {
    let key = NoiseKey {
        seed: options.seed,
        purpose: Purpose::Oracle,
        draw: 0,
    };
    let refs: Vec<&Sample> = batch.iter().collect();
    let ids: Vec<u64> = (0..batch.len() as u64).collect();
    let mut probe = model.clone();
    let mut failure = None;
    let mut loss_at = |p: &[f64]| -> f64 {
        probe.params.set_flat(p);
        match batch_objective(&probe, &refs, &ids, options.weights, key, None) {
            Ok(b) => b.loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let mut flat = model.params.to_flat();
    let coords = sample_coordinates(&model.params, options.coordinates, options.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
        checked: coords.len(),
        per_group: Vec::new(),
    };
    for (name, group, flat_idx, local_idx) in coords {
        let numeric = central_difference(&mut loss_at, &mut flat, flat_idx, options.step)?;
        let err = relative_error(analytic[flat_idx], numeric, options.floor);
        if report.worst.0.is_empty() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (name, local_idx);
            report.worst_values = (analytic[flat_idx], numeric);
        }
        match report.per_group.iter_mut().find(|(g, _)| *g == group) {
            Some((_, e)) => *e = e.max(err),
            None => report.per_group.push((group, err)),
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    report.per_group.sort_by_key(|(g, _)| *g);
    Ok(report)
}

/// Parameter groups a model of `family` is expected to expose.
pub fn expected_groups(family: Family) -> Vec<ParamGroup> {
    use ParamGroup::*;
    match family {
        Family::Lora => vec![LoraA, LoraB, Classifier],
        Family::Blob => vec![LoraB, BlobMean, BlobScale, Classifier],
        Family::CLora => vec![LoraA, LoraB, InferenceHead, Classifier],
        Family::Coco => vec![LoraA, LoraB, InferenceHead, ContextHead, Projector, Classifier],
        Family::Fusion => vec![Fusion],
    }
}
