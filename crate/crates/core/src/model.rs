//! A frozen backbone with one adapter family attached, its forward pass and
//! hand-written reverse pass.

use crate::adapters::{AdapterShape, AdapterStack, Family, LayerTrace, ParamGroup, ParameterCount, ProjectorTrace};
use crate::backbone::{ClassifierHead, FrozenBackbone, FusionTrace, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Purpose, SeededRng, StreamId};
use crate::variational::{kl_terms, DiagonalGaussian};

/// Architecture and posterior hyperparameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    /// Backbone width `d`; equals the text-feature length.
    pub width: usize,
    /// Number of frozen layers `L`.
    pub depth: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Shared audio-context dimension `c`.
    pub context_dim: usize,
    pub audio_dim: usize,
    pub projector_hidden: usize,
    pub classes: usize,
    pub residual: bool,
    /// Posterior scale `ε` of the scaled softplus.
    pub epsilon: f64,
    /// Additive floor `δ` on posterior standard deviations.
    pub delta_floor: f64,
    /// Prior standard deviation `β`.
    pub beta: f64,
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Coco,
            width: 32,
            depth: 4,
            rank: 8,
            alpha: 32.0,
            context_dim: 16,
            audio_dim: 64,
            projector_hidden: 32,
            classes: 2,
            residual: false,
            epsilon: 0.05,
            delta_floor: 1e-6,
            beta: 0.2,
            backbone_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Returns every violated constraint at once.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.width >= 1, "model.width must be >= 1".into());
        check(self.depth >= 1, "model.depth must be >= 1".into());
        check(self.rank >= 1, "model.rank must be >= 1".into());
        check(
            self.rank < self.width,
            format!(
                "model.rank ({}) must be smaller than model.width ({})",
                self.rank, self.width
            ),
        );
        check(self.alpha > 0.0, "model.alpha must be > 0".into());
        check(self.context_dim >= 1, "model.context_dim must be >= 1".into());
        check(self.audio_dim >= 1, "model.audio_dim must be >= 1".into());
        check(self.projector_hidden >= 1, "model.projector_hidden must be >= 1".into());
        check(self.classes >= 2, "model.classes must be >= 2".into());
        check(self.epsilon > 0.0, "model.epsilon must be > 0".into());
        check(self.delta_floor >= 0.0, "model.delta_floor must be >= 0".into());
        check(self.beta > 0.0, "model.beta must be > 0".into());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Fully resolved `model.*` entries, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("model.{k}"), v);
        vec![
            kv("family", self.family.name().to_string()),
            kv("width", self.width.to_string()),
            kv("depth", self.depth.to_string()),
            kv("rank", self.rank.to_string()),
            kv("alpha", self.alpha.to_string()),
            kv("context_dim", self.context_dim.to_string()),
            kv("audio_dim", self.audio_dim.to_string()),
            kv("projector_hidden", self.projector_hidden.to_string()),
            kv("classes", self.classes.to_string()),
            kv("residual", self.residual.to_string()),
            kv("epsilon", self.epsilon.to_string()),
            kv("delta_floor", self.delta_floor.to_string()),
            kv("beta", self.beta.to_string()),
            kv("backbone_seed", self.backbone_seed.to_string()),
        ]
    }

    /// Sets one field from its `entries` key (with or without the `model.`
    /// prefix).
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
        }
        let field = key.strip_prefix("model.").unwrap_or(key);
        match field {
            "family" => self.family = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "rank" => self.rank = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "context_dim" => self.context_dim = parse(key, value)?,
            "audio_dim" => self.audio_dim = parse(key, value)?,
            "projector_hidden" => self.projector_hidden = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "residual" => self.residual = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "delta_floor" => self.delta_floor = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "backbone_seed" => self.backbone_seed = parse(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn adapter_shape(&self) -> AdapterShape {
        AdapterShape {
            width: self.width,
            depth: self.depth,
            rank: self.rank,
            alpha: self.alpha,
            context_dim: self.context_dim,
            audio_dim: self.audio_dim,
            projector_hidden: self.projector_hidden,
            classes: self.classes,
            epsilon: self.epsilon,
            delta_floor: self.delta_floor,
        }
    }
}

/// Everything the optimizer updates. Also used, zeroed, as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    /// Absent for the fusion baseline, whose MLP produces the logits.
    pub classifier: Option<ClassifierHead>,
    pub adapters: AdapterStack,
}

impl TrainableParams {
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        if let Some(c) = &self.classifier {
            out.push(("classifier.W".to_string(), ParamGroup::Classifier, &c.map.weight));
            out.push(("classifier.b".to_string(), ParamGroup::Classifier, &c.map.bias));
        }
        out.extend(self.adapters.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(c) = &mut self.classifier {
            out.push(&mut c.map.weight);
            out.push(&mut c.map.bias);
        }
        out.extend(self.adapters.tensors_mut());
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All trainable values concatenated in [`TrainableParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, _, m) in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, group, offset, len)` for every tensor in flat order.
    pub fn layout(&self) -> Vec<(String, ParamGroup, usize, usize)> {
        let mut offset = 0;
        self.tensors()
            .into_iter()
            .map(|(name, group, m)| {
                let entry = (name, group, offset, m.len());
                offset += m.len();
                entry
            })
            .collect()
    }
}

/// Source of the standard-normal noise `ξ` for each adapted layer.
pub trait NoiseSource {
    fn draw(&self, layer: usize, n: usize) -> Vec<f64>;
}

/// Noise keyed by `(seed, purpose, layer, sample, draw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyedNoise {
    pub seed: u64,
    pub purpose: Purpose,
    pub sample: u64,
    pub draw: u64,
}

impl NoiseSource for KeyedNoise {
    fn draw(&self, layer: usize, n: usize) -> Vec<f64> {
        let stream = StreamId::new(self.purpose, layer as u64, self.sample, self.draw);
        SeededRng::new(self.seed, stream).standard_normal(n)
    }
}

/// `ξ = 0`: sampling collapses onto the posterior mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&self, _layer: usize, n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}

#[derive(Clone, Copy)]
pub enum Mode<'a> {
    /// Use the posterior mean of every stochastic quantity.
    Mean,
    /// Draw one reparameterized sample per layer.
    Sample(&'a dyn NoiseSource),
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Sum over layers of `KL(q ‖ N(0, β²I))`; zero for deterministic families.
    pub kl: f64,
    pub posteriors: Vec<DiagonalGaussian>,
}

pub(crate) struct Tape {
    layer_inputs: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    layers: Vec<LayerTrace>,
    context: Option<ProjectorTrace>,
    fusion: Option<FusionTrace>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub kl: f64,
}

impl Tape {
    pub fn posteriors(&self) -> impl Iterator<Item = &DiagonalGaussian> {
        self.layers.iter().filter_map(LayerTrace::posterior)
    }
}

/// A frozen backbone plus trainable classifier and adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    backbone: FrozenBackbone,
    pub params: TrainableParams,
}

impl Model {
    /// Builds a model with a fresh backbone from `config.backbone_seed` and
    /// trainable parameters initialized from `init_seed`.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate().map_err(|e| Error::Config(e.join("; ")))?;
        let backbone = FrozenBackbone::random(config.width, config.depth, config.residual, config.backbone_seed);
        let adapters = AdapterStack::init(config.family, &config.adapter_shape(), init_seed);
        let classifier = (config.family != Family::Fusion).then(|| {
            let mut rng = SeededRng::new(init_seed, StreamId::of(Purpose::Init));
            ClassifierHead {
                map: Linear::random(
                    config.classes,
                    config.width,
                    1.0 / (config.width as f64).sqrt(),
                    &mut rng,
                ),
            }
        });
        Ok(Model {
            config,
            backbone,
            params: TrainableParams { classifier, adapters },
        })
    }

    /// Reassembles a model from its parts, checking that shapes agree.
    pub fn from_parts(config: ModelConfig, backbone: FrozenBackbone, params: TrainableParams) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        let expect = reference.params.tensors();
        let got = params.tensors();
        if expect.len() != got.len() {
            return Err(Error::Config(format!(
                "expected {} trainable tensors, found {}",
                expect.len(),
                got.len()
            )));
        }
        for ((en, _, em), (gn, _, gm)) in expect.iter().zip(&got) {
            if en != gn || em.shape() != gm.shape() {
                return Err(Error::shape("Model::from_parts", em.shape(), gm.shape()));
            }
        }
        if backbone.width() != config.width || backbone.depth() != config.depth {
            return Err(Error::shape(
                "Model::from_parts",
                (config.width, config.depth),
                (backbone.width(), backbone.depth()),
            ));
        }
        Ok(Model {
            config,
            backbone,
            params,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.backbone.checksum()
    }

    pub fn forward(&self, x: &[f64], audio: Option<&[f64]>, mode: Mode<'_>) -> Result<ForwardOutput> {
        let tape = self.trace(x, audio, mode)?;
        let posteriors = tape.posteriors().cloned().collect();
        Ok(ForwardOutput {
            logits: tape.logits,
            kl: tape.kl,
            posteriors,
        })
    }

    pub(crate) fn trace(&self, x: &[f64], audio: Option<&[f64]>, mode: Mode<'_>) -> Result<Tape> {
        let d = self.config.width;
        if x.len() != d {
            return Err(Error::shape("backbone_forward", (d, 1), (x.len(), 1)));
        }
        let family = self.family();
        if family.consumes_audio() && audio.is_none() {
            return Err(Error::MissingAudio { family: family.name() });
        }

        // The fusion baseline reads the text features directly; the frozen
        // layers are not used.
        if let AdapterStack::Fusion(head) = &self.params.adapters {
            let t = head.trace(x, audio.expect("checked above"))?;
            return Ok(Tape {
                layer_inputs: Vec::new(),
                activations: Vec::new(),
                layers: Vec::new(),
                context: None,
                logits: t.logits.clone(),
                fusion: Some(t),
                hidden: x.to_vec(),
                kl: 0.0,
            });
        }

        let context = match &self.params.adapters {
            AdapterStack::Coco { projector, .. } => {
                let a = audio.expect("checked above");
                if a.len() != projector.audio_dim() {
                    return Err(Error::shape("project_audio", (projector.audio_dim(), 1), (a.len(), 1)));
                }
                Some(projector.trace(a)?)
            }
            _ => None,
        };

        let depth = self.backbone.depth();
        let mut layer_inputs = Vec::with_capacity(depth);
        let mut activations = Vec::with_capacity(depth);
        let mut layers = Vec::with_capacity(depth);
        let mut kl = 0.0;
        let mut h = x.to_vec();
        let act = self.backbone.activation();
        for l in 0..depth {
            let xi = match mode {
                Mode::Mean => None,
                Mode::Sample(noise) => {
                    let n = self.params.adapters.noise_dim(l);
                    (n > 0).then(|| noise.draw(l, n))
                }
            };
            let trace =
                self.params
                    .adapters
                    .layer_trace(l, &h, context.as_ref().map(|c| c.u.as_slice()), xi.as_deref())?;
            if let Some(q) = trace.posterior() {
                kl += kl_terms(&q.mu, &q.sigma, self.config.beta);
            }
            let mut pre = self.backbone.layers()[l].forward(&h)?;
            for (p, dv) in pre.iter_mut().zip(trace.delta()) {
                *p += dv;
            }
            let a: Vec<f64> = pre.into_iter().map(|v| act.apply(v)).collect();
            let mut out = a.clone();
            if self.backbone.residual() {
                for (o, xi) in out.iter_mut().zip(&h) {
                    *o += xi;
                }
            }
            layer_inputs.push(std::mem::replace(&mut h, out));
            activations.push(a);
            layers.push(trace);
        }
        let logits = self
            .params
            .classifier
            .as_ref()
            .expect("non-fusion models have a classifier")
            .logits(&h)?;
        Ok(Tape {
            layer_inputs,
            activations,
            layers,
            context,
            fusion: None,
            hidden: h,
            logits,
            kl,
        })
    }

    /// Accumulates `∂/∂θ [ loss(logits) + kl_weight · KL ]` into `grad`, where
    /// `g_logits = ∂loss/∂logits`.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        audio: Option<&[f64]>,
        g_logits: &[f64],
        kl_weight: f64,
        grad: &mut TrainableParams,
    ) {
        if let (AdapterStack::Fusion(head), AdapterStack::Fusion(g)) = (&self.params.adapters, &mut grad.adapters) {
            head.backward(tape.fusion.as_ref().expect("fusion tape"), g_logits, g);
            return;
        }
        let classifier = self.params.classifier.as_ref().expect("classifier");
        let g_classifier = grad.classifier.as_mut().expect("classifier gradient");
        let mut g_h = classifier.map.backward(&tape.hidden, g_logits, &mut g_classifier.map);

        let u = tape.context.as_ref().map(|c| c.u.as_slice());
        let mut g_u = u.map(|u| vec![0.0; u.len()]);
        let act = self.backbone.activation();
        for l in (0..tape.layers.len()).rev() {
            let g_pre: Vec<f64> = g_h
                .iter()
                .zip(&tape.activations[l])
                .map(|(g, a)| g * act.derivative_from_output(*a))
                .collect();
            let mut g_x = self.backbone.layers()[l]
                .w0()
                .matvec_t(&g_pre)
                .expect("frozen layer is square");
            if self.backbone.residual() {
                crate::numerics::add_assign(&mut g_x, &g_h);
            }
            let (g_xa, g_ul) = self.params.adapters.layer_backward(
                l,
                &tape.layer_inputs[l],
                u,
                &tape.layers[l],
                &g_pre,
                kl_weight,
                self.config.beta,
                &mut grad.adapters,
            );
            crate::numerics::add_assign(&mut g_x, &g_xa);
            if let (Some(acc), Some(g)) = (g_u.as_mut(), g_ul) {
                crate::numerics::add_assign(acc, &g);
            }
            g_h = g_x;
        }

        if let (
            AdapterStack::Coco { projector, .. },
            AdapterStack::Coco { projector: g_proj, .. },
            Some(ctx),
            Some(g_u),
        ) = (&self.params.adapters, &mut grad.adapters, &tape.context, &g_u)
        {
            projector.backward(audio.expect("coco audio"), ctx, g_u, g_proj);
        }
    }

    /// Average of `‖σ‖` over layers for the posterior at `(x, a)`; zero for
    /// deterministic families.
    pub fn mean_sigma_norm(&self, x: &[f64], audio: Option<&[f64]>) -> Result<f64> {
        let out = self.forward(x, audio, Mode::Mean)?;
        if out.posteriors.is_empty() {
            return Ok(0.0);
        }
        Ok(out.posteriors.iter().map(DiagonalGaussian::sigma_norm).sum::<f64>() / out.posteriors.len() as f64)
    }

    /// Exact trainable-parameter breakdown.
    pub fn parameter_count(&self) -> ParameterCount {
        trainable_parameter_count(self)
    }
}

/// `backbone_forward` over a model: frozen layers plus adapter deltas, then
/// the classifier head.
pub fn backbone_forward(model: &Model, x: &[f64], audio: Option<&[f64]>, mode: Mode<'_>) -> Result<ForwardOutput> {
    model.forward(x, audio, mode)
}

/// Counts trainable parameters by component, read off the actual tensors.
pub fn trainable_parameter_count(model: &Model) -> ParameterCount {
    let depth = model.config.depth.max(1);
    let mut c = ParameterCount::default();
    for (_, group, m) in model.params.tensors() {
        let n = m.len();
        match group {
            ParamGroup::LoraA | ParamGroup::LoraB | ParamGroup::BlobMean => c.lora_factors_per_layer += n,
            ParamGroup::BlobScale => c.blob_scale_per_layer += n,
            ParamGroup::InferenceHead => c.inference_head_per_layer += n,
            ParamGroup::ContextHead => c.context_head_per_layer += n,
            ParamGroup::Projector => c.projector += n,
            ParamGroup::Classifier => c.classifier += n,
            ParamGroup::Fusion => c.fusion += n,
        }
        c.total += n;
    }
    c.lora_factors_per_layer /= depth;
    c.blob_scale_per_layer /= depth;
    c.inference_head_per_layer /= depth;
    c.context_head_per_layer /= depth;
    c.stochastic_per_layer = match model.family() {
        Family::Lora | Family::Fusion => 0,
        Family::Blob => c.blob_scale_per_layer,
        Family::CLora | Family::Coco => model.config.rank * model.config.rank,
    };
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: Family) -> ModelConfig {
        ModelConfig {
            family,
            width: 16,
            depth: 2,
            rank: 4,
            context_dim: 6,
            audio_dim: 10,
            backbone_seed: 5,
            ..ModelConfig::default()
        }
    }

    fn randomize(model: &mut Model, std: f64, seed: u64) {
        let mut rng = SeededRng::new(seed, StreamId::of(Purpose::Oracle));
        for m in model.params.tensors_mut() {
            for v in m.data_mut() {
                *v += std * rng.standard_normal(1)[0];
            }
        }
    }

    fn input(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = SeededRng::new(seed, StreamId::new(Purpose::Oracle, 9, 0, 0));
        (rng.standard_normal(16), rng.standard_normal(10))
    }

    fn noise(draw: u64) -> KeyedNoise {
        KeyedNoise {
            seed: 1,
            purpose: Purpose::Predict,
            sample: 0,
            draw,
        }
    }

    #[test]
    fn zero_b_matches_frozen_forward() {
        let (x, a) = input(0);
        for family in [Family::Lora, Family::Blob, Family::CLora, Family::Coco] {
            let model = Model::new(small(family), 3).unwrap();
            let h = model.backbone().features(&x).unwrap();
            let want = model.params.classifier.as_ref().unwrap().logits(&h).unwrap();
            let got = model.forward(&x, Some(&a), Mode::Sample(&noise(0))).unwrap();
            assert_eq!(got.logits, want, "{family}");
        }
    }

    #[test]
    fn mean_mode_is_deterministic_and_zero_noise_matches_it() {
        let (x, a) = input(1);
        for family in Family::ALL {
            let mut model = Model::new(small(family), 3).unwrap();
            randomize(&mut model, 0.1, 2);
            let m1 = model.forward(&x, Some(&a), Mode::Mean).unwrap();
            let m2 = model.forward(&x, Some(&a), Mode::Mean).unwrap();
            assert_eq!(m1, m2);
            let z = model.forward(&x, Some(&a), Mode::Sample(&ZeroNoise)).unwrap();
            assert_eq!(z.logits, m1.logits, "{family}");
        }
    }

    #[test]
    fn floor_sample_matches_mean() {
        let (x, a) = input(2);
        for family in [Family::Blob, Family::CLora, Family::Coco] {
            let mut model = Model::new(small(family), 3).unwrap();
            randomize(&mut model, 0.1, 4);
            model.params.adapters.pin_sigma_to_floor();
            let mean = model.forward(&x, Some(&a), Mode::Mean).unwrap();
            let sample = model.forward(&x, Some(&a), Mode::Sample(&noise(3))).unwrap();
            for (p, q) in mean.logits.iter().zip(&sample.logits) {
                assert!((p - q).abs() < 1e-3, "{family}");
            }
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_for_lora() {
        for seed in 0..5 {
            let (x, a) = input(seed);
            for family in Family::ALL {
                let mut model = Model::new(small(family), seed).unwrap();
                randomize(&mut model, 0.2, seed);
                let out = model.forward(&x, Some(&a), Mode::Sample(&noise(seed))).unwrap();
                assert!(out.kl >= 0.0);
                if !family.is_stochastic() {
                    assert_eq!(out.kl, 0.0);
                    assert!(out.posteriors.is_empty());
                }
            }
        }
    }

    #[test]
    fn reduction_chain() {
        let (x, a) = input(3);
        let mut coco = Model::new(small(Family::Coco), 6).unwrap();
        randomize(&mut coco, 0.2, 6);
        let AdapterStack::Coco { layers, .. } = &mut coco.params.adapters else {
            unreachable!()
        };
        let clora_layers: Vec<_> = layers
            .iter_mut()
            .map(|l| {
                l.zero_audio_half();
                l.text_only()
            })
            .collect();
        let mut clora = Model::new(small(Family::CLora), 0).unwrap();
        clora.params.classifier = coco.params.classifier.clone();
        clora.params.adapters = AdapterStack::CLora(clora_layers);

        for mode in [Mode::Mean, Mode::Sample(&noise(1))] {
            let p = coco.forward(&x, Some(&a), mode).unwrap();
            let q = clora.forward(&x, None, mode).unwrap();
            for (u, v) in p.logits.iter().zip(&q.logits) {
                assert!((u - v).abs() < 1e-12);
            }
        }

        clora.params.adapters.pin_identity_mean();
        clora.params.adapters.pin_sigma_to_floor();
        let AdapterStack::CLora(layers) = &clora.params.adapters else {
            unreachable!()
        };
        let mut lora = Model::new(small(Family::Lora), 0).unwrap();
        lora.params.classifier = clora.params.classifier.clone();
        lora.params.adapters = AdapterStack::Lora(layers.iter().map(|l| l.factors.clone()).collect());
        let want = lora.forward(&x, None, Mode::Mean).unwrap().logits;
        // The mean path is exact; a floor-scale draw moves logits by O(δ·s).
        for (mode, tol) in [(Mode::Mean, 1e-6), (Mode::Sample(&noise(2)), 1e-3)] {
            let got = clora.forward(&x, None, mode).unwrap().logits;
            for (u, v) in got.iter().zip(&want) {
                assert!((u - v).abs() < tol, "{u} {v}");
            }
        }
    }

    #[test]
    fn parameter_counts() {
        let lora = Model::new(
            ModelConfig {
                family: Family::Lora,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(lora.parameter_count().lora_factors_per_layer, 512);
        let coco = Model::new(ModelConfig::default(), 0).unwrap();
        let c = coco.parameter_count();
        assert_eq!(c.stochastic_per_layer, 64);
        assert_eq!(c.inference_head_per_layer, 2176);
        assert_eq!(c.total, coco.params.len());
        let stochastic: Vec<_> = [16, 32, 64]
            .iter()
            .map(|&width| {
                let m = Model::new(
                    ModelConfig {
                        width,
                        ..ModelConfig::default()
                    },
                    0,
                )
                .unwrap();
                let c = m.parameter_count();
                (c.stochastic_per_layer, c.inference_head_per_layer)
            })
            .collect();
        assert!(stochastic.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn from_parts_rejects_mismatched_shapes() {
        let a = Model::new(small(Family::Coco), 0).unwrap();
        let b = Model::new(small(Family::CLora), 0).unwrap();
        assert!(Model::from_parts(a.config.clone(), a.backbone().clone(), b.params.clone()).is_err());
        assert!(Model::from_parts(a.config.clone(), a.backbone().clone(), a.params.clone()).is_ok());
    }

    #[test]
    fn missing_audio_is_rejected() {
        let model = Model::new(small(Family::Coco), 0).unwrap();
        let (x, _) = input(0);
        assert!(model.forward(&x, None, Mode::Mean).is_err());
        assert!(model.forward(&x[..5], None, Mode::Mean).is_err());
    }
}
