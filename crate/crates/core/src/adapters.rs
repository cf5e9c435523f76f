//! Low-rank adapter families and the audio context pathway.
//!
//! Every family adds a delta to the pre-activation of a frozen layer:
//!
//! * `lora`   – `s·B·A·x`
//! * `blob`   – `s·B·A·x` with `A ~ N(mu_A, omega_A²)` elementwise
//! * `clora`  – `s·B·E·z`, `z = A·x`, `vec(E) ~ q(· | z)`
//! * `coco`   – `s·B·E·z`, `vec(E) ~ q(· | [z; G(P(a))])`
//!
//! with `s = alpha / r`. `E` is `r×r`, stored row-major, so its posterior has
//! exactly `r²` coordinates regardless of the backbone width.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{FusionHead, Linear};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Matrix, SeededRng};
use crate::variational::{kl_grad_accumulate, DiagonalGaussian};

/// Adapter family tag. The discriminant is the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Family {
    Lora = 0,
    Blob = 1,
    CLora = 2,
    Coco = 3,
    Fusion = 4,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Lora, Family::Blob, Family::CLora, Family::Coco, Family::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Family::Lora => "lora",
            Family::Blob => "blob",
            Family::CLora => "clora",
            Family::Coco => "coco",
            Family::Fusion => "fusion",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.tag() == tag)
    }

    /// Whether samples must carry an audio embedding.
    pub fn consumes_audio(self) -> bool {
        matches!(self, Family::Coco | Family::Fusion)
    }

    /// Whether the family has a posterior (and therefore a KL term).
    pub fn is_stochastic(self) -> bool {
        matches!(self, Family::Blob | Family::CLora | Family::Coco)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown adapter family `{s}`")))
    }
}

/// Deterministic low-rank factors `A (r×d)` and `B (d×r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.rows() != b.cols() || a.cols() != b.rows() {
            return Err(Error::shape("LoraFactors::new", a.shape(), b.shape()));
        }
        Ok(LoraFactors { a, b, alpha })
    }

    /// `A ~ N(0, 1/d)`, `B = 0`.
    pub fn init(width: usize, rank: usize, alpha: f64, rng: &mut SeededRng) -> Self {
        LoraFactors {
            a: Matrix::random_normal(rank, width, 1.0 / (width as f64).sqrt(), rng),
            b: Matrix::zeros(width, rank),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn width(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `s·B·v` for a rank-space vector `v`.
    fn expand(&self, v: &[f64]) -> Vec<f64> {
        let s = self.scale();
        self.b
            .matvec(v)
            .expect("rank-space vector has length r")
            .into_iter()
            .map(|x| s * x)
            .collect()
    }
}

/// `s·B·(A·x)`; the `d×d` product is never formed.
pub fn lora_delta(factors: &LoraFactors, x: &[f64]) -> Result<Vec<f64>> {
    let z = factors.a.matvec(x)?;
    Ok(factors.expand(&z))
}

/// Two-layer perceptron `d_a → hidden → c` with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioProjector {
    pub hidden: Linear,
    pub out: Linear,
}

pub(crate) struct ProjectorTrace {
    pub hidden: Vec<f64>,
    pub u: Vec<f64>,
}

impl AudioProjector {
    pub fn init(audio_dim: usize, hidden: usize, context_dim: usize, rng: &mut SeededRng) -> Self {
        AudioProjector {
            hidden: Linear::random(hidden, audio_dim, 0.02, rng),
            out: Linear::random(context_dim, hidden, 0.02, rng),
        }
    }

    pub fn audio_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn context_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub(crate) fn trace(&self, a: &[f64]) -> Result<ProjectorTrace> {
        let hidden: Vec<f64> = self.hidden.forward(a)?.into_iter().map(f64::tanh).collect();
        let u = self.out.forward(&hidden)?;
        Ok(ProjectorTrace { hidden, u })
    }

    pub(crate) fn backward(&self, a: &[f64], t: &ProjectorTrace, g_u: &[f64], grad: &mut AudioProjector) {
        let g_h = self.out.backward(&t.hidden, g_u, &mut grad.out);
        let g_pre: Vec<f64> = g_h.iter().zip(&t.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
        let _ = self.hidden.backward(a, &g_pre, &mut grad.hidden);
    }
}

/// Shared audio context `u = P(a)`, computed once per sample.
pub fn project_audio(p: &AudioProjector, a: &[f64]) -> Result<Vec<f64>> {
    Ok(p.trace(a)?.u)
}

/// Per-layer linear map from the shared context into rank space.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerContextHead {
    pub map: Linear,
}

pub fn adapt_context(g: &LayerContextHead, u: &[f64]) -> Result<Vec<f64>> {
    g.map.forward(u)
}

/// Amortized posterior head. Its `2r²` outputs are split into the mean and the
/// pre-softplus log-variance of `vec(E)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceHead {
    pub map: Linear,
    pub epsilon: f64,
    pub delta_floor: f64,
}

impl InferenceHead {
    pub fn latent_dim(&self) -> usize {
        self.map.out_dim() / 2
    }

    pub fn input_dim(&self) -> usize {
        self.map.in_dim()
    }

    /// Makes `σ = δ` exactly for every input by zeroing the scale half of the
    /// map and pushing its bias far below the softplus underflow point.
    pub fn pin_sigma_to_floor(&mut self) {
        let n = self.latent_dim();
        for i in n..2 * n {
            for j in 0..self.map.in_dim() {
                self.map.weight.set(i, j, 0.0);
            }
            self.map.bias.set(i, 0, SIGMA_PIN_BIAS);
        }
    }

    /// Makes the posterior mean the constant `mu` for every input.
    pub fn pin_mean(&mut self, mu: &[f64]) {
        assert_eq!(mu.len(), self.latent_dim(), "pin_mean length");
        for (i, &m) in mu.iter().enumerate() {
            for j in 0..self.map.in_dim() {
                self.map.weight.set(i, j, 0.0);
            }
            self.map.bias.set(i, 0, m);
        }
    }

    fn posterior_from_raw(&self, raw: &[f64]) -> DiagonalGaussian {
        let n = self.latent_dim();
        let mu = raw[..n].to_vec();
        let sigma = raw[n..]
            .iter()
            .map(|&v| self.epsilon * softplus(v) + self.delta_floor)
            .collect();
        DiagonalGaussian { mu, sigma }
    }
}

/// `mu = H(eta)[..r²]`, `sigma = ε·softplus(H(eta)[r²..]) + δ`.
pub fn infer_posterior(h: &InferenceHead, eta: &[f64]) -> Result<DiagonalGaussian> {
    let raw = h.map.forward(eta)?;
    Ok(h.posterior_from_raw(&raw))
}

/// Rank-space layer conditioned on `z` only.
#[derive(Debug, Clone, PartialEq)]
pub struct CLoraLayer {
    pub factors: LoraFactors,
    pub head: InferenceHead,
}

/// Rank-space layer conditioned on `[z; G(u)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoLayer {
    pub factors: LoraFactors,
    pub context: LayerContextHead,
    pub head: InferenceHead,
}

impl CocoLayer {
    /// Zeros the inference-head columns that read the audio context.
    pub fn zero_audio_half(&mut self) {
        let r = self.factors.rank();
        let w = &mut self.head.map.weight;
        for i in 0..w.rows() {
            for j in r..w.cols() {
                w.set(i, j, 0.0);
            }
        }
    }

    /// The C-LoRA layer that keeps only the `z` columns of the inference
    /// head. Equivalent to `self` once the audio half is zero.
    pub fn text_only(&self) -> CLoraLayer {
        let r = self.factors.rank();
        let w = &self.head.map.weight;
        let mut text = Matrix::zeros(w.rows(), r);
        for i in 0..w.rows() {
            for j in 0..r {
                text.set(i, j, w.get(i, j));
            }
        }
        CLoraLayer {
            factors: self.factors.clone(),
            head: InferenceHead {
                map: Linear {
                    weight: text,
                    bias: self.head.map.bias.clone(),
                },
                ..self.head.clone()
            },
        }
    }
}

/// Forward intermediates of a contextual (C-LoRA / CoCo) layer.
#[derive(Debug, Clone)]
pub(crate) struct ContextualTrace {
    pub z: Vec<f64>,
    pub ctx: Option<Vec<f64>>,
    pub eta: Vec<f64>,
    pub raw: Vec<f64>,
    pub q: DiagonalGaussian,
    pub xi: Option<Vec<f64>>,
    pub e: Vec<f64>,
    pub w: Vec<f64>,
    pub delta: Vec<f64>,
}

fn contextual_trace(
    factors: &LoraFactors,
    head: &InferenceHead,
    x: &[f64],
    ctx: Option<Vec<f64>>,
    xi: Option<&[f64]>,
) -> Result<ContextualTrace> {
    let r = factors.rank();
    let z = factors.a.matvec(x)?;
    let mut eta = z.clone();
    if let Some(c) = &ctx {
        eta.extend_from_slice(c);
    }
    let raw = head.map.forward(&eta)?;
    let q = head.posterior_from_raw(&raw);
    let e = match xi {
        Some(xi) => crate::variational::reparameterize(&q, xi)?,
        None => q.mu.clone(),
    };
    // w = E z with E reshaped row-major to r×r.
    let w: Vec<f64> = e.chunks_exact(r).map(|row| crate::numerics::dot(row, &z)).collect();
    let delta = factors.expand(&w);
    Ok(ContextualTrace {
        z,
        ctx,
        eta,
        raw,
        q,
        xi: xi.map(<[f64]>::to_vec),
        e,
        w,
        delta,
    })
}

/// Gradients of a contextual layer. Returns `(∂/∂x, ∂/∂ctx)`.
#[allow(clippy::too_many_arguments)]
fn contextual_backward(
    factors: &LoraFactors,
    head: &InferenceHead,
    x: &[f64],
    t: &ContextualTrace,
    g_delta: &[f64],
    kl_weight: f64,
    beta: f64,
    g_factors: &mut LoraFactors,
    g_head: &mut InferenceHead,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let r = factors.rank();
    let n = r * r;
    let s = factors.scale();
    g_factors.b.add_outer(s, g_delta, &t.w);
    let g_w: Vec<f64> = factors
        .b
        .matvec_t(g_delta)
        .expect("delta has width d")
        .into_iter()
        .map(|v| s * v)
        .collect();

    // w_i = Σ_j E_ij z_j
    let mut g_e = vec![0.0; n];
    let mut g_z = vec![0.0; r];
    for i in 0..r {
        for j in 0..r {
            g_e[i * r + j] = g_w[i] * t.z[j];
            g_z[j] += t.e[i * r + j] * g_w[i];
        }
    }

    let mut g_mu = g_e.clone();
    let mut g_sigma = match &t.xi {
        Some(xi) => g_e.iter().zip(xi).map(|(g, e)| g * e).collect(),
        None => vec![0.0; n],
    };
    if kl_weight != 0.0 {
        kl_grad_accumulate(&t.q.mu, &t.q.sigma, beta, kl_weight, &mut g_mu, &mut g_sigma);
    }
    let mut g_raw = g_mu;
    g_raw.extend(
        g_sigma
            .iter()
            .zip(&t.raw[n..])
            .map(|(g, v)| g * head.epsilon * sigmoid(*v)),
    );
    let g_eta = head.map.backward(&t.eta, &g_raw, &mut g_head.map);
    for j in 0..r {
        g_z[j] += g_eta[j];
    }
    let g_ctx = t.ctx.as_ref().map(|_| g_eta[r..].to_vec());

    g_factors.a.add_outer(1.0, &g_z, x);
    let g_x = factors.a.matvec_t(&g_z).expect("z has length r");
    (g_x, g_ctx)
}

/// CoCo layer delta for input `x` and shared context `u`. `xi = None` selects
/// the posterior mean.
pub fn coco_layer_delta(
    layer: &CocoLayer,
    x: &[f64],
    u: &[f64],
    xi: Option<&[f64]>,
) -> Result<(Vec<f64>, DiagonalGaussian)> {
    let t = coco_trace(layer, x, u, xi)?;
    Ok((t.delta, t.q))
}

pub(crate) fn coco_trace(layer: &CocoLayer, x: &[f64], u: &[f64], xi: Option<&[f64]>) -> Result<ContextualTrace> {
    let ctx = adapt_context(&layer.context, u)?;
    contextual_trace(&layer.factors, &layer.head, x, Some(ctx), xi)
}

/// C-LoRA layer delta; identical to [`coco_layer_delta`] without the context half.
pub fn clora_layer_delta(layer: &CLoraLayer, x: &[f64], xi: Option<&[f64]>) -> Result<(Vec<f64>, DiagonalGaussian)> {
    let t = clora_trace(layer, x, xi)?;
    Ok((t.delta, t.q))
}

pub(crate) fn clora_trace(layer: &CLoraLayer, x: &[f64], xi: Option<&[f64]>) -> Result<ContextualTrace> {
    contextual_trace(&layer.factors, &layer.head, x, None, xi)
}

/// Input-independent mean-field posterior over `A`; `B` stays deterministic.
/// `omega_A = ε·softplus(rho_A) + δ`, so the stored `rho_A` is unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobAdapter {
    pub b: Matrix,
    pub mu_a: Matrix,
    pub rho_a: Matrix,
    pub alpha: f64,
    pub epsilon: f64,
    pub delta_floor: f64,
}

pub(crate) struct BlobTrace {
    pub a: Matrix,
    pub q: DiagonalGaussian,
    pub xi: Option<Vec<f64>>,
    pub w: Vec<f64>,
    pub delta: Vec<f64>,
}

impl BlobAdapter {
    pub fn rank(&self) -> usize {
        self.mu_a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn omega(&self) -> Vec<f64> {
        self.rho_a
            .data()
            .iter()
            .map(|&v| self.epsilon * softplus(v) + self.delta_floor)
            .collect()
    }

    /// Flattened posterior over `vec(A)`; independent of any input.
    pub fn posterior(&self) -> DiagonalGaussian {
        DiagonalGaussian {
            mu: self.mu_a.data().to_vec(),
            sigma: self.omega(),
        }
    }
}

pub(crate) fn blob_trace(adapter: &BlobAdapter, x: &[f64], xi: Option<&[f64]>) -> Result<BlobTrace> {
    let q = adapter.posterior();
    let a_data = match xi {
        Some(xi) => crate::variational::reparameterize(&q, xi)?,
        None => q.mu.clone(),
    };
    let a = Matrix::new(adapter.mu_a.rows(), adapter.mu_a.cols(), a_data)?;
    let w = a.matvec(x)?;
    let s = adapter.scale();
    let delta = adapter.b.matvec(&w)?.into_iter().map(|v| s * v).collect();
    Ok(BlobTrace {
        a,
        q,
        xi: xi.map(<[f64]>::to_vec),
        w,
        delta,
    })
}

fn blob_backward(
    adapter: &BlobAdapter,
    x: &[f64],
    t: &BlobTrace,
    g_delta: &[f64],
    kl_weight: f64,
    beta: f64,
    grad: &mut BlobAdapter,
) -> Vec<f64> {
    let s = adapter.scale();
    grad.b.add_outer(s, g_delta, &t.w);
    let g_w: Vec<f64> = adapter
        .b
        .matvec_t(g_delta)
        .expect("delta has width d")
        .into_iter()
        .map(|v| s * v)
        .collect();
    let g_x = t.a.matvec_t(&g_w).expect("w has length r");
    let mut g_a = Matrix::zeros(t.a.rows(), t.a.cols());
    g_a.add_outer(1.0, &g_w, x);

    let n = g_a.len();
    let mut g_mu = g_a.data().to_vec();
    let mut g_sigma = match &t.xi {
        Some(xi) => g_a.data().iter().zip(xi).map(|(g, e)| g * e).collect(),
        None => vec![0.0; n],
    };
    if kl_weight != 0.0 {
        kl_grad_accumulate(&t.q.mu, &t.q.sigma, beta, kl_weight, &mut g_mu, &mut g_sigma);
    }
    for (dst, g) in grad.mu_a.data_mut().iter_mut().zip(&g_mu) {
        *dst += g;
    }
    for ((dst, g), rho) in grad.rho_a.data_mut().iter_mut().zip(&g_sigma).zip(adapter.rho_a.data()) {
        *dst += g * adapter.epsilon * sigmoid(*rho);
    }
    g_x
}

/// BLoB layer delta. `xi` has `r·d` entries; `None` uses `mu_A`.
pub fn blob_layer_delta(adapter: &BlobAdapter, x: &[f64], xi: Option<&[f64]>) -> Result<(Vec<f64>, DiagonalGaussian)> {
    let t = blob_trace(adapter, x, xi)?;
    Ok((t.delta, t.q))
}

/// Which part of the model a trainable tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    LoraA,
    LoraB,
    BlobMean,
    BlobScale,
    InferenceHead,
    ContextHead,
    Projector,
    Classifier,
    Fusion,
}

/// The adapters attached to a backbone, one variant per family.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterStack {
    Lora(Vec<LoraFactors>),
    Blob(Vec<BlobAdapter>),
    CLora(Vec<CLoraLayer>),
    Coco {
        projector: AudioProjector,
        layers: Vec<CocoLayer>,
    },
    Fusion(FusionHead),
}

/// Shape parameters needed to build an adapter stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterShape {
    pub width: usize,
    pub depth: usize,
    pub rank: usize,
    pub alpha: f64,
    pub context_dim: usize,
    pub audio_dim: usize,
    pub projector_hidden: usize,
    pub classes: usize,
    pub epsilon: f64,
    pub delta_floor: f64,
}

/// Standard deviation of inference/context/projector weights at initialization.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Pre-softplus value whose softplus underflows to exactly zero.
pub const SIGMA_PIN_BIAS: f64 = -800.0;

impl AdapterStack {
    pub fn init(family: Family, shape: &AdapterShape, seed: u64) -> Self {
        use crate::numerics::{Purpose, StreamId};
        let layer_rng = |l: usize| SeededRng::new(seed, StreamId::new(Purpose::Init, l as u64 + 1, 0, 0));
        let head = |m: usize, rng: &mut SeededRng| InferenceHead {
            map: Linear::random(2 * shape.rank * shape.rank, m, HEAD_INIT_STD, rng),
            epsilon: shape.epsilon,
            delta_floor: shape.delta_floor,
        };
        let (d, r) = (shape.width, shape.rank);
        match family {
            Family::Lora => AdapterStack::Lora(
                (0..shape.depth)
                    .map(|l| LoraFactors::init(d, r, shape.alpha, &mut layer_rng(l)))
                    .collect(),
            ),
            Family::Blob => AdapterStack::Blob(
                (0..shape.depth)
                    .map(|l| {
                        let f = LoraFactors::init(d, r, shape.alpha, &mut layer_rng(l));
                        BlobAdapter {
                            b: f.b,
                            mu_a: f.a,
                            rho_a: Matrix::zeros(r, d),
                            alpha: shape.alpha,
                            epsilon: shape.epsilon,
                            delta_floor: shape.delta_floor,
                        }
                    })
                    .collect(),
            ),
            Family::CLora => AdapterStack::CLora(
                (0..shape.depth)
                    .map(|l| {
                        let mut rng = layer_rng(l);
                        let factors = LoraFactors::init(d, r, shape.alpha, &mut rng);
                        CLoraLayer {
                            factors,
                            head: head(r, &mut rng),
                        }
                    })
                    .collect(),
            ),
            Family::Coco => {
                let mut prng = layer_rng(usize::MAX - 1);
                let projector =
                    AudioProjector::init(shape.audio_dim, shape.projector_hidden, shape.context_dim, &mut prng);
                let layers = (0..shape.depth)
                    .map(|l| {
                        let mut rng = layer_rng(l);
                        let factors = LoraFactors::init(d, r, shape.alpha, &mut rng);
                        let head = head(2 * r, &mut rng);
                        CocoLayer {
                            factors,
                            context: LayerContextHead {
                                map: Linear::random(r, shape.context_dim, HEAD_INIT_STD, &mut rng),
                            },
                            head,
                        }
                    })
                    .collect();
                AdapterStack::Coco { projector, layers }
            }
            Family::Fusion => {
                let mut rng = layer_rng(usize::MAX - 2);
                AdapterStack::Fusion(FusionHead::random(d, shape.audio_dim, shape.classes, &mut rng))
            }
        }
    }

    /// Collapses every posterior scale onto the floor `δ`. No effect on
    /// deterministic families.
    pub fn pin_sigma_to_floor(&mut self) {
        match self {
            AdapterStack::Blob(layers) => {
                for l in layers {
                    l.rho_a.fill(SIGMA_PIN_BIAS);
                }
            }
            AdapterStack::CLora(layers) => layers.iter_mut().for_each(|l| l.head.pin_sigma_to_floor()),
            AdapterStack::Coco { layers, .. } => layers.iter_mut().for_each(|l| l.head.pin_sigma_to_floor()),
            AdapterStack::Lora(_) | AdapterStack::Fusion(_) => {}
        }
    }

    /// Fixes the rank-space posterior mean of every contextual layer to
    /// `vec(I_r)`, so the mean delta equals the plain LoRA delta.
    pub fn pin_identity_mean(&mut self) {
        let heads: Vec<&mut InferenceHead> = match self {
            AdapterStack::CLora(layers) => layers.iter_mut().map(|l| &mut l.head).collect(),
            AdapterStack::Coco { layers, .. } => layers.iter_mut().map(|l| &mut l.head).collect(),
            _ => Vec::new(),
        };
        for h in heads {
            let r = (h.latent_dim() as f64).sqrt() as usize;
            let eye = Matrix::identity(r);
            h.pin_mean(eye.data());
        }
    }

    pub fn family(&self) -> Family {
        match self {
            AdapterStack::Lora(_) => Family::Lora,
            AdapterStack::Blob(_) => Family::Blob,
            AdapterStack::CLora(_) => Family::CLora,
            AdapterStack::Coco { .. } => Family::Coco,
            AdapterStack::Fusion(_) => Family::Fusion,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            AdapterStack::Lora(v) => v.len(),
            AdapterStack::Blob(v) => v.len(),
            AdapterStack::CLora(v) => v.len(),
            AdapterStack::Coco { layers, .. } => layers.len(),
            AdapterStack::Fusion(_) => 0,
        }
    }

    /// Named trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        match self {
            AdapterStack::Lora(layers) => {
                for (l, f) in layers.iter().enumerate() {
                    out.push((format!("layer{l}.A"), ParamGroup::LoraA, &f.a));
                    out.push((format!("layer{l}.B"), ParamGroup::LoraB, &f.b));
                }
            }
            AdapterStack::Blob(layers) => {
                for (l, b) in layers.iter().enumerate() {
                    out.push((format!("layer{l}.mu_A"), ParamGroup::BlobMean, &b.mu_a));
                    out.push((format!("layer{l}.rho_A"), ParamGroup::BlobScale, &b.rho_a));
                    out.push((format!("layer{l}.B"), ParamGroup::LoraB, &b.b));
                }
            }
            AdapterStack::CLora(layers) => {
                for (l, c) in layers.iter().enumerate() {
                    out.push((format!("layer{l}.A"), ParamGroup::LoraA, &c.factors.a));
                    out.push((format!("layer{l}.B"), ParamGroup::LoraB, &c.factors.b));
                    out.push((format!("layer{l}.H.W"), ParamGroup::InferenceHead, &c.head.map.weight));
                    out.push((format!("layer{l}.H.b"), ParamGroup::InferenceHead, &c.head.map.bias));
                }
            }
            AdapterStack::Coco { projector, layers } => {
                out.push(("projector.W1".into(), ParamGroup::Projector, &projector.hidden.weight));
                out.push(("projector.b1".into(), ParamGroup::Projector, &projector.hidden.bias));
                out.push(("projector.W2".into(), ParamGroup::Projector, &projector.out.weight));
                out.push(("projector.b2".into(), ParamGroup::Projector, &projector.out.bias));
                for (l, c) in layers.iter().enumerate() {
                    out.push((format!("layer{l}.A"), ParamGroup::LoraA, &c.factors.a));
                    out.push((format!("layer{l}.B"), ParamGroup::LoraB, &c.factors.b));
                    out.push((format!("layer{l}.G.W"), ParamGroup::ContextHead, &c.context.map.weight));
                    out.push((format!("layer{l}.G.b"), ParamGroup::ContextHead, &c.context.map.bias));
                    out.push((format!("layer{l}.H.W"), ParamGroup::InferenceHead, &c.head.map.weight));
                    out.push((format!("layer{l}.H.b"), ParamGroup::InferenceHead, &c.head.map.bias));
                }
            }
            AdapterStack::Fusion(f) => {
                for (i, l) in [&f.l1, &f.l2, &f.l3].into_iter().enumerate() {
                    out.push((format!("fusion.W{}", i + 1), ParamGroup::Fusion, &l.weight));
                    out.push((format!("fusion.b{}", i + 1), ParamGroup::Fusion, &l.bias));
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`AdapterStack::tensors`], in the same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        match self {
            AdapterStack::Lora(layers) => {
                for f in layers {
                    out.push(&mut f.a);
                    out.push(&mut f.b);
                }
            }
            AdapterStack::Blob(layers) => {
                for b in layers {
                    out.push(&mut b.mu_a);
                    out.push(&mut b.rho_a);
                    out.push(&mut b.b);
                }
            }
            AdapterStack::CLora(layers) => {
                for c in layers {
                    out.push(&mut c.factors.a);
                    out.push(&mut c.factors.b);
                    out.push(&mut c.head.map.weight);
                    out.push(&mut c.head.map.bias);
                }
            }
            AdapterStack::Coco { projector, layers } => {
                out.push(&mut projector.hidden.weight);
                out.push(&mut projector.hidden.bias);
                out.push(&mut projector.out.weight);
                out.push(&mut projector.out.bias);
                for c in layers {
                    out.push(&mut c.factors.a);
                    out.push(&mut c.factors.b);
                    out.push(&mut c.context.map.weight);
                    out.push(&mut c.context.map.bias);
                    out.push(&mut c.head.map.weight);
                    out.push(&mut c.head.map.bias);
                }
            }
            AdapterStack::Fusion(f) => {
                for l in [&mut f.l1, &mut f.l2, &mut f.l3] {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
        }
        out
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}

/// Per-sample intermediates of one adapted layer.
pub(crate) enum LayerTrace {
    Lora { z: Vec<f64>, delta: Vec<f64> },
    Blob(BlobTrace),
    Contextual(ContextualTrace),
}

impl LayerTrace {
    pub fn delta(&self) -> &[f64] {
        match self {
            LayerTrace::Lora { delta, .. } => delta,
            LayerTrace::Blob(t) => &t.delta,
            LayerTrace::Contextual(t) => &t.delta,
        }
    }

    pub fn posterior(&self) -> Option<&DiagonalGaussian> {
        match self {
            LayerTrace::Lora { .. } => None,
            LayerTrace::Blob(t) => Some(&t.q),
            LayerTrace::Contextual(t) => Some(&t.q),
        }
    }
}

impl AdapterStack {
    /// Runs adapter `l` on layer input `x`. `u` is the shared context (CoCo only).
    pub(crate) fn layer_trace(&self, l: usize, x: &[f64], u: Option<&[f64]>, xi: Option<&[f64]>) -> Result<LayerTrace> {
        match self {
            AdapterStack::Lora(layers) => {
                let f = &layers[l];
                let z = f.a.matvec(x)?;
                let delta = f.expand(&z);
                Ok(LayerTrace::Lora { z, delta })
            }
            AdapterStack::Blob(layers) => Ok(LayerTrace::Blob(blob_trace(&layers[l], x, xi)?)),
            AdapterStack::CLora(layers) => Ok(LayerTrace::Contextual(clora_trace(&layers[l], x, xi)?)),
            AdapterStack::Coco { layers, .. } => {
                let u = u.ok_or(Error::MissingAudio { family: "coco" })?;
                Ok(LayerTrace::Contextual(coco_trace(&layers[l], x, u, xi)?))
            }
            AdapterStack::Fusion(_) => unreachable!("fusion has no per-layer adapters"),
        }
    }

    /// Number of noise coordinates layer `l` consumes in sample mode.
    pub(crate) fn noise_dim(&self, l: usize) -> usize {
        match self {
            AdapterStack::Lora(_) | AdapterStack::Fusion(_) => 0,
            AdapterStack::Blob(layers) => layers[l].mu_a.len(),
            AdapterStack::CLora(layers) => layers[l].factors.rank().pow(2),
            AdapterStack::Coco { layers, .. } => layers[l].factors.rank().pow(2),
        }
    }

    /// Backpropagates through adapter `l`. Returns `∂/∂x` through the adapter
    /// path and, for CoCo, `∂/∂u`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_backward(
        &self,
        l: usize,
        x: &[f64],
        u: Option<&[f64]>,
        trace: &LayerTrace,
        g_delta: &[f64],
        kl_weight: f64,
        beta: f64,
        grad: &mut AdapterStack,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        match (self, grad, trace) {
            (AdapterStack::Lora(layers), AdapterStack::Lora(gl), LayerTrace::Lora { z, .. }) => {
                let f = &layers[l];
                let g = &mut gl[l];
                let s = f.scale();
                g.b.add_outer(s, g_delta, z);
                let g_z: Vec<f64> =
                    f.b.matvec_t(g_delta)
                        .expect("delta has width d")
                        .into_iter()
                        .map(|v| s * v)
                        .collect();
                g.a.add_outer(1.0, &g_z, x);
                (f.a.matvec_t(&g_z).expect("z has length r"), None)
            }
            (AdapterStack::Blob(layers), AdapterStack::Blob(gl), LayerTrace::Blob(t)) => (
                blob_backward(&layers[l], x, t, g_delta, kl_weight, beta, &mut gl[l]),
                None,
            ),
            (AdapterStack::CLora(layers), AdapterStack::CLora(gl), LayerTrace::Contextual(t)) => {
                let c = &layers[l];
                let g = &mut gl[l];
                contextual_backward(
                    &c.factors,
                    &c.head,
                    x,
                    t,
                    g_delta,
                    kl_weight,
                    beta,
                    &mut g.factors,
                    &mut g.head,
                )
            }
            (AdapterStack::Coco { layers, .. }, AdapterStack::Coco { layers: gl, .. }, LayerTrace::Contextual(t)) => {
                let c = &layers[l];
                let g = &mut gl[l];
                let (g_x, g_ctx) = contextual_backward(
                    &c.factors,
                    &c.head,
                    x,
                    t,
                    g_delta,
                    kl_weight,
                    beta,
                    &mut g.factors,
                    &mut g.head,
                );
                let g_ctx = g_ctx.expect("coco traces carry a context");
                let u = u.expect("coco backward needs the shared context");
                let g_u = c.context.map.backward(u, &g_ctx, &mut g.context.map);
                (g_x, Some(g_u))
            }
            _ => unreachable!("gradient buffer and trace must match the adapter family"),
        }
    }
}

/// Exact trainable-parameter breakdown of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParameterCount {
    /// `A` (or `mu_A`) plus `B`, per layer.
    pub lora_factors_per_layer: usize,
    /// BLoB scale parameters `rho_A`, per layer.
    pub blob_scale_per_layer: usize,
    pub inference_head_per_layer: usize,
    pub context_head_per_layer: usize,
    pub projector: usize,
    pub classifier: usize,
    pub fusion: usize,
    /// Coordinates of the stochastic variable, per layer.
    pub stochastic_per_layer: usize,
    pub total: usize,
}
