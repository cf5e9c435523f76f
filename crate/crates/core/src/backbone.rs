//! Frozen stand-in backbone, trainable classifier head and the feature-fusion
//! MLP baseline.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Purpose, SeededRng, StreamId};

/// Affine map `W x + b` with `W` of shape `(out, in)`; `b` is kept as an
/// `(out, 1)` matrix so every parameter is a [`Matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Matrix::zeros(out_dim, 1),
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, std: f64, rng: &mut SeededRng) -> Self {
        Linear {
            weight: Matrix::random_normal(out_dim, in_dim, std, rng),
            bias: Matrix::zeros(out_dim, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(self.bias.data()) {
            *yi += bi;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub(crate) fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        grad.weight.add_outer(1.0, g_out, x);
        for (gb, g) in grad.bias.data_mut().iter_mut().zip(g_out) {
            *gb += g;
        }
        self.weight
            .matvec_t(g_out)
            .expect("gradient shape follows forward shape")
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// One frozen square linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    w0: Matrix,
    bias: Vec<f64>,
}

impl FrozenLinear {
    pub fn new(w0: Matrix, bias: Vec<f64>) -> Result<Self> {
        if w0.rows() != bias.len() {
            return Err(Error::shape("FrozenLinear::new", w0.shape(), (bias.len(), 1)));
        }
        Ok(FrozenLinear { w0, bias })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.w0.matvec(x)?;
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        Ok(y)
    }
}

/// `L` frozen layers of width `d`. Weights are drawn i.i.d. `N(0, 1/d)` from
/// the backbone seed; biases are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    layers: Vec<FrozenLinear>,
    activation: Activation,
    residual: bool,
    seed: u64,
}

impl FrozenBackbone {
    pub fn random(width: usize, depth: usize, residual: bool, seed: u64) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let layers = (0..depth)
            .map(|l| {
                let mut rng = SeededRng::new(seed, StreamId::new(Purpose::Backbone, l as u64, 0, 0));
                FrozenLinear {
                    w0: Matrix::random_normal(width, width, std, &mut rng),
                    bias: vec![0.0; width],
                }
            })
            .collect();
        FrozenBackbone {
            layers,
            activation: Activation::Tanh,
            residual,
            seed,
        }
    }

    pub fn from_layers(layers: Vec<FrozenLinear>, residual: bool, seed: u64) -> Result<Self> {
        let d = layers.first().map(|l| l.w0.rows()).unwrap_or(0);
        for l in &layers {
            if l.w0.shape() != (d, d) {
                return Err(Error::shape("FrozenBackbone", (d, d), l.w0.shape()));
            }
        }
        Ok(FrozenBackbone {
            layers,
            activation: Activation::Tanh,
            residual,
            seed,
        })
    }

    pub fn layers(&self) -> &[FrozenLinear] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w0.rows())
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Combined bit-level checksum of all frozen weights and biases.
    pub fn checksum(&self) -> u64 {
        self.layers.iter().fold(0u64, |acc, l| {
            let b = Matrix::new(l.bias.len(), 1, l.bias.clone()).expect("non-empty bias");
            acc.rotate_left(7) ^ l.w0.checksum() ^ b.checksum().rotate_left(29)
        })
    }

    /// Output of layer `l` given its input and the adapter delta.
    pub(crate) fn layer_output(&self, l: usize, x: &[f64], delta: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut pre = self.layers[l].forward(x)?;
        if let Some(delta) = delta {
            for (p, dv) in pre.iter_mut().zip(delta) {
                *p += dv;
            }
        }
        let mut out: Vec<f64> = pre.into_iter().map(|v| self.activation.apply(v)).collect();
        if self.residual {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += xi;
            }
        }
        Ok(out)
    }

    /// Adapter-free pass through every layer.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.width() {
            return Err(Error::shape(
                "FrozenBackbone::features",
                (self.width(), 1),
                (x.len(), 1),
            ));
        }
        let mut h = x.to_vec();
        for l in 0..self.layers.len() {
            h = self.layer_output(l, &h, None)?;
        }
        Ok(h)
    }
}

/// Trainable linear head producing `C` logits from the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub map: Linear,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.map.out_dim()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.map.forward(h)
    }
}

/// Hidden widths of the fusion MLP.
pub const FUSION_HIDDEN: [usize; 2] = [32, 16];

/// Concatenation-plus-MLP classifier used by the feature-fusion baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct FusionTrace {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
}

impl FusionHead {
    pub fn random(text_dim: usize, audio_dim: usize, classes: usize, rng: &mut SeededRng) -> Self {
        let [w1, w2] = FUSION_HIDDEN;
        let input = text_dim + audio_dim;
        FusionHead {
            l1: Linear::random(w1, input, 1.0 / (input as f64).sqrt(), rng),
            l2: Linear::random(w2, w1, 1.0 / (w1 as f64).sqrt(), rng),
            l3: Linear::random(classes, w2, 1.0 / (w2 as f64).sqrt(), rng),
        }
    }

    pub fn zeros(text_dim: usize, audio_dim: usize, classes: usize) -> Self {
        let [w1, w2] = FUSION_HIDDEN;
        FusionHead {
            l1: Linear::zeros(w1, text_dim + audio_dim),
            l2: Linear::zeros(w2, w1),
            l3: Linear::zeros(classes, w2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub(crate) fn trace(&self, text: &[f64], audio: &[f64]) -> Result<FusionTrace> {
        if text.len() + audio.len() != self.input_dim() {
            return Err(Error::shape(
                "fusion_baseline_forward",
                (self.input_dim(), 1),
                (text.len() + audio.len(), 1),
            ));
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(text);
        input.extend_from_slice(audio);
        let h1: Vec<f64> = self.l1.forward(&input)?.into_iter().map(f64::tanh).collect();
        let h2: Vec<f64> = self.l2.forward(&h1)?.into_iter().map(f64::tanh).collect();
        let logits = self.l3.forward(&h2)?;
        Ok(FusionTrace { input, h1, h2, logits })
    }

    pub(crate) fn backward(&self, t: &FusionTrace, g_logits: &[f64], grad: &mut FusionHead) {
        let g_h2 = self.l3.backward(&t.h2, g_logits, &mut grad.l3);
        let g_a2: Vec<f64> = g_h2.iter().zip(&t.h2).map(|(g, h)| g * (1.0 - h * h)).collect();
        let g_h1 = self.l2.backward(&t.h1, &g_a2, &mut grad.l2);
        let g_a1: Vec<f64> = g_h1.iter().zip(&t.h1).map(|(g, h)| g * (1.0 - h * h)).collect();
        // Inputs are frozen features, so the input gradient is dropped.
        let _ = self.l1.backward(&t.input, &g_a1, &mut grad.l1);
    }
}

/// Logits of the fusion MLP on `(text, audio)` concatenated in that order.
pub fn fusion_baseline_forward(text_feat: &[f64], audio_emb: &[f64], mlp: &FusionHead) -> Result<Vec<f64>> {
    Ok(mlp.trace(text_feat, audio_emb)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn rng(draw: u64) -> SeededRng {
        SeededRng::new(3, StreamId::new(Purpose::Oracle, 2, 0, draw))
    }

    #[test]
    fn zero_fusion_gives_uniform_softmax() {
        let head = FusionHead::zeros(3, 2, 4);
        let logits = fusion_baseline_forward(&[1.0, 2.0, 3.0], &[0.5, -0.5], &head).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        assert!(softmax(&logits).iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn fusion_rejects_width_mismatch() {
        let head = FusionHead::zeros(3, 2, 2);
        assert!(fusion_baseline_forward(&[1.0; 3], &[0.0; 3], &head).is_err());
    }

    #[test]
    fn fusion_input_permutation_symmetry() {
        let mut r = rng(0);
        let head = FusionHead::random(3, 2, 2, &mut r);
        let text = r.standard_normal(3);
        let audio = r.standard_normal(2);
        // Swap the roles of text and audio and permute first-layer columns to match.
        let mut permuted = head.clone();
        let cols = head.l1.weight.cols();
        let order: Vec<usize> = (3..5).chain(0..3).collect();
        for row in 0..head.l1.weight.rows() {
            for (new_c, &old_c) in order.iter().enumerate() {
                permuted.l1.weight.set(row, new_c, head.l1.weight.get(row, old_c));
            }
        }
        assert_eq!(cols, 5);
        let a = fusion_baseline_forward(&text, &audio, &head).unwrap();
        let mut audio_first = audio.clone();
        audio_first.extend(&text);
        let b = fusion_baseline_forward(&audio_first[..2], &audio_first[2..], &permuted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fusion_matches_straight_line_oracle() {
        let mut r = rng(1);
        let mut head = FusionHead::random(8, 4, 3, &mut r);
        for l in [&mut head.l1, &mut head.l2, &mut head.l3] {
            l.bias = Matrix::random_normal(l.bias.rows(), 1, 0.5, &mut r);
        }
        let text = r.standard_normal(8);
        let audio = r.standard_normal(4);

        let input: Vec<f64> = text.iter().chain(&audio).copied().collect();
        let layer = |l: &Linear, v: &[f64], act: bool| -> Vec<f64> {
            (0..l.weight.rows())
                .map(|i| {
                    let mut s = l.bias.get(i, 0);
                    for (j, vj) in v.iter().enumerate() {
                        s += l.weight.get(i, j) * vj;
                    }
                    if act {
                        s.tanh()
                    } else {
                        s
                    }
                })
                .collect()
        };
        let expected = layer(&head.l3, &layer(&head.l2, &layer(&head.l1, &input, true), true), false);
        let got = fusion_baseline_forward(&text, &audio, &head).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backbone_is_reproducible_from_seed() {
        let a = FrozenBackbone::random(8, 3, false, 11);
        let b = FrozenBackbone::random(8, 3, false, 11);
        let c = FrozenBackbone::random(8, 3, false, 12);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.depth(), 3);
        assert_eq!(a.width(), 8);
    }

    #[test]
    fn features_reject_wrong_width() {
        let b = FrozenBackbone::random(4, 2, false, 0);
        assert!(b.features(&[0.0; 3]).is_err());
        assert_eq!(b.features(&[0.0; 4]).unwrap(), vec![0.0; 4]);
    }
}
