use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Width of the dense layer that sits between the convolutional backbone and
/// the classification head.
pub const PENULT_WIDTH: usize = 8;
/// Every classifier in this crate is binary.
pub const N_CLASSES: usize = 2;
const KERNEL: usize = 3;
const PROB_FLOOR: f32 = 1e-12;

/// Architecture and regularization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each 3x3 conv block (each block halves the side).
    pub conv_channels: Vec<usize>,
    /// Dropout applied to the penultimate activations during training.
    pub dropout_rate: f32,
    /// L2 coefficient on weight tensors (biases are not decayed).
    pub weight_decay: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16],
            dropout_rate: 0.25,
            weight_decay: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, input_side: usize) -> Result<(), NnError> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(NnError::Config(
                "conv_channels must be a nonempty list of positive widths".into(),
            ));
        }
        let reduction = 1usize << self.conv_channels.len();
        if input_side < 8 || !input_side.is_multiple_of(reduction) {
            return Err(NnError::Config(format!(
                "input_side {input_side} must be >= 8 and divisible by {reduction}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(NnError::Config(format!(
                "weight_decay {} must be finite and nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out_ch, in_ch, 3, 3]`
    pub kernels: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
}

impl ConvLayer {
    fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseLayer {
    fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    fn apply(&self, x: &[f32], out: &mut [f32]) {
        let w = self.weights.data();
        let n_in = self.inputs();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * n_in..(j + 1) * n_in];
            *o = self.bias.data()[j] + dot(row, x);
        }
    }
}

/// Fixed per-pixel affine map applied before the first convolution:
/// `(x - mean) * scale`. Not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    /// `[side, side]`
    mean: Tensor,
    scale: f32,
}

impl InputNorm {
    pub fn identity(side: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![side, side]),
            scale: 1.0,
        }
    }

    pub fn new(mean: Tensor, scale: f32) -> Result<Self, NnError> {
        let s = mean.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(NnError::Dimension(format!(
                "input mean must be a square [side, side] tensor, got {s:?}"
            )));
        }
        if !mean.is_finite() {
            return Err(NnError::NonFinite {
                layer: "input mean".into(),
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(NnError::Config(format!(
                "input scale {scale} must be positive"
            )));
        }
        Ok(Self { mean, scale })
    }

    /// Per-pixel mean of `images` (each `side * side` long).
    pub fn fit(images: &[&[f32]], side: usize, scale: f32) -> Result<Self, NnError> {
        if images.is_empty() {
            return Err(NnError::Training(
                "cannot fit input mean on zero images".into(),
            ));
        }
        let mut acc = vec![0.0f64; side * side];
        for img in images {
            if img.len() != acc.len() {
                return Err(NnError::Dimension(format!(
                    "image has {} pixels, expected {}",
                    img.len(),
                    acc.len()
                )));
            }
            for (a, &p) in acc.iter_mut().zip(*img) {
                *a += f64::from(p);
            }
        }
        let n = images.len() as f64;
        let mean = acc.into_iter().map(|a| (a / n) as f32).collect();
        Self::new(Tensor::new(vec![side, side], mean)?, scale)
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn side(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn bit_eq(&self, other: &InputNorm) -> bool {
        self.scale.to_bits() == other.scale.to_bits() && self.mean.bit_eq(&other.mean)
    }

    fn apply(&self, pixels: &[f32]) -> Vec<f32> {
        pixels
            .iter()
            .zip(self.mean.data())
            .map(|(&p, &m)| (p - m) * self.scale)
            .collect()
    }
}

/// Small convolutional softmax classifier:
/// `[conv3x3 -> ReLU -> maxpool2]*k -> flatten -> dense(8) -> ReLU -> dropout -> dense(n) -> softmax`.
///
/// Values are immutable after construction; all training produces new models.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    conv_layers: Vec<ConvLayer>,
    penult: DenseLayer,
    head: DenseLayer,
    dropout_rate: f32,
    weight_decay: f32,
    input_side: usize,
    input_norm: InputNorm,
}

/// Per-parameter gradients, aligned with [`ClassifierModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

/// Initialize the default architecture.
pub fn init_model(
    n_classes: usize,
    input_side: usize,
    seed: u64,
) -> Result<ClassifierModel, NnError> {
    ClassifierModel::init(&ModelConfig::default(), n_classes, input_side, seed)
}

/// Half-width of the scaled-uniform initializer, `sqrt(6 / (fan_in + fan_out))`.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0f64 / (fan_in + fan_out) as f64).sqrt() as f32
}

fn uniform_tensor(shape: Vec<usize>, bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ClassifierModel {
    /// Draws every weight tensor in parameter order from one ChaCha8 stream
    /// seeded with `seed`; biases start at zero.
    pub fn init(
        cfg: &ModelConfig,
        n_classes: usize,
        input_side: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        if n_classes != N_CLASSES {
            return Err(NnError::Config(format!(
                "n_classes must be {N_CLASSES}, got {n_classes}"
            )));
        }
        cfg.validate(input_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv_layers = Vec::with_capacity(cfg.conv_channels.len());
        let mut in_ch = 1;
        for &out_ch in &cfg.conv_channels {
            let taps = KERNEL * KERNEL;
            let bound = init_bound(in_ch * taps, out_ch * taps);
            conv_layers.push(ConvLayer {
                kernels: uniform_tensor(vec![out_ch, in_ch, KERNEL, KERNEL], bound, &mut rng),
                bias: Tensor::zeros(vec![out_ch]),
            });
            in_ch = out_ch;
        }
        let final_side = input_side >> cfg.conv_channels.len();
        let flat = in_ch * final_side * final_side;
        let penult = DenseLayer {
            weights: uniform_tensor(
                vec![PENULT_WIDTH, flat],
                init_bound(flat, PENULT_WIDTH),
                &mut rng,
            ),
            bias: Tensor::zeros(vec![PENULT_WIDTH]),
        };
        let head = DenseLayer {
            weights: uniform_tensor(
                vec![n_classes, PENULT_WIDTH],
                init_bound(PENULT_WIDTH, n_classes),
                &mut rng,
            ),
            bias: Tensor::zeros(vec![n_classes]),
        };
        Ok(Self {
            conv_layers,
            penult,
            head,
            dropout_rate: cfg.dropout_rate,
            weight_decay: cfg.weight_decay,
            input_side,
            input_norm: InputNorm::identity(input_side),
        })
    }

    /// Rebuild a model from tensors in [`ClassifierModel::params`] order.
    pub fn from_params(
        input_side: usize,
        dropout_rate: f32,
        weight_decay: f32,
        tensors: Vec<Tensor>,
    ) -> Result<Self, NnError> {
        if tensors.len() < 6 || !tensors.len().is_multiple_of(2) {
            return Err(NnError::Dimension(format!(
                "expected an even number (>= 6) of parameter tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let n_conv = (it.len() - 4) / 2;
        let mut conv_layers = Vec::with_capacity(n_conv);
        let mut in_ch = 1;
        for l in 0..n_conv {
            let kernels = it.next().unwrap();
            let bias = it.next().unwrap();
            let ks = kernels.shape();
            if ks.len() != 4
                || ks[1] != in_ch
                || ks[2] != KERNEL
                || ks[3] != KERNEL
                || bias.shape() != [ks[0]]
            {
                return Err(NnError::Dimension(format!(
                    "conv{} has kernel shape {:?} and bias shape {:?}",
                    l + 1,
                    ks,
                    bias.shape()
                )));
            }
            in_ch = ks[0];
            conv_layers.push(ConvLayer { kernels, bias });
        }
        let cfg = ModelConfig {
            conv_channels: conv_layers.iter().map(ConvLayer::out_channels).collect(),
            dropout_rate,
            weight_decay,
        };
        cfg.validate(input_side)?;
        let final_side = input_side >> n_conv;
        let flat = in_ch * final_side * final_side;
        let penult = DenseLayer {
            weights: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let head = DenseLayer {
            weights: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        if penult.weights.shape() != [PENULT_WIDTH, flat] || penult.bias.shape() != [PENULT_WIDTH] {
            return Err(NnError::Dimension(format!(
                "penultimate layer shape {:?} does not map {flat} features to {PENULT_WIDTH}",
                penult.weights.shape()
            )));
        }
        if head.weights.shape() != [N_CLASSES, PENULT_WIDTH] || head.bias.shape() != [N_CLASSES] {
            return Err(NnError::Dimension(format!(
                "head shape {:?} is not [{N_CLASSES}, {PENULT_WIDTH}]",
                head.weights.shape()
            )));
        }
        Ok(Self {
            conv_layers,
            penult,
            head,
            dropout_rate,
            weight_decay,
            input_side,
            input_norm: InputNorm::identity(input_side),
        })
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    /// Same parameters with a different input normalization.
    pub fn with_input_norm(&self, norm: InputNorm) -> Result<Self, NnError> {
        if norm.side() != self.input_side {
            return Err(NnError::Dimension(format!(
                "input norm side {} does not match model side {}",
                norm.side(),
                self.input_side
            )));
        }
        let mut out = self.clone();
        out.input_norm = norm;
        Ok(out)
    }

    pub fn n_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn dropout_rate(&self) -> f32 {
        self.dropout_rate
    }

    pub fn weight_decay(&self) -> f32 {
        self.weight_decay
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.conv_layers
    }

    pub fn penult(&self) -> &DenseLayer {
        &self.penult
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut DenseLayer {
        &mut self.head
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            conv_channels: self
                .conv_layers
                .iter()
                .map(ConvLayer::out_channels)
                .collect(),
            dropout_rate: self.dropout_rate,
            weight_decay: self.weight_decay,
        }
    }

    /// Parameters in canonical order: each conv layer's kernels then bias,
    /// penultimate weights then bias, head weights then bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.conv_layers.len() + 4);
        for c in &self.conv_layers {
            out.push(&c.kernels);
            out.push(&c.bias);
        }
        out.extend([
            &self.penult.weights,
            &self.penult.bias,
            &self.head.weights,
            &self.head.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.conv_layers.len() + 4);
        for c in &mut self.conv_layers {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.penult.weights,
            &mut self.penult.bias,
            &mut self.head.weights,
            &mut self.head.bias,
        ]);
        out
    }

    /// Weight tensors sit at even positions of [`ClassifierModel::params`].
    pub fn is_weight_param(index: usize) -> bool {
        index.is_multiple_of(2)
    }

    pub fn param_name(&self, index: usize) -> String {
        let n_conv = self.conv_layers.len();
        let kind = if index.is_multiple_of(2) {
            "weights"
        } else {
            "bias"
        };
        let layer = index / 2;
        if layer < n_conv {
            format!("conv{}.{kind}", layer + 1)
        } else if layer == n_conv {
            format!("penult.{kind}")
        } else {
            format!("head.{kind}")
        }
    }

    /// Bitwise equality of every parameter and hyperparameter.
    pub fn bit_eq(&self, other: &ClassifierModel) -> bool {
        self.input_side == other.input_side
            && self.dropout_rate.to_bits() == other.dropout_rate.to_bits()
            && self.weight_decay.to_bits() == other.weight_decay.to_bits()
            && self.input_norm.bit_eq(&other.input_norm)
            && self.params().len() == other.params().len()
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Bitwise equality of the input normalization, the conv layers and the
    /// penultimate dense layer.
    pub fn backbone_bit_eq(&self, other: &ClassifierModel) -> bool {
        let n = 2 * self.conv_layers.len() + 2;
        let (a, b) = (self.params(), other.params());
        self.input_norm.bit_eq(&other.input_norm)
            && a.len() == b.len()
            && a[..n].iter().zip(&b[..n]).all(|(x, y)| x.bit_eq(y))
    }

    /// Keep backbone and penultimate layer; draw a fresh head from `seed`.
    pub fn replace_head(&self, seed: u64) -> ClassifierModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_classes = self.n_classes();
        let mut out = self.clone();
        out.head = DenseLayer {
            weights: uniform_tensor(
                vec![n_classes, PENULT_WIDTH],
                init_bound(PENULT_WIDTH, n_classes),
                &mut rng,
            ),
            bias: Tensor::zeros(vec![n_classes]),
        };
        out
    }

    fn pixels_per_image(&self) -> usize {
        self.input_side * self.input_side
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize, NnError> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.input_side || s[3] != self.input_side {
            return Err(NnError::Dimension(format!(
                "expected batch shape [B, 1, {0}, {0}], got {s:?}",
                self.input_side
            )));
        }
        Ok(s[0])
    }

    /// Inference-mode class probabilities, shape `[batch, n_classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        let b = self.check_batch(batch)?;
        let n = self.n_classes();
        let px = self.pixels_per_image();
        let mut out = Vec::with_capacity(b * n);
        for i in 0..b {
            let cache = self.forward_example(&batch.data()[i * px..(i + 1) * px], None)?;
            out.extend_from_slice(&cache.probs);
        }
        Tensor::new(vec![b, n], out)
    }

    /// Inference on one image given as `input_side * input_side` pixels.
    pub fn predict(&self, pixels: &[f32]) -> Result<Vec<f32>, NnError> {
        if pixels.len() != self.pixels_per_image() {
            return Err(NnError::Dimension(format!(
                "expected {} pixels, got {}",
                self.pixels_per_image(),
                pixels.len()
            )));
        }
        Ok(self.forward_example(pixels, None)?.probs)
    }

    /// Mean cross-entropy plus `weight_decay * sum(w^2)` over weight tensors,
    /// with gradients. Dropout is active; its mask is drawn from
    /// `dropout_mask_seed` in example order.
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor,
        labels: &[usize],
        dropout_mask_seed: u64,
    ) -> Result<(f32, Gradients), NnError> {
        let b = self.check_batch(batch)?;
        let px = self.pixels_per_image();
        let images: Vec<&[f32]> = (0..b)
            .map(|i| &batch.data()[i * px..(i + 1) * px])
            .collect();
        self.loss_and_gradients_slices(&images, labels, dropout_mask_seed)
    }

    pub(crate) fn loss_and_gradients_slices(
        &self,
        images: &[&[f32]],
        labels: &[usize],
        dropout_mask_seed: u64,
    ) -> Result<(f32, Gradients), NnError> {
        if labels.len() != images.len() || images.is_empty() {
            return Err(NnError::Dimension(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        let n = self.n_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(NnError::Dimension(format!("label {bad} >= n_classes {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_mask_seed);
        let mut grads: Vec<Tensor> = self
            .params()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut ce_sum = 0.0f64;
        for (img, &label) in images.iter().zip(labels) {
            let cache = self.forward_example(img, Some(&mut rng))?;
            ce_sum += f64::from(-cache.probs[label].max(PROB_FLOOR).ln());
            self.backward_example(&cache, label, &mut grads);
        }
        let scale = 1.0 / images.len() as f32;
        let mut decay = 0.0f64;
        for (i, (g, p)) in grads.iter_mut().zip(self.params()).enumerate() {
            let decayed = Self::is_weight_param(i);
            if decayed {
                decay += p.sum_squares();
            }
            for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                *gv *= scale;
                if decayed {
                    *gv += 2.0 * self.weight_decay * pv;
                }
            }
        }
        let loss = ce_sum / images.len() as f64 + f64::from(self.weight_decay) * decay;
        if !loss.is_finite() {
            return Err(NnError::NonFinite {
                layer: "loss".into(),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(NnError::NonFinite {
                    layer: format!("gradient of {}", self.param_name(i)),
                });
            }
        }
        Ok((loss as f32, Gradients { tensors: grads }))
    }

    fn forward_example(
        &self,
        pixels: &[f32],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ExampleCache, NnError> {
        let mut side = self.input_side;
        let mut input = self.input_norm.apply(pixels);
        let mut layers = Vec::with_capacity(self.conv_layers.len());
        for (l, conv) in self.conv_layers.iter().enumerate() {
            let cout = conv.out_channels();
            let mut act = vec![0.0f32; cout * side * side];
            conv3x3_forward(
                &input,
                conv.in_channels(),
                side,
                conv.kernels.data(),
                conv.bias.data(),
                cout,
                &mut act,
            );
            for v in act.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let (pooled, argmax) = maxpool2(&act, cout, side);
            if !pooled.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite {
                    layer: format!("conv{}", l + 1),
                });
            }
            layers.push(ConvCache {
                input: std::mem::replace(&mut input, pooled),
                act,
                argmax,
                side,
            });
            side /= 2;
        }
        let flat = input;
        let mut penult_act = vec![0.0f32; PENULT_WIDTH];
        self.penult.apply(&flat, &mut penult_act);
        for v in penult_act.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if !penult_act.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite {
                layer: "penult".into(),
            });
        }
        let mask: Vec<f32> = match dropout {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep_scale = 1.0 / (1.0 - self.dropout_rate);
                (0..PENULT_WIDTH)
                    .map(|_| {
                        if rng.random::<f32>() < self.dropout_rate {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect()
            }
            _ => vec![1.0; PENULT_WIDTH],
        };
        let penult_out: Vec<f32> = penult_act.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let mut logits = vec![0.0f32; self.n_classes()];
        self.head.apply(&penult_out, &mut logits);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite {
                layer: "head".into(),
            });
        }
        let probs = softmax(&logits);
        Ok(ExampleCache {
            layers,
            flat,
            penult_act,
            mask,
            penult_out,
            probs,
        })
    }

    fn backward_example(&self, cache: &ExampleCache, label: usize, grads: &mut [Tensor]) {
        let n_conv = self.conv_layers.len();
        // d(CE)/d(logits) = p - onehot
        let mut d_logits = cache.probs.clone();
        d_logits[label] -= 1.0;

        let head_idx = 2 * n_conv + 2;
        {
            let gw = grads[head_idx].data_mut();
            for (j, &dl) in d_logits.iter().enumerate() {
                for (k, &x) in cache.penult_out.iter().enumerate() {
                    gw[j * PENULT_WIDTH + k] += dl * x;
                }
            }
            let gb = grads[head_idx + 1].data_mut();
            for (g, &dl) in gb.iter_mut().zip(&d_logits) {
                *g += dl;
            }
        }
        let hw = self.head.weights.data();
        let mut d_penult = vec![0.0f32; PENULT_WIDTH];
        for (k, d) in d_penult.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, &dl) in d_logits.iter().enumerate() {
                s += dl * hw[j * PENULT_WIDTH + k];
            }
            // through dropout scale and ReLU
            *d = if cache.penult_act[k] > 0.0 {
                s * cache.mask[k]
            } else {
                0.0
            };
        }

        let penult_idx = 2 * n_conv;
        let n_flat = cache.flat.len();
        {
            let gw = grads[penult_idx].data_mut();
            for (j, &d) in d_penult.iter().enumerate() {
                if d != 0.0 {
                    let row = &mut gw[j * n_flat..(j + 1) * n_flat];
                    for (g, &x) in row.iter_mut().zip(&cache.flat) {
                        *g += d * x;
                    }
                }
            }
            let gb = grads[penult_idx + 1].data_mut();
            for (g, &d) in gb.iter_mut().zip(&d_penult) {
                *g += d;
            }
        }
        let pw = self.penult.weights.data();
        let mut d_pooled = vec![0.0f32; n_flat];
        for (j, &d) in d_penult.iter().enumerate() {
            if d != 0.0 {
                let row = &pw[j * n_flat..(j + 1) * n_flat];
                for (g, &w) in d_pooled.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
        }

        for l in (0..n_conv).rev() {
            let conv = &self.conv_layers[l];
            let lc = &cache.layers[l];
            // unpool, then ReLU mask
            let mut d_act = vec![0.0f32; lc.act.len()];
            for (&idx, &d) in lc.argmax.iter().zip(&d_pooled) {
                d_act[idx as usize] += d;
            }
            for (d, &a) in d_act.iter_mut().zip(&lc.act) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let (gk, rest) = grads[2 * l..].split_at_mut(1);
            let mut d_input = if l > 0 {
                Some(vec![0.0f32; lc.input.len()])
            } else {
                None
            };
            conv3x3_backward(
                &lc.input,
                conv.in_channels(),
                lc.side,
                conv.kernels.data(),
                conv.out_channels(),
                &d_act,
                gk[0].data_mut(),
                rest[0].data_mut(),
                d_input.as_deref_mut(),
            );
            if let Some(d) = d_input {
                d_pooled = d;
            }
        }
    }
}

struct ConvCache {
    input: Vec<f32>,
    act: Vec<f32>,
    argmax: Vec<u32>,
    side: usize,
}

struct ExampleCache {
    layers: Vec<ConvCache>,
    flat: Vec<f32>,
    penult_act: Vec<f32>,
    mask: Vec<f32>,
    penult_out: Vec<f32>,
    probs: Vec<f32>,
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Valid output range for a tap offset `d` in `-1..=1` over a side of `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

/// Same-padded 3x3 convolution (cross-correlation) on `[cin, side, side]`.
fn conv3x3_forward(
    input: &[f32],
    cin: usize,
    side: usize,
    kernels: &[f32],
    bias: &[f32],
    cout: usize,
    out: &mut [f32],
) {
    let plane = side * side;
    for o in 0..cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, side);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, side);
                    let w = kernels[((o * cin + i) * KERNEL + ky) * KERNEL + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_plane[sy * side + (x0 as isize + dx) as usize..][..x1 - x0];
                        let dst = &mut out_plane[y * side + x0..y * side + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    cin: usize,
    side: usize,
    kernels: &[f32],
    cout: usize,
    d_out: &[f32],
    d_kernels: &mut [f32],
    d_bias: &mut [f32],
    mut d_input: Option<&mut [f32]>,
) {
    let plane = side * side;
    for o in 0..cout {
        let g_plane = &d_out[o * plane..(o + 1) * plane];
        d_bias[o] += g_plane.iter().sum::<f32>();
        if g_plane.iter().all(|&g| g == 0.0) {
            continue;
        }
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, side);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, side);
                    let widx = ((o * cin + i) * KERNEL + ky) * KERNEL + kx;
                    let w = kernels[widx];
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src_off = sy * side + (x0 as isize + dx) as usize;
                        let g = &g_plane[y * side + x0..y * side + x1];
                        let src = &in_plane[src_off..src_off + (x1 - x0)];
                        acc += dot(g, src);
                        if let Some(di) = d_input.as_deref_mut() {
                            let dst = &mut di[i * plane + src_off..i * plane + src_off + (x1 - x0)];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += w * gv;
                            }
                        }
                    }
                    d_kernels[widx] += acc;
                }
            }
        }
    }
}

/// 2x2 stride-2 max pool; returns pooled values and the flat index of each max.
fn maxpool2(act: &[f32], channels: usize, side: usize) -> (Vec<f32>, Vec<u32>) {
    let half = side / 2;
    let mut pooled = Vec::with_capacity(channels * half * half);
    let mut argmax = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * side + 2 * x + dx;
                    if act[idx] > act[best] {
                        best = idx;
                    }
                }
                pooled.push(act[best]);
                argmax.push(best as u32);
            }
        }
    }
    (pooled, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(side: usize) -> ClassifierModel {
        let mut m = init_model(2, side, 1).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    fn batch_of(model: &ClassifierModel, n: usize, seed: u64) -> Tensor {
        let side = model.input_side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * side * side).map(|_| rng.random::<f32>()).collect();
        Tensor::new(vec![n, 1, side, side], data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(2, 32, 7).unwrap();
        let b = init_model(2, 32, 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_model(2, 32, 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_rejects_bad_configuration() {
        assert!(matches!(init_model(2, 30, 7), Err(NnError::Config(_))));
        assert!(matches!(init_model(2, 4, 7), Err(NnError::Config(_))));
        assert!(matches!(init_model(3, 32, 7), Err(NnError::Config(_))));
    }

    #[test]
    fn penultimate_width_is_eight() {
        let m = init_model(2, 32, 3).unwrap();
        assert_eq!(m.penult().weights.shape()[0], 8);
        assert_eq!(m.head().weights.shape(), &[2, 8]);
        assert_eq!(m.penult().weights.shape()[1], 16 * 8 * 8);
    }

    #[test]
    fn kernel_mean_within_three_sigma() {
        // U(-a, a) has sigma = a / sqrt(3)
        let m = init_model(2, 32, 11).unwrap();
        for conv in m.conv_layers() {
            let s = conv.kernels.shape();
            let a = init_bound(s[1] * 9, s[0] * 9) as f64;
            let sigma = a / 3f64.sqrt();
            let n = conv.kernels.len() as f64;
            let mean: f64 = conv.kernels.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            assert!(
                mean.abs() <= 3.0 * sigma / n.sqrt(),
                "mean {mean} sigma {sigma}"
            );
            assert!(conv.kernels.data().iter().all(|&v| (v as f64).abs() <= a));
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let m = zero_model(16);
        let out = m.forward(&batch_of(&m, 3, 2)).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn forward_rows_sum_to_one_and_are_pure() {
        let m = init_model(2, 32, 5).unwrap();
        let x = batch_of(&m, 4, 9);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert!(a.bit_eq(&b));
        for i in 0..4 {
            let row = a.row(i);
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = init_model(2, 32, 5).unwrap();
        let bad = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(matches!(m.forward(&bad), Err(NnError::Dimension(_))));
    }

    #[test]
    fn zero_model_loss_is_ln2() {
        let m = zero_model(16);
        let (loss, _) = m.loss_and_gradients(&batch_of(&m, 1, 4), &[1], 0).unwrap();
        assert!((loss as f64 - std::f64::consts::LN_2).abs() <= 1e-6);
    }

    #[test]
    fn head_bias_gradients_sum_to_zero_per_example() {
        let m = init_model(2, 16, 21).unwrap();
        let x = batch_of(&m, 5, 3);
        let side = m.input_side();
        for i in 0..5 {
            let img = &x.data()[i * side * side..(i + 1) * side * side];
            for label in 0..2 {
                let (_, g) = m.loss_and_gradients_slices(&[img], &[label], 17).unwrap();
                let hb = g.tensors.last().unwrap();
                assert!(hb.data().iter().sum::<f32>().abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gradient_shapes_mirror_params() {
        let m = init_model(2, 16, 2).unwrap();
        let (_, g) = m
            .loss_and_gradients(&batch_of(&m, 2, 1), &[0, 1], 3)
            .unwrap();
        for (gt, p) in g.tensors.iter().zip(m.params()) {
            assert_eq!(gt.shape(), p.shape());
        }
    }

    #[test]
    fn bad_labels_are_rejected() {
        let m = init_model(2, 16, 2).unwrap();
        assert!(m.loss_and_gradients(&batch_of(&m, 2, 1), &[0], 3).is_err());
        assert!(m.loss_and_gradients(&batch_of(&m, 1, 1), &[2], 3).is_err());
    }

    #[test]
    fn non_finite_input_is_reported_with_layer() {
        let m = init_model(2, 16, 2).unwrap();
        let mut x = batch_of(&m, 1, 1);
        x.data_mut()[40] = f32::NAN;
        match m.loss_and_gradients(&x, &[0], 3) {
            Err(NnError::NonFinite { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replace_head_keeps_backbone() {
        let m = init_model(2, 32, 5).unwrap();
        let a = m.replace_head(99);
        let b = m.replace_head(99);
        assert!(a.backbone_bit_eq(&m));
        assert!(a.bit_eq(&b));
        assert!(!a.head().weights.bit_eq(&m.head().weights));
    }

    #[test]
    fn zeroed_head_gives_uniform_rows() {
        let m = init_model(2, 32, 5).unwrap();
        let mut r = m.replace_head(4);
        r.head_mut().weights.data_mut().fill(0.0);
        let out = r.forward(&batch_of(&m, 3, 8)).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn from_params_round_trips() {
        let m = init_model(2, 32, 5).unwrap();
        let tensors = m.params().into_iter().cloned().collect();
        let r =
            ClassifierModel::from_params(32, m.dropout_rate(), m.weight_decay(), tensors).unwrap();
        assert!(r.bit_eq(&m));
    }

    #[test]
    fn input_norm_fit_is_pixel_mean() {
        let a = [0.0f32, 0.2, 0.4, 1.0];
        let b = [1.0f32, 0.4, 0.0, 1.0];
        let n = InputNorm::fit(&[&a, &b], 2, 2.0).unwrap();
        let close = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-6);
        assert!(
            close(n.mean().data(), &[0.5, 0.3, 0.2, 1.0]),
            "{:?}",
            n.mean().data()
        );
        assert!(close(&n.apply(&a), &[-1.0, -0.2, 0.4, 0.0]));
        assert!(InputNorm::fit(&[], 2, 1.0).is_err());
        assert!(InputNorm::fit(&[&a[..3]], 2, 1.0).is_err());
        assert!(InputNorm::new(Tensor::zeros(vec![2, 2]), 0.0).is_err());
        assert!(InputNorm::new(Tensor::zeros(vec![2, 3]), 1.0).is_err());
    }

    #[test]
    fn input_norm_changes_predictions_and_survives_head_replacement() {
        let m = init_model(2, 8, 4).unwrap();
        let px = vec![0.7f32; 64];
        let mean = Tensor::new(vec![8, 8], vec![0.7; 64]).unwrap();
        let normed = m
            .with_input_norm(InputNorm::new(mean, 3.0).unwrap())
            .unwrap();
        // a mean-valued image reaches the first convolution as all zeros
        let zero = m.predict(&vec![0.0; 64]).unwrap();
        assert_eq!(normed.predict(&px).unwrap(), zero);
        assert!(normed
            .replace_head(9)
            .input_norm()
            .bit_eq(normed.input_norm()));
        assert!(m.with_input_norm(InputNorm::identity(4)).is_err());
    }
}
