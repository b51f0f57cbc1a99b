//! Finite-difference oracle for `ClassifierModel::loss_and_gradients`.
//!
//! Central differences are taken on an independent f64 forward pass, so the
//! check is not limited by f32 cancellation. Parameters whose perturbation
//! flips a ReLU or max-pool decision sit on a kink and are skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassifierModel, NnError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_at_kinks: usize,
    pub max_relative_error: f64,
    /// Loss difference between the f64 reference and the model.
    pub loss_gap: f64,
    /// Name and index of the worst parameter.
    pub worst: Option<(String, usize)>,
}

struct Reference {
    params: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    weight_decay: f64,
    mean: Vec<f64>,
    scale: f64,
    side: usize,
}

struct Trace {
    loss: f64,
    decisions: Vec<bool>,
}

impl Reference {
    fn new(model: &ClassifierModel) -> Self {
        let norm = model.input_norm();
        Self {
            params: model
                .params()
                .iter()
                .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
                .collect(),
            shapes: model.params().iter().map(|t| t.shape().to_vec()).collect(),
            weight_decay: f64::from(model.weight_decay()),
            mean: norm.mean().data().iter().map(|&v| f64::from(v)).collect(),
            scale: f64::from(norm.scale()),
            side: model.input_side(),
        }
    }

    fn conv(&self, layer: usize, x: &[f64], side: usize) -> Vec<f64> {
        let k = &self.params[2 * layer];
        let b = &self.params[2 * layer + 1];
        let s = &self.shapes[2 * layer];
        let (cout, cin) = (s[0], s[1]);
        let mut out = vec![0.0; cout * side * side];
        for o in 0..cout {
            for y in 0..side {
                for xx in 0..side {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                                    continue;
                                }
                                acc += k[((o * cin + i) * 3 + ky) * 3 + kx]
                                    * x[(i * side + sy as usize) * side + sx as usize];
                            }
                        }
                    }
                    out[(o * side + y) * side + xx] = acc;
                }
            }
        }
        out
    }

    fn trace(&self, images: &[Vec<f64>], labels: &[usize]) -> Trace {
        let n_conv = (self.params.len() - 4) / 2;
        let mut decisions = Vec::new();
        let mut ce = 0.0;
        for (img, &label) in images.iter().zip(labels) {
            let mut x: Vec<f64> = img
                .iter()
                .zip(&self.mean)
                .map(|(v, m)| (v - m) * self.scale)
                .collect();
            let mut side = self.side;
            for l in 0..n_conv {
                let pre = self.conv(l, &x, side);
                decisions.extend(pre.iter().map(|&v| v > 0.0));
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let c = act.len() / (side * side);
                let half = side / 2;
                let mut pooled = vec![0.0; c * half * half];
                for ch in 0..c {
                    for y in 0..half {
                        for xx in 0..half {
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = 0;
                            for (n, (dy, dx)) in
                                [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                            {
                                let v = act[(ch * side + 2 * y + dy) * side + 2 * xx + dx];
                                if v > best {
                                    best = v;
                                    arg = n;
                                }
                            }
                            decisions.extend((0..4).map(|n| n == arg));
                            pooled[(ch * half + y) * half + xx] = best;
                        }
                    }
                }
                x = pooled;
                side = half;
            }
            let dense = |w: &[f64], b: &[f64], inp: &[f64]| -> Vec<f64> {
                b.iter()
                    .enumerate()
                    .map(|(j, &bj)| {
                        bj + inp
                            .iter()
                            .enumerate()
                            .map(|(k, &v)| w[j * inp.len() + k] * v)
                            .sum::<f64>()
                    })
                    .collect()
            };
            let pen = dense(&self.params[2 * n_conv], &self.params[2 * n_conv + 1], &x);
            decisions.extend(pen.iter().map(|&v| v > 0.0));
            let pen: Vec<f64> = pen.into_iter().map(|v| v.max(0.0)).collect();
            let logits = dense(
                &self.params[2 * n_conv + 2],
                &self.params[2 * n_conv + 3],
                &pen,
            );
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
            let p = (logits[label] - m).exp() / z;
            ce -= p.max(1e-12).ln();
        }
        let decay: f64 = (0..self.params.len())
            .filter(|&i| ClassifierModel::is_weight_param(i))
            .map(|i| self.params[i].iter().map(|v| v * v).sum::<f64>())
            .sum();
        Trace {
            loss: ce / images.len() as f64 + self.weight_decay * decay,
            decisions,
        }
    }
}

/// Compare analytic gradients of `model` (dropout disabled) on a batch of
/// flattened images against central differences with step `h`.
///
/// Every bias and head weight is checked, then uniformly sampled parameters
/// until `min_params` have been tried.
pub fn check_gradients(
    model: &ClassifierModel,
    images: &[Vec<f32>],
    labels: &[usize],
    h: f64,
    min_params: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let model = ClassifierModel::from_params(
        model.input_side(),
        0.0,
        model.weight_decay(),
        model.params().into_iter().cloned().collect(),
    )?
    .with_input_norm(model.input_norm().clone())?;
    let side = model.input_side();
    let flat: Vec<f32> = images.iter().flatten().copied().collect();
    let batch = Tensor::new(vec![images.len(), 1, side, side], flat)?;
    let (loss, grads) = model.loss_and_gradients(&batch, labels, 0)?;

    let as_f64: Vec<Vec<f64>> = images
        .iter()
        .map(|i| i.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut reference = Reference::new(&model);
    let base = reference.trace(&as_f64, labels);

    let sizes: Vec<usize> = reference.params.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        if !ClassifierModel::is_weight_param(t) || t == sizes.len() - 2 {
            picks.extend((0..n).map(|i| (t, i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while picks.len() < min_params {
        let mut r = rng.random_range(0..total);
        let mut t = 0;
        while r >= sizes[t] {
            r -= sizes[t];
            t += 1;
        }
        picks.push((t, r));
    }

    let mut report = GradCheckReport {
        checked: 0,
        skipped_at_kinks: 0,
        max_relative_error: 0.0,
        loss_gap: (base.loss - f64::from(loss)).abs(),
        worst: None,
    };
    for (t, i) in picks {
        let orig = reference.params[t][i];
        reference.params[t][i] = orig + h;
        let plus = reference.trace(&as_f64, labels);
        reference.params[t][i] = orig - h;
        let minus = reference.trace(&as_f64, labels);
        reference.params[t][i] = orig;
        if plus.decisions != base.decisions || minus.decisions != base.decisions {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        let analytic = f64::from(grads.tensors[t].data()[i]);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            report.worst = Some((model.param_name(t), i));
        }
        report.checked += 1;
    }
    Ok(report)
}
