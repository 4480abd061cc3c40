//! Small differentiable classifiers over a flat parameter vector with named
//! layer views: multinomial logistic regression and a one-hidden-layer tanh
//! MLP. Forward confidences, cross-entropy loss, analytic batch and
//! per-example gradients, and a momentum-SGD step with value semantics.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::LabeledExample;
use crate::error::{DpflError, Result};

/// Confidences are clamped below by this before taking logs, keeping losses
/// finite under extreme poisoning.
pub const CONFIDENCE_FLOOR: f64 = 1e-12;

/// Model family and dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Arch {
    Logistic {
        inputs: usize,
        classes: usize,
    },
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn inputs(&self) -> usize {
        match *self {
            Arch::Logistic { inputs, .. } | Arch::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::Logistic { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_views().iter().map(|v| v.len).sum()
    }

    /// Named, ordered, non-overlapping offset table into the flat vector.
    pub fn layer_views(&self) -> Vec<LayerView> {
        let mut views = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, len: usize| {
            views.push(LayerView {
                name: name.to_string(),
                offset,
                len,
            });
            offset += len;
        };
        match *self {
            Arch::Logistic { inputs, classes } => {
                push("weights", classes * inputs);
                push("bias", classes);
            }
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                push("hidden_weights", hidden * inputs);
                push("hidden_bias", hidden);
                push("output_weights", classes * hidden);
                push("output_bias", classes);
            }
        }
        views
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs() == 0 {
            return Err(DpflError::Config("model needs at least one input".into()));
        }
        if self.classes() < 2 {
            return Err(DpflError::Config("model needs at least two classes".into()));
        }
        if let Arch::Mlp { hidden, .. } = self {
            if *hidden == 0 {
                return Err(DpflError::Config("mlp needs at least one hidden unit".into()));
            }
        }
        Ok(())
    }
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerView {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector plus its layer descriptor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Arch,
    flat: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        Ok(ModelParams {
            arch,
            flat: vec![0.0; arch.param_count()],
        })
    }

    /// Seeded initialization: zeros for logistic regression; uniform
    /// `±1/sqrt(fan_in)` weights for the MLP (zero init would freeze the
    /// hidden units in a symmetric state).
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        match arch {
            Arch::Logistic { .. } => Self::zeros(arch),
            Arch::Mlp { inputs, hidden, .. } => {
                let mut params = Self::zeros(arch)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let views = arch.layer_views();
                for (view, fan_in) in [(&views[0], inputs), (&views[2], hidden)] {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for w in &mut params.flat[view.offset..view.offset + view.len] {
                        *w = rng.gen_range(-bound..bound);
                    }
                }
                Ok(params)
            }
        }
    }

    pub fn from_flat(arch: Arch, flat: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(DpflError::Shape(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                flat.len()
            )));
        }
        Ok(ModelParams { arch, flat })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn layer_views(&self) -> Vec<LayerView> {
        self.arch.layer_views()
    }

    /// Adds a delta vector, returning new params (value semantics).
    pub fn offset_by(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.flat.len() {
            return Err(DpflError::Shape(format!(
                "delta length {} != parameter count {}",
                delta.len(),
                self.flat.len()
            )));
        }
        let flat = self
            .flat
            .iter()
            .zip(delta)
            .map(|(w, d)| w + d)
            .collect();
        Ok(ModelParams {
            arch: self.arch,
            flat,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(params: &ModelParams, x: &[f64]) -> Result<Forward> {
    let arch = params.arch;
    if x.len() != arch.inputs() {
        return Err(DpflError::Shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            arch.inputs()
        )));
    }
    let w = &params.flat;
    match arch {
        Arch::Logistic { inputs, classes } => {
            let bias = classes * inputs;
            let mut logits = vec![0.0; classes];
            for (c, logit) in logits.iter_mut().enumerate() {
                let row = c * inputs;
                let mut z = w[bias + c];
                for (j, &xj) in x.iter().enumerate() {
                    z += w[row + j] * xj;
                }
                *logit = z;
            }
            Ok(Forward {
                hidden: Vec::new(),
                probs: softmax(&logits),
            })
        }
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        } => {
            let hb = hidden * inputs;
            let ow = hb + hidden;
            let ob = ow + classes * hidden;
            let mut h = vec![0.0; hidden];
            for (k, hk) in h.iter_mut().enumerate() {
                let row = k * inputs;
                let mut a = w[hb + k];
                for (j, &xj) in x.iter().enumerate() {
                    a += w[row + j] * xj;
                }
                *hk = a.tanh();
            }
            let mut logits = vec![0.0; classes];
            for (c, logit) in logits.iter_mut().enumerate() {
                let row = ow + c * hidden;
                let mut z = w[ob + c];
                for (k, &hk) in h.iter().enumerate() {
                    z += w[row + k] * hk;
                }
                *logit = z;
            }
            Ok(Forward {
                hidden: h,
                probs: softmax(&logits),
            })
        }
    }
}

/// Softmax class confidences; nonnegative and summing to one.
pub fn predict_confidence(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(params, x)?.probs)
}

/// Cross-entropy loss `-log f_y(params, x)` with the confidence floored at
/// [`CONFIDENCE_FLOOR`].
pub fn loss(params: &ModelParams, example: &LabeledExample) -> Result<f64> {
    if example.label >= params.arch.classes() {
        return Err(DpflError::Shape(format!(
            "label {} out of range for {} classes",
            example.label,
            params.arch.classes()
        )));
    }
    let probs = forward(params, &example.features)?.probs;
    Ok(-probs[example.label].max(CONFIDENCE_FLOOR).ln())
}

/// Per-example and batch-mean cross-entropy gradients.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub per_example: Vec<Vec<f64>>,
    pub batch_mean: Vec<f64>,
}

fn grad_one(params: &ModelParams, example: &LabeledExample) -> Result<Vec<f64>> {
    let arch = params.arch;
    if example.label >= arch.classes() {
        return Err(DpflError::Shape(format!(
            "label {} out of range for {} classes",
            example.label,
            arch.classes()
        )));
    }
    let fwd = forward(params, &example.features)?;
    let x = &example.features;
    let w = &params.flat;
    let mut g = vec![0.0; params.len()];
    match arch {
        Arch::Logistic { inputs, classes } => {
            let bias = classes * inputs;
            for c in 0..classes {
                let dz = fwd.probs[c] - f64::from(u8::from(c == example.label));
                let row = c * inputs;
                for (j, &xj) in x.iter().enumerate() {
                    g[row + j] = dz * xj;
                }
                g[bias + c] = dz;
            }
        }
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        } => {
            let hb = hidden * inputs;
            let ow = hb + hidden;
            let ob = ow + classes * hidden;
            let mut dh = vec![0.0; hidden];
            for c in 0..classes {
                let dz = fwd.probs[c] - f64::from(u8::from(c == example.label));
                let row = ow + c * hidden;
                for (k, &hk) in fwd.hidden.iter().enumerate() {
                    g[row + k] = dz * hk;
                    dh[k] += dz * w[row + k];
                }
                g[ob + c] = dz;
            }
            for (k, &hk) in fwd.hidden.iter().enumerate() {
                let da = dh[k] * (1.0 - hk * hk);
                let row = k * inputs;
                for (j, &xj) in x.iter().enumerate() {
                    g[row + j] = da * xj;
                }
                g[hb + k] = da;
            }
        }
    }
    Ok(g)
}

/// Analytic gradients for every example in the batch plus their mean.
pub fn grad(params: &ModelParams, batch: &[LabeledExample]) -> Result<GradientRecord> {
    if batch.is_empty() {
        return Err(DpflError::Usage("gradient of an empty batch".into()));
    }
    let mut per_example = Vec::with_capacity(batch.len());
    let mut batch_mean = vec![0.0; params.len()];
    for ex in batch {
        let g = grad_one(params, ex)?;
        for (acc, gi) in batch_mean.iter_mut().zip(&g) {
            *acc += gi;
        }
        per_example.push(g);
    }
    let inv = 1.0 / batch.len() as f64;
    for acc in &mut batch_mean {
        *acc *= inv;
    }
    Ok(GradientRecord {
        per_example,
        batch_mean,
    })
}

/// One momentum-SGD update. The buffer is caller-owned per-run optimizer
/// state; with weight decay `wd` the effective gradient is `g + wd * w`,
/// the buffer becomes `momentum * buf + g_eff`, and the step is
/// `w - eta * buf`. Input params are unmodified.
pub fn sgd_step(
    params: &ModelParams,
    gradient: &[f64],
    eta: f64,
    momentum: f64,
    weight_decay: f64,
    buffer: &mut [f64],
) -> Result<ModelParams> {
    let n = params.len();
    if gradient.len() != n || buffer.len() != n {
        return Err(DpflError::Shape(format!(
            "gradient/buffer length {}/{} != parameter count {n}",
            gradient.len(),
            buffer.len()
        )));
    }
    let mut flat = params.flat.clone();
    for i in 0..n {
        let g_eff = gradient[i] + weight_decay * flat[i];
        buffer[i] = momentum * buffer[i] + g_eff;
        flat[i] -= eta * buffer[i];
    }
    Ok(ModelParams {
        arch: params.arch,
        flat,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPFLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, arch tag and dims, the layer
/// descriptor table (name, offset, length), then the flat parameter array
/// as little-endian 64-bit reals.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let (tag, inputs, hidden, classes) = match params.arch {
        Arch::Logistic { inputs, classes } => (0u32, inputs, 0, classes),
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        } => (1u32, inputs, hidden, classes),
    };
    out.extend_from_slice(&tag.to_le_bytes());
    for dim in [inputs, hidden, classes] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    let views = params.layer_views();
    out.extend_from_slice(&(views.len() as u32).to_le_bytes());
    for view in &views {
        out.extend_from_slice(&(view.name.len() as u32).to_le_bytes());
        out.extend_from_slice(view.name.as_bytes());
        out.extend_from_slice(&(view.offset as u64).to_le_bytes());
        out.extend_from_slice(&(view.len as u64).to_le_bytes());
    }
    for w in &params.flat {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let mut take = |n: usize, field: &str| -> Result<&[u8]> {
        if bytes.len() < cursor + n {
            return Err(DpflError::format(field, "checkpoint truncated"));
        }
        let slice = &bytes[cursor..cursor + n];
        cursor += n;
        Ok(slice)
    };
    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(DpflError::format("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DpflError::format("version", format!("unsupported {version}")));
    }
    let tag = u32::from_le_bytes(take(4, "arch tag")?.try_into().unwrap());
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u64::from_le_bytes(take(8, "arch dims")?.try_into().unwrap()) as usize;
    }
    let arch = match tag {
        0 => Arch::Logistic {
            inputs: dims[0],
            classes: dims[2],
        },
        1 => Arch::Mlp {
            inputs: dims[0],
            hidden: dims[1],
            classes: dims[2],
        },
        other => return Err(DpflError::format("arch tag", format!("unknown tag {other}"))),
    };
    let view_count = u32::from_le_bytes(take(4, "layer count")?.try_into().unwrap()) as usize;
    for _ in 0..view_count {
        let name_len = u32::from_le_bytes(take(4, "layer name")?.try_into().unwrap()) as usize;
        take(name_len, "layer name")?;
        take(16, "layer bounds")?;
    }
    let count = arch.param_count();
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(f64::from_le_bytes(take(8, "parameters")?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(DpflError::format("parameters", "trailing bytes in checkpoint"));
    }
    ModelParams::from_flat(arch, flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_params(arch: Arch, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = (0..arch.param_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        ModelParams::from_flat(arch, flat).unwrap()
    }

    fn random_example(inputs: usize, classes: usize, seed: u64) -> LabeledExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledExample {
            features: (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: rng.gen_range(0..classes),
        }
    }

    #[test]
    fn zero_params_predict_uniform() {
        for arch in [
            Arch::Logistic {
                inputs: 4,
                classes: 3,
            },
            Arch::Mlp {
                inputs: 4,
                hidden: 5,
                classes: 3,
            },
        ] {
            let params = ModelParams::zeros(arch).unwrap();
            let probs = predict_confidence(&params, &[0.3, -0.2, 0.9, 0.1]).unwrap();
            for p in probs {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confidence_saturates_with_logit_scale() {
        let arch = Arch::Logistic {
            inputs: 1,
            classes: 2,
        };
        let mut last = 0.5;
        for scale in [1.0, 4.0, 16.0, 64.0] {
            let params = ModelParams::from_flat(arch, vec![scale, -scale, 0.0, 0.0]).unwrap();
            let probs = predict_confidence(&params, &[1.0]).unwrap();
            assert!(probs[0] >= last);
            last = probs[0];
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn confidences_sum_to_one() {
        let arch = Arch::Mlp {
            inputs: 6,
            hidden: 4,
            classes: 5,
        };
        for s in 0..20 {
            let params = random_params(arch, s);
            let x = random_example(6, 5, 100 + s).features;
            let probs = predict_confidence(&params, &x).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let params = ModelParams::zeros(Arch::Logistic {
            inputs: 3,
            classes: 2,
        })
        .unwrap();
        assert!(matches!(
            predict_confidence(&params, &[1.0, 2.0]),
            Err(DpflError::Shape(_))
        ));
    }

    #[test]
    fn loss_of_uniform_binary_model_is_ln2() {
        let params = ModelParams::zeros(Arch::Logistic {
            inputs: 2,
            classes: 2,
        })
        .unwrap();
        let ex = LabeledExample {
            features: vec![0.5, -0.5],
            label: 1,
        };
        assert!((loss(&params, &ex).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_at_full_confidence_and_clamped_at_zero_confidence() {
        let arch = Arch::Logistic {
            inputs: 1,
            classes: 2,
        };
        let params = ModelParams::from_flat(arch, vec![60.0, -60.0, 0.0, 0.0]).unwrap();
        let sure = LabeledExample {
            features: vec![1.0],
            label: 0,
        };
        let wrong = LabeledExample {
            features: vec![1.0],
            label: 1,
        };
        assert!(loss(&params, &sure).unwrap().abs() < 1e-9);
        let clamped = loss(&params, &wrong).unwrap();
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(clamped.is_finite());
    }

    #[test]
    fn single_example_batch_mean_equals_gradient() {
        let arch = Arch::Logistic {
            inputs: 3,
            classes: 2,
        };
        let params = random_params(arch, 1);
        let ex = random_example(3, 2, 2);
        let rec = grad(&params, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(rec.per_example.len(), 1);
        assert_eq!(rec.per_example[0], rec.batch_mean);
    }

    #[test]
    fn duplicated_example_leaves_mean_unchanged() {
        let arch = Arch::Mlp {
            inputs: 3,
            hidden: 4,
            classes: 2,
        };
        let params = random_params(arch, 3);
        let ex = random_example(3, 2, 4);
        let single = grad(&params, std::slice::from_ref(&ex)).unwrap();
        let double = grad(&params, &[ex.clone(), ex]).unwrap();
        for (a, b) in single.batch_mean.iter().zip(&double.batch_mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let params = ModelParams::zeros(Arch::Logistic {
            inputs: 2,
            classes: 2,
        })
        .unwrap();
        assert!(matches!(grad(&params, &[]), Err(DpflError::Usage(_))));
    }

    fn finite_difference_check(arch: Arch, seed: u64) {
        let params = random_params(arch, seed);
        let batch = vec![
            random_example(arch.inputs(), arch.classes(), seed + 10),
            random_example(arch.inputs(), arch.classes(), seed + 11),
        ];
        let analytic = grad(&params, &batch).unwrap().batch_mean;
        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        for i in 0..params.len() {
            let mut plus = params.flat.clone();
            plus[i] += h;
            let mut minus = params.flat.clone();
            minus[i] -= h;
            let p = ModelParams::from_flat(arch, plus).unwrap();
            let m = ModelParams::from_flat(arch, minus).unwrap();
            let mut lp = 0.0;
            let mut lm = 0.0;
            for ex in &batch {
                lp += loss(&p, ex).unwrap();
                lm += loss(&m, ex).unwrap();
            }
            let numeric = (lp - lm) / (2.0 * h * batch.len() as f64);
            max_err = max_err.max((numeric - analytic[i]).abs());
        }
        assert!(max_err < 1e-6, "finite-difference mismatch: {max_err}");
    }

    #[test]
    fn gradient_matches_finite_differences_logistic() {
        finite_difference_check(
            Arch::Logistic {
                inputs: 2,
                classes: 2,
            },
            7,
        );
        finite_difference_check(
            Arch::Logistic {
                inputs: 5,
                classes: 3,
            },
            8,
        );
    }

    #[test]
    fn gradient_matches_finite_differences_mlp() {
        finite_difference_check(
            Arch::Mlp {
                inputs: 4,
                hidden: 3,
                classes: 3,
            },
            9,
        );
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let arch = Arch::Logistic {
            inputs: 2,
            classes: 2,
        };
        let params = random_params(arch, 5);
        let mut buf = vec![0.0; params.len()];
        let next = sgd_step(&params, &vec![0.0; params.len()], 0.1, 0.0, 0.0, &mut buf).unwrap();
        assert_eq!(params.flat(), next.flat());
    }

    #[test]
    fn sgd_unit_rate_subtracts_gradient() {
        let arch = Arch::Logistic {
            inputs: 1,
            classes: 2,
        };
        let params = ModelParams::from_flat(arch, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = vec![0.5, -0.5, 1.0, 0.0];
        let mut buf = vec![0.0; 4];
        let next = sgd_step(&params, &g, 1.0, 0.0, 0.0, &mut buf).unwrap();
        assert_eq!(next.flat(), &[0.5, 2.5, 2.0, 4.0]);
    }

    #[test]
    fn momentum_two_step_displacement() {
        // buf1 = g, buf2 = 0.9 g + g, so total displacement is eta*(g + 1.9 g).
        let arch = Arch::Logistic {
            inputs: 1,
            classes: 2,
        };
        let params = ModelParams::zeros(arch).unwrap();
        let g = vec![1.0, -2.0, 0.5, 3.0];
        let eta = 0.1;
        let mut buf = vec![0.0; 4];
        let step1 = sgd_step(&params, &g, eta, 0.9, 0.0, &mut buf).unwrap();
        let step2 = sgd_step(&step1, &g, eta, 0.9, 0.0, &mut buf).unwrap();
        for (w, gi) in step2.flat().iter().zip(&g) {
            assert!((w - (-eta * (gi + 1.9 * gi))).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let arch = Arch::Mlp {
            inputs: 3,
            hidden: 2,
            classes: 2,
        };
        let params = random_params(arch, 11);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(shift in -50.0f64..50.0, seed in 0u64..500) {
            let arch = Arch::Logistic { inputs: 3, classes: 4 };
            let params = random_params(arch, seed);
            let x = random_example(3, 4, seed + 1000).features;
            let base = predict_confidence(&params, &x).unwrap();
            // Adding a constant to every logit: bump all bias entries.
            let mut flat = params.flat().to_vec();
            for b in &mut flat[12..16] {
                *b += shift;
            }
            let shifted = ModelParams::from_flat(arch, flat).unwrap();
            let probs = predict_confidence(&shifted, &x).unwrap();
            for (a, b) in base.iter().zip(&probs) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
