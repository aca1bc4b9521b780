//! Teacher-forced next-scale training of the transformer backend.
//!
//! Every scale of every sampled image is one independent forward pass: the
//! input is the encoder's downsampled partial sum (the start vector for the
//! first scale) and the targets are that scale's residual bits. The loss is
//! the mean per-bit binary cross-entropy; the optimizer is momentum SGD with
//! linear warmup, a constant plateau and a linear tail, plus global-norm clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::Real;
use super::transformer::{Net, TransformerModel};
use super::PredictorModel;
use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::numerics::Image;
use crate::pyramid::{encode_pyramid, BitGrid, ScaleSchedule};
use crate::textenc::{encode_prompt, PromptEmbedding};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    /// Images per step.
    pub batch_size: usize,
    pub momentum: f32,
    pub warmup_steps: usize,
    /// Fraction of steps at the end over which the rate decays linearly to 10%.
    pub decay_fraction: f32,
    pub clip_norm: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 0.05,
            seed: 0,
            batch_size: 1,
            momentum: 0.9,
            warmup_steps: 50,
            decay_fraction: 0.3,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, step: usize) -> f32 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f32 / self.warmup_steps as f32
        } else {
            1.0
        };
        let tail_start = ((1.0 - self.decay_fraction) * self.steps as f32) as usize;
        let tail = if step >= tail_start && self.steps > tail_start {
            let t = (step - tail_start) as f32 / (self.steps - tail_start) as f32;
            1.0 - 0.9 * t
        } else {
            1.0
        };
        self.lr * warm * tail
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step, before that step's update.
    pub losses: Vec<f64>,
}

/// One image's training targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub prompt: PromptEmbedding,
    /// `F̃_1..F̃_{K-1}` (the first scale's input is the start vector).
    pub inputs: Vec<Vec<f32>>,
    pub shapes: Vec<(usize, usize)>,
    pub targets: Vec<BitGrid>,
}

impl Sample {
    pub fn new(img: &Image, caption: &str, codec: &CodecParams, schedule: &ScaleSchedule) -> Result<Self> {
        let f = codec.encode_image(img)?;
        let pyr = encode_pyramid(&f, schedule)?;
        Ok(Sample {
            prompt: encode_prompt(caption),
            inputs: pyr.inputs.into_iter().map(|m| m.into_data()).collect(),
            shapes: schedule.levels().to_vec(),
            targets: pyr.residuals,
        })
    }

    fn bits(&self) -> usize {
        self.targets.iter().map(|t| t.positions() * t.channels()).sum()
    }
}

/// `softplus(z) - y·z`, stable for large `|z|`.
fn bce_with_logits(z: f64, y: bool) -> f64 {
    let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
    if y {
        sp - z
    } else {
        sp
    }
}

/// Mean per-bit BCE over `samples`; when `grad` is given, its gradient is accumulated into it.
pub(crate) fn loss_and_grad<T: Real>(net: &Net<T>, samples: &[&Sample], mut grad: Option<&mut [T]>) -> Result<f64> {
    let total_bits: usize = samples.iter().map(|s| s.bits()).sum();
    let norm = 1.0 / total_bits as f64;
    let mut loss = 0.0;
    for s in samples {
        let sos = net.sos(&s.prompt);
        for (k, target) in s.targets.iter().enumerate() {
            let (h, w) = s.shapes[k];
            // A 1x1 start vector upsamples to a broadcast over the first level.
            let x: Vec<T> = if k == 0 {
                sos.iter().copied().cycle().take(h * w * sos.len()).collect()
            } else {
                s.inputs[k - 1].iter().map(|&v| T::from_f64(v as f64)).collect()
            };
            let fwd = net.forward(&x, h, w, &s.prompt, None, grad.is_some())?;
            let d = target.channels();
            let mut dlogits = Vec::with_capacity(fwd.logits.len());
            for (i, &z) in fwd.logits.iter().enumerate() {
                let z = z.to_f64();
                let y = target.get(i / d, i % d);
                loss += bce_with_logits(z, y) * norm;
                let p = super::transformer::sigmoid(z);
                dlogits.push(T::from_f64((p - if y { 1.0 } else { 0.0 }) * norm));
            }
            if let Some(g) = grad.as_deref_mut() {
                let tape = fwd.tape.as_ref().expect("tape requested");
                let inputs = net.backward(tape, &dlogits, g);
                if k == 0 {
                    let mut dsos = vec![T::zero(); d];
                    for (i, &v) in inputs.dx.iter().enumerate() {
                        dsos[i % d] = dsos[i % d] + v;
                    }
                    net.sos_backward(&s.prompt, &dsos, g);
                }
            }
        }
    }
    Ok(loss)
}

pub fn prepare_corpus(
    corpus: &[(Image, String)],
    codec: &CodecParams,
    schedule: &ScaleSchedule,
) -> Result<Vec<Sample>> {
    corpus.iter().map(|(img, cap)| Sample::new(img, cap, codec, schedule)).collect()
}

/// Trains on prepared samples, calling `on_step(step, loss)` after every step.
pub fn train_samples(
    model: &TransformerModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(TransformerModel, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid training config {cfg:?}")));
    }
    let mut model = model.clone();
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0f32; model.param_count()];
    let mut grad = vec![0.0f32; model.param_count()];
    for step in 0..cfg.steps {
        let batch: Vec<&Sample> = (0..cfg.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let params = model.params().to_vec();
        let loss = loss_and_grad(&model.net(&params), &batch, Some(&mut grad))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let norm = grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        let scale = if norm > cfg.clip_norm as f64 { (cfg.clip_norm as f64 / norm) as f32 } else { 1.0 };
        let lr = cfg.learning_rate(step);
        for ((p, v), &g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v + g * scale;
            *p -= lr * *v;
        }
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, report))
}

/// Trains a transformer model on captioned images; the synthetic backend is rejected.
pub fn train(
    model: &PredictorModel,
    corpus: &[(Image, String)],
    codec: &CodecParams,
    schedule: &ScaleSchedule,
    cfg: &TrainConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<(PredictorModel, TrainReport)> {
    let PredictorModel::Transformer(t) = model else {
        return Err(Error::Unsupported("training the synthetic backend"));
    };
    if cfg.steps == 0 {
        return Ok((model.clone(), TrainReport::default()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let samples = prepare_corpus(corpus, codec, schedule)?;
    let (trained, report) = train_samples(t, &samples, cfg, on_step)?;
    Ok((PredictorModel::Transformer(trained), report))
}

/// One finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares the `f64` backward pass with central differences on `count` random parameters.
pub fn gradient_check(model: &TransformerModel, sample: &Sample, count: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let base: Vec<f64> = model.params().iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0f64; base.len()];
    loss_and_grad(&model.net(&base), &[sample], Some(&mut grad))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4;
    (0..count)
        .map(|_| {
            let index = rng.random_range(0..base.len());
            let mut p = base.clone();
            p[index] = base[index] + eps;
            let plus = loss_and_grad(&model.net(&p), &[sample], None)?;
            p[index] = base[index] - eps;
            let minus = loss_and_grad(&model.net(&p), &[sample], None)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad[index];
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            Ok(GradCheck {
                index,
                analytic,
                numeric,
                rel_error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::transformer::TransformerConfig;
    use crate::predictor::{Predictor, SyntheticConfig};
    use crate::shapesworld::generate;

    fn tiny() -> (TransformerModel, CodecParams, ScaleSchedule) {
        let cfg = TransformerConfig {
            width: 32,
            layers: 2,
            heads: 2,
            hidden: 48,
            init_seed: 1,
            ..TransformerConfig::default()
        };
        let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)], 32).unwrap();
        (TransformerModel::new(cfg).unwrap(), CodecParams::default(), sched)
    }

    fn corpus(n: usize) -> Vec<(Image, String)> {
        generate(4, n, 16).unwrap().into_iter().map(|(img, s)| (img, s.caption)).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, codec, sched) = tiny();
        let data = corpus(1);
        let sample = Sample::new(&data[0].0, &data[0].1, &codec, &sched).unwrap();
        for c in gradient_check(&model, &sample, 20, 9).unwrap() {
            assert!(c.rel_error <= 1e-3, "{c:?}");
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (model, codec, sched) = tiny();
        let m = PredictorModel::Transformer(model);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (out, report) = train(&m, &corpus(2), &codec, &sched, &cfg, |_, _| {}).unwrap();
        assert_eq!(out, m);
        assert_eq!(out.fingerprint(), m.fingerprint());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn synthetic_backend_unsupported() {
        let (_, codec, sched) = tiny();
        let m = PredictorModel::synthetic(SyntheticConfig::default());
        let r = train(&m, &corpus(1), &codec, &sched, &TrainConfig::default(), |_, _| {});
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn memorizes_single_sample_and_is_reproducible() {
        let (model, codec, sched) = tiny();
        let m = PredictorModel::Transformer(model);
        let cfg = TrainConfig { steps: 500, lr: 0.1, warmup_steps: 20, ..TrainConfig::default() };
        let data = corpus(1);
        let (trained, report) = train(&m, &data, &codec, &sched, &cfg, |_, _| {}).unwrap();
        let first = report.losses[0];
        let last = *report.losses.last().unwrap();
        assert!(last < first, "{first} -> {last}");
        assert_ne!(trained.fingerprint(), m.fingerprint());
        let short = TrainConfig { steps: 20, ..cfg };
        let (_, a) = train(&m, &data, &codec, &sched, &short, |_, _| {}).unwrap();
        let (_, b) = train(&m, &data, &codec, &sched, &short, |_, _| {}).unwrap();
        assert_eq!(a, b);
    }
}
