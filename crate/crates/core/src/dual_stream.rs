//! Joint training of an RGB stream and a motion stream with a per-stream
//! classification loss and an attention-consistency loss. Only the RGB
//! stream is used for inference; score fusion is kept for ablations.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::backbone::TAP_STAGES;
use crate::encoder::AttentionMap;
use crate::error::{Error, Result};
use crate::mshvit::{ModelConfig, StreamArch};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    Fixed(f64),
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub optical: f64,
    pub attention: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            optical: 1.0,
            attention: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualConfig {
    /// Stages whose final-layer attention maps are aligned.
    pub alignment_stages: Vec<usize>,
    /// Detach the motion side of the alignment loss.
    pub stop_motion_grad: bool,
    pub weights: LossWeights,
    pub alpha: AlphaMode,
    pub learning_rate: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            alignment_stages: vec![3],
            stop_motion_grad: false,
            weights: LossWeights::default(),
            alpha: AlphaMode::Fixed(1.0),
            learning_rate: 0.05,
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        for s in &self.alignment_stages {
            if !TAP_STAGES.contains(s) {
                return Err(Error::Config(format!(
                    "alignment stage {s} is not one of the tap stages {TAP_STAGES:?}"
                )));
            }
        }
        if let AlphaMode::Fixed(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha must lie in [0, 1], got {a}")));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        let w = self.weights;
        if [w.rgb, w.optical, w.attention].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub attention_loss: f64,
    pub optical_loss: f64,
    pub rgb_loss: f64,
    pub total_loss: f64,
}

/// One training example: RGB frame, its motion image, and binary labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub rgb: Tensor,
    pub motion: Tensor,
    pub labels: Vec<f64>,
}

/// Graph handles for the weighted loss terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rgb: Var,
    pub optical: Var,
    pub attention: Var,
    pub total: Var,
    pub rgb_probs: Var,
    pub motion_probs: Var,
}

/// Mean binary cross entropy over classes. `probs` is `C×1`.
pub fn bce_loss(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    let c = g.shape(probs).iter().product::<usize>();
    if c != labels.len() {
        return Err(Error::dim(format!(
            "bce: {c} predictions against {} labels",
            labels.len()
        )));
    }
    let p = g.reshape(probs, &[c])?;
    let p = g.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let y = g.constant(Tensor::from_vec(labels.to_vec()));
    let not_y = g.constant(Tensor::from_vec(labels.iter().map(|v| 1.0 - v).collect()));
    let log_p = g.ln(p);
    let q = g.scale(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.ln(q);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let s = g.add(pos, neg)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Plain-number BCE with the same clamping as [`bce_loss`].
pub fn bce_value(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim(format!(
            "bce: {} predictions against {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

/// Derivative of [`bce_value`] with respect to each probability.
fn bce_prob_grad(probs: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            (p - y) / (p * (1.0 - p)) / n
        })
        .collect()
}

/// Mean squared difference of head-averaged final-layer attention maps,
/// averaged over `stages`. Zero when `stages` is empty.
pub fn attention_alignment_loss(
    g: &mut Graph,
    rgb: &BTreeMap<usize, Vec<AttentionMap>>,
    motion: &BTreeMap<usize, Vec<AttentionMap>>,
    stages: &[usize],
    detach_motion: bool,
) -> Result<Var> {
    if stages.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(stages.len());
    for &stage in stages {
        let (Some(a), Some(b)) = (
            rgb.get(&stage).and_then(|v| v.last()),
            motion.get(&stage).and_then(|v| v.last()),
        ) else {
            return Err(Error::Contract(format!("no attention maps for stage {stage}")));
        };
        let fa = a.head_mean(g)?;
        let mut fb = b.head_mean(g)?;
        if g.shape(fa) != g.shape(fb) {
            return Err(Error::Contract(format!(
                "stage {stage} attention shapes differ: {:?} vs {:?}",
                g.shape(fa),
                g.shape(fb)
            )));
        }
        if detach_motion {
            fb = g.detach(fb);
        }
        let d = g.sub(fa, fb)?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// `alpha·rgb + (1 − alpha)·motion`, elementwise.
pub fn fuse_predictions(rgb: &[f64], motion: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("fusion weight must lie in [0, 1], got {alpha}")));
    }
    if rgb.len() != motion.len() {
        return Err(Error::dim(format!(
            "fusion: {} rgb scores against {} motion scores",
            rgb.len(),
            motion.len()
        )));
    }
    Ok(rgb
        .iter()
        .zip(motion)
        .map(|(&r, &o)| alpha * r + (1.0 - alpha) * o)
        .collect())
}

/// One projected (sub)gradient step on the fusion weight.
pub fn update_alpha(alpha: f64, grad: f64, lr: f64) -> f64 {
    (alpha - lr * grad).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct DualStreamModel {
    pub cfg: DualConfig,
    pub arch: StreamArch,
    pub rgb: ParamStore,
    pub motion: ParamStore,
    pub alpha: f64,
    step: usize,
}

impl DualStreamModel {
    /// Builds both streams from one seeded generator, RGB first.
    pub fn new(model: &ModelConfig, cfg: &DualConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rgb = ParamStore::new();
        let arch = StreamArch::new(model, &mut rgb, &mut rng)?;
        let mut motion = ParamStore::new();
        StreamArch::new(model, &mut motion, &mut rng)?;
        let alpha = match cfg.alpha {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Learned => 0.5,
        };
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            rgb,
            motion,
            alpha,
            step: 0,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.arch.config()
    }

    /// Number of optimizer steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Builds the weighted loss terms of one sample on `g`.
    pub fn sample_loss(&self, g: &mut Graph, rgb: &Bound, motion: &Bound, sample: &Sample) -> Result<LossVars> {
        let xr = g.constant(sample.rgb.clone());
        let xo = g.constant(sample.motion.clone());
        let out_r = self.arch.forward(g, rgb, xr)?;
        let out_o = self.arch.forward(g, motion, xo)?;
        let w = self.cfg.weights;
        let lr = bce_loss(g, out_r.probs, &sample.labels)?;
        let lr = g.scale(lr, w.rgb);
        let lo = bce_loss(g, out_o.probs, &sample.labels)?;
        let lo = g.scale(lo, w.optical);
        let la = attention_alignment_loss(
            g,
            &out_r.attention,
            &out_o.attention,
            &self.cfg.alignment_stages,
            self.cfg.stop_motion_grad,
        )?;
        let la = g.scale(la, w.attention);
        let t = g.add(lr, lo)?;
        let total = g.add(t, la)?;
        Ok(LossVars {
            rgb: lr,
            optical: lo,
            attention: la,
            total,
            rgb_probs: out_r.probs,
            motion_probs: out_o.probs,
        })
    }

    /// Mean total loss over `batch` as one graph node, for gradient checks.
    pub fn batch_loss(&self, g: &mut Graph, rgb: &Bound, motion: &Bound, batch: &[Sample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut acc: Option<Var> = None;
        for s in batch {
            let l = self.sample_loss(g, rgb, motion, s)?.total;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        Ok(g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64))
    }

    /// Loss terms of one sample without recording gradients.
    pub fn evaluate(&self, sample: &Sample) -> Result<LossRecord> {
        let mut g = Graph::new();
        let r = self.rgb.bind(&mut g, false);
        let o = self.motion.bind(&mut g, false);
        let v = self.sample_loss(&mut g, &r, &o, sample)?;
        Ok(record(&g, &v, self.step))
    }

    /// One SGD step on the mean total loss of `batch`. Returns the
    /// batch-averaged loss terms measured before the update.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step needs a non-empty batch".into()));
        }
        let step = self.step;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads_r: Vec<Tensor> = self.rgb.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut grads_o: Vec<Tensor> = self.motion.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut sum = LossRecord {
            step,
            attention_loss: 0.0,
            optical_loss: 0.0,
            rgb_loss: 0.0,
            total_loss: 0.0,
        };
        let mut alpha_grad = 0.0;

        for sample in batch {
            let mut g = Graph::new();
            let r = self.rgb.bind(&mut g, true);
            let o = self.motion.bind(&mut g, true);
            let v = self.sample_loss(&mut g, &r, &o, sample)?;
            let rec = record(&g, &v, step);
            if !rec.total_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite loss {rec:?}"),
                });
            }
            sum.attention_loss += rec.attention_loss * inv_b;
            sum.optical_loss += rec.optical_loss * inv_b;
            sum.rgb_loss += rec.rgb_loss * inv_b;
            sum.total_loss += rec.total_loss * inv_b;

            if self.cfg.alpha == AlphaMode::Learned {
                let pr = g.value(v.rgb_probs).data().to_vec();
                let po = g.value(v.motion_probs).data().to_vec();
                let fused = fuse_predictions(&pr, &po, self.alpha)?;
                let d = bce_prob_grad(&fused, &sample.labels);
                alpha_grad += inv_b * d.iter().zip(pr.iter().zip(&po)).map(|(d, (r, o))| d * (r - o)).sum::<f64>();
            }

            let loss = g.scale(v.total, inv_b);
            g.backward(loss)?;
            accumulate(&g, &r, &mut grads_r);
            accumulate(&g, &o, &mut grads_o);
        }

        let lr = self.cfg.learning_rate;
        for (store, grads) in [(&mut self.rgb, &grads_r), (&mut self.motion, &grads_o)] {
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite gradient for parameter {}", store.iter().nth(i).map_or("?", |p| p.0)),
                });
            }
            for (p, gr) in store.tensors_mut().iter_mut().zip(grads) {
                for (x, d) in p.data_mut().iter_mut().zip(gr.data()) {
                    *x -= lr * d;
                }
            }
        }
        if self.cfg.alpha == AlphaMode::Learned {
            self.alpha = update_alpha(self.alpha, alpha_grad, lr);
        }
        self.step += 1;
        Ok(sum)
    }

    /// Class scores from the RGB stream alone.
    pub fn infer_rgb(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.arch.predict(&self.rgb, image)
    }

    /// Class scores from the motion stream alone.
    pub fn infer_motion(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.arch.predict(&self.motion, image)
    }

    /// Fused scores at the model's current fusion weight.
    pub fn infer_fused(&self, rgb: &Tensor, motion: &Tensor) -> Result<Vec<f64>> {
        fuse_predictions(&self.infer_rgb(rgb)?, &self.infer_motion(motion)?, self.alpha)
    }
}

fn record(g: &Graph, v: &LossVars, step: usize) -> LossRecord {
    let s = |x: Var| g.value(x).data()[0];
    LossRecord {
        step,
        attention_loss: s(v.attention),
        optical_loss: s(v.optical),
        rgb_loss: s(v.rgb),
        total_loss: s(v.total),
    }
}

fn accumulate(g: &Graph, bound: &Bound, grads: &mut [Tensor]) {
    for (&v, acc) in bound.vars().iter().zip(grads.iter_mut()) {
        if let Some(gr) = g.grad(v) {
            for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                *a += b;
            }
        }
    }
}
