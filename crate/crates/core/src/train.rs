//! Joint training of the reconstruction and segmentation branches.
//!
//! The objective for one B-scan is `w_D·L_D + w_S·L_S`, where `L_D` is the
//! Euclidean norm of the reconstruction error and `L_S` the per-pixel
//! categorical cross-entropy averaged over pixels. Batches average the
//! per-sample objective. Parameters are updated with Adam and decoupled
//! weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{miou, pixel_accuracy, segmentation_confusion, ConfusionMatrix};
use crate::net::{input_from_bscan, NetConfig, Network, Real, Tensor3};
use crate::types::{normalize_bscan, resize_scan, AnnotationMask, BScan, NUM_CLASSES};

/// Probability clamp of the cross-entropy.
pub const CE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fold_count: usize,
    /// `(w_D, w_S)`.
    pub loss_weights: [f64; 2],
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-5,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            fold_count: 5,
            loss_weights: [1.0, 1.0],
            horizontal_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("weight_decay", self.weight_decay),
            ("loss_weights[0]", self.loss_weights[0]),
            ("loss_weights[1]", self.loss_weights[1]),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be below 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.fold_count < 2 {
            return Err(Error::Config(format!("fold_count must be at least 2, got {}", self.fold_count)));
        }
        Ok(())
    }
}

/// Normalizes a scan, resamples it to the network input size and replicates
/// the gray channel.
pub fn prepare_input(scan: &BScan, config: &NetConfig) -> Result<Tensor3<f32>> {
    let normalized = normalize_bscan(scan)?;
    let (scan, _) = resize_scan(&normalized, None, config.input_rows, config.input_cols)?;
    Ok(input_from_bscan(&scan))
}

/// A network-resolution training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor3<f32>,
    /// Class index per pixel, row-major.
    pub labels: Vec<u8>,
}

impl Sample {
    /// [`prepare_input`] plus nearest-neighbour resampling of the mask.
    pub fn prepare(scan: &BScan, mask: &AnnotationMask, config: &NetConfig) -> Result<Self> {
        let normalized = normalize_bscan(scan)?;
        let (scan, mask) = resize_scan(&normalized, Some(mask), config.input_rows, config.input_cols)?;
        Ok(Self {
            input: input_from_bscan(&scan),
            labels: mask.expect("mask was supplied").labels().as_slice().to_vec(),
        })
    }

    fn flipped(&self) -> Self {
        let cols = self.input.cols;
        let mut input = self.input.clone();
        let mut labels = self.labels.clone();
        input.data.chunks_mut(cols).for_each(<[f32]>::reverse);
        labels.chunks_mut(cols).for_each(<[u8]>::reverse);
        Self { input, labels }
    }
}

/// Per-sample reconstruction loss `‖x − x′‖₂` and its gradient in `x′`.
pub fn reconstruction_term<T: Real>(x: &Tensor3<T>, x_hat: &Tensor3<T>) -> Result<(f64, Tensor3<T>)> {
    if !x.same_shape(x_hat) {
        return Err(Error::shape(
            "reconstruction loss",
            format!("{:?}", x.hwc()),
            format!("{:?}", x_hat.hwc()),
        ));
    }
    let sq: f64 = x
        .data
        .iter()
        .zip(&x_hat.data)
        .map(|(&a, &b)| {
            let d = b.to_f64().unwrap() - a.to_f64().unwrap();
            d * d
        })
        .sum();
    let norm = sq.sqrt();
    let mut grad = Tensor3::zeros(x.channels, x.rows, x.cols);
    if norm > 0.0 {
        for ((g, &a), &b) in grad.data.iter_mut().zip(&x.data).zip(&x_hat.data) {
            *g = T::lit((b.to_f64().unwrap() - a.to_f64().unwrap()) / norm);
        }
    }
    Ok((norm, grad))
}

/// Per-sample mean pixel cross-entropy and its gradient in the probabilities.
pub fn segmentation_term<T: Real>(labels: &[u8], probs: &Tensor3<T>) -> Result<(f64, Tensor3<T>)> {
    let plane = probs.plane();
    if probs.channels != NUM_CLASSES || labels.len() != plane {
        return Err(Error::shape(
            "segmentation loss",
            format!("{NUM_CLASSES} channels over {} pixels", labels.len()),
            format!("{} channels over {plane} pixels", probs.channels),
        ));
    }
    if let Some((i, v)) = probs
        .data
        .iter()
        .map(|v| v.to_f64().unwrap())
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(v))
    {
        return Err(Error::Invalid(format!("probability {v} at flat index {i} is outside [0,1]")));
    }
    let mut grad = Tensor3::zeros(probs.channels, probs.rows, probs.cols);
    let mut loss = 0.0;
    let scale = 1.0 / plane as f64;
    for (index, &label) in labels.iter().enumerate() {
        if label as usize >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                index,
                classes: NUM_CLASSES,
            });
        }
        let at = label as usize * plane + index;
        let p = probs.data[at].to_f64().unwrap();
        let clamped = p.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
        loss -= clamped.ln();
        if p == clamped {
            grad.data[at] = T::lit(-scale / p);
        }
    }
    Ok((loss * scale, grad))
}

/// Batch-mean reconstruction loss.
pub fn loss_reconstruction<T: Real>(x: &[Tensor3<T>], x_hat: &[Tensor3<T>]) -> Result<f64> {
    batch_mean(x.len(), x_hat.len(), |i| reconstruction_term(&x[i], &x_hat[i]).map(|r| r.0))
}

/// Batch-mean segmentation loss; `labels[i]` holds class indices, the
/// equivalent of a one-hot target.
pub fn loss_segmentation<T: Real>(labels: &[&[u8]], probs: &[Tensor3<T>]) -> Result<f64> {
    batch_mean(labels.len(), probs.len(), |i| segmentation_term(labels[i], &probs[i]).map(|r| r.0))
}

pub fn loss_total(l_d: f64, l_s: f64, weights: [f64; 2]) -> f64 {
    weights[0] * l_d + weights[1] * l_s
}

fn batch_mean(a: usize, b: usize, mut term: impl FnMut(usize) -> Result<f64>) -> Result<f64> {
    if a != b {
        return Err(Error::shape("batch", a.to_string(), b.to_string()));
    }
    if a == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut sum = 0.0;
    for i in 0..a {
        sum += term(i)?;
    }
    Ok(sum / a as f64)
}

/// Loss components of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub reconstruction: f64,
    pub segmentation: f64,
    pub total: f64,
}

/// Forward and backward pass for one sample. Gradients of `scale` times the
/// sample objective are added to `grad`.
pub fn accumulate_sample<T: Real>(
    net: &Network<T>,
    input: &Tensor3<T>,
    labels: &[u8],
    weights: [f64; 2],
    scale: f64,
    grad: &mut Network<T>,
) -> Result<LossParts> {
    let cache = net.forward_cached(input)?;
    let (l_d, mut g_d) = reconstruction_term(input, cache.reconstruction())?;
    let (l_s, mut g_s) = segmentation_term(labels, cache.segmentation())?;
    let (a, b) = (T::lit(weights[0] * scale), T::lit(weights[1] * scale));
    g_d.data.iter_mut().for_each(|v| *v *= a);
    g_s.data.iter_mut().for_each(|v| *v *= b);
    net.backward(&cache, &g_s, &g_d, grad);
    Ok(LossParts {
        reconstruction: l_d,
        segmentation: l_s,
        total: loss_total(l_d, l_s, weights),
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: TrainConfig,
    step: i32,
    m: Network<f32>,
    v: Network<f32>,
}

impl AdamW {
    pub fn new(params: &Network<f32>, config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Network<f32>, grad: &Network<f32>) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bias1 = 1.0 - c.beta1.powi(self.step);
        let bias2 = 1.0 - c.beta2.powi(self.step);
        let lr = c.learning_rate;
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let step_size = (lr / bias1) as f32;
        let root_bias2 = bias2.sqrt() as f32;
        let eps = c.epsilon as f32;
        let layers = params
            .layers_mut()
            .into_iter()
            .zip(self.m.layers_mut())
            .zip(self.v.layers_mut())
            .zip(grad.layers());
        for ((((_, p), (_, m)), (_, v)), (_, g)) in layers {
            let update = |p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]| {
                for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p *= decay;
                    *p -= step_size * *m / (v.sqrt() / root_bias2 + eps);
                }
            };
            update(&mut p.weight, &mut m.weight, &mut v.weight, &g.weight);
            update(&mut p.bias, &mut m.bias, &mut v.bias, &g.bias);
        }
    }
}

fn zero_grad<T: Real>(net: &mut Network<T>) {
    for (_, conv) in net.layers_mut() {
        conv.weight.iter_mut().for_each(|v| *v = T::zero());
        conv.bias.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Disjoint test folds covering `0..n`; fold `k` is the test set of run `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside fold `fold`, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Shuffles `0..n` with the seed and deals indices round-robin into folds,
/// so fold sizes differ by at most one.
pub fn make_folds(n: usize, fold_count: usize, seed: u64) -> Result<FoldPlan> {
    if fold_count < 2 {
        return Err(Error::Config(format!("fold_count must be at least 2, got {fold_count}")));
    }
    if fold_count > n {
        return Err(Error::Config(format!("cannot split {n} items into {fold_count} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / fold_count + 1); fold_count];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % fold_count].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds })
}

/// Argmax class of every pixel.
pub fn predict_labels(net: &Network<f32>, input: &Tensor3<f32>) -> Result<Vec<u8>> {
    let probs = net.forward(input)?.segmentation;
    let plane = probs.plane();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..probs.channels {
                if probs.data[c * plane + p] > probs.data[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Confusion matrix of the network's predictions over `samples`.
pub fn evaluate(net: &Network<f32>, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(NUM_CLASSES);
    for s in samples {
        cm.merge(&segmentation_confusion(&predict_labels(net, &s.input)?, &s.labels)?);
    }
    Ok(cm)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "test_mIOU")]
    pub test_miou: f64,
    #[serde(rename = "test_PA")]
    pub test_pa: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    /// Parameters of the epoch with the best test mIOU.
    pub network: Network<f32>,
    pub best: EpochRecord,
    pub trace: Vec<EpochRecord>,
}

/// Seed of the network initialization and shuffling for one fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    crate::phantom::derive_seeds(seed, fold + 1)[fold]
}

/// Trains one fold from a fresh initialization. `on_epoch` sees every log
/// row as it is produced.
pub fn train_fold(
    train: &[Sample],
    test: &[Sample],
    net_config: NetConfig,
    config: &TrainConfig,
    fold: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let seed = fold_seed(config.seed, fold);
    let mut net = Network::<f32>::new(net_config, seed)?;
    let mut grad = net.zeros_like();
    let mut adam = AdamW::new(&net, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(EpochRecord, Network<f32>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            zero_grad(&mut grad);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let flipped;
                let sample = if config.horizontal_flip && rand::Rng::random::<bool>(&mut rng) {
                    flipped = train[i].flipped();
                    &flipped
                } else {
                    &train[i]
                };
                let parts = accumulate_sample(&net, &sample.input, &sample.labels, config.loss_weights, scale, &mut grad)?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch + 1 });
                }
                sums.reconstruction += parts.reconstruction;
                sums.segmentation += parts.segmentation;
                sums.total += parts.total;
            }
            adam.step(&mut net, &grad);
            if !net.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch + 1 });
            }
        }
        let cm = evaluate(&net, test)?;
        let n = train.len() as f64;
        let record = EpochRecord {
            fold,
            epoch,
            l_d: sums.reconstruction / n,
            l_s: sums.segmentation / n,
            l: sums.total / n,
            test_miou: miou(&cm)?,
            test_pa: pixel_accuracy(&cm)?,
        };
        on_epoch(&record);
        trace.push(record);
        if best.as_ref().is_none_or(|(b, _)| record.test_miou > b.test_miou) {
            best = Some((record, net.clone()));
        }
    }
    let (best, network) = best.expect("at least one epoch");
    Ok(FoldOutcome { network, best, trace })
}
