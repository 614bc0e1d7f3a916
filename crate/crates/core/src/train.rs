//! Per-pixel cross-entropy training with Adam, plus segmentation metrics.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::model::{argmax_classes, predict_mask, ForwardOptions, Model, SegmentationNet};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        // zero is allowed: a frozen run is a useful no-op check
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Row-major `[true class][predicted class]` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidShape(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::BadClass {
                    class: p.max(t),
                    num_classes: self.num_classes,
                });
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> SegMetrics {
        let n = self.num_classes;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..n).map(|c| self.counts[c * n + c]).sum();
        let per_class_iou: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let truth: u64 = (0..n).map(|p| self.counts[c * n + p]).sum();
                let pred: u64 = (0..n).map(|t| self.counts[t * n + c]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        SegMetrics {
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mean_iou: if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            },
            per_class_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU.
    pub mean_iou: f64,
}

pub fn metrics(pred: &ClassMask, truth: &ClassMask, num_classes: usize) -> Result<SegMetrics> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::InvalidShape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred.ids(), truth.ids())?;
    Ok(cm.metrics())
}

/// Predicted masks for every sample.
pub fn predict_all(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<ClassMask>> {
    samples
        .iter()
        .map(|s| predict_mask(model.forward(&s.image)?.logits()))
        .collect()
}

pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for (s, pred) in samples.iter().zip(predict_all(model, samples)?) {
        cm.add(pred.ids(), s.mask.ids())?;
    }
    Ok(cm.metrics())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Training-set accuracy of the predictions made during the epoch.
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    fn new(model: &Model<f32>) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0f32; p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut Model<f32>, grads: &[Tensor<f32>], cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (cfg.learning_rate as f32, cfg.epsilon as f32);
        for (i, grad) in grads.iter().enumerate() {
            let mut value = model.params()[i].value.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in value.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let dims = grad.dims().to_vec();
            model.set_param(i, Tensor::new(&dims, value)?)?;
        }
        Ok(())
    }
}

fn check_dataset(model: &Model<f32>, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let num_classes = model.config().num_classes;
    for s in samples {
        let [_, c, h, w] = s.image.dims4("train")?;
        if c != model.config().in_channels {
            return Err(Error::Shape {
                op: "train",
                axis: "channel",
                expected: model.config().in_channels,
                actual: c,
            });
        }
        model.config().check_input_size(h, w)?;
        if (s.mask.height(), s.mask.width()) != (h, w) {
            return Err(Error::Dataset(format!("sample {}: mask and image sizes differ", s.id)));
        }
        if s.mask.max_id() as usize >= num_classes {
            return Err(Error::BadClass {
                class: s.mask.max_id() as usize,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Trains in place over `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    mut model: Model<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model<f32>, Vec<EpochMetrics>)> {
    cfg.validate()?;
    check_dataset(&model, samples)?;
    let num_classes = model.config().num_classes;
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let opts = ForwardOptions {
        params_require_grad: true,
        ..ForwardOptions::default()
    };

    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::generator(cfg.seed, Purpose::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut cm = ConfusionMatrix::new(num_classes);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;

        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &samples[i].image).collect();
            let stacked = Tensor::stack_batch(&images)?;
            let truth: Vec<u8> = chunk
                .iter()
                .flat_map(|&i| samples[i].mask.ids().iter().copied())
                .collect();
            let targets: Arc<[u32]> = truth.iter().map(|&c| c as u32).collect::<Vec<_>>().into();

            let mut pass = model.forward_batch(&stacked, &opts)?;
            cm.add(&argmax_classes(pass.logits())?, &truth)?;
            let loss_node = pass.graph.cross_entropy(pass.logits, targets)?;
            let loss = pass.graph.value(loss_node)?.data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            loss_sum += loss as f64;
            batches += 1;

            let grads = pass.graph.backward(loss_node, &Tensor::scalar(1.0))?;
            let param_grads = pass
                .params
                .iter()
                .map(|&id| {
                    grads
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::NonFinite("parameter gradient missing".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            adam.update(&mut model, &param_grads, cfg)?;
        }

        let m = cm.metrics();
        let record = EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            pixel_accuracy: m.pixel_accuracy,
            mean_iou: m.mean_iou,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok((model, history))
}

/// Mean cross-entropy of `model` over `samples`, one image at a time.
pub fn dataset_loss(model: &Model<f32>, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut pass = model.forward(&s.image)?;
        let targets: Arc<[u32]> = s.mask.ids().iter().map(|&c| c as u32).collect::<Vec<_>>().into();
        let node = pass.graph.cross_entropy(pass.logits, targets)?;
        total += pass.graph.value(node)?.data()[0] as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::model::UNetConfig;
    use rand::Rng;

    #[test]
    fn identical_masks_are_perfect() {
        let m = ClassMask::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let r = metrics(&m, &m, 4).unwrap();
        assert_eq!(r.pixel_accuracy, 1.0);
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.per_class_iou[3], None);
    }

    #[test]
    fn complement_is_zero_iou() {
        let t = ClassMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let p = ClassMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let r = metrics(&p, &t, 2).unwrap();
        assert_eq!(r.pixel_accuracy, 0.0);
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.mean_iou, 0.0);
    }

    #[test]
    fn random_pair_matches_counting_oracle() {
        let mut rng = rng::generator(17, Purpose::Probe, 0);
        for _ in 0..10 {
            let k = 4;
            let t: Vec<u8> = (0..64).map(|_| rng.random_range(0..k as u8)).collect();
            let p: Vec<u8> = (0..64).map(|_| rng.random_range(0..k as u8 - 1)).collect();
            let r = metrics(
                &ClassMask::new(8, 8, p.clone()).unwrap(),
                &ClassMask::new(8, 8, t.clone()).unwrap(),
                k,
            )
            .unwrap();
            let acc = p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / 64.0;
            assert!((r.pixel_accuracy - acc).abs() < 1e-12);
            let mut ious = Vec::new();
            for c in 0..k as u8 {
                let inter = p.iter().zip(&t).filter(|&(&a, &b)| a == c && b == c).count();
                let union = p.iter().zip(&t).filter(|&(&a, &b)| a == c || b == c).count();
                let expected = (union > 0).then(|| inter as f64 / union as f64);
                assert_eq!(r.per_class_iou[c as usize], expected);
                ious.extend(expected);
            }
            let miou = ious.iter().sum::<f64>() / ious.len() as f64;
            assert!((r.mean_iou - miou).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let samples = generate(&DatasetSpec { seed: 1, count: 1, size: 16 }).unwrap();
        let model = Model::init(UNetConfig { base_channels: 2, ..Default::default() }, 3).unwrap();
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..Default::default() };
        let (trained, hist) = train(model.clone(), &samples, &cfg, |_| {}).unwrap();
        assert_eq!(trained, model);
        assert_eq!(hist.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn rejects_bad_datasets() {
        let model = Model::init(UNetConfig::default(), 3).unwrap();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(train(model.clone(), &[], &cfg, |_| {}).is_err());
        let odd = generate(&DatasetSpec { seed: 1, count: 1, size: 30 }).unwrap();
        let err = train(model, &odd, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divisibility { divisor: 4, .. }), "{err}");
    }

    #[test]
    fn non_finite_loss_aborts_with_position() {
        let samples = generate(&DatasetSpec { seed: 1, count: 2, size: 16 }).unwrap();
        let mut model = Model::init(UNetConfig { base_channels: 2, ..Default::default() }, 3).unwrap();
        let last = model.params().len() - 1;
        let dims = model.params()[last].value.dims().to_vec();
        model.set_param(last, Tensor::full(&dims, f32::NAN).unwrap()).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 1, ..Default::default() };
        let err = train(model, &samples, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
    }
}
