use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    cnn_forward, fuse_logits, hypotheses_step, image_step, normalize_input, pretrain_step, CnnConfig,
    FusionOrder,
};
use crate::bbox::{BoundingBox, ScoredProposal};
use crate::error::{Error, Result};
use crate::hselect::{select_boxes, HSConfig};
use crate::image::RgbImage;
use crate::labels::LabelVector;
use crate::nn::{sgd_step, Checkpoint, Mode, Network, ScheduleSpec, Stage};
use crate::tensor::Tensor;

/// Optimizer settings and length of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    /// Base learning rate per group (conv, hidden fc, classifier).
    pub base_lr: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    /// Std of the Gaussian used for a freshly swapped classifier.
    pub classifier_std: f64,
}

impl StageConfig {
    fn base(stage: Stage, base_lr: Vec<f64>, epochs: usize, batch_size: usize) -> Self {
        StageConfig {
            stage,
            base_lr,
            epochs,
            batch_size,
            seed: 0,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_factor: 0.1,
            decay_period: 20,
            classifier_std: 0.01,
        }
    }

    pub fn pretrain() -> Self {
        Self::base(Stage::Pretrain, vec![0.01; 3], 90, 32)
    }

    pub fn ift() -> Self {
        Self::base(Stage::Ift, vec![0.001, 0.002, 0.01], 60, 16)
    }

    pub fn hft() -> Self {
        Self::base(Stage::Hft, vec![0.0001, 0.0002, 0.001], 60, 8)
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            base_lr: self.base_lr.clone(),
            decay_factor: self.decay_factor,
            decay_period_epochs: self.decay_period,
            total_epochs: self.epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.base_lr.len() != 3 {
            return Err(Error::Config(format!(
                "expected 3 learning-rate groups, got {}",
                self.base_lr.len()
            )));
        }
        self.schedule().validate()
    }
}

/// Pre-training augmentation: resize to `resize_side`, then crop the network
/// input side at a random offset, optionally mirrored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub resize_side: usize,
    pub random_crop: bool,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_side: 72,
            random_crop: true,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Images left out because they produced no hypotheses.
    pub skipped: usize,
}

/// Uniform crop offsets in `[0, resize - crop]` per axis.
pub fn crop_offsets<R: Rng + ?Sized>(rng: &mut R, resize: usize, crop: usize) -> (usize, usize) {
    let span = resize - crop;
    (rng.random_range(0..=span), rng.random_range(0..=span))
}

fn crop_planar(t: &Tensor<f32>, ox: usize, oy: usize, side: usize, flip: bool) -> Tensor<f32> {
    let (c, h, w) = t.dims3().expect("planar tensor");
    debug_assert!(ox + side <= w && oy + side <= h);
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in 0..side {
            let row = &t.data()[ch * h * w + (oy + y) * w + ox..][..side];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, side, side], out).expect("sizes agree")
}

/// Whole image resized (without cropping) to the network input and normalized.
pub(crate) fn whole_image_input(image: &RgbImage, side: usize, mean: &[f32]) -> Result<Tensor<f32>> {
    normalize_input(&image.crop_resize(&image.full_box(), side, side)?, mean)
}

fn input_side(net: &Network<f32>) -> usize {
    net.input_shape()[1]
}

/// Mini-batch loop shared by the stages. `step` accumulates one sample's
/// gradient and returns its loss, or `None` when the sample is skipped.
fn train_loop<F>(
    net: &mut Network<f32>,
    samples: usize,
    cfg: &StageConfig,
    rng: &mut ChaCha8Rng,
    mut step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Network<f32>, usize, &mut ChaCha8Rng) -> Result<Option<f32>>,
{
    cfg.validate()?;
    let schedule = cfg.schedule();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            net.zero_grad();
            let mut used = 0usize;
            for &i in batch {
                if let Some(loss) = step(net, i, rng)? {
                    if !loss.is_finite() {
                        return Err(Error::Degenerate(format!(
                            "{} loss became non-finite in epoch {epoch}",
                            cfg.stage
                        )));
                    }
                    total += f64::from(loss);
                    used += 1;
                }
            }
            if used == 0 {
                continue;
            }
            count += used;
            net.scale_grads(1.0 / used as f32);
            sgd_step(net.params_mut(), &schedule, epoch)?;
        }
        let mean = if count > 0 { total / count as f64 } else { f64::NAN };
        info!("{} epoch {}/{}: loss {mean:.6}", cfg.stage, epoch + 1, cfg.epochs);
        losses.push(mean);
    }
    // gradients are scratch space and are not persisted
    net.zero_grad();
    Ok(losses)
}

fn reset_momentum(net: &mut Network<f32>) {
    for p in net.params_mut() {
        p.momentum.fill(0.0);
        p.grad.fill(0.0);
    }
}

/// Single-label pre-training with softmax + logistic loss on augmented crops.
pub fn pretrain(
    cnn: &CnnConfig,
    samples: &[(RgbImage, usize)],
    classes: usize,
    cfg: &StageConfig,
    aug: &AugmentConfig,
) -> Result<(Checkpoint, StageReport)> {
    if samples.is_empty() {
        return Err(Error::Data("pre-training set is empty".into()));
    }
    if let Some((_, l)) = samples.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
    }
    let side = cnn.input_side;
    if aug.resize_side < side {
        return Err(Error::Config(format!(
            "resize side {} is smaller than the input side {side}",
            aug.resize_side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net: Network<f32> = cnn.build(classes, &mut rng)?;

    let resized = samples
        .iter()
        .map(|(img, _)| img.crop_resize(&img.full_box(), aug.resize_side, aug.resize_side))
        .collect::<Result<Vec<_>>>()?;
    let plane = aug.resize_side * aug.resize_side;
    let mut sums = [0f64; 3];
    for t in &resized {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += t.data()[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>();
        }
    }
    let mean: Vec<f32> = sums
        .iter()
        .map(|s| (s / (plane * resized.len()) as f64 / 255.0) as f32)
        .collect();
    let inputs = resized
        .iter()
        .map(|t| normalize_input(t, &mean))
        .collect::<Result<Vec<_>>>()?;

    let center = (aug.resize_side - side) / 2;
    let losses = train_loop(&mut net, samples.len(), cfg, &mut rng, |net, i, rng| {
        let (ox, oy) = if aug.random_crop {
            crop_offsets(rng, aug.resize_side, side)
        } else {
            (center, center)
        };
        let flip = aug.flip && rng.random_bool(0.5);
        let x = crop_planar(&inputs[i], ox, oy, side, flip);
        pretrain_step(net, &x, samples[i].1, Mode::Train, rng).map(Some)
    })?;
    Ok((
        Checkpoint {
            network: net,
            stage: Stage::Pretrain,
            epoch: cfg.epochs as u32,
            mean,
        },
        StageReport {
            epoch_losses: losses,
            skipped: 0,
        },
    ))
}

fn check_labels(samples: &[(RgbImage, LabelVector)], classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for (i, (_, y)) in samples.iter().enumerate() {
        if y.len() != classes {
            return Err(Error::Data(format!("image {i} has {} labels, expected {classes}", y.len())));
        }
        if y.count_positive() == 0 {
            return Err(Error::Data(format!("image {i} has no positive label")));
        }
    }
    Ok(())
}

/// Fine-tunes a pre-trained network on whole images with the squared loss,
/// after swapping in a fresh `classes`-way classifier.
pub fn image_fine_tune(
    checkpoint: &Checkpoint,
    samples: &[(RgbImage, LabelVector)],
    classes: usize,
    cfg: &StageConfig,
) -> Result<(Checkpoint, StageReport)> {
    checkpoint.expect_stage(Stage::Pretrain)?;
    check_labels(samples, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = checkpoint.network.clone();
    net.replace_classifier(classes, cfg.classifier_std, &mut rng)?;
    reset_momentum(&mut net);
    let side = input_side(&net);
    let mean = checkpoint.mean.clone();
    let inputs = samples
        .iter()
        .map(|(img, _)| whole_image_input(img, side, &mean))
        .collect::<Result<Vec<_>>>()?;
    let losses = train_loop(&mut net, samples.len(), cfg, &mut rng, |net, i, rng| {
        image_step(net, &inputs[i], &samples[i].1, Mode::Train, rng).map(Some)
    })?;
    Ok((
        Checkpoint {
            network: net,
            stage: Stage::Ift,
            epoch: cfg.epochs as u32,
            mean,
        },
        StageReport {
            epoch_losses: losses,
            skipped: 0,
        },
    ))
}

fn hypothesis_inputs(image: &RgbImage, boxes: &[BoundingBox], side: usize, mean: &[f32]) -> Result<Vec<Tensor<f32>>> {
    boxes
        .iter()
        .map(|b| normalize_input(&image.crop_resize(b, side, side)?, mean))
        .collect()
}

/// Fine-tunes an image-fine-tuned network through max fusion over each
/// image's hypothesis boxes. Images without hypotheses are skipped.
pub fn hypothesis_fine_tune(
    checkpoint: &Checkpoint,
    samples: &[(RgbImage, LabelVector)],
    hypotheses: &[Vec<BoundingBox>],
    cfg: &StageConfig,
) -> Result<(Checkpoint, StageReport)> {
    checkpoint.expect_stage(Stage::Ift)?;
    let classes = checkpoint.network.output_shape().iter().product();
    check_labels(samples, classes)?;
    if hypotheses.len() != samples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypothesis lists for {} images",
            hypotheses.len(),
            samples.len()
        )));
    }
    let skipped = hypotheses.iter().filter(|h| h.is_empty()).count();
    for (i, h) in hypotheses.iter().enumerate() {
        if h.is_empty() {
            warn!("image {i} has no hypotheses; skipped during hypothesis fine-tuning");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = checkpoint.network.clone();
    reset_momentum(&mut net);
    let side = input_side(&net);
    let mean = checkpoint.mean.clone();
    let losses = train_loop(&mut net, samples.len(), cfg, &mut rng, |net, i, rng| {
        if hypotheses[i].is_empty() {
            return Ok(None);
        }
        let xs = hypothesis_inputs(&samples[i].0, &hypotheses[i], side, &mean)?;
        hypotheses_step(net, &xs, &samples[i].1, Mode::Train, rng).map(|(l, _)| Some(l))
    })?;
    Ok((
        Checkpoint {
            network: net,
            stage: Stage::Hft,
            epoch: cfg.epochs as u32,
            mean,
        },
        StageReport {
            epoch_losses: losses,
            skipped,
        },
    ))
}

/// Class probabilities for the whole image, resized to the network input.
pub fn predict_whole_image(checkpoint: &Checkpoint, image: &RgbImage) -> Result<Vec<f64>> {
    let x = whole_image_input(image, input_side(&checkpoint.network), &checkpoint.mean)?;
    Ok(cnn_forward(&checkpoint.network, &x)?.data().iter().map(|&v| f64::from(v)).collect())
}

/// Fused class scores over the given boxes; an empty list falls back to the
/// whole image.
pub fn predict_hypotheses(
    checkpoint: &Checkpoint,
    image: &RgbImage,
    boxes: &[BoundingBox],
    order: FusionOrder,
) -> Result<Vec<f64>> {
    if boxes.is_empty() {
        return predict_whole_image(checkpoint, image);
    }
    let net = &checkpoint.network;
    let xs = hypothesis_inputs(image, boxes, input_side(net), &checkpoint.mean)?;
    let logits = xs.iter().map(|x| net.forward_eval(x)).collect::<Result<Vec<_>>>()?;
    Ok(fuse_logits(&logits, order)?.data().iter().map(|&v| f64::from(v)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub hypotheses: usize,
    /// The whole image was used because selection produced nothing.
    pub fallback: bool,
}

/// Hypothesis selection, per-hypothesis forward and max fusion.
pub fn predict_image(
    checkpoint: &Checkpoint,
    image: &RgbImage,
    proposals: &[ScoredProposal],
    hs: &HSConfig,
    order: FusionOrder,
) -> Result<Prediction> {
    checkpoint.expect_stage(Stage::Hft)?;
    let boxes: Vec<BoundingBox> = match select_boxes(proposals, hs) {
        Ok((sel, _)) => sel.into_iter().map(|h| h.bbox).collect(),
        Err(Error::Degenerate(reason)) => {
            warn!("falling back to the whole image: {reason}");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    Ok(Prediction {
        scores: predict_hypotheses(checkpoint, image, &boxes, order)?,
        hypotheses: boxes.len(),
        fallback: boxes.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cnn() -> CnnConfig {
        CnnConfig {
            input_side: 16,
            conv_channels: vec![4],
            fc_hidden: vec![8],
            ..CnnConfig::default()
        }
    }

    fn blobs(n: usize) -> Vec<(RgbImage, usize)> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut img = RgbImage::filled(20, 20, [30, 30, 30]);
                for y in 4..16 {
                    for x in 4..16 {
                        let on = if label == 0 { y % 2 == 0 } else { x % 2 == 0 };
                        if on {
                            img.put(x, y, [220, 200, 40]);
                        }
                    }
                }
                (img, label)
            })
            .collect()
    }

    #[test]
    fn offsets_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (x, y) = crop_offsets(&mut rng, 72, 64);
            assert!(x <= 8 && y <= 8);
        }
    }

    #[test]
    fn zero_lr_without_augmentation_keeps_parameters() {
        let cnn = tiny_cnn();
        let cfg = StageConfig {
            base_lr: vec![0.0; 3],
            epochs: 2,
            weight_decay: 0.0,
            ..StageConfig::pretrain()
        };
        let aug = AugmentConfig {
            resize_side: 16,
            random_crop: false,
            flip: false,
        };
        let (ckpt, _) = pretrain(&cnn, &blobs(4), 2, &cfg, &aug).unwrap();
        let fresh: Network<f32> = cnn.build(2, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        for (a, b) in ckpt.network.params().zip(fresh.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn pretraining_lowers_the_loss() {
        let cfg = StageConfig {
            epochs: 8,
            batch_size: 4,
            ..StageConfig::pretrain()
        };
        let aug = AugmentConfig {
            resize_side: 18,
            ..AugmentConfig::default()
        };
        let (ckpt, report) = pretrain(&tiny_cnn(), &blobs(16), 2, &cfg, &aug).unwrap();
        assert_eq!(ckpt.stage, Stage::Pretrain);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        assert!(pretrain(&tiny_cnn(), &[], 2, &cfg, &aug).is_err());
    }

    #[test]
    fn ift_swaps_only_the_classifier() {
        let pre_cfg = StageConfig {
            epochs: 1,
            ..StageConfig::pretrain()
        };
        let aug = AugmentConfig {
            resize_side: 18,
            ..AugmentConfig::default()
        };
        let (pre, _) = pretrain(&tiny_cnn(), &blobs(4), 2, &pre_cfg, &aug).unwrap();
        let data: Vec<_> = blobs(4)
            .into_iter()
            .map(|(img, l)| (img, LabelVector::from_indices(3, &[l, 2]).unwrap()))
            .collect();
        let cfg = StageConfig {
            epochs: 0,
            ..StageConfig::ift()
        };
        let (ift, _) = image_fine_tune(&pre, &data, 3, &cfg).unwrap();
        assert_eq!(ift.network.output_shape(), vec![3]);
        let last = ift.network.last_fc().unwrap();
        for (i, (a, b)) in ift.network.layers().iter().zip(pre.network.layers()).enumerate() {
            if i == last {
                assert_ne!(a.params[0].value.shape(), b.params[0].value.shape());
            } else {
                assert_eq!(a.params.iter().map(|p| &p.value).collect::<Vec<_>>(), b.params.iter().map(|p| &p.value).collect::<Vec<_>>());
            }
        }
        // stage checks
        assert!(matches!(image_fine_tune(&ift, &data, 3, &cfg), Err(Error::StageMismatch { .. })));
        assert!(matches!(
            hypothesis_fine_tune(&pre, &data, &vec![vec![]; 4], &StageConfig::hft()),
            Err(Error::StageMismatch { .. })
        ));
        let (hft, report) = hypothesis_fine_tune(&ift, &data, &vec![vec![]; 4], &StageConfig { epochs: 1, ..StageConfig::hft() }).unwrap();
        assert_eq!(report.skipped, 4);
        assert_eq!(hft.stage, Stage::Hft);
    }

    #[test]
    fn single_hypothesis_prediction_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: Network<f32> = tiny_cnn().build(3, &mut rng).unwrap();
        let ckpt = Checkpoint {
            network: net,
            stage: Stage::Hft,
            epoch: 0,
            mean: vec![0.1, 0.2, 0.3],
        };
        let img = blobs(1).remove(0).0;
        let b = BoundingBox::new(2, 3, 12, 10).unwrap();
        let fused = predict_hypotheses(&ckpt, &img, &[b], FusionOrder::SoftmaxThenMax).unwrap();
        let x = normalize_input(&img.crop_resize(&b, 16, 16).unwrap(), &ckpt.mean).unwrap();
        let plain: Vec<f64> = cnn_forward(&ckpt.network, &x).unwrap().data().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(fused, plain);
        let twice = predict_hypotheses(&ckpt, &img, &[b, b], FusionOrder::SoftmaxThenMax).unwrap();
        assert_eq!(twice, fused);
        // nothing survives selection: whole-image fallback
        let tiny = [ScoredProposal::new(BoundingBox::new(0, 0, 5, 5).unwrap(), 1.0)];
        let p = predict_image(&ckpt, &img, &tiny, &HSConfig::test(), FusionOrder::SoftmaxThenMax).unwrap();
        assert!(p.fallback);
        assert_eq!(p.scores, predict_whole_image(&ckpt, &img).unwrap());
    }
}
