//! The shared CNN, cross-hypothesis max fusion, the per-sample loss paths of
//! the three training stages, and score-level late fusion.

mod train;

pub use train::{
    crop_offsets, hypothesis_fine_tune, image_fine_tune, predict_hypotheses, predict_image,
    predict_whole_image, pretrain, AugmentConfig, Prediction, StageConfig, StageReport,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::nn::{
    multinomial_logistic_loss, softmax, softmax_backward, softmax_logistic_backward, squared_loss,
    squared_loss_backward, LayerSpec, Mode, Network, WeightInit,
};
use crate::tensor::{Scalar, Tensor};

/// Geometry and width of the shared CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub input_side: usize,
    pub conv_channels: Vec<usize>,
    pub fc_hidden: Vec<usize>,
    pub dropout: f64,
    /// Initialization of every weight layer except the classifier.
    pub init: WeightInit,
    pub classifier_std: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            input_side: 64,
            conv_channels: vec![8, 16, 32],
            fc_hidden: vec![128],
            dropout: 0.5,
            init: WeightInit::He,
            classifier_std: 0.01,
        }
    }
}

/// Learning-rate groups: convolutions, hidden fully-connected layers, classifier.
pub const LR_GROUP_CONV: usize = 0;
pub const LR_GROUP_FC: usize = 1;
pub const LR_GROUP_LAST: usize = 2;

impl CnnConfig {
    /// Conv(3x3, pad 1) + ReLU + 2x2 max-pool blocks, then hidden FC + ReLU +
    /// dropout blocks, then the `classes`-way classifier (logits).
    pub fn specs(&self, classes: usize) -> Result<Vec<LayerSpec>> {
        if self.conv_channels.is_empty() || classes == 0 || self.input_side == 0 {
            return Err(Error::Config("the CNN needs conv layers, an input side and classes".into()));
        }
        let mut specs = Vec::new();
        for &out_channels in &self.conv_channels {
            specs.push(LayerSpec::Conv {
                out_channels,
                kernel: 3,
                stride: 1,
                pad: 1,
                lr_group: LR_GROUP_CONV,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        }
        for &out_units in &self.fc_hidden {
            specs.push(LayerSpec::Fc {
                out_units,
                lr_group: LR_GROUP_FC,
            });
            specs.push(LayerSpec::Relu);
            if self.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { ratio: self.dropout });
            }
        }
        specs.push(LayerSpec::Fc {
            out_units: classes,
            lr_group: LR_GROUP_LAST,
        });
        Ok(specs)
    }

    pub fn build<T: Scalar, R: Rng + ?Sized>(&self, classes: usize, rng: &mut R) -> Result<Network<T>> {
        let side = self.input_side;
        let mut net = Network::new(&[3, side, side], self.specs(classes)?, self.init, rng)?;
        net.replace_classifier(classes, self.classifier_std, rng)?;
        Ok(net)
    }
}

/// `pixels / 255 - mean[channel]` for a planar `[3, H, W]` tensor.
pub fn normalize_input(pixels: &Tensor<f32>, mean: &[f32]) -> Result<Tensor<f32>> {
    let (c, h, w) = pixels.dims3()?;
    if mean.len() != c {
        return Err(Error::Shape(format!("{} channel means for {c} channels", mean.len())));
    }
    let plane = h * w;
    let mut out = pixels.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v / 255.0 - mean[i / plane];
    }
    Ok(out)
}

/// Eval-mode forward followed by softmax.
pub fn cnn_forward<T: Scalar>(net: &Network<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(softmax(&net.forward_eval(input)?))
}

fn check_fusion_inputs<T: Scalar>(outputs: &[Tensor<T>]) -> Result<usize> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("max fusion over zero hypotheses".into()))?;
    let c = first.len();
    if outputs.iter().any(|o| o.len() != c) {
        return Err(Error::Shape("hypothesis outputs differ in length".into()));
    }
    Ok(c)
}

/// Componentwise max over hypotheses, with the winning hypothesis per class
/// (lowest index on ties).
pub fn fuse_max_argmax<T: Scalar>(outputs: &[Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let c = check_fusion_inputs(outputs)?;
    let mut fused = outputs[0].data().to_vec();
    let mut winners = vec![0; c];
    for (i, o) in outputs.iter().enumerate().skip(1) {
        for j in 0..c {
            if o.data()[j] > fused[j] {
                fused[j] = o.data()[j];
                winners[j] = i;
            }
        }
    }
    Ok((Tensor::new(vec![c], fused)?, winners))
}

pub fn fuse_max<T: Scalar>(outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    Ok(fuse_max_argmax(outputs)?.0)
}

/// Splits the gradient at the fused layer into per-hypothesis gradients:
/// class `j` goes only to hypothesis `winners[j]`.
pub fn route_fused_gradient<T: Scalar>(grad: &Tensor<T>, winners: &[usize], hypotheses: usize) -> Result<Vec<Tensor<T>>> {
    if grad.len() != winners.len() || winners.iter().any(|&w| w >= hypotheses) {
        return Err(Error::Shape("winner list does not match the fused gradient".into()));
    }
    let mut out = vec![Tensor::zeros(grad.shape()); hypotheses];
    for (j, &w) in winners.iter().enumerate() {
        out[w].data_mut()[j] = grad.data()[j];
    }
    Ok(out)
}

/// Where softmax sits relative to max fusion at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionOrder {
    /// Per-hypothesis probabilities, then componentwise max.
    #[default]
    SoftmaxThenMax,
    /// Max over logits, then one softmax.
    MaxThenSoftmax,
}

impl fmt::Display for FusionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionOrder::SoftmaxThenMax => "softmax-max",
            FusionOrder::MaxThenSoftmax => "max-softmax",
        })
    }
}

impl FromStr for FusionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-max" => Ok(FusionOrder::SoftmaxThenMax),
            "max-softmax" => Ok(FusionOrder::MaxThenSoftmax),
            other => Err(Error::Config(format!(
                "fusion order must be softmax-max or max-softmax, got {other:?}"
            ))),
        }
    }
}

/// Fuses per-hypothesis logits in the given order.
pub fn fuse_logits<T: Scalar>(logits: &[Tensor<T>], order: FusionOrder) -> Result<Tensor<T>> {
    match order {
        FusionOrder::SoftmaxThenMax => {
            let probs: Vec<Tensor<T>> = logits.iter().map(softmax).collect();
            fuse_max(&probs)
        }
        FusionOrder::MaxThenSoftmax => Ok(softmax(&fuse_max(logits)?)),
    }
}

/// Softmax + logistic loss on one labelled crop; accumulates gradients.
pub fn pretrain_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    label: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<T> {
    let (logits, trace) = net.forward(input, mode, rng)?;
    let p = softmax(&logits);
    let loss = multinomial_logistic_loss(&p, label)?;
    net.backward(&trace, &softmax_logistic_backward(&p, label)?)?;
    Ok(loss)
}

/// Squared loss of the softmax of one whole-image pass; accumulates gradients.
pub fn image_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    labels: &LabelVector,
    mode: Mode,
    rng: &mut R,
) -> Result<T> {
    let (logits, trace) = net.forward(input, mode, rng)?;
    let p = softmax(&logits);
    let loss = squared_loss(&p, labels)?;
    let g = softmax_backward(&p, &squared_loss_backward(&p, labels)?)?;
    net.backward(&trace, &g)?;
    Ok(loss)
}

/// Loss of one image seen through its hypotheses: every hypothesis goes
/// through the shared network, logits are max-fused per class, then softmax
/// and squared loss. Each class's gradient flows back only into the
/// hypothesis that won that class. Returns the loss and the winners.
pub fn hypotheses_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    inputs: &[Tensor<T>],
    labels: &LabelVector,
    mode: Mode,
    rng: &mut R,
) -> Result<(T, Vec<usize>)> {
    if inputs.is_empty() {
        return Err(Error::Degenerate("no hypotheses for this image".into()));
    }
    let mut logits = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (out, trace) = net.forward(x, mode, rng)?;
        logits.push(out);
        traces.push(trace);
    }
    let (fused, winners) = fuse_max_argmax(&logits)?;
    let p = softmax(&fused);
    let loss = squared_loss(&p, labels)?;
    let g = softmax_backward(&p, &squared_loss_backward(&p, labels)?)?;
    let routed = route_fused_gradient(&g, &winners, inputs.len())?;
    for (i, (trace, gi)) in traces.iter().zip(&routed).enumerate() {
        if winners.contains(&i) {
            net.backward(trace, gi)?;
        }
    }
    Ok((loss, winners))
}

/// Eval-mode value of the loss minimized by [`image_step`].
pub fn image_loss<T: Scalar>(net: &Network<T>, input: &Tensor<T>, labels: &LabelVector) -> Result<T> {
    squared_loss(&cnn_forward(net, input)?, labels)
}

/// Eval-mode value of the loss minimized by [`hypotheses_step`].
pub fn hypotheses_loss<T: Scalar>(net: &Network<T>, inputs: &[Tensor<T>], labels: &LabelVector) -> Result<T> {
    let logits = inputs.iter().map(|x| net.forward_eval(x)).collect::<Result<Vec<_>>>()?;
    squared_loss(&fuse_logits(&logits, FusionOrder::MaxThenSoftmax)?, labels)
}

/// `weight * a + (1 - weight) * b` after min-max normalizing each vector.
pub fn late_fusion(a: &[f64], b: &[f64], weight: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("score vectors of length {} and {}", a.len(), b.len())));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::InvalidArgument(format!("fusion weight {weight} outside [0, 1]")));
    }
    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            v.iter().map(|x| (x - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let (na, nb) = (norm(a), norm(b));
    Ok(na.iter().zip(&nb).map(|(x, y)| weight * x + (1.0 - weight) * y).collect())
}
