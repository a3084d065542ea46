use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::ops::{self, ConvCache, Mode, PoolCache};
use super::optim::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        lr_group: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        out_units: usize,
        lr_group: usize,
    },
    Dropout {
        ratio: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                ..
            } if out_channels == 0 || kernel == 0 || stride == 0 => Err(Error::InvalidArgument(
                format!("conv layer needs positive channels, kernel and stride: {self:?}"),
            )),
            LayerSpec::MaxPool { kernel, stride } if kernel == 0 || stride == 0 => Err(
                Error::InvalidArgument(format!("pool layer needs positive kernel and stride: {self:?}")),
            ),
            LayerSpec::Fc { out_units: 0, .. } => {
                Err(Error::InvalidArgument("fc layer needs at least one unit".into()))
            }
            LayerSpec::Dropout { ratio } if !(0.0..1.0).contains(&ratio) => Err(
                Error::InvalidArgument(format!("dropout ratio {ratio} outside [0, 1)")),
            ),
            _ => Ok(()),
        }
    }

    pub fn lr_group(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { lr_group, .. } | LayerSpec::Fc { lr_group, .. } => Some(lr_group),
            _ => None,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (*self, input) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                &[_, h, w],
            ) => match (
                ops::conv_output_len(h, kernel, stride, pad),
                ops::conv_output_len(w, kernel, stride, pad),
            ) {
                (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                _ => Err(Error::Shape(format!("{self:?} does not fit input {input:?}"))),
            },
            (LayerSpec::MaxPool { kernel, stride }, &[c, h, w]) if kernel <= h && kernel <= w => {
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            (LayerSpec::Fc { out_units, .. }, _) => Ok(vec![out_units]),
            (LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax, _) => {
                Ok(input.to_vec())
            }
            _ => Err(Error::Shape(format!("{self:?} cannot follow shape {input:?}"))),
        }
    }
}

/// How non-classifier weights are drawn at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    Gaussian(f64),
    /// Gaussian with std `sqrt(2 / fan_in)`.
    He,
}

impl WeightInit {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            WeightInit::Gaussian(s) => s,
            WeightInit::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    pub params: Vec<Parameter<T>>,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Conv(ConvCache<T>),
    Relu(Tensor<T>),
    Pool(PoolCache),
    Fc(Tensor<T>),
    Dropout(Option<Vec<T>>),
    Softmax(Tensor<T>),
}

/// Intermediate state recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

fn gaussian_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("std is finite and nonnegative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn param_shapes(spec: &LayerSpec, input: &[usize]) -> Vec<Vec<usize>> {
    match *spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => vec![vec![out_channels, input[0], kernel, kernel], vec![out_channels]],
        LayerSpec::Fc { out_units, .. } => {
            vec![vec![out_units, input.iter().product()], vec![out_units]]
        }
        _ => Vec::new(),
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the stack for `[C,H,W]` inputs, weights drawn per `init`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        init: WeightInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let next = spec.output_shape(&shape)?;
            let params = param_shapes(&spec, &shape)
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let group = spec.lr_group().unwrap_or(0);
                    let value = if i == 0 {
                        let fan_in = s[1..].iter().product();
                        gaussian_tensor(&s, init.std(fan_in), rng)
                    } else {
                        Tensor::zeros(&s)
                    };
                    Parameter::new(value, group)
                })
                .collect();
            layers.push(Layer { spec, params });
            shape = next;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    /// Reassembles a network from stored layers, checking every parameter shape.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            layer.spec.validate()?;
            let expected = param_shapes(&layer.spec, &shape);
            let found: Vec<Vec<usize>> =
                layer.params.iter().map(|p| p.value.shape().to_vec()).collect();
            if expected != found {
                return Err(Error::Shape(format!(
                    "{:?} expects parameters {expected:?}, found {found:?}",
                    layer.spec
                )));
            }
            for p in &layer.params {
                if p.grad.shape() != p.value.shape() || p.momentum.shape() != p.value.shape() {
                    return Err(Error::Shape("parameter buffers differ in shape".into()));
                }
            }
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(Network { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.spec.output_shape(&s))
            .expect("validated at construction")
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }

    pub fn scale_grads(&mut self, factor: T) {
        self.params_mut().for_each(|p| p.grad.scale(factor));
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l.params.iter().map(Parameter::cast).collect(),
                })
                .collect(),
        }
    }

    /// Index of the last fully-connected layer, if any.
    pub fn last_fc(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.spec, LayerSpec::Fc { .. }))
    }

    /// Swaps the last fully-connected layer for a fresh `out_units`-way one
    /// with Gaussian(0, `std`) weights and zero bias.
    pub fn replace_classifier<R: Rng + ?Sized>(
        &mut self,
        out_units: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let idx = self
            .last_fc()
            .ok_or_else(|| Error::Shape("network has no fully-connected layer".into()))?;
        let input = self.layers[..idx]
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.spec.output_shape(&s))?;
        let LayerSpec::Fc { lr_group, .. } = self.layers[idx].spec else {
            unreachable!("last_fc returns an fc layer")
        };
        let spec = LayerSpec::Fc {
            out_units,
            lr_group,
        };
        spec.validate()?;
        let shapes = param_shapes(&spec, &input);
        self.layers[idx] = Layer {
            params: vec![
                Parameter::new(gaussian_tensor(&shapes[0], std, rng), lr_group),
                Parameter::new(Tensor::zeros(&shapes[1]), lr_group),
            ],
            spec,
        };
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let (y, c) = ops::conv2d(&cur, &layer.params[0].value, &layer.params[1].value, stride, pad)?;
                    (y, Cache::Conv(c))
                }
                LayerSpec::Relu => (ops::relu(&cur), Cache::Relu(cur)),
                LayerSpec::MaxPool { kernel, stride } => {
                    let (y, c) = ops::maxpool2d(&cur, kernel, stride)?;
                    (y, Cache::Pool(c))
                }
                LayerSpec::Fc { .. } => {
                    let y = ops::fully_connected(&cur, &layer.params[0].value, &layer.params[1].value)?;
                    (y, Cache::Fc(cur))
                }
                LayerSpec::Dropout { ratio } => {
                    let (y, mask) = ops::dropout(&cur, ratio, mode, rng)?;
                    (y, Cache::Dropout(mask))
                }
                LayerSpec::Softmax => {
                    let y = ops::softmax(&cur);
                    (y.clone(), Cache::Softmax(y))
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, Trace { caches }))
    }

    /// Inference pass; dropout is the identity, so no generator is needed.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    ops::conv2d(&cur, &layer.params[0].value, &layer.params[1].value, stride, pad)?.0
                }
                LayerSpec::Relu => ops::relu(&cur),
                LayerSpec::MaxPool { kernel, stride } => ops::maxpool2d(&cur, kernel, stride)?.0,
                LayerSpec::Fc { .. } => {
                    ops::fully_connected(&cur, &layer.params[0].value, &layer.params[1].value)?
                }
                LayerSpec::Dropout { .. } => cur,
                LayerSpec::Softmax => ops::softmax(&cur),
            };
        }
        Ok(cur)
    }

    /// Backpropagates `grad_out`, adding parameter gradients into each
    /// parameter's accumulator, and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::Shape("trace does not belong to this network".into()));
        }
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches).rev() {
            g = match cache {
                Cache::Conv(c) => {
                    let grads = ops::conv2d_backward(c, &layer.params[0].value, &g)?;
                    layer.params[0].grad.add_assign(&grads.weights)?;
                    layer.params[1].grad.add_assign(&grads.bias)?;
                    grads.input
                }
                Cache::Relu(input) => ops::relu_backward(input, &g)?,
                Cache::Pool(c) => ops::maxpool2d_backward(c, &g)?,
                Cache::Fc(input) => {
                    let grads = ops::fully_connected_backward(input, &layer.params[0].value, &g)?;
                    layer.params[0].grad.add_assign(&grads.weights)?;
                    layer.params[1].grad.add_assign(&grads.bias)?;
                    grads.input
                }
                Cache::Dropout(mask) => ops::dropout_backward(mask.as_deref(), &g)?,
                Cache::Softmax(y) => ops::softmax_backward(y, &g)?,
            };
        }
        Ok(g)
    }
}
