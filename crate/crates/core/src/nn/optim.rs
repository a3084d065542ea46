use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub lr_group: usize,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>, lr_group: usize) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            momentum,
            lr_group,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter {
            value: self.value.cast(),
            grad: self.grad.cast(),
            momentum: self.momentum.cast(),
            lr_group: self.lr_group,
        }
    }
}

/// Step-decayed learning rates per parameter group plus momentum and decay.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: Vec<f64>,
    pub decay_factor: f64,
    pub decay_period_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl ScheduleSpec {
    pub fn new(base_lr: Vec<f64>, total_epochs: usize) -> Self {
        ScheduleSpec {
            base_lr,
            decay_factor: 0.1,
            decay_period_epochs: 20,
            total_epochs,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_empty() || self.base_lr.iter().any(|&lr| !(lr >= 0.0) || !lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be finite and nonnegative: {:?}",
                self.base_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay factor {} outside (0, 1)",
                self.decay_factor
            )));
        }
        if self.decay_period_epochs == 0 {
            return Err(Error::InvalidArgument("decay period must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, group: usize, epoch: usize) -> Result<f64> {
        let base = self
            .base_lr
            .get(group)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown learning-rate group {group}")))?;
        let steps = (epoch / self.decay_period_epochs) as i32;
        Ok(base * self.decay_factor.powi(steps))
    }
}

/// One momentum SGD update with L2 weight decay:
/// `m <- mu*m - lr*(g + wd*w)`, `w <- w + m`.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    schedule: &ScheduleSpec,
    epoch: usize,
) -> Result<()> {
    let mu = T::of(schedule.momentum);
    let wd = T::of(schedule.weight_decay);
    for p in params {
        let lr = T::of(schedule.lr_at(p.lr_group, epoch)?);
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let mom = p.momentum.data_mut();
        for ((v, &g), m) in value.iter_mut().zip(grad).zip(mom.iter_mut()) {
            *m = mu * *m - lr * (g + wd * *v);
            *v += *m;
        }
    }
    Ok(())
}
