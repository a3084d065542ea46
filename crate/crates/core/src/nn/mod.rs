//! Minimal CNN engine: the fixed layer set, losses, momentum SGD and
//! checkpoint persistence.

pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;

pub use checkpoint::{Checkpoint, Stage};
pub use loss::{
    multinomial_logistic_loss, softmax_logistic_backward, softmax_squared_loss, squared_loss,
    squared_loss_backward,
};
pub use network::{Layer, LayerSpec, Network, Trace, WeightInit};
pub use ops::{
    conv2d, conv2d_backward, dropout, dropout_backward, fully_connected, fully_connected_backward,
    maxpool2d, maxpool2d_backward, relu, relu_backward, softmax, softmax_backward, Mode,
};
pub use optim::{sgd_step, Parameter, ScheduleSpec};
