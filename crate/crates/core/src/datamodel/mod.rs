//! Datamodels predicting closed-loop cost from column-inclusion indicators.
//!
//! [`linear`] holds the fixed-context model `J ≈ sᵀθ + θ0` with its ridge
//! estimator; [`net`] the context network emitting `(θ(c), θ0(c))`, trained by
//! [`train`].

pub mod context;
pub mod linear;
pub mod net;
pub mod train;

pub use context::{make_context, Context, ContextDims, ContextEncoding};
pub use linear::{indicator_matrix, predict_linear, ridge_fit, IndicatorVector, LinearDatamodel};
pub use net::{net_forward, net_loss_grad, Activation, ContextNet, Gradients, Layer, NetSample, TrainedModel};
pub use train::{train_net, TrainOptions, TrainReport};
