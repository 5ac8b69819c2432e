//! Training losses and their combination.

mod boundary;
mod heteroscedastic;
mod lovasz;
mod weighting;

pub use boundary::{
    active_boundary_loss, distance_transform, extract_boundary, extract_boundary_with, BoundaryContext, BoundaryLoss,
    Connectivity, DistanceMap, NEIGHBOURS, TARGET_SMOOTHING,
};
pub use heteroscedastic::{
    cross_entropy, heteroscedastic_nll, heteroscedastic_nll_fixed_noise, heteroscedastic_nll_with_grad,
};
pub use lovasz::{lovasz_grad, lovasz_jaccard_loss, lovasz_jaccard_loss_with_grad};
pub use weighting::{combine_losses, sigmoid_rampup, LossStrategy, LossWeightState, Welford, COV_FLOOR};

pub use crate::output::{HeteroscedasticOutput, OutputGrad};
