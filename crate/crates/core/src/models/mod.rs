//! Multi-decoder networks, the ensemble and variance-head baselines, their
//! losses, and the training loops.

mod lambda;
mod losses;
mod srn;
mod stats;
mod train;
mod uncertain;

pub use lambda::LambdaSchedule;
pub use losses::{
    density_normalize, ensemble_objective, gaussian_nll_point, member_loss, member_loss_grad,
    pv_forward_and_loss, pv_head, softplus, variance_regularization_grad,
    variance_regularization_loss, EnsembleLoss, NllLoss, DENSITY_EPS,
};
pub use srn::Srn;
pub use stats::{ensemble_stats, PredictionStats};
pub use train::{
    ensemble_loss_gradients, train, train_deep_ensemble, train_deep_ensemble_with_seeds,
    train_mcd, train_pv, train_rmdsrn, LambdaSettings, LossReport, TrainConfig, LOSS_CSV_HEADER,
};
pub use uncertain::{mcd_predict_stats, ModelKind, UncertainModel, RECONSTRUCT_CHUNK};
