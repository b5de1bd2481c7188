//! Knowledge distillation: teacher training, the KD and augmentation
//! losses, and the training loop.

mod loss;
mod model;
mod train;

pub use loss::{
    aug_loss_augpro, aug_loss_fgsm, aug_loss_mixup, distance, kd_loss, Distance, LossParts, Objective, StudentInput,
    Term, TermKind,
};
pub use model::{argmax, Architecture, Model, ModelCache, ModelGrads};
pub use train::{
    build_objective, config_hash, distill, evaluate, metrics_csv, train_teacher, AugSpec, Combine, DistillConfig,
    FgsmLoss, MetricsRow, ModelMeta, ProjectionTable, TeacherConfig, TrainedModel, METRICS_HEADER,
};
