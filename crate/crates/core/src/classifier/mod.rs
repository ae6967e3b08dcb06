//! One-vs-all linear classification and the evaluation metrics.

mod metrics;
mod svm;

pub use metrics::{
    average_precision, mean_accuracy, mean_average_precision, ClassMetric, EvalReport,
};
pub use svm::{
    argmax, linear_gram, primal_objective, svm_train_ova, train_binary, BinarySvm, LinearOvaModel,
    SvmTrainOpts,
};
