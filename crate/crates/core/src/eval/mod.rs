//! Prototype distance scoring, the SVM on (mean, max) features, ROC AUC and
//! report export.

pub mod auc;
pub mod prototype;
pub mod report;
pub mod scoring;
pub mod svm;

pub use auc::roc_auc;
pub use prototype::{
    build_prototype, build_prototype_from_paths, load_prototype, save_prototype, Prototype,
    PrototypeBuilder,
};
pub use report::{
    cell_auc, evaluate, score_class, AbsentCell, CellResult, EvalConfig, EvalReport, EvalRun,
};
pub use scoring::{
    distance_map, distance_map_from_embedding, export_heatmap, score_features, DistanceMap, Label,
    ScorePoint,
};
pub use svm::{fit_linear_svm, svm_decision, SvmModel, DEFAULT_C};
