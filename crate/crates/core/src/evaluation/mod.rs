//! ROC-AUC with bootstrap intervals and permutation tests, Fleiss' kappa,
//! and the mutual-information bound check.

mod auc;
mod kappa;
mod mi;
mod report;

pub use auc::{
    bootstrap_ci, percentile, perm_test, roc_auc, PermTest, ScoredSet, DEFAULT_PERMUTATIONS, DEFAULT_REDRAWS,
    REDRAW_ATTEMPT_FACTOR, SIGNIFICANCE,
};
pub use kappa::{fleiss_kappa, RatingMatrix};
pub use mi::{gaussian_mi, log_det_spd, mi_bound_check, MIBoundReport, MiConfig, Posterior, MI_TOLERANCE};
pub use report::{
    evaluate_scores, format_p, ClassRow, Comparison, EvalReport, ExcludedClass, KappaRow, KappaTable, MIN_POSITIVES,
};
