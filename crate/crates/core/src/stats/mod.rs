mod chisq;
mod classification;
mod concordance;
mod cox;
mod reports;
mod survival;

pub use chisq::{chi_square_2x2, ChiSquare};
pub use classification::{confusion_metrics, roc_auc, ConfusionMetrics};
pub use concordance::{concordance_index, Concordance};
pub use cox::{cox_log_likelihood, cox_univariable, CoxFit, Z_975};
pub use reports::{
    bias_report, subgroup_report, BiasConfig, BiasRow, PatientScore, SubgroupRow, MAX_CATEGORIES,
};
pub use survival::{chi2_sf_1df, km_estimate, logrank, KmCurve, LogRank, SurvivalRecord};
