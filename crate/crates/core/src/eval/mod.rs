//! Desk-scale evaluation: membership inference, task aggregate (regurgitation),
//! capability retention and their mean.

mod metrics;
mod report;
mod scores;

pub use metrics::{display3, final_score, lcs_f1, lcs_len, mia_auc, mia_from_auc};
pub use report::{evaluate, write_report, DisplayScores, EvalReport, ExampleScore, ReportMetadata};
pub use scores::{
    capability_from_perplexities, capability_score, encode_for_scoring, mean_similarity, mia_score,
    perplexity, regurgitation, split_losses, tas_from_similarities, tas_score, Regurgitation,
};
