//! Layer-wise relevance propagation and the per-layer importance scores
//! derived from it.

pub mod propagate;
pub mod run;
pub mod table;

pub use propagate::{propagate_binary, propagate_linear, renormalize, BinaryOp};
pub use run::{
    contribution_scores, contributions_over, lrp_from_forward, lrp_run, relevance_map,
    RelevanceState, Target,
};
pub use table::{importance_scores, ImportanceEntry, ImportanceTable};
