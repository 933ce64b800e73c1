//! Numerical checks of the projection-error, sequential-projection and
//! subspace-perturbation bounds, plus singular-vector alignment statistics.

pub mod alignment;
pub mod campaign;
pub mod synth;
pub mod theorem1;
pub mod theorem2;
pub mod wedin;

pub use alignment::{alignment_stats, pair_alignment, AlignmentReport, EntryStats};
pub use campaign::{run_campaign, summarize, CampaignKind, CampaignParams, CampaignSummary, TrialRecord};
pub use synth::{synthesize_finetuned, Synthesized};
pub use theorem1::{check_theorem1, Theorem1Report};
pub use theorem2::{check_theorem2, QuadraticLoss, Theorem2Report};
pub use wedin::{check_wedin, WedinReport};
