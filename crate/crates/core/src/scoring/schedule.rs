use crate::stability::HeadProfile;
use crate::types::HeadId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RerankMode {
    /// Unstable heads every step, stable heads every `period` steps.
    StabilityAware,
    /// Every head every step.
    Naive,
}

/// Whether `head` is rescored at decode `step`.
pub fn rerank_due(head: HeadId, step: u64, profile: &HeadProfile, period: u32) -> bool {
    profile.is_unstable(head) || step.is_multiple_of(period as u64)
}

/// True when no head of `layer` is due, so the layer's scoring is skipped.
pub fn layer_scoring_skipped(layer: u16, step: u64, profile: &HeadProfile, period: u32) -> bool {
    profile.layer_all_stable(layer) && !step.is_multiple_of(period as u64)
}

/// Page-score evaluations over decode steps `0..steps` when every head holds
/// `pages_at(step)` pages.
pub fn score_evaluations(
    profile: &HeadProfile,
    period: u32,
    steps: u64,
    mode: RerankMode,
    pages_at: impl Fn(u64) -> u64,
) -> u64 {
    let all = profile.n_heads() as u64;
    let unstable = profile.unstable().len() as u64;
    (0..steps)
        .map(|s| {
            let heads = match mode {
                RerankMode::Naive => all,
                RerankMode::StabilityAware if s % period as u64 == 0 => all,
                RerankMode::StabilityAware => unstable,
            };
            heads * pages_at(s)
        })
        .sum()
}
