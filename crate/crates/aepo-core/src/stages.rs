//! Response segmentation into the four reasoning stages, plus entropy
//! measures over stage spans.
//!
//! A well-formed staged sequence looks like
//!
//! ```text
//! ⟨T⟩ t+ ⟨D⟩ X ⟨R⟩ r+ ⟨A⟩ Y ⟨END⟩
//! ```
//!
//! with X and Y single option tokens and no content before ⟨T⟩ or after
//! ⟨END⟩. Spans are half-open index ranges that exclude the control tokens
//! themselves. Entropies are Shannon entropies in nats; a stage-mean entropy
//! is the arithmetic mean over the positions of one span.

use std::ops::Range;

use crate::policy::Distribution;
use crate::vocab::{Vocab, TOK_ANSWER, TOK_DRAFT, TOK_END, TOK_REFLECT, TOK_THINK};

/// Half-open token index ranges of the four stages, ordered and disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpans {
    pub thinking: Range<usize>,
    pub draft: Range<usize>,
    pub reflection: Range<usize>,
    pub answer: Range<usize>,
}

impl StageSpans {
    /// Option token of the draft stage within `tokens`.
    pub fn draft_token(&self, tokens: &[u32]) -> u32 {
        tokens[self.draft.start]
    }

    /// Option token of the answer stage within `tokens`.
    pub fn answer_token(&self, tokens: &[u32]) -> u32 {
        tokens[self.answer.start]
    }
}

/// Stage-mean entropies of the two free-form stages, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageEntropies {
    pub h_thinking: f64,
    pub h_reflection: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("control token {0} missing")]
    MissingControl(&'static str),
    #[error("control token {0} appears more than once")]
    DuplicateControl(&'static str),
    #[error("control tokens out of order")]
    OutOfOrder,
    #[error("content before the thinking cue")]
    LeadingContent,
    #[error("content after the end marker")]
    TrailingContent,
    #[error("{0} stage is empty")]
    EmptyStage(&'static str),
    #[error("{0} stage must be exactly one option token")]
    NotSingleOption(&'static str),
}

const CONTROLS: [(u32, &str); 5] = [
    (TOK_THINK, "think"),
    (TOK_DRAFT, "draft"),
    (TOK_REFLECT, "reflect"),
    (TOK_ANSWER, "answer"),
    (TOK_END, "end"),
];

/// Segments a staged sequence that includes the leading ⟨T⟩ cue.
pub fn segment(tokens: &[u32], vocab: &Vocab) -> Result<StageSpans, FormatError> {
    let mut at = [usize::MAX; 5];
    for (i, &tok) in tokens.iter().enumerate() {
        if let Some(slot) = CONTROLS.iter().position(|&(c, _)| c == tok) {
            if at[slot] != usize::MAX {
                return Err(FormatError::DuplicateControl(CONTROLS[slot].1));
            }
            at[slot] = i;
        }
    }
    for (slot, &(_, name)) in CONTROLS.iter().enumerate() {
        if at[slot] == usize::MAX {
            return Err(FormatError::MissingControl(name));
        }
    }
    if !(at[0] < at[1] && at[1] < at[2] && at[2] < at[3] && at[3] < at[4]) {
        return Err(FormatError::OutOfOrder);
    }
    if at[0] != 0 {
        return Err(FormatError::LeadingContent);
    }
    if at[4] != tokens.len() - 1 {
        return Err(FormatError::TrailingContent);
    }

    let spans = StageSpans {
        thinking: at[0] + 1..at[1],
        draft: at[1] + 1..at[2],
        reflection: at[2] + 1..at[3],
        answer: at[3] + 1..at[4],
    };
    if spans.thinking.is_empty() {
        return Err(FormatError::EmptyStage("thinking"));
    }
    if spans.reflection.is_empty() {
        return Err(FormatError::EmptyStage("reflection"));
    }
    for (span, name) in [(&spans.draft, "draft"), (&spans.answer, "answer")] {
        if span.len() != 1 || !vocab.is_option(tokens[span.start]) {
            return Err(FormatError::NotSingleOption(name));
        }
    }
    Ok(spans)
}

/// Segments a sampled response that follows a prompt ending in ⟨T⟩: the cue
/// is prepended virtually and all spans are shifted back into response
/// coordinates, so they index `response` directly.
pub fn segment_response(response: &[u32], vocab: &Vocab) -> Result<StageSpans, FormatError> {
    let mut with_cue = Vec::with_capacity(response.len() + 1);
    with_cue.push(TOK_THINK);
    with_cue.extend_from_slice(response);
    let spans = segment(&with_cue, vocab)?;
    let shift = |r: Range<usize>| r.start - 1..r.end - 1;
    Ok(StageSpans {
        thinking: shift(spans.thinking),
        draft: shift(spans.draft),
        reflection: shift(spans.reflection),
        answer: shift(spans.answer),
    })
}

/// Shannon entropy of a next-token distribution, in nats; 0·log 0 = 0.
pub fn token_entropy(dist: &Distribution) -> f64 {
    dist.entropy()
}

/// Arithmetic mean of per-token entropies over one stage span.
pub fn stage_mean_entropy(
    per_token_entropies: &[f64],
    span: &Range<usize>,
) -> Result<f64, FormatError> {
    if span.is_empty() || span.end > per_token_entropies.len() {
        return Err(FormatError::EmptyStage("span"));
    }
    let sum: f64 = per_token_entropies[span.clone()].iter().sum();
    Ok(sum / span.len() as f64)
}

/// Mean entropies of the thinking and reflection stages.
pub fn stage_entropies(
    per_token_entropies: &[f64],
    spans: &StageSpans,
) -> Result<StageEntropies, FormatError> {
    Ok(StageEntropies {
        h_thinking: stage_mean_entropy(per_token_entropies, &spans.thinking)?,
        h_reflection: stage_mean_entropy(per_token_entropies, &spans.reflection)?,
    })
}
