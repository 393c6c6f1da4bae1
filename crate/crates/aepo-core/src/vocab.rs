//! Token-id layout shared by the task generator, the stage segmenter and the
//! reward scorer.
//!
//! The vocabulary is fixed by convention, not learned:
//!
//! ```text
//! [0..5)                     control tokens  <think> <draft> <reflect> <answer> <end>
//! [5..5+n_options)           option letters  (one distinct token per option)
//! [..+1)                     query marker
//! [..+n_prefix)              key prefix symbols
//! [..+n_suffix)              key suffix symbols
//! [..+n_values)              value symbols
//! ```
//!
//! Responses follow the staged grammar
//! `<think> t+ <draft> OPT <reflect> r+ <answer> OPT <end>`; the prompt ends
//! with `<think>` so a sampled response starts with thinking content.

use serde::{Deserialize, Serialize};

/// Control token that cues the thinking stage (last token of every prompt).
pub const TOK_THINK: u32 = 0;
/// Control token that opens the draft stage.
pub const TOK_DRAFT: u32 = 1;
/// Control token that opens the reflection stage.
pub const TOK_REFLECT: u32 = 2;
/// Control token that opens the answer stage.
pub const TOK_ANSWER: u32 = 3;
/// Control token that terminates a response.
pub const TOK_END: u32 = 4;
/// Number of reserved control tokens.
pub const CONTROL_COUNT: usize = 5;

/// Concrete token-id layout for one task family instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Number of answer options (one option token per option).
    pub n_options: usize,
    /// Number of key prefix symbols.
    pub n_prefix: usize,
    /// Number of key suffix symbols.
    pub n_suffix: usize,
    /// Number of value symbols.
    pub n_values: usize,
}

impl Vocab {
    pub fn new(n_options: usize, n_prefix: usize, n_suffix: usize, n_values: usize) -> Self {
        Self {
            n_options,
            n_prefix,
            n_suffix,
            n_values,
        }
    }

    /// Total vocabulary size including control tokens.
    pub fn size(&self) -> usize {
        CONTROL_COUNT + self.n_options + 1 + self.n_prefix + self.n_suffix + self.n_values
    }

    /// Token id of option `i`.
    pub fn option(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_options);
        (CONTROL_COUNT + i) as u32
    }

    /// Option index of `tok`, if it is an option token.
    pub fn option_index(&self, tok: u32) -> Option<usize> {
        let t = tok as usize;
        if (CONTROL_COUNT..CONTROL_COUNT + self.n_options).contains(&t) {
            Some(t - CONTROL_COUNT)
        } else {
            None
        }
    }

    pub fn is_option(&self, tok: u32) -> bool {
        self.option_index(tok).is_some()
    }

    pub fn is_control(&self, tok: u32) -> bool {
        (tok as usize) < CONTROL_COUNT
    }

    /// Marker token separating the fact block from the queried key.
    pub fn query_marker(&self) -> u32 {
        (CONTROL_COUNT + self.n_options) as u32
    }

    /// Token id of key prefix symbol `i`.
    pub fn key_prefix(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_prefix);
        (CONTROL_COUNT + self.n_options + 1 + i) as u32
    }

    /// Token id of key suffix symbol `i`.
    pub fn key_suffix(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_suffix);
        (CONTROL_COUNT + self.n_options + 1 + self.n_prefix + i) as u32
    }

    /// Token id of value symbol `i`.
    pub fn value(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_values);
        (CONTROL_COUNT + self.n_options + 1 + self.n_prefix + self.n_suffix + i) as u32
    }

    /// Value symbol index of `tok`, if it is a value token.
    pub fn value_index(&self, tok: u32) -> Option<usize> {
        let base = CONTROL_COUNT + self.n_options + 1 + self.n_prefix + self.n_suffix;
        let t = tok as usize;
        if (base..base + self.n_values).contains(&t) {
            Some(t - base)
        } else {
            None
        }
    }
}
