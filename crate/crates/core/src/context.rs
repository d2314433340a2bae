//! Context-window construction around a target line.
//!
//! The context size (CTS) is the number of surrounding narrative lines
//! supplied alongside a target; CTS = 0 is the context-free setting. Windows
//! prefer the lines immediately preceding the target and only expand forward
//! (closest lines first) when the target sits near the start of a story, so
//! the window size is always exactly `min(cts, story_len - 1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StoryLine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    /// The requested context size (not the achieved one; see `lines.len()`).
    pub cts: usize,
    /// Context lines in story order. Never contains the target itself.
    pub lines: Vec<StoryLine>,
    pub target: StoryLine,
}

impl ContextWindow {
    /// Render the context block as one line of text per story line.
    ///
    /// With `with_roles` set, each line is prefixed `"<role> said: "`, which
    /// is how prompts distinguish speakers; without it the raw text is used.
    pub fn render_lines(&self, with_roles: bool) -> String {
        self.lines
            .iter()
            .map(|l| render_line(l, with_roles))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn render_target(&self, with_roles: bool) -> String {
        render_line(&self.target, with_roles)
    }
}

pub fn render_line(line: &StoryLine, with_roles: bool) -> String {
    if with_roles {
        format!("{} said: {}", line.speaker_role, line.text)
    } else {
        line.text.clone()
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("target index {index} out of range for story of {len} lines")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Build the context window for `story[target_idx]` at context size `cts`.
///
/// The returned window holds `min(cts, story.len() - 1)` lines: the `cts`
/// lines immediately preceding the target when available, otherwise all
/// preceding lines plus the nearest following lines to make up the count.
/// Lines are returned in story order.
pub fn build_context(
    story: &[StoryLine],
    target_idx: usize,
    cts: usize,
) -> Result<ContextWindow, ContextError> {
    if target_idx >= story.len() {
        return Err(ContextError::IndexOutOfRange {
            index: target_idx,
            len: story.len(),
        });
    }
    let want = cts.min(story.len() - 1);
    let preceding = target_idx.min(want);
    let following = want - preceding;

    let mut lines = Vec::with_capacity(want);
    lines.extend_from_slice(&story[target_idx - preceding..target_idx]);
    lines.extend_from_slice(&story[target_idx + 1..target_idx + 1 + following]);

    Ok(ContextWindow {
        cts,
        lines,
        target: story[target_idx].clone(),
    })
}
