//! State shared by every agent call of a run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flags::Flags;
use crate::gateway::Gateway;
use crate::profile::DatasetProfile;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnalysisGoal(String);

impl AnalysisGoal {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Contract("analysis goal must be non-empty".into()));
        }
        Ok(Self(text.trim().to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub struct AgentContext<'a> {
    pub gateway: &'a Gateway,
    pub flags: Flags,
    pub profile: &'a DatasetProfile,
    pub goal: &'a AnalysisGoal,
    profile_doc: String,
}

impl<'a> AgentContext<'a> {
    pub fn new(gateway: &'a Gateway, flags: Flags, profile: &'a DatasetProfile, goal: &'a AnalysisGoal) -> Self {
        Self {
            gateway,
            flags,
            profile,
            goal,
            profile_doc: profile.render().trim_end().to_string(),
        }
    }

    /// Canonical profile document as embedded in prompts.
    pub fn profile_doc(&self) -> &str {
        &self.profile_doc
    }

    pub fn goal(&self) -> &str {
        self.goal.as_str()
    }
}

/// Collapses internal whitespace runs and trims.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First sentence of `text`, terminator included; the whole trimmed text
/// when there is no terminator.
pub fn first_sentence(text: &str) -> String {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = i + c.len_utf8();
        if c == '\n' {
            return text[..i].trim().to_string();
        }
        if matches!(c, '.' | '!' | '?') && chars.peek().map_or(true, |(_, n)| n.is_whitespace()) {
            return text[..end].to_string();
        }
    }
    text.to_string()
}

/// At most `max` characters of `text`, with an ellipsis when cut.
pub fn truncate_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((cut, _)) => format!("{}...", &text[..cut]),
        None => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_must_be_non_empty() {
        assert!(AnalysisGoal::new("  ").is_err());
        assert_eq!(AnalysisGoal::new(" grow sales ").unwrap().as_str(), "grow sales");
    }

    #[test]
    fn sentences() {
        assert_eq!(first_sentence("Sales rose 4.5% in Q3. Returns fell."), "Sales rose 4.5% in Q3.");
        assert_eq!(first_sentence("no terminator"), "no terminator");
        assert_eq!(first_sentence("line one\nline two."), "line one");
    }

    #[test]
    fn truncation_counts_chars() {
        assert_eq!(truncate_chars("héllo", 3), "hél...");
        assert_eq!(truncate_chars("abc", 3), "abc");
    }

    #[test]
    fn whitespace_normalization() {
        assert_eq!(normalize_ws("  a \n b\t c "), "a b c");
    }
}
