use std::collections::BTreeMap;

use super::{HistoryBlocks, ProfileBackend, ProfileRequest, PromptKind, FIELD_SEP};
use crate::error::Result;
use crate::text::tokenize;

pub const SHORT_PREAMBLE: &str = "Recently, this user engaged with:";
pub const LONG_PREAMBLE: &str = "Across their whole history, this user keeps returning to:";
const LONG_TOP_TOKENS: usize = 10;

/// Deterministic offline profile writer.
///
/// Short-term text lists the titles in the recent block; long-term text lists
/// the ten most frequent title tokens over the full history block (ties
/// alphabetical); the general text is the two joined.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateBackend;

fn titles(block: &str) -> Vec<&str> {
    block
        .lines()
        .filter_map(|line| line.split(FIELD_SEP).nth(1))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect()
}

impl TemplateBackend {
    pub fn short_term(blocks: &HistoryBlocks) -> String {
        let recent = titles(&blocks.recent_block);
        if recent.is_empty() {
            format!("{SHORT_PREAMBLE} (no recent items)")
        } else {
            format!("{SHORT_PREAMBLE} {}.", recent.join("; "))
        }
    }

    pub fn long_term(blocks: &HistoryBlocks) -> String {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for title in titles(&blocks.history_block) {
            for tok in tokenize(title) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return format!("{LONG_PREAMBLE} (no history)");
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        // BTreeMap order is alphabetical and the sort is stable
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        let top: Vec<String> = ranked
            .into_iter()
            .take(LONG_TOP_TOKENS)
            .map(|(t, _)| t)
            .collect();
        format!("{LONG_PREAMBLE} {}.", top.join(", "))
    }

    pub fn general(blocks: &HistoryBlocks) -> String {
        format!("{} {}", Self::short_term(blocks), Self::long_term(blocks))
    }
}

impl ProfileBackend for TemplateBackend {
    fn model_id(&self) -> String {
        "template".into()
    }

    fn complete(&self, request: &ProfileRequest<'_>) -> Result<String> {
        Ok(match request.kind {
            PromptKind::ShortTerm => Self::short_term(request.blocks),
            PromptKind::LongTerm => Self::long_term(request.blocks),
            PromptKind::General => Self::general(request.blocks),
        })
    }
}
