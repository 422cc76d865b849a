//! Natural-language user profiles.
//!
//! Each user gets a short-term profile (what they are into right now), a
//! long-term profile (what they keep coming back to) and, for the No-TS
//! ablation, a single general profile. Profiles come from a
//! [`ProfileBackend`]: either a remote chat-completion model or the offline
//! [`TemplateBackend`]. Completions are cached by prompt content hash.

mod cache;
mod chat;
mod template;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, ItemMeta};
use crate::error::{Error, Result};
use crate::text::content_hash;

pub use cache::{CacheEntry, ProfileCache};
pub use chat::{ChatBackend, API_BASE_ENV, API_KEY_ENV};
pub use template::{TemplateBackend, LONG_PREAMBLE, SHORT_PREAMBLE};

pub const DEFAULT_RECENT_K: usize = 5;
pub const DEFAULT_MAX_ITEMS: usize = 50;
pub const DESC_EXCERPT_CHARS: usize = 200;
/// Field separator inside a rendered history line.
pub const FIELD_SEP: &str = " — ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ShortTerm,
    LongTerm,
    General,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::ShortTerm, PromptKind::LongTerm, PromptKind::General];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::ShortTerm => "short_term",
            PromptKind::LongTerm => "long_term",
            PromptKind::General => "general",
        }
    }

    fn default_file(self) -> &'static str {
        match self {
            PromptKind::ShortTerm => include_str!("../../prompts/short_term.txt"),
            PromptKind::LongTerm => include_str!("../../prompts/long_term.txt"),
            PromptKind::General => include_str!("../../prompts/general.txt"),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A system message plus a user-message template with `{history_block}` and
/// `{recent_block}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub system_text: String,
    pub user_text_template: String,
}

const SYSTEM_SEPARATOR: &str = "\n---\n";

impl PromptTemplate {
    /// Parses a prompt file: system text, a line holding only `---`, then the
    /// user template. Without the separator the whole file is the user
    /// template and the system text is empty.
    pub fn parse(kind: PromptKind, content: &str) -> Result<Self> {
        let content = content.replace("\r\n", "\n");
        let (system, user) = match content.split_once(SYSTEM_SEPARATOR) {
            Some((s, u)) => (s.trim().to_owned(), u.trim().to_owned()),
            None => (String::new(), content.trim().to_owned()),
        };
        let template = PromptTemplate {
            kind,
            system_text: system,
            user_text_template: user,
        };
        template.render(&HistoryBlocks::default())?;
        Ok(template)
    }

    pub fn builtin(kind: PromptKind) -> Self {
        Self::parse(kind, kind.default_file()).expect("built-in prompt is valid")
    }

    /// Loads `<dir>/<kind>.txt`.
    pub fn from_dir(kind: PromptKind, dir: &Path) -> Result<Self> {
        let path = dir.join(format!("{}.txt", kind.as_str()));
        let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(kind, &content)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn render(&self, blocks: &HistoryBlocks) -> Result<String> {
        let out = self
            .user_text_template
            .replace("{history_block}", &blocks.history_block)
            .replace("{recent_block}", &blocks.recent_block);
        // the substituted blocks may legitimately contain braces; only check
        // the template's own text for leftovers
        let residue = self
            .user_text_template
            .replace("{history_block}", "")
            .replace("{recent_block}", "");
        if let Some(name) = find_placeholder(&residue) {
            return Err(Error::config(format!(
                "{} prompt has unresolved placeholder {{{name}}}",
                self.kind
            )));
        }
        Ok(out)
    }

    fn identity(&self) -> String {
        format!("{}\u{1f}{}", self.system_text, self.user_text_template)
    }
}

fn find_placeholder(text: &str) -> Option<&str> {
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        if let Some(end) = after.find('}') {
            let name = &after[..end];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Some(name);
            }
        }
        rest = after;
    }
    None
}

/// Rendered history text handed to a prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryBlocks {
    pub history_block: String,
    pub recent_block: String,
}

fn iso_date(timestamp: i64) -> String {
    chrono::DateTime::from_timestamp(timestamp, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| timestamp.to_string())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render_line(it: &Interaction, meta: &HashMap<String, ItemMeta>) -> String {
    let (title, desc) = match meta.get(&it.item_id) {
        Some(m) => (
            one_line(&m.title).replace(FIELD_SEP.trim(), "-"),
            one_line(&m.description.chars().take(DESC_EXCERPT_CHARS).collect::<String>()),
        ),
        None => (format!("(unknown item {})", it.item_id), String::new()),
    };
    format!("{}{FIELD_SEP}{title}{FIELD_SEP}{desc}", iso_date(it.timestamp))
}

/// Renders the last `max_items` events (oldest first) and the last `recent_k`
/// events as `date — title — description excerpt` lines.
pub fn render_history_block(
    history: &[Interaction],
    meta: &HashMap<String, ItemMeta>,
    max_items: usize,
    recent_k: usize,
) -> HistoryBlocks {
    let lines: Vec<String> = history.iter().map(|it| render_line(it, meta)).collect();
    let tail = |k: usize| lines[lines.len().saturating_sub(k)..].join("\n");
    HistoryBlocks {
        history_block: tail(max_items),
        recent_block: tail(recent_k),
    }
}

/// Everything a backend sees for one completion.
#[derive(Debug, Clone)]
pub struct ProfileRequest<'a> {
    pub user_id: &'a str,
    pub kind: PromptKind,
    pub system: &'a str,
    pub prompt: &'a str,
    pub blocks: &'a HistoryBlocks,
}

pub trait ProfileBackend: Send + Sync {
    /// Recorded as the profile's provenance and folded into the prompt hash.
    fn model_id(&self) -> String;

    /// Maximum prompt size in characters (system + user), if any.
    fn context_budget(&self) -> Option<usize> {
        None
    }

    fn complete(&self, request: &ProfileRequest<'_>) -> Result<String>;
}

/// Short, long and (optionally) general profile texts for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalProfile {
    pub user_id: String,
    pub short_text: String,
    pub long_text: String,
    pub general_text: Option<String>,
    pub provenance: String,
    pub prompt_hash: String,
}

/// Drives a backend through the cache with a fixed set of prompt templates.
pub struct ProfileGenerator<'a> {
    backend: &'a dyn ProfileBackend,
    cache: &'a ProfileCache,
    templates: HashMap<PromptKind, PromptTemplate>,
    backend_calls: AtomicUsize,
}

impl<'a> ProfileGenerator<'a> {
    pub fn new(
        backend: &'a dyn ProfileBackend,
        cache: &'a ProfileCache,
        templates: Vec<PromptTemplate>,
    ) -> Self {
        ProfileGenerator {
            backend,
            cache,
            templates: templates.into_iter().map(|t| (t.kind, t)).collect(),
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_builtin_templates(backend: &'a dyn ProfileBackend, cache: &'a ProfileCache) -> Self {
        Self::new(
            backend,
            cache,
            PromptKind::ALL.iter().map(|&k| PromptTemplate::builtin(k)).collect(),
        )
    }

    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    fn template(&self, kind: PromptKind) -> Result<&PromptTemplate> {
        self.templates
            .get(&kind)
            .ok_or_else(|| Error::config(format!("no prompt template for {kind}")))
    }

    /// Renders the prompt, dropping the oldest history lines until it fits
    /// the backend's context budget.
    fn fit_prompt(&self, template: &PromptTemplate, blocks: &HistoryBlocks) -> Result<(String, HistoryBlocks)> {
        let mut blocks = blocks.clone();
        loop {
            let prompt = template.render(&blocks)?;
            let size = template.system_text.chars().count() + prompt.chars().count();
            match self.backend.context_budget() {
                Some(budget) if size > budget && !blocks.history_block.is_empty() => {
                    blocks.history_block = match blocks.history_block.split_once('\n') {
                        Some((_, rest)) => rest.to_owned(),
                        None => String::new(),
                    };
                }
                _ => return Ok((prompt, blocks)),
            }
        }
    }

    /// One profile text for `user_id`, served from the cache when the same
    /// prompt was completed before by the same model.
    pub fn generate_profile(&self, user_id: &str, blocks: &HistoryBlocks, kind: PromptKind) -> Result<String> {
        let template = self.template(kind)?;
        let (prompt, fitted) = self.fit_prompt(template, blocks)?;
        let model = self.backend.model_id();
        let prompt_hash = content_hash(&[&template.identity(), &prompt, &model]);
        if let Some(text) = self.cache.get(user_id, kind, &prompt_hash) {
            return Ok(text);
        }
        let wrap = |source: Error| Error::Profile {
            user_id: user_id.to_owned(),
            kind: kind.to_string(),
            source: Box::new(source),
        };
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .backend
            .complete(&ProfileRequest {
                user_id,
                kind,
                system: &template.system_text,
                prompt: &prompt,
                blocks: &fitted,
            })
            .map_err(wrap)?;
        if text.trim().is_empty() {
            return Err(wrap(Error::Backend("empty completion".into())));
        }
        self.cache.put(CacheEntry {
            user_id: user_id.to_owned(),
            kind,
            prompt_hash,
            model,
            text: text.clone(),
        })?;
        Ok(text)
    }

    pub fn generate_user(&self, user_id: &str, blocks: &HistoryBlocks, with_general: bool) -> Result<TemporalProfile> {
        let short_text = self.generate_profile(user_id, blocks, PromptKind::ShortTerm)?;
        let long_text = self.generate_profile(user_id, blocks, PromptKind::LongTerm)?;
        let general_text = if with_general {
            Some(self.generate_profile(user_id, blocks, PromptKind::General)?)
        } else {
            None
        };
        let model = self.backend.model_id();
        let mut parts: Vec<String> = vec![];
        for kind in [PromptKind::ShortTerm, PromptKind::LongTerm] {
            let t = self.template(kind)?;
            parts.push(t.identity());
        }
        parts.push(blocks.history_block.clone());
        parts.push(blocks.recent_block.clone());
        parts.push(model.clone());
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        Ok(TemporalProfile {
            user_id: user_id.to_owned(),
            short_text,
            long_text,
            general_text,
            provenance: model,
            prompt_hash: content_hash(&refs),
        })
    }

    /// Profiles for many users with at most `max_in_flight` concurrent
    /// backend requests. Output follows input order.
    pub fn generate_all(
        &self,
        users: &[(String, HistoryBlocks)],
        with_general: bool,
        max_in_flight: usize,
    ) -> Result<Vec<TemporalProfile>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<TemporalProfile>>>> =
            Mutex::new((0..users.len()).map(|_| None).collect());
        let workers = max_in_flight.max(1).min(users.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= users.len() {
                        break;
                    }
                    let (uid, blocks) = &users[i];
                    let r = self.generate_user(uid, blocks, with_general);
                    let failed = r.is_err();
                    results.lock().expect("results lock")[i] = Some(r);
                    if failed {
                        // stop handing out work; already-running requests finish
                        next.store(users.len(), Ordering::SeqCst);
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(users.len());
        for r in results.into_inner().expect("results lock") {
            match r {
                Some(r) => out.push(r?),
                None => break,
            }
        }
        if out.len() != users.len() {
            return Err(Error::Backend("profile generation aborted".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(i: &str, t: i64) -> Interaction {
        Interaction {
            user_id: "u".into(),
            item_id: i.into(),
            timestamp: t,
        }
    }

    fn meta_for(ids: &[&str]) -> HashMap<String, ItemMeta> {
        ids.iter()
            .map(|id| {
                (
                    id.to_string(),
                    ItemMeta {
                        item_id: id.to_string(),
                        title: format!("Title {id}"),
                        description: "d".repeat(300),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn short_history_recent_equals_full() {
        let h = vec![ev("a", 0), ev("b", 86_400)];
        let b = render_history_block(&h, &meta_for(&["a", "b"]), 50, 5);
        assert_eq!(b.history_block, b.recent_block);
        let first = b.history_block.lines().next().unwrap();
        assert!(first.starts_with("1970-01-01 — Title a — "));
        assert_eq!(first.split(FIELD_SEP).nth(2).unwrap().len(), DESC_EXCERPT_CHARS);
    }

    #[test]
    fn long_history_truncated_to_latest() {
        let ids: Vec<String> = (0..60).map(|i| format!("i{i:02}")).collect();
        let h: Vec<Interaction> = ids.iter().enumerate().map(|(t, id)| ev(id, t as i64)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let b = render_history_block(&h, &meta_for(&refs), 50, 5);
        let lines: Vec<&str> = b.history_block.lines().collect();
        assert_eq!(lines.len(), 50);
        assert!(lines[0].contains("Title i10"));
        assert!(lines[49].contains("Title i59"));
        assert_eq!(b.recent_block.lines().count(), 5);
    }

    #[test]
    fn missing_meta_uses_placeholder_title() {
        let b = render_history_block(&[ev("ghost", 0)], &HashMap::new(), 50, 5);
        assert!(b.history_block.contains("(unknown item ghost)"));
    }

    #[test]
    fn builtin_templates_render_cleanly() {
        let blocks = HistoryBlocks {
            history_block: "h {weird}".into(),
            recent_block: "r".into(),
        };
        for kind in PromptKind::ALL {
            let t = PromptTemplate::builtin(kind);
            assert!(!t.system_text.is_empty());
            let out = t.render(&blocks).unwrap();
            assert!(out.contains("h {weird}"));
        }
    }

    #[test]
    fn unresolved_placeholder_rejected() {
        let err = PromptTemplate::parse(PromptKind::General, "sys\n---\nuse {history_block} and {mystery}").unwrap_err();
        assert!(err.to_string().contains("mystery"));
        let ok = PromptTemplate::parse(PromptKind::General, "no separator {history_block}").unwrap();
        assert!(ok.system_text.is_empty());
    }

    struct Counting {
        reply: String,
    }

    impl ProfileBackend for Counting {
        fn model_id(&self) -> String {
            "counting".into()
        }
        fn context_budget(&self) -> Option<usize> {
            Some(400)
        }
        fn complete(&self, req: &ProfileRequest<'_>) -> Result<String> {
            Ok(format!("{}:{}", self.reply, req.prompt.chars().count()))
        }
    }

    #[test]
    fn cache_hit_skips_backend() {
        let backend = TemplateBackend;
        let cache = ProfileCache::in_memory();
        let gen = ProfileGenerator::with_builtin_templates(&backend, &cache);
        let blocks = render_history_block(&[ev("a", 0)], &meta_for(&["a"]), 50, 5);
        let first = gen.generate_profile("u", &blocks, PromptKind::ShortTerm).unwrap();
        assert_eq!(gen.backend_calls(), 1);
        let second = gen.generate_profile("u", &blocks, PromptKind::ShortTerm).unwrap();
        assert_eq!(gen.backend_calls(), 1);
        assert_eq!(first, second);
    }

    #[test]
    fn over_budget_prompt_drops_oldest_lines() {
        let backend = Counting { reply: "ok".into() };
        let cache = ProfileCache::in_memory();
        let tpl = PromptTemplate::parse(PromptKind::LongTerm, "{history_block}").unwrap();
        let gen = ProfileGenerator::new(&backend, &cache, vec![tpl]);
        let ids: Vec<String> = (0..20).map(|i| format!("i{i:02}")).collect();
        let h: Vec<Interaction> = ids.iter().enumerate().map(|(t, id)| ev(id, t as i64)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let blocks = render_history_block(&h, &meta_for(&refs), 50, 5);
        let text = gen.generate_profile("u", &blocks, PromptKind::LongTerm).unwrap();
        let used: usize = text.trim_start_matches("ok:").parse().unwrap();
        assert!(used <= 400, "{used}");
        assert!(used > 0);
    }

    struct Empty;
    impl ProfileBackend for Empty {
        fn model_id(&self) -> String {
            "empty".into()
        }
        fn complete(&self, _: &ProfileRequest<'_>) -> Result<String> {
            Ok("  ".into())
        }
    }

    #[test]
    fn empty_completion_is_error_without_cache_write() {
        let cache = ProfileCache::in_memory();
        let gen = ProfileGenerator::with_builtin_templates(&Empty, &cache);
        let blocks = HistoryBlocks::default();
        let err = gen.generate_profile("u7", &blocks, PromptKind::ShortTerm).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("u7") && msg.contains("short_term"), "{msg}");
        assert!(cache.is_empty());
    }

    #[test]
    fn generate_all_preserves_order() {
        let cache = ProfileCache::in_memory();
        let gen = ProfileGenerator::with_builtin_templates(&TemplateBackend, &cache);
        let users: Vec<(String, HistoryBlocks)> = (0..9)
            .map(|i| {
                let id = format!("i{i}");
                (format!("u{i}"), render_history_block(&[ev(&id, i)], &meta_for(&[id.as_str()]), 50, 5))
            })
            .collect();
        let out = gen.generate_all(&users, true, 4).unwrap();
        for (i, p) in out.iter().enumerate() {
            assert_eq!(p.user_id, format!("u{i}"));
            assert!(p.short_text.contains(&format!("Title i{i}")));
            assert!(p.general_text.is_some());
        }
    }
}
