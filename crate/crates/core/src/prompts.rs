//! Versioned prompt templates for every LLM-backed tool.
//!
//! Templates are plain text files (`prompts/*.txt`, embedded at build time and
//! overridable from a directory). Leading `#` lines are metadata, `[system]` and
//! `[user]` open the two message sections, and `{name}` marks a placeholder.

use std::collections::BTreeMap;
use std::path::Path;

use crate::llm::ChatMessage;

const EMBEDDED: &[(&str, &str)] = &[
    ("clarify", include_str!("../prompts/clarify.txt")),
    ("rewrite", include_str!("../prompts/rewrite.txt")),
    ("decompose", include_str!("../prompts/decompose.txt")),
    ("plan", include_str!("../prompts/plan.txt")),
    ("generate", include_str!("../prompts/generate.txt")),
    ("direct", include_str!("../prompts/direct.txt")),
    ("compose", include_str!("../prompts/compose.txt")),
    ("filter", include_str!("../prompts/filter.txt")),
    ("reflect", include_str!("../prompts/reflect.txt")),
    ("polish", include_str!("../prompts/polish.txt")),
    ("judge", include_str!("../prompts/judge.txt")),
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("prompt {name}: {detail}")]
    Parse { name: String, detail: String },
    #[error("cannot read prompt directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    system: String,
    user: String,
}

impl PromptTemplate {
    pub fn parse(name: &str, raw: &str) -> Result<Self, PromptError> {
        let err = |detail: &str| PromptError::Parse {
            name: name.to_string(),
            detail: detail.to_string(),
        };
        let mut version = None;
        let mut section: Option<&str> = None;
        let mut system = Vec::new();
        let mut user = Vec::new();
        for line in raw.lines() {
            match (section, line.trim_end()) {
                (None, l) if l.starts_with('#') => {
                    if let Some(v) = l.trim_start_matches('#').trim().strip_prefix("version:") {
                        version = Some(v.trim().parse::<u32>().map_err(|_| err("bad version"))?);
                    }
                }
                (_, "[system]") => section = Some("system"),
                (_, "[user]") => section = Some("user"),
                (Some("system"), _) => system.push(line),
                (Some("user"), _) => user.push(line),
                (None, l) if l.trim().is_empty() => {}
                (None, _) => return Err(err("text before the first section")),
                _ => unreachable!(),
            }
        }
        let user = user.join("\n").trim().to_string();
        if user.is_empty() {
            return Err(err("missing [user] section"));
        }
        Ok(PromptTemplate {
            name: name.to_string(),
            version: version.ok_or_else(|| err("missing '# version:' header"))?,
            system: system.join("\n").trim().to_string(),
            user,
        })
    }

    /// Substitutes `{name}` placeholders found in `vars`; other braces stay literal.
    pub fn render(&self, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(2);
        if !self.system.is_empty() {
            out.push(ChatMessage::system(substitute(&self.system, vars)));
        }
        out.push(ChatMessage::user(substitute(&self.user, vars)));
        out
    }
}

fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        let value = (ident_len > 0 && after[ident_len..].starts_with('}'))
            .then(|| vars.iter().find(|(k, _)| *k == &after[..ident_len]))
            .flatten();
        match value {
            Some((_, v)) => {
                out.push_str(v);
                rest = &after[ident_len + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let templates = EMBEDDED
            .iter()
            .map(|(name, raw)| {
                let t = PromptTemplate::parse(name, raw).expect("embedded prompt parses");
                (name.to_string(), t)
            })
            .collect();
        PromptSet { templates }
    }
}

impl PromptSet {
    /// Embedded templates, with any `<name>.txt` in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptSet::default();
        let io = |source| PromptError::Io {
            path: dir.display().to_string(),
            source,
        };
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            if path.extension().and_then(|e| e.to_str()) != Some("txt") || !set.templates.contains_key(name) {
                continue;
            }
            let raw = std::fs::read_to_string(&path).map_err(io)?;
            set.templates.insert(name.to_string(), PromptTemplate::parse(name, &raw)?);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &PromptTemplate {
        self.templates
            .get(name)
            .unwrap_or_else(|| panic!("no prompt template named {name}"))
    }

    pub fn versions(&self) -> BTreeMap<String, u32> {
        self.templates.iter().map(|(k, t)| (k.clone(), t.version)).collect()
    }
}
