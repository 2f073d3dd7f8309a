//! Prompt templates with `{name}` placeholders.
//!
//! The built-in texts live in `prompts/` and can be overridden per file
//! from a directory (`<name>.system.txt`, `<name>.user.txt`). `{{` and `}}`
//! render as literal braces. Substitution is single-pass, so braces inside
//! substituted code are never re-expanded.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Sampling,
    Testbench,
    RefineIntra,
    RefineInterScenario,
    RefineInterReconcile,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Sampling,
        TemplateKind::Testbench,
        TemplateKind::RefineIntra,
        TemplateKind::RefineInterScenario,
        TemplateKind::RefineInterReconcile,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateKind::Sampling => "sampling",
            TemplateKind::Testbench => "testbench",
            TemplateKind::RefineIntra => "refine_intra",
            TemplateKind::RefineInterScenario => "refine_inter_scenario",
            TemplateKind::RefineInterReconcile => "refine_inter_reconcile",
        }
    }

    /// Placeholders a template of this kind must use, and the only ones it may use.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Sampling => &["spec_text", "module_interface"],
            TemplateKind::Testbench => &["spec_text", "module_interface", "min_test_cases", "marker"],
            TemplateKind::RefineIntra | TemplateKind::RefineInterReconcile => {
                &["spec_text", "module_interface", "code_a", "code_b", "note"]
            }
            TemplateKind::RefineInterScenario => {
                &["spec_text", "module_interface", "testbench", "divergences"]
            }
        }
    }

    fn builtin(self) -> (&'static str, &'static str) {
        match self {
            TemplateKind::Sampling => (
                include_str!("../prompts/sampling.system.txt"),
                include_str!("../prompts/sampling.user.txt"),
            ),
            TemplateKind::Testbench => (
                include_str!("../prompts/testbench.system.txt"),
                include_str!("../prompts/testbench.user.txt"),
            ),
            TemplateKind::RefineIntra => (
                include_str!("../prompts/refine_intra.system.txt"),
                include_str!("../prompts/refine_intra.user.txt"),
            ),
            TemplateKind::RefineInterScenario => (
                include_str!("../prompts/refine_inter_scenario.system.txt"),
                include_str!("../prompts/refine_inter_scenario.user.txt"),
            ),
            TemplateKind::RefineInterReconcile => (
                include_str!("../prompts/refine_inter_reconcile.system.txt"),
                include_str!("../prompts/refine_inter_reconcile.user.txt"),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template(Vec<Piece>);

impl Template {
    fn parse(source: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                            _ => {
                                return Err(Error::config(format!(
                                    "malformed placeholder `{{{name}` in template"
                                )))
                            }
                        }
                    }
                    if name.is_empty() {
                        return Err(Error::config("empty placeholder `{}` in template"));
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(name));
                }
                _ => text.push(c),
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Ok(Template(pieces))
    }

    fn slots(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Text(_) => None,
        })
    }

    fn render(&self, values: &BTreeMap<&str, &str>) -> Result<String> {
        let mut out = String::new();
        for piece in &self.0 {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => out.push_str(values.get(name.as_str()).ok_or_else(|| {
                    Error::config(format!("no value supplied for placeholder `{{{name}}}`"))
                })?),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PromptPair {
    system: Template,
    user: Template,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pairs: Vec<(TemplateKind, PromptPair)>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self::from_sources(|kind| {
            let (s, u) = kind.builtin();
            Ok((s.to_string(), u.to_string()))
        })
        .expect("built-in prompt templates are well formed")
    }

    /// Built-ins, with any `<stem>.system.txt` / `<stem>.user.txt` found in
    /// `dir` taking precedence.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_sources(|kind| {
            let (bs, bu) = kind.builtin();
            let read = |suffix: &str, fallback: &str| -> Result<String> {
                let path = dir.join(format!("{}.{suffix}.txt", kind.file_stem()));
                if path.exists() {
                    std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
                } else {
                    Ok(fallback.to_string())
                }
            };
            Ok((read("system", bs)?, read("user", bu)?))
        })
    }

    /// Builds a set from explicit sources for every kind, validating each.
    pub fn from_sources(
        mut source: impl FnMut(TemplateKind) -> Result<(String, String)>,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for kind in TemplateKind::ALL {
            let (system, user) = source(kind)?;
            let pair = PromptPair {
                system: Template::parse(&system)?,
                user: Template::parse(&user)?,
            };
            validate_pair(kind, &pair)?;
            pairs.push((kind, pair));
        }
        Ok(PromptSet { pairs })
    }

    /// Returns `(system, user)` prompt text.
    pub fn render(&self, kind: TemplateKind, values: &[(&str, &str)]) -> Result<(String, String)> {
        let pair = &self
            .pairs
            .iter()
            .find(|(k, _)| *k == kind)
            .expect("every kind is loaded")
            .1;
        let values: BTreeMap<&str, &str> = values.iter().copied().collect();
        Ok((pair.system.render(&values)?, pair.user.render(&values)?))
    }

    /// Stable text identifying the templates of `kinds`, for cache keys.
    pub fn digest_source(&self, kinds: &[TemplateKind]) -> String {
        let mut out = String::new();
        for (kind, pair) in self.pairs.iter().filter(|(k, _)| kinds.contains(k)) {
            out.push_str(&format!("{}:{:?}\n", kind.file_stem(), pair));
        }
        out
    }
}

fn validate_pair(kind: TemplateKind, pair: &PromptPair) -> Result<()> {
    let allowed = kind.placeholders();
    let used: Vec<&str> = pair.system.slots().chain(pair.user.slots()).collect();
    if let Some(unknown) = used.iter().find(|s| !allowed.contains(s)) {
        return Err(Error::config(format!(
            "{} template uses unknown placeholder `{{{unknown}}}`",
            kind.file_stem()
        )));
    }
    if let Some(missing) = allowed.iter().find(|a| !used.contains(a)) {
        return Err(Error::config(format!(
            "{} template is missing placeholder `{{{missing}}}`",
            kind.file_stem()
        )));
    }
    Ok(())
}
