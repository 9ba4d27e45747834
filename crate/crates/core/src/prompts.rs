//! Prompt templates with `{name}` placeholders.
//!
//! Built-in templates are compiled in; a template directory may override any
//! of them by file name (`planner.txt`, `planner_repair.txt`,
//! `rewriter.txt`, `generator.txt`, `answerer.txt`).

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template}: no value for placeholder {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Template { name: name.into(), text: text.into() }
    }

    /// Substitutes `{name}` placeholders. Braces that do not enclose a plain
    /// identifier (JSON examples, for instance) are copied verbatim.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let ident = close.map(|c| &after[..c]).filter(|s| is_placeholder(s));
            match (ident, close) {
                (Some(name), Some(c)) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingValue {
                            template: self.name.clone(),
                            name: name.to_string(),
                        })?;
                    out.push_str(value);
                    rest = &after[c + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_placeholder(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub planner: Template,
    pub planner_repair: Template,
    pub rewriter: Template,
    pub generator: Template,
    pub answerer: Template,
}

const BUILTIN: [(&str, &str); 5] = [
    ("planner", include_str!("../templates/planner.txt")),
    ("planner_repair", include_str!("../templates/planner_repair.txt")),
    ("rewriter", include_str!("../templates/rewriter.txt")),
    ("generator", include_str!("../templates/generator.txt")),
    ("answerer", include_str!("../templates/answerer.txt")),
];

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_map(BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }
}

impl PromptTemplates {
    fn from_map(mut map: BTreeMap<String, String>) -> Self {
        let mut take = |k: &str| Template::new(k, map.remove(k).expect("all templates present"));
        PromptTemplates {
            planner: take("planner"),
            planner_repair: take("planner_repair"),
            rewriter: take("rewriter"),
            generator: take("generator"),
            answerer: take("answerer"),
        }
    }

    /// Built-ins overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut map: BTreeMap<String, String> =
            BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                map.insert(name.to_string(), text);
            }
        }
        Ok(Self::from_map(map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_named_placeholders_and_keeps_json_braces() {
        let t = Template::new("t", "Q: {user_query}\n{\"root\":\"n001\"} {x}");
        let out = t.render(&[("user_query", "why?"), ("x", "1")]).unwrap();
        assert_eq!(out, "Q: why?\n{\"root\":\"n001\"} 1");
    }

    #[test]
    fn missing_value_is_an_error() {
        let t = Template::new("t", "{now_iso}");
        assert_eq!(
            t.render(&[]),
            Err(TemplateError::MissingValue { template: "t".into(), name: "now_iso".into() })
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = Template::new("t", "{a}");
        assert_eq!(t.render(&[("a", "{b}")]).unwrap(), "{b}");
    }

    #[test]
    fn builtins_render_with_their_placeholders() {
        let t = PromptTemplates::default();
        t.planner
            .render(&[("user_query", "q"), ("now_iso", "n"), ("resolved_dates_block", "r"), ("api_catalog", "c")])
            .unwrap();
        t.planner_repair.render(&[("error", "e"), ("previous", "p")]).unwrap();
        t.rewriter
            .render(&[
                ("parent_id", "n"),
                ("parent_query", "q"),
                ("parent_response", "r"),
                ("child_blocks", "c"),
                ("graph_json", "{}"),
            ])
            .unwrap();
        t.generator.render(&[("now_iso", "n"), ("user_query", "q"), ("evidence_block", "e")]).unwrap();
        t.answerer
            .render(&[("now_iso", "n"), ("question", "q"), ("choices_block", "c"), ("evidence_block", "e")])
            .unwrap();
    }

    #[test]
    fn directory_overrides_single_template() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("answerer.txt"), "custom {question}").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.answerer.render(&[("question", "q")]).unwrap(), "custom q");
        assert_eq!(t.planner, PromptTemplates::default().planner);
    }
}
