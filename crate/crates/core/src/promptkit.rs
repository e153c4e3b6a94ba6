//! Prompt templates and the strict JSON response envelope.
//!
//! Template assets are UTF-8 text. The first line lists the required
//! placeholders (`required: [a, b]`); the rest is the body, where `{name}`
//! marks a placeholder. Built-in copies of the assets are compiled in and
//! can be overridden from a directory at runtime.
//!
//! Generators must answer with
//! `{"items": [{"question", "answer", "relation"} | {"question", "options", "answer_index"}]}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const HALLUCINATION_PROMPTS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    OeQaGen,
    McqaGen,
    DispreferredGen,
    ShuffledOptionSelect,
    /// 1-based index into the hallucination prompt list.
    Hallucination(u8),
    MutDescribe,
}

impl TemplateId {
    pub fn all() -> Vec<TemplateId> {
        let mut ids = vec![
            Self::OeQaGen,
            Self::McqaGen,
            Self::DispreferredGen,
            Self::ShuffledOptionSelect,
            Self::MutDescribe,
        ];
        ids.extend((1..=HALLUCINATION_PROMPTS as u8).map(Self::Hallucination));
        ids
    }

    /// Hallucination prompt for a record index, cycling through 1..=7.
    pub fn hallucination_for(index: usize) -> TemplateId {
        Self::Hallucination((index % HALLUCINATION_PROMPTS) as u8 + 1)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OeQaGen => f.write_str("oe_qa_gen"),
            Self::McqaGen => f.write_str("mcqa_gen"),
            Self::DispreferredGen => f.write_str("dispreferred_gen"),
            Self::ShuffledOptionSelect => f.write_str("shuffled_option_select"),
            Self::Hallucination(k) => write!(f, "hallucination_{k}"),
            Self::MutDescribe => f.write_str("mut_describe"),
        }
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "oe_qa_gen" => Self::OeQaGen,
            "mcqa_gen" => Self::McqaGen,
            "dispreferred_gen" => Self::DispreferredGen,
            "shuffled_option_select" => Self::ShuffledOptionSelect,
            "mut_describe" => Self::MutDescribe,
            other => {
                let k = other
                    .strip_prefix("hallucination_")
                    .and_then(|k| k.parse::<u8>().ok())
                    .filter(|k| (1..=HALLUCINATION_PROMPTS as u8).contains(k))
                    .ok_or_else(|| PromptError::UnknownTemplate(other.to_string()))?;
                Self::Hallucination(k)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template {template}: missing placeholder `{name}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template}: {reason}")]
    InvalidTemplate { template: String, reason: String },
    #[error("cannot read template directory: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

fn is_ident(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Segments of a template body: literal text or a placeholder name.
enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn segments(body: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .char_indices()
            .take_while(|&(i, c)| if i == 0 { is_ident_start(c) } else { is_ident(c) })
            .count();
        if name_len > 0 && after[name_len..].starts_with('}') {
            out.push(Segment::Text(&rest[..open]));
            out.push(Segment::Slot(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            out.push(Segment::Text(&rest[..open + 1]));
            rest = after;
        }
    }
    out.push(Segment::Text(rest));
    out
}

impl PromptTemplate {
    /// Parses an asset file: header line, then body.
    pub fn parse(template_id: TemplateId, asset: &str) -> Result<Self, PromptError> {
        let invalid = |reason: String| PromptError::InvalidTemplate {
            template: template_id.to_string(),
            reason,
        };
        let (header, body) = asset.split_once('\n').unwrap_or((asset, ""));
        let list = header
            .trim()
            .strip_prefix("required:")
            .map(str::trim)
            .and_then(|l| l.strip_prefix('['))
            .and_then(|l| l.strip_suffix(']'))
            .ok_or_else(|| invalid(format!("bad header line `{header}`")))?;
        let required: BTreeSet<String> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let body = body.trim_end_matches('\n').to_string();
        let used: BTreeSet<String> = segments(&body)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.to_string()),
                Segment::Text(_) => None,
            })
            .collect();
        if used != required {
            return Err(invalid(format!("header lists {required:?} but body uses {used:?}")));
        }
        Ok(Self {
            template_id,
            body,
            required_placeholders: required,
        })
    }

    /// Substitutes placeholders in one pass; inserted values are not
    /// rescanned.
    pub fn render(&self, placeholders: &BTreeMap<String, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in segments(&self.body) {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    let v = placeholders.get(name).ok_or_else(|| PromptError::MissingPlaceholder {
                        template: self.template_id.to_string(),
                        name: name.to_string(),
                    })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

fn builtin_asset(id: TemplateId) -> &'static str {
    match id {
        TemplateId::OeQaGen => include_str!("../assets/prompts/oe_qa_gen.txt"),
        TemplateId::McqaGen => include_str!("../assets/prompts/mcqa_gen.txt"),
        TemplateId::DispreferredGen => include_str!("../assets/prompts/dispreferred_gen.txt"),
        TemplateId::ShuffledOptionSelect => {
            include_str!("../assets/prompts/shuffled_option_select.txt")
        }
        TemplateId::MutDescribe => include_str!("../assets/prompts/mut_describe.txt"),
        TemplateId::Hallucination(1) => include_str!("../assets/prompts/hallucination_1.txt"),
        TemplateId::Hallucination(2) => include_str!("../assets/prompts/hallucination_2.txt"),
        TemplateId::Hallucination(3) => include_str!("../assets/prompts/hallucination_3.txt"),
        TemplateId::Hallucination(4) => include_str!("../assets/prompts/hallucination_4.txt"),
        TemplateId::Hallucination(5) => include_str!("../assets/prompts/hallucination_5.txt"),
        TemplateId::Hallucination(6) => include_str!("../assets/prompts/hallucination_6.txt"),
        TemplateId::Hallucination(_) => include_str!("../assets/prompts/hallucination_7.txt"),
    }
}

/// Every template the pipeline uses.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::all()
            .into_iter()
            .map(|id| {
                let t = PromptTemplate::parse(id, builtin_asset(id)).expect("built-in template parses");
                (id, t)
            })
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by any `<template_id>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for id in TemplateId::all() {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io(e.to_string()))?;
                set.templates.insert(id, PromptTemplate::parse(id, &text)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, placeholders: &BTreeMap<String, String>) -> Result<String, PromptError> {
        self.get(id).render(placeholders)
    }

    /// Renders by string id, rejecting unknown ids.
    pub fn render_named(&self, id: &str, placeholders: &BTreeMap<String, String>) -> Result<String, PromptError> {
        self.render(id.parse()?, placeholders)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Convenience for building a placeholder map.
pub fn placeholders<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// "A. first\nB. second\n..." listing used by option-selection prompts.
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", (b'A' + i as u8) as char))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extracts the task tag (`[task:<id>]`) that generation templates carry
/// on their first body line.
pub fn task_tag(prompt: &str) -> Option<&str> {
    let start = prompt.find("[task:")? + "[task:".len();
    let len = prompt[start..].find(']')?;
    Some(&prompt[start..start + len])
}

/// Extracts the narrative block delimited by `<<<` and `>>>` lines.
pub fn narrative_block(prompt: &str) -> Option<&str> {
    let start = prompt.find("<<<\n")? + 4;
    let len = prompt[start..].find("\n>>>")?;
    Some(&prompt[start..start + len])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRelation {
    After,
    Before,
    Beginning,
    End,
    Between,
}

impl FromStr for TargetRelation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "after" => Ok(Self::After),
            "before" => Ok(Self::Before),
            "beginning" => Ok(Self::Beginning),
            "end" => Ok(Self::End),
            "between" => Ok(Self::Between),
            other => Err(format!("unknown relation `{other}`")),
        }
    }
}

const TEMPORAL_STEMS: [&str; 17] = [
    "after", "before", "begin", "start", "first", "end", "last", "final", "between", "then", "next", "follow",
    "preced", "prior", "until", "later", "earlier",
];

/// True when the text contains a temporal relation word.
pub fn mentions_temporal_relation(text: &str) -> bool {
    text.split(|c: char| !c.is_alphabetic())
        .map(str::to_lowercase)
        .any(|tok| TEMPORAL_STEMS.iter().any(|stem| tok.starts_with(stem)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenEndedQA {
    pub question: String,
    pub answer: String,
    #[serde(rename = "relation")]
    pub target_relation: TargetRelation,
}

impl OpenEndedQA {
    pub fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        if !mentions_temporal_relation(&self.question) {
            return Err(format!("question has no temporal relation word: {}", self.question));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaItem {
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distractor_kinds: Vec<String>,
}

impl McqaItem {
    pub fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if !(4..=5).contains(&self.options.len()) {
            return Err(format!("{} options; 4 or 5 required", self.options.len()));
        }
        if self.answer_index >= self.options.len() {
            return Err(format!(
                "answer_index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            ));
        }
        let mut seen = BTreeSet::new();
        for o in &self.options {
            if o.trim().is_empty() {
                return Err("empty option".into());
            }
            if !seen.insert(o.trim()) {
                return Err(format!("duplicate option `{o}`"));
            }
        }
        Ok(())
    }
}

/// Items that passed validation, plus one diagnostic per dropped item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("response is not a valid items envelope: {reason}")]
pub struct ParseFailure {
    pub reason: String,
    pub raw: String,
}

fn envelope_items(response: &str) -> Result<Vec<Value>, ParseFailure> {
    let fail = |reason: String| ParseFailure {
        reason,
        raw: response.to_string(),
    };
    let mut text = response.trim();
    // A single markdown code fence around the JSON is tolerated.
    if let Some(inner) = text.strip_prefix("```") {
        let inner = inner.strip_prefix("json").unwrap_or(inner);
        text = inner.strip_suffix("```").unwrap_or(inner).trim();
    }
    let value: Value = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
    match value.get("items") {
        Some(Value::Array(items)) => Ok(items.clone()),
        _ => Err(fail("missing `items` array".into())),
    }
}

fn str_of<'a>(v: &'a Value, key: &str) -> Result<&'a str, String> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("`{key}` missing or not a string"))
}

pub fn parse_oe_qa(response: &str) -> Result<Parsed<OpenEndedQA>, ParseFailure> {
    let mut parsed = Parsed {
        items: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, item) in envelope_items(response)?.iter().enumerate() {
        let qa = (|| -> Result<OpenEndedQA, String> {
            let qa = OpenEndedQA {
                question: str_of(item, "question")?.to_string(),
                answer: str_of(item, "answer")?.to_string(),
                target_relation: str_of(item, "relation")?.parse()?,
            };
            qa.check()?;
            Ok(qa)
        })();
        match qa {
            Ok(qa) => parsed.items.push(qa),
            Err(reason) => parsed.dropped.push(format!("item {i}: {reason}")),
        }
    }
    Ok(parsed)
}

pub fn parse_mcqa(response: &str) -> Result<Parsed<McqaItem>, ParseFailure> {
    let mut parsed = Parsed {
        items: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, item) in envelope_items(response)?.iter().enumerate() {
        let mcqa = (|| -> Result<McqaItem, String> {
            let options = item
                .get("options")
                .and_then(Value::as_array)
                .ok_or("`options` missing or not an array")?
                .iter()
                .map(|o| o.as_str().map(str::to_string).ok_or("option is not a string"))
                .collect::<Result<Vec<_>, _>>()?;
            let answer_index = item
                .get("answer_index")
                .and_then(Value::as_u64)
                .ok_or("`answer_index` missing or not a non-negative integer")?;
            let m = McqaItem {
                question: str_of(item, "question")?.to_string(),
                options,
                answer_index: answer_index as usize,
                distractor_kinds: Vec::new(),
            };
            m.check()?;
            Ok(m)
        })();
        match mcqa {
            Ok(m) => parsed.items.push(m),
            Err(reason) => parsed.dropped.push(format!("item {i}: {reason}")),
        }
    }
    Ok(parsed)
}

#[derive(Serialize)]
struct OeWire<'a> {
    question: &'a str,
    answer: &'a str,
    relation: TargetRelation,
}

#[derive(Serialize)]
struct McqaWire<'a> {
    question: &'a str,
    options: &'a [String],
    answer_index: usize,
}

#[derive(Serialize)]
struct Envelope<T> {
    items: Vec<T>,
}

pub fn oe_envelope(items: &[OpenEndedQA]) -> String {
    let items = items
        .iter()
        .map(|q| OeWire {
            question: &q.question,
            answer: &q.answer,
            relation: q.target_relation,
        })
        .collect();
    serde_json::to_string(&Envelope { items }).expect("serializable envelope")
}

pub fn mcqa_envelope(items: &[McqaItem]) -> String {
    let items = items
        .iter()
        .map(|m| McqaWire {
            question: &m.question,
            options: &m.options,
            answer_index: m.answer_index,
        })
        .collect();
    serde_json::to_string(&Envelope { items }).expect("serializable envelope")
}
