//! Template-driven English NLG used as the reference English system.
//!
//! Pack files hold `template <domain>.<intent>: <body>` lines. A body mixes
//! literal text, `{arg}` slots and flat alternation groups `(a|b|c)`; each
//! alternative may itself contain literals and slots. `\(`, `\)`, `\|`, `\{`,
//! `\}` and `\\` escape the grammar characters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest;
use crate::schema::{IntentRef, Schema, StructuredExample};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Seq(Vec<Segment>),
    Alt(Vec<Vec<Segment>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    parts: Vec<Part>,
}

impl Template {
    pub fn parse(body: &str) -> Result<Template, TemplateError> {
        Parser { src: body, pos: 0 }.template()
    }

    pub fn variant_count(&self) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Seq(_) => 1,
                Part::Alt(alts) => alts.len(),
            })
            .product()
    }

    /// Segments of variant `index`; the leftmost group varies slowest.
    fn variant(&self, mut index: usize) -> Vec<&Segment> {
        let mut choice = vec![0; self.parts.len()];
        for (i, p) in self.parts.iter().enumerate().rev() {
            if let Part::Alt(alts) = p {
                choice[i] = index % alts.len();
                index /= alts.len();
            }
        }
        let mut out = Vec::new();
        for (i, p) in self.parts.iter().enumerate() {
            match p {
                Part::Seq(s) => out.extend(s.iter()),
                Part::Alt(alts) => out.extend(alts[choice[i]].iter()),
            }
        }
        out
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().flat_map(|p| {
            let segs: Vec<&Segment> = match p {
                Part::Seq(s) => s.iter().collect(),
                Part::Alt(a) => a.iter().flatten().collect(),
            };
            segs.into_iter().filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Literal(_) => None,
            })
        })
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, message: &str) -> TemplateError {
        TemplateError::Parse { position: self.pos, message: message.to_string() }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn template(mut self) -> Result<Template, TemplateError> {
        let mut parts = Vec::new();
        loop {
            let seq = self.sequence()?;
            if !seq.is_empty() {
                parts.push(Part::Seq(seq));
            }
            match self.peek() {
                None => break,
                Some('(') => {
                    self.bump();
                    parts.push(Part::Alt(self.group()?));
                }
                Some(')') => return Err(self.err("unbalanced `)`")),
                Some('|') => return Err(self.err("`|` outside an alternation group")),
                Some(_) => unreachable!("sequence stops only at grammar characters"),
            }
        }
        Ok(Template { parts })
    }

    fn group(&mut self) -> Result<Vec<Vec<Segment>>, TemplateError> {
        let mut alts = vec![self.sequence()?];
        loop {
            match self.bump() {
                Some('|') => alts.push(self.sequence()?),
                Some(')') => return Ok(alts),
                Some('(') => {
                    self.pos -= 1;
                    return Err(self.err("nested alternation groups are not supported"));
                }
                _ => return Err(self.err("unterminated alternation group")),
            }
        }
    }

    /// Literals and slots up to the next `(`, `)`, `|` or end of input.
    fn sequence(&mut self) -> Result<Vec<Segment>, TemplateError> {
        let mut segs = Vec::new();
        let mut lit = String::new();
        while let Some(c) = self.peek() {
            match c {
                '(' | ')' | '|' => break,
                '\\' => {
                    self.bump();
                    match self.bump() {
                        Some(e @ ('(' | ')' | '|' | '{' | '}' | '\\')) => lit.push(e),
                        _ => return Err(self.err("bad escape")),
                    }
                }
                '{' => {
                    self.bump();
                    let start = self.pos;
                    while matches!(self.peek(), Some(c) if c != '}') {
                        self.bump();
                    }
                    if self.bump() != Some('}') {
                        return Err(self.err("unterminated slot"));
                    }
                    let name = &self.src[start..self.pos - 1];
                    if !crate::schema::is_identifier(name) {
                        return Err(TemplateError::Parse {
                            position: start,
                            message: format!("bad slot name `{name}`"),
                        });
                    }
                    if !lit.is_empty() {
                        segs.push(Segment::Literal(std::mem::take(&mut lit)));
                    }
                    segs.push(Segment::Slot(name.to_string()));
                }
                '}' => return Err(self.err("unbalanced `}`")),
                _ => {
                    lit.push(c);
                    self.bump();
                }
            }
        }
        if !lit.is_empty() {
            segs.push(Segment::Literal(lit));
        }
        Ok(segs)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("pack line {line}: {source}")]
    Line { line: usize, source: Box<TemplateError> },
    #[error("pack line {line}: {message}")]
    Pack { line: usize, message: String },
    #[error("no template for intent {0}")]
    MissingTemplate(IntentRef),
    #[error("variant {index} out of range ({count} variants)")]
    VariantOutOfRange { index: usize, count: usize },
    #[error("slot `{0}` has no value in the example")]
    UnboundSlot(String),
    #[error("slot `{slot}` is not an argument of intent {intent}")]
    UnknownSlot { intent: IntentRef, slot: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name")]
pub enum SpanKind {
    #[serde(rename = "ENTITY")]
    Entity(String),
    #[serde(rename = "ARG")]
    Arg(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    /// Byte offsets into the text.
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
    pub arg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedText {
    pub text: String,
    pub spans: Vec<TextSpan>,
}

/// All templates of a pack, keyed by intent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplatePack {
    templates: BTreeMap<IntentRef, Vec<Template>>,
    pack_hash: String,
}

impl TemplatePack {
    pub fn parse(text: &str) -> Result<TemplatePack, TemplateError> {
        let mut templates: BTreeMap<IntentRef, Vec<Template>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let pack_err = |message: &str| TemplateError::Pack { line: n + 1, message: message.to_string() };
            let rest = line.strip_prefix("template ").ok_or_else(|| pack_err("expected `template`"))?;
            let (head, body) = rest.split_once(':').ok_or_else(|| pack_err("missing `:`"))?;
            let intent: IntentRef = head.trim().parse().map_err(|m: String| pack_err(&m))?;
            let body = body.strip_prefix(' ').unwrap_or(body);
            let t = Template::parse(body)
                .map_err(|e| TemplateError::Line { line: n + 1, source: Box::new(e) })?;
            templates.entry(intent).or_default().push(t);
        }
        Ok(TemplatePack { templates, pack_hash: digest::canonical_text_digest(text) })
    }

    /// SHA-256 over the canonicalized pack text.
    pub fn pack_hash(&self) -> &str {
        &self.pack_hash
    }

    pub fn intents(&self) -> impl Iterator<Item = &IntentRef> {
        self.templates.keys()
    }

    /// Checks that every slot names an argument of its intent.
    pub fn check(&self, schema: &Schema) -> Result<(), TemplateError> {
        for (intent, ts) in &self.templates {
            let spec = schema.intent(intent).ok_or_else(|| TemplateError::MissingTemplate(intent.clone()))?;
            for t in ts {
                for slot in t.slots() {
                    if !spec.has_arg(slot) {
                        return Err(TemplateError::UnknownSlot {
                            intent: intent.clone(),
                            slot: slot.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn variant_count(&self, intent: &IntentRef) -> Result<usize, TemplateError> {
        let ts = self.templates.get(intent).ok_or_else(|| TemplateError::MissingTemplate(intent.clone()))?;
        Ok(ts.iter().map(Template::variant_count).sum())
    }

    /// Renders variant `variant_index` (counted across all templates of the intent).
    pub fn render(
        &self,
        example: &StructuredExample,
        schema: &Schema,
        variant_index: usize,
    ) -> Result<AnnotatedText, TemplateError> {
        let ts = self
            .templates
            .get(&example.intent)
            .ok_or_else(|| TemplateError::MissingTemplate(example.intent.clone()))?;
        let count: usize = ts.iter().map(Template::variant_count).sum();
        let mut index = variant_index;
        for t in ts {
            if index < t.variant_count() {
                return expand(&t.variant(index), example, schema);
            }
            index -= t.variant_count();
        }
        Err(TemplateError::VariantOutOfRange { index: variant_index, count })
    }

    /// Every variant in deterministic order: templates in file order, then the
    /// cartesian product of groups with the first alternative first.
    pub fn render_all_variants(
        &self,
        example: &StructuredExample,
        schema: &Schema,
    ) -> Result<Vec<AnnotatedText>, TemplateError> {
        let n = self.variant_count(&example.intent)?;
        (0..n).map(|i| self.render(example, schema, i)).collect()
    }
}

fn expand(segs: &[&Segment], example: &StructuredExample, schema: &Schema) -> Result<AnnotatedText, TemplateError> {
    let mut text = String::new();
    let mut spans = Vec::new();
    for seg in segs {
        match seg {
            Segment::Literal(l) => text.push_str(l),
            Segment::Slot(name) => {
                let value = example.values.get(name).ok_or_else(|| TemplateError::UnboundSlot(name.clone()))?;
                let kind = match schema.arg(name).and_then(|a| a.annotation.entity_type()) {
                    Some(t) => SpanKind::Entity(t.to_string()),
                    None => SpanKind::Arg(name.clone()),
                };
                let start = text.len();
                text.push_str(value);
                if !value.is_empty() {
                    spans.push(TextSpan { start, end: text.len(), kind, arg: name.clone() });
                }
            }
        }
    }
    Ok(AnnotatedText { text, spans })
}
