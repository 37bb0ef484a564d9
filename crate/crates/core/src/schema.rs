//! Argument schema, intents, and validated structured examples.
//!
//! Schema documents are line oriented:
//!
//! ```text
//! # comment
//! arg temperature NUMBER CARDINAL
//! arg location STRING ENTITY(City)
//! arg unit ENUM PLAIN enum CELSIUS,FAHRENHEIT
//! pad 2
//! intent weather.CURRENT_TEMP temperature,location,unit?
//! ```
//!
//! `pad <n>` reserves `n` argument indices without declaring arguments. Two
//! enum arguments, `domain` and `intent`, always exist: when the document does
//! not declare them they are appended after every declared argument, with the
//! domain and intent names as enum values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest;

pub const DOMAIN_ARG: &str = "domain";
pub const INTENT_ARG: &str = "intent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArgKind {
    String,
    Number,
    /// Only seen while parsing; loaded schemas store booleans as two-value enums.
    Boolean,
    Enum,
}

impl FromStr for ArgKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "STRING" => Ok(ArgKind::String),
            "NUMBER" => Ok(ArgKind::Number),
            "BOOLEAN" => Ok(ArgKind::Boolean),
            "ENUM" => Ok(ArgKind::Enum),
            other => Err(format!("unknown argument kind `{other}`")),
        }
    }
}

impl fmt::Display for ArgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArgKind::String => "STRING",
            ArgKind::Number => "NUMBER",
            ArgKind::Boolean => "BOOLEAN",
            ArgKind::Enum => "ENUM",
        };
        f.write_str(s)
    }
}

/// Semantic annotation driving synthetic value generation and entity tagging.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Annotation {
    Plain,
    Date,
    TimeOfDay,
    DurationSeconds,
    Cardinal,
    Entity(String),
}

impl Annotation {
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            Annotation::Entity(t) => Some(t),
            _ => None,
        }
    }
}

impl FromStr for Annotation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PLAIN" => Ok(Annotation::Plain),
            "DATE" => Ok(Annotation::Date),
            "TIME_OF_DAY" => Ok(Annotation::TimeOfDay),
            "DURATION_SECONDS" => Ok(Annotation::DurationSeconds),
            "CARDINAL" => Ok(Annotation::Cardinal),
            other => {
                let inner = other
                    .strip_prefix("ENTITY(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown annotation `{other}`"))?;
                if !is_identifier(inner) {
                    return Err(format!("bad entity type `{inner}`"));
                }
                Ok(Annotation::Entity(inner.to_string()))
            }
        }
    }
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Annotation::Plain => f.write_str("PLAIN"),
            Annotation::Date => f.write_str("DATE"),
            Annotation::TimeOfDay => f.write_str("TIME_OF_DAY"),
            Annotation::DurationSeconds => f.write_str("DURATION_SECONDS"),
            Annotation::Cardinal => f.write_str("CARDINAL"),
            Annotation::Entity(t) => write!(f, "ENTITY({t})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentSpec {
    pub name: String,
    pub kind: ArgKind,
    pub annotation: Annotation,
    /// Non-empty iff `kind == Enum`.
    pub enum_values: Vec<String>,
    pub arg_index: usize,
    pub type_index: usize,
}

impl ArgumentSpec {
    pub fn is_enum(&self) -> bool {
        self.kind == ArgKind::Enum
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentArg {
    pub name: String,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub domain: String,
    pub intent: String,
    pub args: Vec<IntentArg>,
}

impl IntentSpec {
    pub fn intent_ref(&self) -> IntentRef {
        IntentRef::new(&self.domain, &self.intent)
    }

    pub fn has_arg(&self, name: &str) -> bool {
        self.args.iter().any(|a| a.name == name)
    }
}

/// `(domain, intent)` pair, written `domain.intent`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IntentRef {
    pub domain: String,
    pub intent: String,
}

impl IntentRef {
    pub fn new(domain: &str, intent: &str) -> Self {
        IntentRef { domain: domain.to_string(), intent: intent.to_string() }
    }
}

impl fmt::Display for IntentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.domain, self.intent)
    }
}

impl FromStr for IntentRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (d, i) = s
            .split_once('.')
            .ok_or_else(|| format!("intent reference `{s}` is not of the form domain.intent"))?;
        if !is_identifier(d) || !is_identifier(i) {
            return Err(format!("intent reference `{s}` has a malformed identifier"));
        }
        Ok(IntentRef::new(d, i))
    }
}

impl Serialize for IntentRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IntentRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One intent instance: a flat map of argument values.
///
/// Maps are ordered, so two examples holding the same values compare equal
/// regardless of the order they were written in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredExample {
    pub intent: IntentRef,
    #[serde(deserialize_with = "scalar_map")]
    pub values: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub localized_values: BTreeMap<String, String>,
}

impl StructuredExample {
    pub fn new(intent: IntentRef) -> Self {
        StructuredExample { intent, values: BTreeMap::new(), localized_values: BTreeMap::new() }
    }

    pub fn with(mut self, arg: &str, value: &str) -> Self {
        self.values.insert(arg.to_string(), value.to_string());
        self
    }

    pub fn with_localized(mut self, arg: &str, value: &str) -> Self {
        self.localized_values.insert(arg.to_string(), value.to_string());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("example serialization cannot fail")
    }

    pub fn from_json(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

// Numbers and booleans are accepted in JSON input and kept as their decimal text.
fn scalar_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, String>, D::Error> {
    let raw = BTreeMap::<String, serde_json::Value>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            let s = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => {
                    return Err(serde::de::Error::custom(format!(
                        "argument `{k}` has non-scalar value {other}"
                    )))
                }
            };
            Ok((k, s))
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate argument name `{0}`")]
    DuplicateArg(String),
    #[error("duplicate intent `{0}`")]
    DuplicateIntent(String),
    #[error("intent `{intent}` references unknown argument `{arg}`")]
    DanglingArg { intent: String, arg: String },
    #[error("enum argument `{0}` has no values")]
    EmptyEnum(String),
    #[error("argument `{0}` must be an ENUM listing every {0} name")]
    BadReservedArg(String),
}

/// A violation found by [`Schema::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownIntent(IntentRef),
    UnknownArgument(String),
    NotInIntent(String),
    MissingRequired(String),
    WrongKind { arg: String, expected: ArgKind, value: String },
    NotInEnum { arg: String, value: String },
    BadAnnotatedValue { arg: String, annotation: Annotation, value: String },
    ReservedMismatch { arg: String, value: String },
    BadLocalized(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownIntent(i) => write!(f, "unknown intent {i}"),
            Violation::UnknownArgument(a) => write!(f, "unknown argument `{a}`"),
            Violation::NotInIntent(a) => write!(f, "argument `{a}` is not used by this intent"),
            Violation::MissingRequired(a) => write!(f, "missing required argument `{a}`"),
            Violation::WrongKind { arg, expected, value } => {
                write!(f, "argument `{arg}` expects {expected}, got `{value}`")
            }
            Violation::NotInEnum { arg, value } => {
                write!(f, "`{value}` is not a value of enum `{arg}`")
            }
            Violation::BadAnnotatedValue { arg, annotation, value } => {
                write!(f, "argument `{arg}` ({annotation}) has malformed value `{value}`")
            }
            Violation::ReservedMismatch { arg, value } => {
                write!(f, "`{arg}` value `{value}` disagrees with the example's intent")
            }
            Violation::BadLocalized(a) => {
                write!(f, "localized value for `{a}` needs a STRING argument with a value")
            }
        }
    }
}

/// A loaded schema. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    args: Vec<ArgumentSpec>,
    by_name: HashMap<String, usize>,
    arg_slots: usize,
    types: Vec<(ArgKind, Annotation)>,
    enum_table: Vec<String>,
    enum_lookup: HashMap<String, usize>,
    intents: Vec<IntentSpec>,
    digest: String,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Schema, SchemaError> {
        let mut builder = Builder::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            builder.line(n + 1, line)?;
        }
        let mut schema = builder.finish()?;
        schema.digest = digest::canonical_text_digest(text);
        Ok(schema)
    }

    /// Declared arguments (plus synthesized `domain`/`intent`) in index order.
    pub fn args(&self) -> &[ArgumentSpec] {
        &self.args
    }

    pub fn arg(&self, name: &str) -> Option<&ArgumentSpec> {
        self.by_name.get(name).map(|&i| &self.args[i])
    }

    pub fn intents(&self) -> &[IntentSpec] {
        &self.intents
    }

    pub fn intent(&self, r: &IntentRef) -> Option<&IntentSpec> {
        self.intents.iter().find(|i| i.domain == r.domain && i.intent == r.intent)
    }

    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for i in &self.intents {
            if !seen.contains(&i.domain) {
                seen.push(i.domain.clone());
            }
        }
        seen
    }

    /// Number of argument indices, padding slots included.
    pub fn arg_slots(&self) -> usize {
        self.arg_slots
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    pub fn types(&self) -> &[(ArgKind, Annotation)] {
        &self.types
    }

    /// Global enum value table shared by all enum arguments.
    pub fn enum_table(&self) -> &[String] {
        &self.enum_table
    }

    pub fn enum_index(&self, value: &str) -> Option<usize> {
        self.enum_lookup.get(value).copied()
    }

    /// Canonical digest of the source document.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Checks an example and reports every violation found.
    pub fn validate(&self, example: &StructuredExample) -> Result<(), Vec<Violation>> {
        let Some(intent) = self.intent(&example.intent) else {
            return Err(vec![Violation::UnknownIntent(example.intent.clone())]);
        };
        let mut out = Vec::new();
        for (name, value) in &example.values {
            let Some(spec) = self.arg(name) else {
                out.push(Violation::UnknownArgument(name.clone()));
                continue;
            };
            if name == DOMAIN_ARG || name == INTENT_ARG {
                let expected =
                    if name == DOMAIN_ARG { &example.intent.domain } else { &example.intent.intent };
                if value != expected {
                    out.push(Violation::ReservedMismatch { arg: name.clone(), value: value.clone() });
                }
                continue;
            }
            if !intent.has_arg(name) {
                out.push(Violation::NotInIntent(name.clone()));
                continue;
            }
            check_value(spec, value, &mut out);
        }
        for a in &intent.args {
            if a.required && !example.values.contains_key(&a.name) {
                out.push(Violation::MissingRequired(a.name.clone()));
            }
        }
        for name in example.localized_values.keys() {
            let ok = self.arg(name).is_some_and(|s| s.kind == ArgKind::String)
                && example.values.contains_key(name);
            if !ok {
                out.push(Violation::BadLocalized(name.clone()));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

fn check_value(spec: &ArgumentSpec, value: &str, out: &mut Vec<Violation>) {
    let wrong_kind =
        || Violation::WrongKind { arg: spec.name.clone(), expected: spec.kind, value: value.to_string() };
    match spec.kind {
        ArgKind::Enum | ArgKind::Boolean => {
            if !spec.enum_values.iter().any(|v| v == value) {
                out.push(Violation::NotInEnum { arg: spec.name.clone(), value: value.to_string() });
            }
            return;
        }
        ArgKind::Number => {
            if !is_decimal(value) {
                out.push(wrong_kind());
                return;
            }
        }
        ArgKind::String => {
            if value.is_empty() {
                out.push(wrong_kind());
                return;
            }
        }
    }
    let well_formed = match &spec.annotation {
        Annotation::Date => is_yyyymmdd(value),
        Annotation::DurationSeconds | Annotation::Cardinal => {
            spec.kind != ArgKind::Number || value.bytes().all(|b| b.is_ascii_digit())
        }
        _ => true,
    };
    if !well_formed {
        out.push(Violation::BadAnnotatedValue {
            arg: spec.name.clone(),
            annotation: spec.annotation.clone(),
            value: value.to_string(),
        });
    }
}

/// Optional sign, digits, optional fractional part.
pub fn is_decimal(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

fn is_yyyymmdd(s: &str) -> bool {
    s.len() == 8
        && s.bytes().all(|b| b.is_ascii_digit())
        && chrono::NaiveDate::parse_from_str(s, "%Y%m%d").is_ok()
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Default)]
struct Builder {
    args: Vec<ArgumentSpec>,
    by_name: HashMap<String, usize>,
    next_index: usize,
    types: Vec<(ArgKind, Annotation)>,
    intents: Vec<IntentSpec>,
}

impl Builder {
    fn line(&mut self, n: usize, line: &str) -> Result<(), SchemaError> {
        let syntax = |message: String| SchemaError::Syntax { line: n, message };
        let mut words = line.split_whitespace();
        match words.next() {
            Some("arg") => {
                let name = words.next().ok_or_else(|| syntax("missing argument name".into()))?;
                if !is_identifier(name) {
                    return Err(syntax(format!("bad argument name `{name}`")));
                }
                let kind: ArgKind = words
                    .next()
                    .ok_or_else(|| syntax("missing kind".into()))?
                    .parse()
                    .map_err(syntax)?;
                let annotation: Annotation = words
                    .next()
                    .ok_or_else(|| syntax("missing annotation".into()))?
                    .parse()
                    .map_err(syntax)?;
                let mut enum_values = Vec::new();
                match (words.next(), words.next()) {
                    (None, _) => {}
                    (Some("enum"), Some(list)) => {
                        enum_values = list
                            .split(',')
                            .filter(|v| !v.is_empty())
                            .map(str::to_string)
                            .collect();
                    }
                    (Some("enum"), None) => {}
                    (Some(other), _) => return Err(syntax(format!("unexpected `{other}`"))),
                }
                if words.next().is_some() {
                    return Err(syntax("trailing tokens".into()));
                }
                let (kind, enum_values) = match kind {
                    ArgKind::Boolean => {
                        if !enum_values.is_empty() {
                            return Err(syntax("BOOLEAN arguments take no enum list".into()));
                        }
                        (ArgKind::Enum, vec!["false".to_string(), "true".to_string()])
                    }
                    ArgKind::Enum => {
                        if enum_values.is_empty() {
                            return Err(SchemaError::EmptyEnum(name.to_string()));
                        }
                        (kind, enum_values)
                    }
                    _ => {
                        if !enum_values.is_empty() {
                            return Err(syntax(format!("{kind} arguments take no enum list")));
                        }
                        (kind, enum_values)
                    }
                };
                self.push_arg(name, kind, annotation, enum_values)
            }
            Some("pad") => {
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| syntax("pad needs a count".into()))?;
                self.next_index += count;
                Ok(())
            }
            Some("intent") => {
                let r: IntentRef = words
                    .next()
                    .ok_or_else(|| syntax("missing intent reference".into()))?
                    .parse()
                    .map_err(syntax)?;
                let list: Vec<&str> = words.collect();
                let list = list.concat();
                let mut args = Vec::new();
                for item in list.split(',').filter(|s| !s.is_empty()) {
                    let (name, required) = match item.strip_suffix('?') {
                        Some(n) => (n, false),
                        None => (item, true),
                    };
                    if args.iter().any(|a: &IntentArg| a.name == name) {
                        return Err(syntax(format!("argument `{name}` listed twice")));
                    }
                    args.push(IntentArg { name: name.to_string(), required });
                }
                if self.intents.iter().any(|i| i.domain == r.domain && i.intent == r.intent) {
                    return Err(SchemaError::DuplicateIntent(r.to_string()));
                }
                self.intents.push(IntentSpec { domain: r.domain, intent: r.intent, args });
                Ok(())
            }
            Some(other) => Err(syntax(format!("unknown directive `{other}`"))),
            None => Ok(()),
        }
    }

    fn push_arg(
        &mut self,
        name: &str,
        kind: ArgKind,
        annotation: Annotation,
        enum_values: Vec<String>,
    ) -> Result<(), SchemaError> {
        if self.by_name.contains_key(name) {
            return Err(SchemaError::DuplicateArg(name.to_string()));
        }
        let key = (kind, annotation.clone());
        let type_index = match self.types.iter().position(|t| *t == key) {
            Some(i) => i,
            None => {
                self.types.push(key);
                self.types.len() - 1
            }
        };
        self.by_name.insert(name.to_string(), self.args.len());
        self.args.push(ArgumentSpec {
            name: name.to_string(),
            kind,
            annotation,
            enum_values,
            arg_index: self.next_index,
            type_index,
        });
        self.next_index += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<Schema, SchemaError> {
        for intent in &self.intents {
            for a in &intent.args {
                let reserved = a.name == DOMAIN_ARG || a.name == INTENT_ARG;
                if reserved || !self.by_name.contains_key(&a.name) {
                    return Err(SchemaError::DanglingArg {
                        intent: intent.intent_ref().to_string(),
                        arg: a.name.clone(),
                    });
                }
            }
        }
        let domains: Vec<String> = {
            let mut d: Vec<String> = Vec::new();
            for i in &self.intents {
                if !d.contains(&i.domain) {
                    d.push(i.domain.clone());
                }
            }
            d
        };
        let intent_names: Vec<String> = {
            let mut v: Vec<String> = Vec::new();
            for i in &self.intents {
                if !v.contains(&i.intent) {
                    v.push(i.intent.clone());
                }
            }
            v
        };
        for (reserved, names) in [(DOMAIN_ARG, domains), (INTENT_ARG, intent_names)] {
            match self.by_name.get(reserved) {
                Some(&i) => {
                    let spec = &self.args[i];
                    if spec.kind != ArgKind::Enum || names.iter().any(|n| !spec.enum_values.contains(n)) {
                        return Err(SchemaError::BadReservedArg(reserved.to_string()));
                    }
                }
                None => {
                    if names.is_empty() {
                        continue;
                    }
                    self.push_arg(reserved, ArgKind::Enum, Annotation::Plain, names)?;
                }
            }
        }
        let mut enum_table = Vec::new();
        let mut enum_lookup = HashMap::new();
        for a in &self.args {
            for v in &a.enum_values {
                if !enum_lookup.contains_key(v) {
                    enum_lookup.insert(v.clone(), enum_table.len());
                    enum_table.push(v.clone());
                }
            }
        }
        Ok(Schema {
            args: self.args,
            by_name: self.by_name,
            arg_slots: self.next_index,
            types: self.types,
            enum_table,
            enum_lookup,
            intents: self.intents,
            digest: String::new(),
        })
    }
}

/// Loads a schema document: argument specs and intents.
pub fn load_schema(text: &str) -> Result<Schema, SchemaError> {
    Schema::parse(text)
}

/// Every STRING argument value of an example, used for held-out checks.
pub fn string_values<'a>(schema: &Schema, example: &'a StructuredExample) -> BTreeSet<&'a str> {
    example
        .values
        .iter()
        .filter(|(k, _)| schema.arg(k).is_some_and(|s| s.kind == ArgKind::String))
        .map(|(_, v)| v.as_str())
        .collect()
}
