//! Entity span markup for translation inputs and placeholder copying.
//!
//! Markup uses inline tags: `<location>Palo Alto</location>`, or with a
//! proposed localized form, `<location, Frankreich>France</location>`.
//!
//! Placeholder text escapes a literal `$` as `$$` whenever it would otherwise
//! be read as the start of a placeholder, so conversion round-trips for any
//! target string.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Schema, StructuredExample};

pub const PLACEHOLDER_BUDGET: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotateError {
    #[error("text is already tagged")]
    AlreadyTagged,
    #[error("text contains `<` or `>`, which markup reserves")]
    ReservedCharacter,
    #[error("malformed markup at byte {0}")]
    Malformed(usize),
    #[error("more than {PLACEHOLDER_BUDGET} distinct payloads occur verbatim in the target")]
    BudgetExceeded,
    #[error("placeholder `{0}` has no substitution")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSpan {
    /// Byte offsets into the untagged text.
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
    pub localized: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMarkup {
    pub text: String,
    /// Sorted by position, non-overlapping.
    pub spans: Vec<MarkedSpan>,
}

impl SpanMarkup {
    pub fn plain(text: &str) -> Self {
        SpanMarkup { text: text.to_string(), spans: Vec::new() }
    }

    pub fn span_text(&self, s: &MarkedSpan) -> &str {
        &self.text[s.start..s.end]
    }

    pub fn to_tagged(&self) -> String {
        let mut out = String::with_capacity(self.text.len() + 32 * self.spans.len());
        let mut at = 0;
        for s in &self.spans {
            out.push_str(&self.text[at..s.start]);
            match &s.localized {
                Some(l) => out.push_str(&format!("<{}, {}>", s.entity_type, l)),
                None => out.push_str(&format!("<{}>", s.entity_type)),
            }
            out.push_str(&self.text[s.start..s.end]);
            out.push_str(&format!("</{}>", s.entity_type));
            at = s.end;
        }
        out.push_str(&self.text[at..]);
        out
    }

    pub fn parse(tagged: &str) -> Result<SpanMarkup, AnnotateError> {
        let mut text = String::with_capacity(tagged.len());
        let mut spans = Vec::new();
        let mut rest = tagged;
        let offset = |r: &str| tagged.len() - r.len();
        while let Some(open) = rest.find('<') {
            if rest[..open].contains('>') {
                return Err(AnnotateError::Malformed(offset(rest) + rest.find('>').unwrap_or(0)));
            }
            text.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('>').ok_or(AnnotateError::Malformed(offset(rest) + open))?;
            let head = &after[..close];
            let (ty, localized) = match head.split_once(", ") {
                Some((t, l)) => (t, Some(l.to_string())),
                None => (head, None),
            };
            if !crate::schema::is_identifier(ty) || localized.as_deref().is_some_and(|l| l.contains('<')) {
                return Err(AnnotateError::Malformed(offset(rest) + open));
            }
            let body_start = &after[close + 1..];
            let end_tag = format!("</{ty}>");
            let body_len = body_start.find(&end_tag).ok_or(AnnotateError::Malformed(offset(body_start)))?;
            let body = &body_start[..body_len];
            if body.is_empty() || body.contains('<') || body.contains('>') {
                return Err(AnnotateError::Malformed(offset(body_start)));
            }
            let start = text.len();
            text.push_str(body);
            spans.push(MarkedSpan { start, end: text.len(), entity_type: ty.to_string(), localized });
            rest = &body_start[body_len + end_tag.len()..];
        }
        if rest.contains('>') {
            return Err(AnnotateError::Malformed(offset(rest) + rest.find('>').unwrap_or(0)));
        }
        text.push_str(rest);
        Ok(SpanMarkup { text, spans })
    }
}

fn is_boundary(text: &str, at: usize) -> bool {
    let before = text[..at].chars().next_back();
    let after = text[at..].chars().next();
    !(before.is_some_and(char::is_alphanumeric) && after.is_some_and(char::is_alphanumeric))
}

/// Tags every exact, word-bounded occurrence of an ENTITY argument value.
/// Overlaps go to the longest match, then the leftmost.
pub fn mark_entity_spans(
    english: &str,
    example: &StructuredExample,
    schema: &Schema,
) -> Result<SpanMarkup, AnnotateError> {
    if english.contains('<') || english.contains('>') {
        return Err(match SpanMarkup::parse(english) {
            Ok(m) if !m.spans.is_empty() => AnnotateError::AlreadyTagged,
            _ => AnnotateError::ReservedCharacter,
        });
    }
    let mut candidates: Vec<(usize, usize, String)> = Vec::new();
    for (name, value) in &example.values {
        let Some(ty) = schema.arg(name).and_then(|a| a.annotation.entity_type()) else { continue };
        if value.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = english[from..].find(value.as_str()) {
            let start = from + pos;
            let end = start + value.len();
            if is_boundary(english, start) && is_boundary(english, end) {
                candidates.push((start, end, ty.to_string()));
            }
            from = start + english[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    candidates.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<(usize, usize, String)> = Vec::new();
    for c in candidates {
        if taken.iter().all(|t| c.1 <= t.0 || c.0 >= t.1) {
            taken.push(c);
        }
    }
    taken.sort();
    Ok(SpanMarkup {
        text: english.to_string(),
        spans: taken
            .into_iter()
            .map(|(start, end, entity_type)| MarkedSpan { start, end, entity_type, localized: None })
            .collect(),
    })
}

/// Adds the localized payload to spans whose text is the English value of an
/// argument that has a localized value.
pub fn inject_localized(markup: &SpanMarkup, example: &StructuredExample) -> SpanMarkup {
    let mut out = markup.clone();
    for span in out.spans.iter_mut() {
        let text = &markup.text[span.start..span.end];
        let found = example
            .values
            .iter()
            .find(|(name, v)| v.as_str() == text && example.localized_values.contains_key(*name))
            .map(|(name, _)| example.localized_values[name].clone());
        if let Some(l) = found {
            span.localized = Some(l);
        }
    }
    out
}

/// `$k` to substituted text, serialized as `{"$0": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubstitutionTable(pub BTreeMap<String, String>);

impl SubstitutionTable {
    pub fn get(&self, k: usize) -> Option<&str> {
        self.0.get(&format!("${k}")).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

enum Piece<'a> {
    Char(char),
    Slot(usize, &'a str),
}

/// Replaces verbatim occurrences of localized payloads in `target` by `$k`,
/// numbering payloads by first occurrence. All occurrences of a payload share
/// its index; at each position the longest payload wins.
pub fn to_placeholders(target: &str, markup: &SpanMarkup) -> Result<(String, SubstitutionTable), AnnotateError> {
    let mut payloads: Vec<&str> =
        markup.spans.iter().filter_map(|s| s.localized.as_deref()).filter(|p| !p.is_empty()).collect();
    payloads.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    payloads.dedup();

    let mut pieces = Vec::new();
    let mut assigned: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < target.len() {
        let rest = &target[i..];
        if let Some(p) = payloads.iter().find(|p| rest.starts_with(**p)) {
            let k = match assigned.iter().position(|a| a == p) {
                Some(k) => k,
                None => {
                    assigned.push(p);
                    assigned.len() - 1
                }
            };
            if k >= PLACEHOLDER_BUDGET {
                return Err(AnnotateError::BudgetExceeded);
            }
            pieces.push(Piece::Slot(k, p));
            i += p.len();
        } else {
            let c = rest.chars().next().expect("non-empty");
            pieces.push(Piece::Char(c));
            i += c.len_utf8();
        }
    }
    let mut out = String::with_capacity(target.len());
    let mut table = BTreeMap::new();
    for (n, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Char('$') => {
                let next_is_special = match pieces.get(n + 1) {
                    Some(Piece::Char(c)) => *c == '$' || c.is_ascii_digit(),
                    Some(Piece::Slot(..)) => true,
                    None => false,
                };
                out.push_str(if next_is_special { "$$" } else { "$" });
            }
            Piece::Char(c) => out.push(*c),
            Piece::Slot(k, p) => {
                out.push('$');
                out.push_str(&k.to_string());
                table.insert(format!("${k}"), p.to_string());
            }
        }
    }
    Ok((out, SubstitutionTable(table)))
}

/// Substitutes every `$k` and unescapes `$$`.
pub fn from_placeholders(output: &str, table: &SubstitutionTable) -> Result<String, AnnotateError> {
    let mut out = String::with_capacity(output.len());
    let mut chars = output.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '$' {
            out.push(c);
            continue;
        }
        match chars.peek().copied() {
            Some('$') => {
                chars.next();
                out.push('$');
            }
            Some(d) if d.is_ascii_digit() => {
                chars.next();
                let k = d.to_digit(10).expect("digit") as usize;
                out.push_str(table.get(k).ok_or_else(|| AnnotateError::Unbound(format!("${k}")))?);
            }
            _ => out.push('$'),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{load_schema, IntentRef};
    use proptest::prelude::*;

    const SCHEMA: &str = "\
arg temperature NUMBER PLAIN
arg location STRING ENTITY(location)
arg city STRING ENTITY(location)
arg metro STRING ENTITY(location)
intent weather.NOW temperature,location?,city?,metro?
";

    fn ex() -> StructuredExample {
        StructuredExample::new(IntentRef::new("weather", "NOW"))
    }

    #[test]
    fn marks_entity_argument() {
        let schema = load_schema(SCHEMA).unwrap();
        let e = ex().with("temperature", "72").with("location", "Palo Alto");
        let m = mark_entity_spans("It's 72 and sunny in Palo Alto today.", &e, &schema).unwrap();
        assert_eq!(m.to_tagged(), "It's 72 and sunny in <location>Palo Alto</location> today.");
        assert_eq!(SpanMarkup::parse(&m.to_tagged()).unwrap(), m);
    }

    #[test]
    fn absent_value_gives_no_tags() {
        let schema = load_schema(SCHEMA).unwrap();
        let e = ex().with("location", "Boston");
        assert!(mark_entity_spans("Sunny today.", &e, &schema).unwrap().spans.is_empty());
        // no matches inside longer words
        assert!(mark_entity_spans("Bostonian weather.", &e, &schema).unwrap().spans.is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let schema = load_schema(SCHEMA).unwrap();
        let e = ex().with("city", "New York").with("metro", "New York City");
        let m = mark_entity_spans("Rain in New York City and New York.", &e, &schema).unwrap();
        let texts: Vec<&str> = m.spans.iter().map(|s| m.span_text(s)).collect();
        assert_eq!(texts, vec!["New York City", "New York"]);
    }

    #[test]
    fn tagged_input_rejected() {
        let schema = load_schema(SCHEMA).unwrap();
        let e = ex().with("location", "Palo Alto");
        let tagged = "in <location>Palo Alto</location>";
        assert_eq!(mark_entity_spans(tagged, &e, &schema), Err(AnnotateError::AlreadyTagged));
        assert_eq!(mark_entity_spans("a < b", &e, &schema), Err(AnnotateError::ReservedCharacter));
    }

    #[test]
    fn localized_payload_injection() {
        let schema = load_schema(SCHEMA).unwrap();
        let e = ex().with("location", "France").with_localized("location", "Frankreich");
        let m = mark_entity_spans("Tomorrow's game is in France.", &e, &schema).unwrap();
        let m = inject_localized(&m, &e);
        assert_eq!(m.to_tagged(), "Tomorrow's game is in <location, Frankreich>France</location>.");
        assert_eq!(SpanMarkup::parse(&m.to_tagged()).unwrap(), m);

        let plain = ex().with("location", "France");
        let unchanged = mark_entity_spans("In France.", &plain, &schema).unwrap();
        assert_eq!(inject_localized(&unchanged, &plain), unchanged);

        let two = ex()
            .with("city", "Munich")
            .with("location", "France")
            .with_localized("location", "Frankreich");
        let m = inject_localized(&mark_entity_spans("Munich, France", &two, &schema).unwrap(), &two);
        assert_eq!(m.spans.iter().filter(|s| s.localized.is_some()).count(), 1);
    }

    #[test]
    fn france_placeholder() {
        let m = SpanMarkup::parse("Tomorrow's game is in <location, Frankreich>France</location>.").unwrap();
        let (t, table) = to_placeholders("Das Spiel morgen ist in Frankreich.", &m).unwrap();
        assert_eq!(t, "Das Spiel morgen ist in $0.");
        assert_eq!(serde_json::to_string(&table).unwrap(), r#"{"$0":"Frankreich"}"#);
        assert_eq!(from_placeholders(&t, &table).unwrap(), "Das Spiel morgen ist in Frankreich.");
    }

    #[test]
    fn inflected_payload_not_replaced() {
        let m = SpanMarkup::parse("<location, Frankreich>France</location>").unwrap();
        let (t, table) = to_placeholders("nach Frankreichs Hauptstadt", &m).unwrap();
        assert_eq!(t, "nach $0s Hauptstadt");
        assert_eq!(table.len(), 1);
        let (t, table) = to_placeholders("in Frankrijk", &m).unwrap();
        assert_eq!(t, "in Frankrijk");
        assert!(table.is_empty());
    }

    #[test]
    fn left_to_right_numbering() {
        let m = SpanMarkup::parse("<city, Rom>Rome</city> or <city, Paris>Paris</city>").unwrap();
        let (t, table) = to_placeholders("Paris oder Rom, nicht Paris", &m).unwrap();
        assert_eq!(t, "$0 oder $1, nicht $0");
        assert_eq!(table.get(0), Some("Paris"));
        assert_eq!(table.get(1), Some("Rom"));
    }

    #[test]
    fn budget_and_unbound() {
        let tagged: String = (0..5).map(|i| format!("<x, P{i}>E{i}</x> ")).collect();
        let m = SpanMarkup::parse(&tagged).unwrap();
        assert_eq!(to_placeholders("P0 P1 P2 P3 P4", &m), Err(AnnotateError::BudgetExceeded));
        assert!(to_placeholders("P0 P1 P2 P3", &m).is_ok());

        let table = SubstitutionTable([("$0".to_string(), "Frankreich".to_string())].into());
        assert_eq!(from_placeholders("Nur Text.", &table).unwrap(), "Nur Text.");
        assert_eq!(from_placeholders("in $1", &table), Err(AnnotateError::Unbound("$1".into())));
    }

    #[test]
    fn dollar_signs_survive() {
        let m = SpanMarkup::parse("<x, 5>five</x>").unwrap();
        let (t, table) = to_placeholders("costs $5 or $$", &m).unwrap();
        assert_eq!(t, "costs $$$0 or $$$");
        assert_eq!(from_placeholders(&t, &table).unwrap(), "costs $5 or $$");
    }

    #[test]
    fn malformed_markup() {
        assert!(SpanMarkup::parse("<location>Palo Alto").is_err());
        assert!(SpanMarkup::parse("<location>Palo Alto</city>").is_err());
        assert!(SpanMarkup::parse("a > b").is_err());
        assert!(SpanMarkup::parse("<1x>a</1x>").is_err());
    }

    fn markup_strategy() -> impl Strategy<Value = (String, SpanMarkup)> {
        let word = "[A-Za-z]{1,6}";
        (
            proptest::collection::vec(prop_oneof!["[a-z $0-9.]{0,4}", word], 0..8),
            proptest::collection::vec(word, 0..6),
        )
            .prop_map(|(parts, payloads)| {
                let target = parts.concat();
                let mut text = String::new();
                let mut spans = Vec::new();
                for (i, p) in payloads.iter().enumerate() {
                    text.push_str("w ");
                    let start = text.len();
                    text.push_str(&format!("E{i}"));
                    spans.push(MarkedSpan {
                        start,
                        end: text.len(),
                        entity_type: "x".into(),
                        localized: Some(p.clone()),
                    });
                }
                (target, SpanMarkup { text, spans })
            })
    }

    proptest! {
        #[test]
        fn placeholder_round_trip((target, markup) in markup_strategy()) {
            match to_placeholders(&target, &markup) {
                Ok((templated, table)) => {
                    prop_assert_eq!(from_placeholders(&templated, &table).unwrap(), target);
                }
                Err(e) => prop_assert_eq!(e, AnnotateError::BudgetExceeded),
            }
        }

        #[test]
        fn tagged_form_round_trips((_t, markup) in markup_strategy()) {
            prop_assert_eq!(SpanMarkup::parse(&markup.to_tagged()).unwrap(), markup);
        }
    }
}
