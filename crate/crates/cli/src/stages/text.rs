//! Entity span markup and placeholder substitution.

use d2tforge::annotate::{from_placeholders, inject_localized, mark_entity_spans, to_placeholders, SpanMarkup, SubstitutionTable};
use d2tforge::schema::StructuredExample;
use serde::{Deserialize, Serialize};

use super::{jsonl, pretty_json, read_jsonl, schema_input, Rendered};
use crate::error::{invalid, PipelineError};
use crate::runner::{Ctx, StageConfig};

/// An English target with its entity spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub id: u64,
    pub example: StructuredExample,
    /// The target with `<ENTITY:type ...>` markup.
    pub tagged: String,
    pub markup: SpanMarkup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateConfig {
    pub schema: String,
    pub rendered: String,
    pub output: String,
}

impl StageConfig for AnnotateConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.schema.clone(), self.rendered.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = schema_input(ctx, &self.schema)?;
        let rendered: Vec<Rendered> = read_jsonl(ctx, &self.rendered)?;
        let mut out = Vec::with_capacity(rendered.len());
        for r in rendered {
            let english = r.targets.first().ok_or_else(|| invalid(format!("example {} has no target", r.id)))?;
            let marked = mark_entity_spans(english, &r.example, &schema).map_err(|e| invalid(format!("example {}: {e}", r.id)))?;
            let markup = inject_localized(&marked, &r.example);
            out.push(Annotated { id: r.id, tagged: markup.to_tagged(), markup, example: r.example, translation: r.translation });
        }
        ctx.write(&self.output, &jsonl(&out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderRecord {
    pub id: u64,
    pub source: String,
    /// Translation with localized payloads replaced by `$k`.
    pub target: String,
    pub substitutions: SubstitutionTable,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderReport {
    pub records: usize,
    pub with_placeholders: usize,
    /// Ids over the placeholder budget, left out of the output.
    pub over_budget: Vec<u64>,
    /// Ids whose substitution did not restore the translation.
    pub round_trip_failures: Vec<u64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceholdersConfig {
    /// Output of `annotate`, with translations.
    pub annotated: String,
    pub output: String,
    pub report_output: String,
}

impl StageConfig for PlaceholdersConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.annotated.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let annotated: Vec<Annotated> = read_jsonl(ctx, &self.annotated)?;
        let mut out = Vec::new();
        let mut report = PlaceholderReport { records: annotated.len(), ..Default::default() };
        for a in annotated {
            let translation = a.translation.as_deref().ok_or_else(|| invalid(format!("example {} has no translation", a.id)))?;
            let (target, substitutions) = match to_placeholders(translation, &a.markup) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("example {}: {e}", a.id);
                    report.over_budget.push(a.id);
                    continue;
                }
            };
            if from_placeholders(&target, &substitutions).ok().as_deref() != Some(translation) {
                report.round_trip_failures.push(a.id);
            }
            report.with_placeholders += usize::from(!substitutions.is_empty());
            out.push(PlaceholderRecord { id: a.id, source: a.tagged, target, substitutions });
        }
        ctx.write(&self.output, &jsonl(&out))?;
        ctx.write(&self.report_output, &pretty_json(&report))
    }
}
