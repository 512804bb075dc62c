//! Prompt construction: compose the base scene caption, then enrich it
//! with concrete weather and lighting detail via a text-completion backend
//! or the offline descriptor bank.

pub mod bank;
pub mod llm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::PlanItem;
use bank::DescriptorBank;
use llm::{DescriptorRequest, TextCompletion};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid {what}: {message}")]
    Validation { what: String, message: String },
    #[error("text backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("text backend returned an empty completion")]
    EmptyCompletion,
    #[error("text backend protocol error: {0}")]
    Protocol(String),
}

fn validation(what: &str, message: impl std::fmt::Display) -> PromptError {
    PromptError::Validation {
        what: what.to_string(),
        message: message.to_string(),
    }
}

/// The base caption template: `A photo of {identifier} {scene_noun},
/// {class}, {weather}, {time}`, with the identifier phrase optional.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PromptTemplate {
    /// Rare placeholder token a fine-tuned image model was bound to.
    pub identifier_token: String,
    pub scene_noun: String,
    pub include_identifier: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            identifier_token: "V*".to_string(),
            scene_noun: "driving scene".to_string(),
            include_identifier: true,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.identifier_token.is_empty() || self.identifier_token.contains(char::is_whitespace) {
            return Err(validation(
                "prompt template",
                "identifier token must be non-empty and contain no whitespace",
            ));
        }
        if self.scene_noun.trim().is_empty() {
            return Err(validation("prompt template", "scene noun must be non-empty"));
        }
        Ok(())
    }
}

/// Composed scene caption plus the slot values it was rendered from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BasePrompt {
    pub text: String,
    pub class_name: String,
    pub weather: String,
    pub time: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Llm,
    FallbackBank,
}

/// The enriched caption sent to the image backend.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EnrichedPrompt {
    pub text: String,
    pub base: BasePrompt,
    pub source: PromptSource,
    pub word_count: usize,
}

/// Fully resolved prompt for one plan item.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PromptSpec {
    pub index: u32,
    pub class_name: String,
    pub weather: String,
    pub time: String,
    pub derived_seed: u64,
    pub base_prompt: String,
    pub enriched_prompt: String,
    pub source: PromptSource,
    pub word_count: usize,
}

/// Render the base caption. Pure; identical inputs give identical text.
pub fn compose_scene(
    class_name: &str,
    weather: &str,
    time: &str,
    tmpl: &PromptTemplate,
) -> Result<BasePrompt, PromptError> {
    tmpl.validate()?;
    for (slot, value) in [("class", class_name), ("weather", weather), ("time", time)] {
        if value.trim().is_empty() {
            return Err(validation("prompt slot", format!("{slot} must be non-empty")));
        }
    }
    let text = if tmpl.include_identifier {
        format!(
            "A photo of {} {}, {}, {}, {}",
            tmpl.identifier_token, tmpl.scene_noun, class_name, weather, time
        )
    } else {
        format!("A photo of {}, {}, {}", class_name, weather, time)
    };
    Ok(BasePrompt {
        text,
        class_name: class_name.to_string(),
        weather: weather.to_string(),
        time: time.to_string(),
    })
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Clamp to the word budget and guarantee the class name survives:
/// truncate at a word boundary, and if that loses the class name, trim
/// further and append it so the budget still holds.
fn enforce_budget_and_class(text: &str, class_name: &str, budget: usize) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    words.truncate(budget);
    let mut out = words.join(" ");
    if !out.contains(class_name) {
        let class_words = word_count(class_name);
        words.truncate(budget.saturating_sub(class_words));
        out = words.join(" ");
        if out.is_empty() {
            out = class_name.to_string();
        } else {
            out = format!("{out}, {class_name}");
        }
    }
    out
}

/// Standing settings for descriptor requests. The `{budget}` placeholder
/// in the instruction is substituted per request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrichSettings {
    pub instruction: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub const DEFAULT_INSTRUCTION: &str = "You expand short driving-scene captions into vivid \
scene descriptions. Keep the subject object exactly as named in the caption. Turn the weather \
word and the time of day into concrete visual detail: sky, light, road surface, reflections, \
precipitation. Reply with the description only, no preamble, at most {budget} words.";

impl Default for EnrichSettings {
    fn default() -> Self {
        EnrichSettings {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            temperature: 0.7,
            max_tokens: 160,
        }
    }
}

/// Enrichment engine: a text backend, the offline bank, or both (backend
/// with the bank as degradation path).
pub struct Enricher {
    backend: Option<Arc<dyn TextCompletion>>,
    fallback_enabled: bool,
    bank: DescriptorBank,
    settings: EnrichSettings,
    budget: usize,
}

impl Enricher {
    pub const MIN_BUDGET: usize = 8;

    pub fn bank_only(bank: DescriptorBank, budget: usize) -> Result<Self, PromptError> {
        Self::new(None, true, bank, EnrichSettings::default(), budget)
    }

    pub fn new(
        backend: Option<Arc<dyn TextCompletion>>,
        fallback_enabled: bool,
        bank: DescriptorBank,
        settings: EnrichSettings,
        budget: usize,
    ) -> Result<Self, PromptError> {
        if budget < Self::MIN_BUDGET {
            return Err(validation(
                "word budget",
                format!("must be at least {}", Self::MIN_BUDGET),
            ));
        }
        if backend.is_none() && !fallback_enabled {
            return Err(validation("enricher", "no backend and fallback disabled"));
        }
        bank.validate()?;
        Ok(Enricher {
            backend,
            fallback_enabled,
            bank,
            settings,
            budget,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    fn enrich_via_bank(&self, base: &BasePrompt, derived_seed: u64) -> EnrichedPrompt {
        let fragment = self.bank.pick(&base.weather, &base.time, derived_seed);
        let text = enforce_budget_and_class(
            &format!("{}, {}", base.text, fragment),
            &base.class_name,
            self.budget,
        );
        EnrichedPrompt {
            word_count: word_count(&text),
            text,
            base: base.clone(),
            source: PromptSource::FallbackBank,
        }
    }

    fn enrich_via_backend(
        &self,
        backend: &dyn TextCompletion,
        base: &BasePrompt,
    ) -> Result<EnrichedPrompt, PromptError> {
        let request = DescriptorRequest::new(
            self.settings
                .instruction
                .replace("{budget}", &self.budget.to_string()),
            base.text.clone(),
            self.settings.temperature,
            self.settings.max_tokens,
        )?;
        let completion = backend.complete(&request)?;
        let normalized = completion.split_whitespace().collect::<Vec<_>>().join(" ");
        if normalized.is_empty() {
            return Err(PromptError::EmptyCompletion);
        }
        let text = enforce_budget_and_class(&normalized, &base.class_name, self.budget);
        Ok(EnrichedPrompt {
            word_count: word_count(&text),
            text,
            base: base.clone(),
            source: PromptSource::Llm,
        })
    }

    /// Enrich a base caption. Backend failures degrade to the bank when
    /// fallback is enabled, otherwise propagate.
    pub fn enrich(&self, base: &BasePrompt, derived_seed: u64) -> Result<EnrichedPrompt, PromptError> {
        let Some(backend) = &self.backend else {
            return Ok(self.enrich_via_bank(base, derived_seed));
        };
        match self.enrich_via_backend(backend.as_ref(), base) {
            Ok(enriched) => Ok(enriched),
            Err(err @ PromptError::Validation { .. }) => Err(err),
            Err(err) if self.fallback_enabled => {
                log::warn!("text backend failed ({err}); using descriptor bank for {:?}", base.text);
                Ok(self.enrich_via_bank(base, derived_seed))
            }
            Err(err) => Err(err),
        }
    }

    /// The full chain for one plan item: compose, then enrich.
    pub fn generate_prompt(
        &self,
        item: &PlanItem,
        tmpl: &PromptTemplate,
    ) -> Result<PromptSpec, PromptError> {
        let base = compose_scene(&item.class_name, &item.weather, &item.time, tmpl)?;
        let enriched = self.enrich(&base, item.derived_seed)?;
        Ok(PromptSpec {
            index: item.index,
            class_name: item.class_name.clone(),
            weather: item.weather.clone(),
            time: item.time.clone(),
            derived_seed: item.derived_seed,
            base_prompt: base.text,
            enriched_prompt: enriched.text,
            source: enriched.source,
            word_count: enriched.word_count,
        })
    }
}
