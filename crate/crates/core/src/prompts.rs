//! Versioned prompt templates with `{name}` placeholder substitution.
//!
//! Template bodies live under `assets/prompts/` and are compiled into the
//! binary. `{{` and `}}` render as literal braces.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` has no value for placeholder `{placeholder}`")]
    MissingVar { template: String, placeholder: String },
    #[error("template `{template}` has an unterminated placeholder at byte {offset}")]
    Unterminated { template: String, offset: usize },
    #[error("unknown template `{0}`")]
    Unknown(String),
}

/// A prompt template compiled into the binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub version: u32,
    pub body: &'static str,
}

macro_rules! template {
    ($id:literal, $path:literal) => {
        Template {
            id: $id,
            version: 1,
            body: include_str!(concat!("../assets/prompts/", $path, ".v1.txt")),
        }
    };
}

pub const IG_CHARACTER_MOVIE: Template = template!("ig.character.movie.image", "ig/character_movie_image");
pub const IG_CHARACTER_STORY: Template = template!("ig.character.story.image", "ig/character_story_image");
pub const IG_CHARACTER_MANGA: Template = template!("ig.character.manga.image", "ig/character_manga_image");
pub const IG_BACKGROUND_MOVIE: Template = template!("ig.background.movie.image", "ig/background_movie_image");
pub const IG_BACKGROUND_STORY: Template = template!("ig.background.story.image", "ig/background_story_image");
pub const IG_BACKGROUND_MANGA: Template = template!("ig.background.manga.image", "ig/background_manga_image");
pub const IG_MAINPLOT_MOVIE: Template = template!("ig.mainplot.movie.image", "ig/mainplot_movie_image");
pub const IG_MAINPLOT_STORY: Template = template!("ig.mainplot.story.image", "ig/mainplot_story_image");
pub const IG_MAINPLOT_MANGA: Template = template!("ig.mainplot.manga.image", "ig/mainplot_manga_image");

pub const IG_CHARACTER_DESCRIBE: Template = template!("ig.character.describe", "ig/character_describe");
pub const IG_BACKGROUND_DESCRIBE: Template = template!("ig.background.describe", "ig/background_describe");
pub const IG_MAINPLOT_DESCRIBE: Template = template!("ig.mainplot.describe", "ig/mainplot_describe");

pub const TEXT_ONLY_CHARACTER: Template = template!("text_only.character", "text_only/character");
pub const TEXT_ONLY_BACKGROUND: Template = template!("text_only.background", "text_only/background");
pub const TEXT_ONLY_MAINPLOT: Template = template!("text_only.mainplot", "text_only/mainplot");

pub const PERSONA_QUESTIONNAIRE: Template = template!("persona.questionnaire", "persona/questionnaire");
pub const PERSONA_UPDATE: Template = template!("persona.update", "persona/update");
pub const PERSONA_FORMAT_REMINDER: Template = template!("persona.format_reminder", "persona/format_reminder");

pub const WHY_STEP1: Template = template!("why.step1", "why/step1");
pub const WHY_STEP2: Template = template!("why.step2", "why/step2");
pub const WHY_STEP3: Template = template!("why.step3", "why/step3");
pub const WHY_YES_NO_REMINDER: Template = template!("why.yes_no_reminder", "why/yes_no_reminder");

pub const PLOT_SPECIFY: Template = template!("plot.specify", "plot/specify");

pub const PLAN_OUTLINE: Template = template!("plan.outline", "plan/outline");
pub const PLAN_SHAPE_REMINDER: Template = template!("plan.shape_reminder", "plan/shape_reminder");

pub const DRAFT_PASSAGE: Template = template!("draft.passage", "draft/passage");
pub const DRAFT_EMPTY_REMINDER: Template = template!("draft.empty_reminder", "draft/empty_reminder");

pub const MW_CANDIDATE: Template = template!("mw.candidate", "mw/candidate");

pub const EVAL_LLM_RELEVANCE: Template = template!("eval.llm_relevance", "eval/llm_relevance");
pub const EVAL_NUMBER_REMINDER: Template = template!("eval.number_reminder", "eval/number_reminder");

pub const ALL: &[Template] = &[
    IG_CHARACTER_MOVIE,
    IG_CHARACTER_STORY,
    IG_CHARACTER_MANGA,
    IG_BACKGROUND_MOVIE,
    IG_BACKGROUND_STORY,
    IG_BACKGROUND_MANGA,
    IG_MAINPLOT_MOVIE,
    IG_MAINPLOT_STORY,
    IG_MAINPLOT_MANGA,
    IG_CHARACTER_DESCRIBE,
    IG_BACKGROUND_DESCRIBE,
    IG_MAINPLOT_DESCRIBE,
    TEXT_ONLY_CHARACTER,
    TEXT_ONLY_BACKGROUND,
    TEXT_ONLY_MAINPLOT,
    PERSONA_QUESTIONNAIRE,
    PERSONA_UPDATE,
    PERSONA_FORMAT_REMINDER,
    WHY_STEP1,
    WHY_STEP2,
    WHY_STEP3,
    WHY_YES_NO_REMINDER,
    PLOT_SPECIFY,
    PLAN_OUTLINE,
    PLAN_SHAPE_REMINDER,
    DRAFT_PASSAGE,
    DRAFT_EMPTY_REMINDER,
    MW_CANDIDATE,
    EVAL_LLM_RELEVANCE,
    EVAL_NUMBER_REMINDER,
];

pub fn lookup(id: &str) -> Result<Template, TemplateError> {
    ALL.iter()
        .copied()
        .find(|t| t.id == id)
        .ok_or_else(|| TemplateError::Unknown(id.to_string()))
}

/// Placeholder values for one rendering.
pub type Vars = BTreeMap<String, String>;

/// Builds a [`Vars`] map from `(key, value)` pairs.
pub fn vars<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Vars {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

/// A rendered prompt. The template id and the variables travel with the
/// text so offline providers can answer without re-parsing the prose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub template_id: String,
    pub text: String,
    pub vars: Vars,
}

impl Prompt {
    /// Appends a rendered follow-up instruction (format reminders on re-prompts).
    pub fn with_suffix(&self, suffix: &str) -> Prompt {
        Prompt {
            template_id: self.template_id.clone(),
            text: format!("{}{}", self.text, suffix),
            vars: self.vars.clone(),
        }
    }
}

impl Template {
    /// Names of the placeholders in the body, in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = self.body;
        while let Some(start) = rest.find('{') {
            if rest[start..].starts_with("{{") {
                rest = &rest[start + 2..];
                continue;
            }
            let Some(end) = rest[start..].find('}') else { break };
            let name = rest[start + 1..start + end].to_string();
            if !out.contains(&name) {
                out.push(name);
            }
            rest = &rest[start + end + 1..];
        }
        out
    }

    pub fn render(&self, vars: &Vars) -> Result<String, TemplateError> {
        let body = self.body.trim_end_matches('\n');
        let mut out = String::with_capacity(body.len() + 64);
        let mut chars = body.char_indices().peekable();
        while let Some((offset, c)) = chars.next() {
            match c {
                '{' if matches!(chars.peek(), Some((_, '{'))) => {
                    chars.next();
                    out.push('{');
                }
                '}' if matches!(chars.peek(), Some((_, '}'))) => {
                    chars.next();
                    out.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some((_, '}')) => break,
                            Some((_, ch)) => name.push(ch),
                            None => {
                                return Err(TemplateError::Unterminated {
                                    template: self.id.to_string(),
                                    offset,
                                })
                            }
                        }
                    }
                    let value = vars.get(&name).ok_or_else(|| TemplateError::MissingVar {
                        template: self.id.to_string(),
                        placeholder: name.clone(),
                    })?;
                    out.push_str(value);
                }
                _ => out.push(c),
            }
        }
        Ok(out)
    }

    pub fn prompt(&self, vars: Vars) -> Result<Prompt, TemplateError> {
        let text = self.render(&vars)?;
        Ok(Prompt { template_id: self.id.to_string(), text, vars })
    }
}
