//! Persona questionnaire, the chain of asking why, and main plot
//! specification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagination::StoryElement;
use crate::prompts::{self, vars, Prompt, TemplateError};
use crate::providers::{ChatProvider, ChatRequest, ProviderError};
use crate::sections::{parse_labelled, parse_numbered, strip_list_marker};
use crate::text::split_sentences;

/// Re-prompts (with a format reminder) before a persona or plot reply is rejected.
pub const FORMAT_REPROMPTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitKind {
    DarkSecret,
    FamilyEnvironment,
    Appearance,
    SpeechTone,
    Personality,
    SignificantEvents,
    Habits,
}

impl TraitKind {
    pub const ALL: [TraitKind; 7] = [
        TraitKind::DarkSecret,
        TraitKind::FamilyEnvironment,
        TraitKind::Appearance,
        TraitKind::SpeechTone,
        TraitKind::Personality,
        TraitKind::SignificantEvents,
        TraitKind::Habits,
    ];

    fn labels(self) -> &'static [&'static str] {
        match self {
            TraitKind::DarkSecret => &["dark secret", "secret"],
            TraitKind::FamilyEnvironment => &["family environment", "family"],
            TraitKind::Appearance => &["appearance"],
            TraitKind::SpeechTone => &["tone of speech", "way of speaking", "speech", "tone"],
            TraitKind::Personality => &["personality"],
            TraitKind::SignificantEvents => &["significant events", "most significant events", "trauma", "events"],
            TraitKind::Habits => &["habitual behaviors", "habits", "habit"],
        }
    }
}

impl std::fmt::Display for TraitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.labels()[0])
    }
}

/// The protagonist profile. `version` is 0 when first specified and grows
/// by one with every successful update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub version: u32,
    pub dark_secret: String,
    pub family_environment: String,
    pub appearance: String,
    pub speech_tone: String,
    pub personality: String,
    pub significant_events: String,
    pub habits: String,
    /// Latest answer about feelings toward other people, set by updates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationships: Option<String>,
}

impl Persona {
    pub fn get(&self, t: TraitKind) -> &str {
        match t {
            TraitKind::DarkSecret => &self.dark_secret,
            TraitKind::FamilyEnvironment => &self.family_environment,
            TraitKind::Appearance => &self.appearance,
            TraitKind::SpeechTone => &self.speech_tone,
            TraitKind::Personality => &self.personality,
            TraitKind::SignificantEvents => &self.significant_events,
            TraitKind::Habits => &self.habits,
        }
    }

    pub fn set(&mut self, t: TraitKind, value: String) {
        let slot = match t {
            TraitKind::DarkSecret => &mut self.dark_secret,
            TraitKind::FamilyEnvironment => &mut self.family_environment,
            TraitKind::Appearance => &mut self.appearance,
            TraitKind::SpeechTone => &mut self.speech_tone,
            TraitKind::Personality => &mut self.personality,
            TraitKind::SignificantEvents => &mut self.significant_events,
            TraitKind::Habits => &mut self.habits,
        };
        *slot = value;
    }

    pub fn traits(&self) -> impl Iterator<Item = (TraitKind, &str)> {
        TraitKind::ALL.into_iter().map(move |t| (t, self.get(t)))
    }

    pub fn is_complete(&self) -> bool {
        !self.name.trim().is_empty() && self.traits().all(|(_, v)| !v.trim().is_empty())
    }

    /// The seven traits concatenated in fixed order.
    pub fn full_text(&self) -> String {
        self.traits().map(|(_, v)| v).collect::<Vec<_>>().join("\n")
    }

    /// The seven traits as a `1.` … `7.` numbered list.
    pub fn render_numbered(&self) -> String {
        self.traits()
            .enumerate()
            .map(|(i, (_, v))| format!("{}. {}", i + 1, v))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Parses a seven-answer reply. Missing traits are reported by kind.
    pub fn parse(name: &str, reply: &str) -> Result<Persona, Vec<TraitKind>> {
        let mut found = parse_numbered(reply, 7);
        if found.len() < 7 {
            let labels: Vec<&[&str]> = TraitKind::ALL.iter().map(|t| t.labels()).collect();
            for (k, v) in parse_labelled(reply, &labels) {
                found.entry(k).or_insert(v);
            }
        }
        let missing: Vec<TraitKind> =
            TraitKind::ALL.iter().enumerate().filter(|(i, _)| !found.contains_key(&(i + 1))).map(|(_, t)| *t).collect();
        if !missing.is_empty() {
            return Err(missing);
        }
        let take = |i: usize| found[&i].clone();
        Ok(Persona {
            name: name.to_string(),
            version: 0,
            dark_secret: take(1),
            family_environment: take(2),
            appearance: take(3),
            speech_tone: take(4),
            personality: take(5),
            significant_events: take(6),
            habits: take(7),
            relationships: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WhyChainParams {
    /// Ambiguous points requested per round.
    pub max_points: usize,
    /// Maximum rounds.
    pub max_rounds: usize,
}

impl Default for WhyChainParams {
    fn default() -> Self {
        WhyChainParams { max_points: 3, max_rounds: 3 }
    }
}

impl WhyChainParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_points == 0 || self.max_rounds == 0 {
            return Err("why-chain max_points and max_rounds must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRound {
    pub ambiguities: Vec<String>,
    pub evidences: String,
    pub continue_flag: bool,
}

/// Output of the chain of asking why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarifiedPlot {
    pub original: String,
    pub text: String,
    pub qa_chain: Vec<QaRound>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainPlotSpec {
    pub original: String,
    pub clarified: String,
    pub qa_chain: Vec<QaRound>,
    pub why_inevitable: String,
    pub protagonist_response: String,
    pub summary_5_sentences: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecificationError {
    #[error("persona reply is missing traits: {missing:?}")]
    MissingTraits { missing: Vec<TraitKind> },
    #[error("main plot reply has only {found} of 3 answers")]
    PlotSections { found: usize },
    #[error("expected Yes or No, got {reply:?}")]
    YesNoParse { reply: String },
    #[error("empty reply to {step}")]
    EmptyReply { step: &'static str },
    #[error("precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn ask(chat: &dyn ChatProvider, prompt: &Prompt) -> Result<String, ProviderError> {
    chat.chat(&ChatRequest::from_prompt(prompt)).map(|r| r.text)
}

fn format_reminder(count: usize) -> Result<String, TemplateError> {
    prompts::PERSONA_FORMAT_REMINDER.render(&vars([("count", count.to_string())]))
}

/// Runs the seven-question persona questionnaire for the imagined character.
pub fn specify_persona(
    character: &StoryElement,
    background: &StoryElement,
    chat: &dyn ChatProvider,
) -> Result<Persona, SpecificationError> {
    let name = character
        .character_name
        .as_deref()
        .filter(|n| !n.trim().is_empty())
        .ok_or_else(|| SpecificationError::Precondition("character has no name".into()))?;
    let prompt = prompts::PERSONA_QUESTIONNAIRE.prompt(vars([
        ("name", name),
        ("description", character.description.as_str()),
        ("background", background.description.as_str()),
    ]))?;
    let retry = prompt.with_suffix(&format_reminder(7)?);
    let mut missing = Vec::new();
    for attempt in 0..=FORMAT_REPROMPTS {
        let reply = ask(chat, if attempt == 0 { &prompt } else { &retry })?;
        match Persona::parse(name, &reply) {
            Ok(p) => return Ok(p),
            Err(m) => {
                log::warn!("persona reply missing {m:?} (attempt {})", attempt + 1);
                missing = m;
            }
        }
    }
    Err(SpecificationError::MissingTraits { missing })
}

/// First alphabetic token of `reply`, lowercased, if it is yes or no.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let token: String = reply
        .trim_start_matches(|c: char| !c.is_alphabetic())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    match token.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn parse_ambiguities(reply: &str, max: usize) -> Vec<String> {
    reply
        .lines()
        .map(strip_list_marker)
        .filter(|l| !l.is_empty())
        .take(max)
        .map(str::to_string)
        .collect()
}

/// Iteratively finds ambiguous points in the main plot, imagines evidence
/// for them, and asks whether anything ambiguous remains. Every round's
/// evidence is appended to the working text, which feeds the next round.
pub fn chain_of_ask_why(
    main_plot: &str,
    persona: &Persona,
    params: &WhyChainParams,
    chat: &dyn ChatProvider,
) -> Result<ClarifiedPlot, SpecificationError> {
    if main_plot.trim().is_empty() {
        return Err(SpecificationError::Precondition("main plot is empty".into()));
    }
    params.validate().map_err(SpecificationError::Precondition)?;
    let traits = persona.render_numbered();
    let mut working = main_plot.trim().to_string();
    let mut qa_chain = Vec::new();
    for _ in 0..params.max_rounds {
        let step1 = prompts::WHY_STEP1.prompt(vars([
            ("main_plot", working.clone()),
            ("max_points", params.max_points.to_string()),
        ]))?;
        let ambiguities = parse_ambiguities(&ask(chat, &step1)?, params.max_points);
        if ambiguities.is_empty() {
            return Err(SpecificationError::EmptyReply { step: "missing backgrounds" });
        }

        let step2 = prompts::WHY_STEP2.prompt(vars([
            ("name", persona.name.clone()),
            ("main_plot", working.clone()),
            ("personal_traits", traits.clone()),
            ("missing_backgrounds", ambiguities.join("\n")),
        ]))?;
        let mut evidences = ask(chat, &step2)?.trim().to_string();
        if evidences.is_empty() {
            evidences = ask(chat, &step2)?.trim().to_string();
        }
        if evidences.is_empty() {
            return Err(SpecificationError::EmptyReply { step: "evidences" });
        }

        let step3 = prompts::WHY_STEP3.prompt(vars([("main_plot", working.as_str()), ("evidences", evidences.as_str())]))?;
        let reply = ask(chat, &step3)?;
        let answer = match parse_yes_no(&reply) {
            Some(a) => a,
            None => {
                let reminder = prompts::WHY_YES_NO_REMINDER.render(&Default::default())?;
                let again = ask(chat, &step3.with_suffix(&reminder))?;
                parse_yes_no(&again).ok_or(SpecificationError::YesNoParse { reply: again })?
            }
        };

        working.push('\n');
        working.push_str(&evidences);
        qa_chain.push(QaRound { ambiguities, evidences, continue_flag: answer });
        if !answer {
            break;
        }
    }
    Ok(ClarifiedPlot { original: main_plot.trim().to_string(), text: working, qa_chain })
}

/// Asks why the event is inevitable, how the protagonist responds, and for
/// a five-sentence summary.
pub fn specify_main_plot(
    clarified: &ClarifiedPlot,
    persona: &Persona,
    chat: &dyn ChatProvider,
) -> Result<MainPlotSpec, SpecificationError> {
    if clarified.text.trim().is_empty() {
        return Err(SpecificationError::Precondition("clarified plot is empty".into()));
    }
    let prompt = prompts::PLOT_SPECIFY.prompt(vars([
        ("name", persona.name.clone()),
        ("main_plot", clarified.text.clone()),
        ("personal_traits", persona.render_numbered()),
    ]))?;
    let retry = prompt.with_suffix(&format_reminder(3)?);
    let mut found = 0;
    for attempt in 0..2 {
        let reply = ask(chat, if attempt == 0 { &prompt } else { &retry })?;
        let s = parse_numbered(&reply, 3);
        if s.len() == 3 {
            let summary = s[&3].clone();
            let n = split_sentences(&summary).len();
            if n != 5 {
                log::warn!("plot summary has {n} sentences, expected 5; keeping it");
            }
            return Ok(MainPlotSpec {
                original: clarified.original.clone(),
                clarified: clarified.text.clone(),
                qa_chain: clarified.qa_chain.clone(),
                why_inevitable: s[&1].clone(),
                protagonist_response: s[&2].clone(),
                summary_5_sentences: summary,
            });
        }
        found = s.len();
    }
    Err(SpecificationError::PlotSections { found })
}
