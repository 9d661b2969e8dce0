//! Story element imagination: sample an image from a short fixed prompt,
//! then have a vision model describe it. Also the text-only route and the
//! route that starts from user-supplied images.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::prompts::{self, Prompt, Template, TemplateError, Vars};
use crate::providers::{generate_image_resampling, ChatProvider, ChatRequest, ImageRef, ProviderError, Providers};

/// Re-samples of a content-policy-rejected image prompt before giving up.
pub const IMAGE_RESAMPLES: u32 = 2;
/// Re-prompts when a character reply lacks the `Name : description` shape.
pub const NAME_REPROMPTS: usize = 2;

const NAME_REMINDER: &str = "\nMust keep the format \"Name : description\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Character,
    Background,
    MainPlot,
}

impl ElementKind {
    pub const ALL: [ElementKind; 3] = [ElementKind::Character, ElementKind::Background, ElementKind::MainPlot];

    pub fn default_prompt_type(self) -> PromptType {
        match self {
            ElementKind::Character => PromptType::Manga,
            ElementKind::Background | ElementKind::MainPlot => PromptType::Movie,
        }
    }

    pub fn image_template(self, prompt_type: PromptType) -> Template {
        use ElementKind::*;
        use PromptType::*;
        match (self, prompt_type) {
            (Character, Movie) => prompts::IG_CHARACTER_MOVIE,
            (Character, Story) => prompts::IG_CHARACTER_STORY,
            (Character, Manga) => prompts::IG_CHARACTER_MANGA,
            (Background, Movie) => prompts::IG_BACKGROUND_MOVIE,
            (Background, Story) => prompts::IG_BACKGROUND_STORY,
            (Background, Manga) => prompts::IG_BACKGROUND_MANGA,
            (MainPlot, Movie) => prompts::IG_MAINPLOT_MOVIE,
            (MainPlot, Story) => prompts::IG_MAINPLOT_STORY,
            (MainPlot, Manga) => prompts::IG_MAINPLOT_MANGA,
        }
    }

    pub fn describe_template(self) -> Template {
        match self {
            ElementKind::Character => prompts::IG_CHARACTER_DESCRIBE,
            ElementKind::Background => prompts::IG_BACKGROUND_DESCRIBE,
            ElementKind::MainPlot => prompts::IG_MAINPLOT_DESCRIBE,
        }
    }

    pub fn text_only_template(self) -> Template {
        match self {
            ElementKind::Character => prompts::TEXT_ONLY_CHARACTER,
            ElementKind::Background => prompts::TEXT_ONLY_BACKGROUND,
            ElementKind::MainPlot => prompts::TEXT_ONLY_MAINPLOT,
        }
    }
}

impl std::fmt::Display for ElementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ElementKind::Character => "character",
            ElementKind::Background => "background",
            ElementKind::MainPlot => "main plot",
        })
    }
}

/// Short image prompt family: "from a random movie / story / manga".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptType {
    Movie,
    Story,
    Manga,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    UserImage,
    TextOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryElement {
    pub kind: ElementKind,
    pub image: Option<ImageRef>,
    /// The short prompt sent to the image model, for generated elements.
    pub image_prompt: Option<String>,
    pub description: String,
    pub character_name: Option<String>,
    pub provenance: Provenance,
}

impl StoryElement {
    /// Text form used in later prompts: `Name : description` for characters.
    pub fn full_text(&self) -> String {
        match &self.character_name {
            Some(name) => format_character(name, &self.description),
            None => self.description.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryElements {
    pub character: StoryElement,
    pub background: StoryElement,
    pub main_plot: StoryElement,
}

impl StoryElements {
    pub fn iter(&self) -> impl Iterator<Item = &StoryElement> {
        [&self.character, &self.background, &self.main_plot].into_iter()
    }

    pub fn character_name(&self) -> &str {
        self.character.character_name.as_deref().unwrap_or_default()
    }

    /// The single provenance shared by all three elements, if they agree.
    pub fn provenance(&self) -> Option<Provenance> {
        let p = self.character.provenance;
        self.iter().all(|e| e.provenance == p).then_some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ElementMode {
    #[serde(rename = "ig")]
    ImageGuided,
    TextOnly,
    UserImages { character: PathBuf, background: PathBuf, main_plot: PathBuf },
}

/// Per-element prompt type overrides for image-guided mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTypes {
    pub character: Option<PromptType>,
    pub background: Option<PromptType>,
    pub main_plot: Option<PromptType>,
}

impl PromptTypes {
    pub fn for_kind(&self, kind: ElementKind) -> PromptType {
        let o = match kind {
            ElementKind::Character => self.character,
            ElementKind::Background => self.background,
            ElementKind::MainPlot => self.main_plot,
        };
        o.unwrap_or_else(|| kind.default_prompt_type())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImaginationError {
    #[error("{kind}: {source}")]
    Provider { kind: ElementKind, source: ProviderError },
    #[error("{slot} image unreadable: {source}")]
    ImageUnreadable { slot: ElementKind, source: ProviderError },
    #[error("character reply has no `Name : description` shape: {reply:?}")]
    NameParse { reply: String },
    #[error("{kind}: empty description")]
    EmptyDescription { kind: ElementKind },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Splits `Name : description` (or `Name: description`).
pub fn parse_character(reply: &str) -> Result<(String, String), ImaginationError> {
    let err = || ImaginationError::NameParse { reply: reply.to_string() };
    let trimmed = reply.trim();
    let (name, desc) = trimmed.split_once(':').ok_or_else(err)?;
    let name = name.trim().trim_matches(|c: char| matches!(c, '*' | '"' | '\'' | '#')).trim();
    let desc = desc.trim();
    if name.is_empty() || desc.is_empty() || name.split_whitespace().count() > 4 || name.contains('\n') {
        return Err(err());
    }
    Ok((name.to_string(), desc.to_string()))
}

pub fn format_character(name: &str, description: &str) -> String {
    format!("{name} : {description}")
}

fn build_element(
    kind: ElementKind,
    reply: &str,
    image: Option<ImageRef>,
    image_prompt: Option<String>,
    provenance: Provenance,
) -> Result<StoryElement, ImaginationError> {
    let (character_name, description) = if kind == ElementKind::Character {
        let (n, d) = parse_character(reply)?;
        (Some(n), d)
    } else {
        (None, reply.trim().to_string())
    };
    if description.is_empty() {
        return Err(ImaginationError::EmptyDescription { kind });
    }
    Ok(StoryElement { kind, image, image_prompt, description, character_name, provenance })
}

/// Calls `ask` with the base prompt, then with a format reminder appended,
/// until `build` accepts the reply or the re-prompt budget is spent.
fn with_name_reprompts(
    kind: ElementKind,
    prompt: &Prompt,
    mut ask: impl FnMut(&Prompt) -> Result<String, ProviderError>,
    mut build: impl FnMut(&str) -> Result<StoryElement, ImaginationError>,
) -> Result<StoryElement, ImaginationError> {
    let mut current = prompt.clone();
    let mut attempt = 0;
    loop {
        let reply = ask(&current).map_err(|source| ImaginationError::Provider { kind, source })?;
        match build(&reply) {
            Err(e @ ImaginationError::NameParse { .. }) if attempt < NAME_REPROMPTS => {
                log::warn!("{kind} reply unparseable, re-prompting: {e}");
                attempt += 1;
                current = prompt.with_suffix(NAME_REMINDER);
            }
            other => return other,
        }
    }
}

fn describe(
    kind: ElementKind,
    image: &ImageRef,
    image_prompt: Option<String>,
    provenance: Provenance,
    providers: &Providers,
) -> Result<StoryElement, ImaginationError> {
    let instruction = kind.describe_template().prompt(Vars::new())?;
    with_name_reprompts(
        kind,
        &instruction,
        |p| providers.vision.describe_image(image, p),
        |reply| build_element(kind, reply, Some(image.clone()), image_prompt.clone(), provenance),
    )
}

/// Image-guided imagination of one element.
pub fn imagine_element(
    kind: ElementKind,
    prompt_type: PromptType,
    providers: &Providers,
) -> Result<StoryElement, ImaginationError> {
    let image_prompt = kind.image_template(prompt_type).prompt(Vars::new())?;
    let image = generate_image_resampling(providers.image.as_ref(), &image_prompt, IMAGE_RESAMPLES)
        .map_err(|source| ImaginationError::Provider { kind, source })?;
    describe(kind, &image, Some(image_prompt.text), Provenance::Generated, providers)
}

/// Text-only imagination of one element, no image involved.
pub fn imagine_element_text_only(kind: ElementKind, chat: &dyn ChatProvider) -> Result<StoryElement, ImaginationError> {
    let prompt = kind.text_only_template().prompt(Vars::new())?;
    with_name_reprompts(
        kind,
        &prompt,
        |p| chat.chat(&ChatRequest::from_prompt(p)).map(|r| r.text),
        |reply| build_element(kind, reply, None, None, Provenance::TextOnly),
    )
}

/// Describes three user-supplied images. Every slot is checked for
/// readability before any provider call.
pub fn describe_user_images(
    character: &ImageRef,
    background: &ImageRef,
    main_plot: &ImageRef,
    providers: &Providers,
) -> Result<StoryElements, ImaginationError> {
    for (slot, img) in [(ElementKind::Character, character), (ElementKind::Background, background), (ElementKind::MainPlot, main_plot)] {
        img.local_bytes().map_err(|source| ImaginationError::ImageUnreadable { slot, source })?;
    }
    let (c, b, m) = par::join3(
        || describe(ElementKind::Character, character, None, Provenance::UserImage, providers),
        || describe(ElementKind::Background, background, None, Provenance::UserImage, providers),
        || describe(ElementKind::MainPlot, main_plot, None, Provenance::UserImage, providers),
    );
    Ok(StoryElements { character: c?, background: b?, main_plot: m? })
}

/// Opens three local image paths, reporting the first unreadable slot.
pub fn open_user_images(character: &PathBuf, background: &PathBuf, main_plot: &PathBuf) -> Result<[ImageRef; 3], ImaginationError> {
    let open = |slot, p: &PathBuf| ImageRef::local(p).map_err(|source| ImaginationError::ImageUnreadable { slot, source });
    Ok([
        open(ElementKind::Character, character)?,
        open(ElementKind::Background, background)?,
        open(ElementKind::MainPlot, main_plot)?,
    ])
}

pub fn imagine_all(mode: &ElementMode, types: &PromptTypes, providers: &Providers) -> Result<StoryElements, ImaginationError> {
    match mode {
        ElementMode::ImageGuided => {
            let (c, b, m) = par::join3(
                || imagine_element(ElementKind::Character, types.for_kind(ElementKind::Character), providers),
                || imagine_element(ElementKind::Background, types.for_kind(ElementKind::Background), providers),
                || imagine_element(ElementKind::MainPlot, types.for_kind(ElementKind::MainPlot), providers),
            );
            Ok(StoryElements { character: c?, background: b?, main_plot: m? })
        }
        ElementMode::TextOnly => {
            let chat = providers.chat.as_ref();
            let (c, b, m) = par::join3(
                || imagine_element_text_only(ElementKind::Character, chat),
                || imagine_element_text_only(ElementKind::Background, chat),
                || imagine_element_text_only(ElementKind::MainPlot, chat),
            );
            Ok(StoryElements { character: c?, background: b?, main_plot: m? })
        }
        ElementMode::UserImages { character, background, main_plot } => {
            let [c, b, m] = open_user_images(character, background, main_plot)?;
            describe_user_images(&c, &b, &m, providers)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{MockChat, MockImage, MockVision};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn with_vision(reply: &'static str) -> Providers {
        let mut p = Providers::mock(1);
        p.vision = Arc::new(MockVision::with_responder(1, move |_, _| Some(reply.to_string())));
        p
    }

    #[test]
    fn parses_both_separator_styles() {
        assert_eq!(parse_character("Alex : a lean, pale boy. he limps.").unwrap(), ("Alex".into(), "a lean, pale boy. he limps.".into()));
        assert_eq!(parse_character("Hiro: a rugged warrior with silver hair").unwrap().0, "Hiro");
        assert_eq!(parse_character("**Mara Lin** :  tall").unwrap(), ("Mara Lin".into(), "tall".into()));
        assert!(parse_character("no name here").is_err());
        assert!(parse_character(": desc").is_err());
        assert!(parse_character("Name :   ").is_err());
    }

    proptest! {
        #[test]
        fn character_format_round_trips(name in "[A-Z][a-z]{1,8}( [A-Z][a-z]{1,8})?", desc in "[a-z][a-z ,.]{0,60}[a-z.]") {
            let (n, d) = parse_character(&format_character(&name, &desc)).unwrap();
            prop_assert_eq!(n, name);
            prop_assert_eq!(d, desc);
        }
    }

    #[test]
    fn generated_background_is_deterministic() {
        let a = imagine_element(ElementKind::Background, PromptType::Movie, &Providers::mock(3)).unwrap();
        let b = imagine_element(ElementKind::Background, PromptType::Movie, &Providers::mock(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance, Provenance::Generated);
        assert_eq!(a.image_prompt.as_deref(), Some("A background from random genre of movie."));
        assert!(a.image.is_some() && a.character_name.is_none());
    }

    #[test]
    fn character_gets_a_name() {
        let c = imagine_element(ElementKind::Character, PromptType::Manga, &Providers::mock(5)).unwrap();
        assert!(!c.character_name.as_deref().unwrap().is_empty());
        assert_eq!(c.image_prompt.as_deref(), Some("A character from random genre of manga."));
    }

    #[test]
    fn unnamed_character_reply_fails_after_reprompts() {
        let err = imagine_element(ElementKind::Character, PromptType::Manga, &with_vision("no name here")).unwrap_err();
        assert!(matches!(err, ImaginationError::NameParse { .. }));
    }

    #[test]
    fn content_policy_resampling_is_transparent() {
        let mut p = Providers::mock(1);
        p.image = Arc::new(MockImage::rejecting_first(1, 2));
        assert!(imagine_element(ElementKind::MainPlot, PromptType::Movie, &p).is_ok());
        p.image = Arc::new(MockImage::rejecting_first(1, 3));
        let err = imagine_element(ElementKind::MainPlot, PromptType::Movie, &p).unwrap_err();
        assert!(matches!(err, ImaginationError::Provider { source: ProviderError::ContentPolicyRejection(_), .. }));
    }

    #[test]
    fn text_only_elements_have_no_image() {
        let chat = MockChat::new(2);
        for kind in ElementKind::ALL {
            let e = imagine_element_text_only(kind, &chat).unwrap();
            assert_eq!(e.provenance, Provenance::TextOnly);
            assert!(e.image.is_none());
            assert_eq!(e, imagine_element_text_only(kind, &chat).unwrap());
        }
    }

    #[test]
    fn text_only_character_reprompt_recovers() {
        let chat = MockChat::scripted(2, "text_only.character", vec!["no name".into(), "Elena : 27 years old. a slender, ghostly woman".into()]);
        let e = imagine_element_text_only(ElementKind::Character, &chat).unwrap();
        assert_eq!(e.character_name.as_deref(), Some("Elena"));
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn user_images_report_the_missing_slot() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.png");
        let m = dir.path().join("m.png");
        std::fs::write(&c, b"char").unwrap();
        std::fs::write(&m, b"plot").unwrap();
        let mode = ElementMode::UserImages { character: c.clone(), background: dir.path().join("missing.png"), main_plot: m.clone() };
        let err = imagine_all(&mode, &PromptTypes::default(), &Providers::mock(1)).unwrap_err();
        assert!(matches!(err, ImaginationError::ImageUnreadable { slot: ElementKind::Background, .. }));

        let b = dir.path().join("b.png");
        std::fs::write(&b, b"back").unwrap();
        let mode = ElementMode::UserImages { character: c, background: b, main_plot: m };
        let els = imagine_all(&mode, &PromptTypes::default(), &Providers::mock(1)).unwrap();
        assert_eq!(els.provenance(), Some(Provenance::UserImage));
    }

    #[test]
    fn every_mode_tags_provenance_uniformly() {
        let p = Providers::mock(9);
        let ig = imagine_all(&ElementMode::ImageGuided, &PromptTypes::default(), &p).unwrap();
        assert_eq!(ig.provenance(), Some(Provenance::Generated));
        let to = imagine_all(&ElementMode::TextOnly, &PromptTypes::default(), &p).unwrap();
        assert_eq!(to.provenance(), Some(Provenance::TextOnly));
    }

    #[test]
    fn prompt_type_override_changes_the_image_prompt() {
        let types = PromptTypes { character: Some(PromptType::Story), ..Default::default() };
        let els = imagine_all(&ElementMode::ImageGuided, &types, &Providers::mock(9)).unwrap();
        assert_eq!(els.character.image_prompt.as_deref(), Some(prompts::IG_CHARACTER_STORY.body));
    }
}
