//! Leaf-by-leaf drafting with persona injection. At the end of every
//! passage five persona writers each propose K first-person descriptions;
//! the closest one per writer survives, near-repeats of earlier text are
//! dropped, and the candidate that best continues the paragraph is appended
//! when its continuation score clears the threshold. The persona is
//! revised after each finished outline node.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::rng_for;
use crate::imagination::StoryElements;
use crate::metrics::{bleu_tokens, bleu_tokens_multi};
use crate::par;
use crate::planner::{OutlineNode, OutlineParams, OutlineTree};
use crate::prompts::{self, vars, TemplateError};
use crate::providers::{ChatProvider, ChatRequest, ContinuationScorer, Embedder, ProviderError, ScorerError};
use crate::sections::parse_numbered;
use crate::specification::{MainPlotSpec, Persona, FORMAT_REPROMPTS};
use crate::text::{split_sentences, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriterKind {
    Relationship,
    BehavioralHabit,
    Psychology,
    ToneOfSpeech,
    SelfDescription,
}

impl WriterKind {
    /// Fixed order; also the tie-break order when scores are equal.
    pub const ALL: [WriterKind; 5] = [
        WriterKind::Relationship,
        WriterKind::BehavioralHabit,
        WriterKind::Psychology,
        WriterKind::ToneOfSpeech,
        WriterKind::SelfDescription,
    ];

    pub fn instruction(self) -> &'static str {
        match self {
            WriterKind::Relationship => "Describe your thoughts/feelings about another person or the environment.",
            WriterKind::BehavioralHabit => "Describe specific action that reveals yours psychology.",
            WriterKind::Psychology => "Describe hint that reveals yours trauma.",
            WriterKind::ToneOfSpeech => "Describe **dialogue** that reveals you're speaking.",
            WriterKind::SelfDescription => "Describe appearance of yourself.",
        }
    }

    /// The persona trait this writer draws on, for per-trait similarity.
    pub fn matched_trait(self, persona: &Persona) -> &str {
        match self {
            WriterKind::Relationship => persona.relationships.as_deref().unwrap_or(&persona.family_environment),
            WriterKind::BehavioralHabit => &persona.habits,
            WriterKind::Psychology => &persona.significant_events,
            WriterKind::ToneOfSpeech => &persona.speech_tone,
            WriterKind::SelfDescription => &persona.appearance,
        }
    }

    fn rank(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Generated,
    SelectedForWriter,
    DiscardedRepetition,
    DiscardedLowCs,
    Injected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaCandidate {
    pub writer: WriterKind,
    pub sample_index: u32,
    pub text: String,
    pub persona_similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cs: Option<f64>,
    pub status: CandidateStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub leaf_id: String,
    pub paragraph_index: usize,
    pub candidates: Vec<PersonaCandidate>,
    pub injected_text: Option<String>,
    /// Writers whose samples were all empty or failed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_writers: Vec<WriterKind>,
}

impl InjectionRecord {
    pub fn injected(&self) -> Option<&PersonaCandidate> {
        self.candidates.iter().find(|c| c.status == CandidateStatus::Injected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityTarget {
    /// The seven traits concatenated.
    FullPersona,
    /// Only the trait matching the writer.
    WriterTrait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepetitionMode {
    /// Mean over reference sentences of sentence-level BLEU.
    Sentence,
    /// One BLEU against all reference sentences at once.
    Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateGranularity {
    /// Once every leaf under a top-level outline node is drafted.
    TopLevelNode,
    /// After every leaf.
    Leaf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MWParams {
    pub k: usize,
    pub repetition_threshold: f64,
    pub cs_threshold: f64,
    pub repetition_reference_window: usize,
    pub similarity_target: SimilarityTarget,
    pub repetition_mode: RepetitionMode,
    pub update_granularity: UpdateGranularity,
}

impl Default for MWParams {
    fn default() -> Self {
        MWParams {
            k: 8,
            repetition_threshold: 0.0003,
            cs_threshold: 0.1,
            repetition_reference_window: 3,
            similarity_target: SimilarityTarget::FullPersona,
            repetition_mode: RepetitionMode::Sentence,
            update_granularity: UpdateGranularity::TopLevelNode,
        }
    }
}

impl MWParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be >= 1".into());
        }
        if !(self.repetition_threshold >= 0.0 && self.cs_threshold >= 0.0) {
            return Err("thresholds must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiWriterError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

fn is_fatal(e: &ProviderError) -> bool {
    matches!(e, ProviderError::Auth { .. } | ProviderError::MissingApiKey(_) | ProviderError::InvalidInput(_))
}

/// Writes one first-person paragraph for `leaf`; an empty reply is retried
/// once with a reminder.
#[allow(clippy::too_many_arguments)]
pub fn draft_passage(
    leaf: &OutlineNode,
    story_so_far: &str,
    elements: &StoryElements,
    persona: &Persona,
    plot: &MainPlotSpec,
    passage_index: u32,
    chat: &dyn ChatProvider,
) -> Result<String, MultiWriterError> {
    let prompt = prompts::DRAFT_PASSAGE.prompt(vars([
        ("premise", plot.summary_5_sentences.as_str()),
        ("description", elements.character.full_text().as_str()),
        ("personal_traits", persona.render_numbered().as_str()),
        ("setting", elements.background.description.as_str()),
        ("story_so_far", story_so_far),
        ("outline_item", leaf.summary.as_str()),
        ("name", persona.name.as_str()),
    ]))?;
    let reminder = prompts::DRAFT_EMPTY_REMINDER.render(&Default::default())?;
    for attempt in 0..2 {
        let p = if attempt == 0 { prompt.clone() } else { prompt.with_suffix(&reminder) };
        let reply = chat.chat(&ChatRequest::from_prompt(&p).with_sample(passage_index))?.text;
        let text = reply.trim();
        if !text.is_empty() {
            return Ok(text.to_string());
        }
        log::warn!("empty draft for leaf {} (attempt {})", leaf.id, attempt + 1);
    }
    Err(ProviderError::MalformedResponse(format!("empty draft for leaf {}", leaf.id)).into())
}

/// K samples per writer. Empty samples and non-fatal sample failures are
/// dropped; writers left with nothing are returned separately.
pub fn generate_candidates(
    persona: &Persona,
    paragraph: &str,
    params: &MWParams,
    chat: &dyn ChatProvider,
) -> Result<(Vec<PersonaCandidate>, Vec<WriterKind>), MultiWriterError> {
    if !persona.is_complete() {
        return Err(MultiWriterError::Precondition("persona is incomplete".into()));
    }
    let traits = persona.render_numbered();
    let mut jobs = Vec::with_capacity(WriterKind::ALL.len() * params.k);
    for w in WriterKind::ALL {
        let prompt = prompts::MW_CANDIDATE.prompt(vars([
            ("name", persona.name.as_str()),
            ("personal_traits", traits.as_str()),
            ("instruction", w.instruction()),
            ("context", paragraph),
        ]))?;
        for s in 0..params.k as u32 {
            jobs.push((w, s, ChatRequest::from_prompt(&prompt).with_sample(s)));
        }
    }
    let replies = par::map(&jobs, |(_, _, req)| chat.chat(req));
    let mut out = Vec::new();
    for ((w, s, _), reply) in jobs.iter().zip(replies) {
        match reply {
            Ok(r) if !r.text.trim().is_empty() => out.push(PersonaCandidate {
                writer: *w,
                sample_index: *s,
                text: r.text.trim().to_string(),
                persona_similarity: 0.0,
                repetition_score: None,
                cs: None,
                status: CandidateStatus::Generated,
            }),
            Ok(_) => {}
            Err(e) if is_fatal(&e) => return Err(e.into()),
            Err(e) => log::warn!("{w:?} sample {s} failed: {e}"),
        }
    }
    let empty: Vec<WriterKind> = WriterKind::ALL.into_iter().filter(|w| !out.iter().any(|c| c.writer == *w)).collect();
    for w in &empty {
        log::warn!("writer {w:?} produced no usable candidate");
    }
    Ok((out, empty))
}

/// Scores every candidate against the persona and marks the best one per
/// writer. Returns the selected indices in writer order.
pub fn select_per_writer(
    candidates: &mut [PersonaCandidate],
    persona: &Persona,
    target: SimilarityTarget,
    embed: &dyn Embedder,
) -> Result<Vec<usize>, MultiWriterError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let targets: Vec<String> = match target {
        SimilarityTarget::FullPersona => vec![persona.full_text()],
        SimilarityTarget::WriterTrait => WriterKind::ALL.iter().map(|w| w.matched_trait(persona).to_string()).collect(),
    };
    texts.extend(targets.iter().cloned());
    let vs = embed.embed(&texts)?;
    let (cand_vs, target_vs) = vs.split_at(candidates.len());
    for (c, v) in candidates.iter_mut().zip(cand_vs) {
        let t = match target {
            SimilarityTarget::FullPersona => &target_vs[0],
            SimilarityTarget::WriterTrait => &target_vs[c.writer.rank()],
        };
        c.persona_similarity = v.cosine(t)?;
    }
    let mut selected = Vec::new();
    for w in WriterKind::ALL {
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.writer == w)
            .fold(None::<usize>, |best, (i, c)| match best {
                Some(b) => {
                    let bc = &candidates[b];
                    let better = c.persona_similarity > bc.persona_similarity
                        || (c.persona_similarity == bc.persona_similarity && c.sample_index < bc.sample_index);
                    Some(if better { i } else { b })
                }
                None => Some(i),
            });
        if let Some(i) = best {
            candidates[i].status = CandidateStatus::SelectedForWriter;
            selected.push(i);
        }
    }
    Ok(selected)
}

/// Sentences of every prior injected text plus the last `window` paragraphs.
pub fn reference_sentences(injected: &[String], paragraphs: &[String], window: usize) -> Vec<String> {
    let start = paragraphs.len().saturating_sub(window);
    injected
        .iter()
        .chain(&paragraphs[start..])
        .flat_map(|t| split_sentences(t).into_iter().map(str::to_string))
        .collect()
}

/// `(BLEU-2 + BLEU-3) / 2` of `text` against the references, averaged over
/// references in sentence mode. An empty reference set scores 0.
pub fn repetition_score(text: &str, references: &[String], mode: RepetitionMode) -> f64 {
    let hyp = tokenize(text);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).filter(|r| !r.is_empty()).collect();
    if refs.is_empty() || hyp.is_empty() {
        return 0.0;
    }
    match mode {
        RepetitionMode::Sentence => {
            let sum: f64 = refs.iter().map(|r| (bleu_tokens(&hyp, r, 2) + bleu_tokens(&hyp, r, 3)) / 2.0).sum();
            sum / refs.len() as f64
        }
        RepetitionMode::Corpus => {
            let rs: Vec<&[String]> = refs.iter().map(Vec::as_slice).collect();
            (bleu_tokens_multi(&hyp, &rs, 2) + bleu_tokens_multi(&hyp, &rs, 3)) / 2.0
        }
    }
}

/// Marks selected candidates scoring above the threshold as repetitions and
/// returns the survivors, keeping their order.
pub fn repetition_filter(
    candidates: &mut [PersonaCandidate],
    selected: &[usize],
    references: &[String],
    params: &MWParams,
) -> Vec<usize> {
    let scores = par::map(selected, |&i| repetition_score(&candidates[i].text, references, params.repetition_mode));
    let mut survivors = Vec::new();
    for (&i, score) in selected.iter().zip(scores) {
        candidates[i].repetition_score = Some(score);
        if score > params.repetition_threshold {
            candidates[i].status = CandidateStatus::DiscardedRepetition;
        } else {
            survivors.push(i);
        }
    }
    survivors
}

/// Scores survivors as continuations of `paragraph`; the best one is marked
/// injected only if its score is above the threshold. Ties go to the
/// earlier writer.
pub fn rerank_select(
    candidates: &mut [PersonaCandidate],
    survivors: &[usize],
    paragraph: &str,
    scorer: &dyn ContinuationScorer,
    params: &MWParams,
) -> Result<Option<usize>, MultiWriterError> {
    let scores = par::map(survivors, |&i| scorer.score(paragraph, &candidates[i].text));
    let mut best: Option<(usize, f64)> = None;
    for (&i, s) in survivors.iter().zip(scores) {
        let s = s?;
        candidates[i].cs = Some(s);
        candidates[i].status = CandidateStatus::DiscardedLowCs;
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && candidates[i].writer.rank() < candidates[b].writer.rank()),
        };
        if better {
            best = Some((i, s));
        }
    }
    match best {
        Some((i, s)) if s > params.cs_threshold => {
            candidates[i].status = CandidateStatus::Injected;
            Ok(Some(i))
        }
        _ => Ok(None),
    }
}

pub fn inject(paragraph: &str, candidate: &str) -> String {
    format!("{} {}", paragraph.trim_end(), candidate.trim())
}

/// Scorer that switches to a fallback for the rest of its life the first
/// time the primary reports itself unavailable.
pub struct FallbackScorer {
    primary: Arc<dyn ContinuationScorer>,
    fallback: Arc<dyn ContinuationScorer>,
    downgraded: AtomicBool,
}

impl FallbackScorer {
    pub fn new(primary: Arc<dyn ContinuationScorer>, fallback: Arc<dyn ContinuationScorer>) -> Self {
        FallbackScorer { primary, fallback, downgraded: AtomicBool::new(false) }
    }

    pub fn downgraded(&self) -> bool {
        self.downgraded.load(Ordering::SeqCst)
    }

    /// Starts out on the fallback, e.g. when resuming a downgraded run.
    pub fn force_downgrade(&self) {
        self.downgraded.store(true, Ordering::SeqCst);
    }
}

impl ContinuationScorer for FallbackScorer {
    fn score(&self, prev: &str, cand: &str) -> Result<f64, ScorerError> {
        if !self.downgraded() {
            match self.primary.score(prev, cand) {
                Ok(s) => return Ok(s),
                Err(ScorerError::Unavailable(m)) => {
                    if !self.downgraded.swap(true, Ordering::SeqCst) {
                        log::warn!("{} scorer unavailable ({m}); using {} scorer", self.primary.name(), self.fallback.name());
                    }
                }
                Err(e) => return Err(e),
            }
        }
        self.fallback.score(prev, cand)
    }

    fn name(&self) -> &str {
        if self.downgraded() {
            self.fallback.name()
        } else {
            self.primary.name()
        }
    }
}

/// Capabilities used while drafting.
#[derive(Clone, Copy)]
pub struct DraftProviders<'a> {
    /// Writes the passages.
    pub draft: &'a dyn ChatProvider,
    /// Persona writers and persona updates.
    pub chat: &'a dyn ChatProvider,
    pub embed: &'a dyn Embedder,
    pub scorer: &'a dyn ContinuationScorer,
}

/// Runs one injection point at the end of `paragraph`.
pub fn inject_point(
    leaf_id: &str,
    paragraph_index: usize,
    paragraph: &str,
    persona: &Persona,
    references: &[String],
    params: &MWParams,
    providers: DraftProviders<'_>,
) -> Result<(String, InjectionRecord), MultiWriterError> {
    let (mut candidates, empty_writers) = generate_candidates(persona, paragraph, params, providers.chat)?;
    let selected = select_per_writer(&mut candidates, persona, params.similarity_target, providers.embed)?;
    let survivors = repetition_filter(&mut candidates, &selected, references, params);
    let chosen = rerank_select(&mut candidates, &survivors, paragraph, providers.scorer, params)?;
    let injected_text = chosen.map(|i| candidates[i].text.clone());
    let text = match &injected_text {
        Some(t) => inject(paragraph, t),
        None => paragraph.to_string(),
    };
    let record = InjectionRecord {
        leaf_id: leaf_id.to_string(),
        paragraph_index,
        candidates,
        injected_text,
        empty_writers,
    };
    Ok((text, record))
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Updated(Persona),
    Skipped { reason: String },
}

/// Asks how each trait evolved over `node_story` and writes the answers
/// back. The dark secret and family environment are carried over.
pub fn update_persona(persona: &Persona, node_story: &str, chat: &dyn ChatProvider) -> Result<UpdateOutcome, MultiWriterError> {
    let context = format!("{}\n{}", node_story.trim(), persona.render_numbered());
    let prompt = prompts::PERSONA_UPDATE.prompt(vars([("name", persona.name.as_str()), ("context", context.as_str())]))?;
    let retry = prompt.with_suffix(&prompts::PERSONA_FORMAT_REMINDER.render(&vars([("count", "6")]))?);
    for attempt in 0..=FORMAT_REPROMPTS {
        let reply = chat.chat(&ChatRequest::from_prompt(if attempt == 0 { &prompt } else { &retry }))?.text;
        let found = parse_numbered(&reply, 6);
        if found.len() == 6 {
            let mut next = persona.clone();
            next.appearance = found[&1].clone();
            next.speech_tone = found[&2].clone();
            next.personality = found[&3].clone();
            next.significant_events = found[&4].clone();
            next.habits = found[&5].clone();
            next.relationships = Some(found[&6].clone());
            next.version += 1;
            return Ok(UpdateOutcome::Updated(next));
        }
        log::warn!("persona update reply had {} of 6 answers (attempt {})", found.len(), attempt + 1);
    }
    Ok(UpdateOutcome::Skipped { reason: format!("persona update for {} unparseable; kept version {}", persona.name, persona.version) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub leaf_id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injection: Option<InjectionRecord>,
}

/// Everything drafted so far. Saved after every leaf so a run can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftState {
    pub paragraphs: Vec<Paragraph>,
    /// Index 0 is the specified persona; each update appends one.
    pub persona_versions: Vec<Persona>,
    /// Number of leaves fully drafted.
    pub leaves_done: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub scorer_downgraded: bool,
}

impl DraftState {
    pub fn new(persona: Persona) -> Self {
        DraftState { paragraphs: Vec::new(), persona_versions: vec![persona], leaves_done: 0, warnings: Vec::new(), scorer_downgraded: false }
    }

    pub fn persona(&self) -> &Persona {
        self.persona_versions.last().expect("at least the initial persona")
    }

    pub fn story_text(&self) -> String {
        self.paragraphs.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn injected_texts(&self) -> Vec<String> {
        self.paragraphs.iter().filter_map(|p| p.injection.as_ref()?.injected_text.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftSettings {
    pub mw: MWParams,
    pub outline: OutlineParams,
    /// Off for the ablation without persona injection.
    pub multiwriter: bool,
    pub seed: u64,
}

/// Seeded passage count for a leaf, within the outline bounds.
pub fn passages_for_leaf(leaf_id: &str, params: &OutlineParams, seed: u64) -> usize {
    rng_for(seed, &["passages", leaf_id]).gen_range(params.min_passages_per_node..=params.max_passages_per_node)
}

/// A failed draft with the progress made before the failure.
#[derive(Debug, Clone, Error)]
#[error("drafting stopped after {} leaves: {error}", state.leaves_done)]
pub struct DraftFailure {
    pub error: MultiWriterError,
    pub state: Box<DraftState>,
}

/// Drafts leaves one at a time with a guard on their order.
pub struct Drafter<'a> {
    tree: &'a OutlineTree,
    elements: &'a StoryElements,
    plot: &'a MainPlotSpec,
    settings: DraftSettings,
    providers: DraftProviders<'a>,
    state: DraftState,
}

impl<'a> Drafter<'a> {
    pub fn new(
        tree: &'a OutlineTree,
        elements: &'a StoryElements,
        plot: &'a MainPlotSpec,
        settings: DraftSettings,
        providers: DraftProviders<'a>,
        state: DraftState,
    ) -> Result<Self, MultiWriterError> {
        settings.mw.validate().map_err(MultiWriterError::Precondition)?;
        settings.outline.validate().map_err(MultiWriterError::Precondition)?;
        if state.leaves_done > tree.leaves().len() {
            return Err(MultiWriterError::Precondition("checkpoint has more leaves than the outline".into()));
        }
        Ok(Drafter { tree, elements, plot, settings, providers, state })
    }

    pub fn state(&self) -> &DraftState {
        &self.state
    }

    pub fn into_state(self) -> DraftState {
        self.state
    }

    pub fn next_leaf(&self) -> Option<&'a OutlineNode> {
        self.tree.leaves().get(self.state.leaves_done).copied()
    }

    /// Drafts all passages of `leaf_id`, which must be the next leaf in
    /// depth-first order, then applies any due persona update.
    pub fn draft_leaf(&mut self, leaf_id: &str) -> Result<(), MultiWriterError> {
        let leaves = self.tree.leaves();
        let leaf = match leaves.get(self.state.leaves_done) {
            Some(l) if l.id == leaf_id => *l,
            Some(l) => {
                return Err(MultiWriterError::Precondition(format!("leaf {leaf_id} drafted out of order; next is {}", l.id)))
            }
            None => return Err(MultiWriterError::Precondition("all leaves are drafted".into())),
        };
        let passages = passages_for_leaf(&leaf.id, &self.settings.outline, self.settings.seed);
        for p in 0..passages {
            let so_far = self.state.story_text();
            let persona = self.state.persona().clone();
            let text =
                draft_passage(leaf, &so_far, self.elements, &persona, self.plot, p as u32, self.providers.draft)?;
            let paragraph = if self.settings.multiwriter {
                let mut window: Vec<String> = self.state.paragraphs.iter().map(|p| p.text.clone()).collect();
                window.push(text.clone());
                let refs = reference_sentences(
                    &self.state.injected_texts(),
                    &window,
                    self.settings.mw.repetition_reference_window,
                );
                let index = self.state.paragraphs.len();
                let (text, record) =
                    inject_point(&leaf.id, index, &text, &persona, &refs, &self.settings.mw, self.providers)?;
                Paragraph { leaf_id: leaf.id.clone(), text, injection: Some(record) }
            } else {
                Paragraph { leaf_id: leaf.id.clone(), text, injection: None }
            };
            self.state.paragraphs.push(paragraph);
        }
        self.state.leaves_done += 1;
        let next = leaves.get(self.state.leaves_done);
        let due = match self.settings.mw.update_granularity {
            UpdateGranularity::Leaf => Some(leaf.id.as_str()),
            UpdateGranularity::TopLevelNode => {
                let ends_node = next.is_none_or(|n| n.top_level_id() != leaf.top_level_id());
                ends_node.then(|| leaf.top_level_id())
            }
        };
        if let Some(node) = due {
            self.update_for(node)?;
        }
        Ok(())
    }

    fn update_for(&mut self, node: &str) -> Result<(), MultiWriterError> {
        let in_node = |id: &str| id == node || id.starts_with(&format!("{node}."));
        let node_story: Vec<&str> =
            self.state.paragraphs.iter().filter(|p| in_node(&p.leaf_id)).map(|p| p.text.as_str()).collect();
        let outcome = update_persona(self.state.persona(), &node_story.join("\n\n"), self.providers.chat)?;
        match outcome {
            UpdateOutcome::Updated(p) => self.state.persona_versions.push(p),
            UpdateOutcome::Skipped { reason } => {
                log::warn!("{reason}");
                self.state.warnings.push(reason);
            }
        }
        Ok(())
    }
}

/// Drafts every remaining leaf in order, calling `on_leaf` after each one.
pub fn run_draft(
    tree: &OutlineTree,
    elements: &StoryElements,
    plot: &MainPlotSpec,
    settings: DraftSettings,
    providers: DraftProviders<'_>,
    state: DraftState,
    on_leaf: &mut dyn FnMut(&DraftState),
) -> Result<DraftState, DraftFailure> {
    let fail = |error, state| DraftFailure { error, state: Box::new(state) };
    let mut drafter = match Drafter::new(tree, elements, plot, settings, providers, state.clone()) {
        Ok(d) => d,
        Err(e) => return Err(fail(e, state)),
    };
    while let Some(leaf) = drafter.next_leaf() {
        if let Err(e) = drafter.draft_leaf(&leaf.id) {
            return Err(fail(e, drafter.into_state()));
        }
        on_leaf(drafter.state());
    }
    Ok(drafter.into_state())
}
