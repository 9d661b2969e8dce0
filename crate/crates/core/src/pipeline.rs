//! End-to-end orchestration with stage checkpoints, plus the dataset and
//! evaluation commands.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cs_dataset::{self, BaselineScorer, DatasetParams, DatasetStats, RemoteScorer};
use crate::imagination::{self, ElementMode, ImaginationError, PromptTypes, StoryElements};
use crate::metrics::{self, Metric, MetricsError, MetricsReport, DEFAULT_NGRAMS};
use crate::multiwriter::{
    self, DraftFailure, DraftProviders, DraftSettings, DraftState, FallbackScorer, MWParams, MultiWriterError,
    Paragraph,
};
use crate::planner::{self, OutlineParams, OutlineTree, PlannerError};
use crate::providers::{
    ChatProvider, ContinuationScorer, Embedder, ImageRef, MeteredChat, OpenAiClient, ProviderConfig, ProviderError,
    Providers, ScorerError, Usage,
};
use crate::specification::{self, ClarifiedPlot, MainPlotSpec, Persona, SpecificationError, WhyChainParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvidersConfig {
    pub chat: ProviderConfig,
    /// Model for passage drafting; the chat model when unset.
    pub draft: Option<ProviderConfig>,
    pub vision: ProviderConfig,
    pub image: ProviderConfig,
    pub embed: ProviderConfig,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        ProvidersConfig {
            chat: ProviderConfig::chat_default(),
            draft: None,
            vision: ProviderConfig::chat_default(),
            image: ProviderConfig::image_default(),
            embed: ProviderConfig::embed_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Remote,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub url: String,
    pub timeout_secs: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { kind: ScorerKind::Baseline, url: "http://127.0.0.1:8765".into(), timeout_secs: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub providers: ProvidersConfig,
    /// Replace every provider with the deterministic offline mocks.
    pub mock: bool,
    pub element_mode: ElementMode,
    pub prompt_types: PromptTypes,
    pub why_chain: WhyChainParams,
    pub outline: OutlineParams,
    pub mw: MWParams,
    pub scorer: ScorerConfig,
    /// Text-only element imagination instead of image-guided.
    pub no_ig: bool,
    /// Skip persona injection.
    pub no_mw: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            providers: ProvidersConfig::default(),
            mock: false,
            element_mode: ElementMode::ImageGuided,
            prompt_types: PromptTypes::default(),
            why_chain: WhyChainParams::default(),
            outline: OutlineParams::default(),
            mw: MWParams::default(),
            scorer: ScorerConfig::default(),
            no_ig: false,
            no_mw: false,
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the ablation flags to the settings they imply.
    pub fn normalized(mut self) -> Self {
        if self.no_ig && self.element_mode == ElementMode::ImageGuided {
            self.element_mode = ElementMode::TextOnly;
        }
        if self.no_mw {
            self.outline = self.outline.without_multiwriter();
        }
        self
    }

    /// Checks everything that can be checked before spending a provider call.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::Config(m);
        self.outline.validate().map_err(|e| cfg(format!("outline: {e}")))?;
        self.mw.validate().map_err(|e| cfg(format!("mw: {e}")))?;
        self.why_chain.validate().map_err(|e| cfg(format!("why_chain: {e}")))?;
        if self.no_ig && matches!(self.element_mode, ElementMode::UserImages { .. }) {
            return Err(cfg("no_ig cannot be combined with user images".into()));
        }
        if let ElementMode::UserImages { character, background, main_plot } = &self.element_mode {
            imagination::open_user_images(character, background, main_plot).map_err(|e| cfg(e.to_string()))?;
        }
        if self.scorer.kind == ScorerKind::Remote && !self.scorer.url.starts_with("http") {
            return Err(cfg(format!("scorer.url `{}` is not an http(s) URL", self.scorer.url)));
        }
        if self.scorer.timeout_secs.is_nan() || self.scorer.timeout_secs <= 0.0 {
            return Err(cfg("scorer.timeout_secs must be > 0".into()));
        }
        if !self.mock {
            let p = &self.providers;
            for (name, c) in [("chat", &p.chat), ("vision", &p.vision), ("image", &p.image), ("embed", &p.embed)] {
                c.validate().map_err(|e| cfg(format!("providers.{name}.{e}")))?;
            }
            if let Some(d) = &p.draft {
                d.validate().map_err(|e| cfg(format!("providers.draft.{e}")))?;
            }
        }
        Ok(())
    }

    /// The configuration as recorded in bundles: everything except the
    /// output location, so identical runs produce identical bundles.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Elements,
    Persona,
    Plot,
    Outline,
    Draft,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Elements => "elements",
            Stage::Persona => "persona",
            Stage::Plot => "plot",
            Stage::Outline => "outline",
            Stage::Draft => "draft",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Provider,
    Parse,
    Internal,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, kind: FailureKind, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) => 2,
            PipelineError::Stage { kind: FailureKind::Provider, .. } | PipelineError::Provider(_) => 3,
            PipelineError::Stage { kind: FailureKind::Parse, .. } | PipelineError::Parse(_) => 4,
            PipelineError::Stage { kind: FailureKind::Internal, .. } | PipelineError::Io { .. } => 1,
        }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

fn provider_kind(e: &ProviderError) -> FailureKind {
    match e {
        ProviderError::MalformedResponse(_) => FailureKind::Parse,
        _ => FailureKind::Provider,
    }
}

fn stage_err(stage: Stage, kind: FailureKind, e: impl fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, kind, message: e.to_string() }
}

fn classify_imagination(e: ImaginationError) -> PipelineError {
    let kind = match &e {
        ImaginationError::Provider { source, .. } => provider_kind(source),
        ImaginationError::ImageUnreadable { .. } => return PipelineError::Input(e.to_string()),
        ImaginationError::Template(_) => FailureKind::Internal,
        _ => FailureKind::Parse,
    };
    stage_err(Stage::Elements, kind, e)
}

fn classify_spec(stage: Stage, e: SpecificationError) -> PipelineError {
    let kind = match &e {
        SpecificationError::Provider(p) => provider_kind(p),
        SpecificationError::Template(_) => FailureKind::Internal,
        _ => FailureKind::Parse,
    };
    stage_err(stage, kind, e)
}

fn classify_planner(e: PlannerError) -> PipelineError {
    let kind = match &e {
        PlannerError::Provider(p) => provider_kind(p),
        PlannerError::Template(_) => FailureKind::Internal,
        _ => FailureKind::Parse,
    };
    stage_err(Stage::Outline, kind, e)
}

fn classify_draft(e: &MultiWriterError) -> PipelineError {
    let kind = match e {
        MultiWriterError::Provider(p) => provider_kind(p),
        MultiWriterError::Scorer(_) => FailureKind::Provider,
        MultiWriterError::Template(_) => FailureKind::Internal,
        MultiWriterError::Precondition(_) => FailureKind::Parse,
    };
    stage_err(Stage::Draft, kind, e)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoints {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elements: Option<StoryElements>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub persona: Option<Persona>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clarified: Option<ClarifiedPlot>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<MainPlotSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outline: Option<OutlineTree>,
    /// Progress of the draft, saved after every leaf.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draft: Option<DraftState>,
    #[serde(default)]
    pub draft_complete: bool,
}

impl Checkpoints {
    /// The last stage whose checkpoint is complete.
    pub fn last_completed(&self) -> Option<Stage> {
        if self.draft_complete {
            Some(Stage::Draft)
        } else if self.outline.is_some() {
            Some(Stage::Outline)
        } else if self.plot.is_some() {
            Some(Stage::Plot)
        } else if self.persona.is_some() {
            Some(Stage::Persona)
        } else if self.elements.is_some() {
            Some(Stage::Elements)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Running,
    Stopped { after: Stage },
    Failed { stage: Option<Stage>, message: String },
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: u64,
    pub updated_at: u64,
    pub config: PipelineConfig,
    pub checkpoints: Checkpoints,
    /// Token usage summed over every chat call of the run, across resumes.
    pub usage: Usage,
    pub chat_calls: u64,
    pub status: RunStatus,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, config: PipelineConfig) -> Self {
        let t = now_secs();
        RunManifest {
            run_id: run_id.into(),
            created_at: t,
            updated_at: t,
            config,
            checkpoints: Checkpoints::default(),
            usage: Usage::default(),
            chat_calls: 0,
            status: RunStatus::Running,
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::io(&path, e))
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<(), PipelineError> {
        self.updated_at = now_secs();
        write_json_atomic(&run_dir.join(MANIFEST_FILE), self)
    }
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::io(path, e))?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

/// The final artifact of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryBundle {
    pub seed: u64,
    pub elements: StoryElements,
    pub persona_versions: Vec<Persona>,
    pub main_plot: MainPlotSpec,
    pub outline: OutlineTree,
    pub paragraphs: Vec<Paragraph>,
    /// Paragraphs joined in leaf order.
    pub story: String,
    pub scorer: String,
    pub scorer_downgraded: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub config_echo: Value,
}

impl StoryBundle {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::io(path, e))
    }

    pub fn injection_count(&self) -> usize {
        self.paragraphs.iter().filter(|p| p.injection.is_some()).count()
    }
}

/// Providers for one run, with every chat call metered.
pub struct RunProviders {
    pub base: Providers,
    pub chat: Arc<MeteredChat>,
    pub draft: Arc<MeteredChat>,
    share_draft: bool,
}

impl RunProviders {
    pub fn new(base: Providers, draft: Option<Arc<dyn ChatProvider>>) -> Self {
        let chat = Arc::new(MeteredChat::new(base.chat.clone()));
        let share_draft = draft.is_none();
        let draft = match draft {
            Some(d) => Arc::new(MeteredChat::new(d)),
            None => chat.clone(),
        };
        let metered: Arc<dyn ChatProvider> = chat.clone();
        let base = Providers { chat: metered, ..base };
        RunProviders { base, chat, draft, share_draft }
    }

    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        if config.mock {
            return Ok(Self::new(Providers::mock(config.seed), None));
        }
        let client = |c: &ProviderConfig| OpenAiClient::new(c.clone()).map_err(|e| PipelineError::Config(e.to_string()));
        let p = &config.providers;
        let base = Providers {
            chat: Arc::new(client(&p.chat)?),
            image: Arc::new(client(&p.image)?),
            vision: Arc::new(client(&p.vision)?),
            embed: Arc::new(client(&p.embed)?),
        };
        let draft: Option<Arc<dyn ChatProvider>> = match &p.draft {
            Some(d) => Some(Arc::new(client(d)?)),
            None => None,
        };
        Ok(Self::new(base, draft))
    }

    pub fn usage(&self) -> Usage {
        if self.share_draft {
            self.chat.usage()
        } else {
            self.chat.usage() + self.draft.usage()
        }
    }

    pub fn calls(&self) -> u64 {
        if self.share_draft {
            self.chat.calls()
        } else {
            self.chat.calls() + self.draft.calls()
        }
    }
}

fn build_scorer(config: &ScorerConfig, embed: Arc<dyn Embedder>) -> (Arc<dyn ContinuationScorer>, Option<Arc<FallbackScorer>>) {
    let baseline: Arc<dyn ContinuationScorer> = Arc::new(BaselineScorer::new(embed));
    match config.kind {
        ScorerKind::Baseline => (baseline, None),
        ScorerKind::Remote => {
            let remote = RemoteScorer::new(config.url.clone(), Duration::from_secs_f64(config.timeout_secs));
            let f = Arc::new(FallbackScorer::new(Arc::new(remote), baseline));
            (f.clone(), Some(f))
        }
    }
}

/// Options for a single invocation that are not part of the run config.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop cleanly after this stage is checkpointed.
    pub stop_after: Option<Stage>,
}

#[derive(Debug)]
pub enum RunOutcome {
    Completed { bundle: Box<StoryBundle>, bundle_path: PathBuf },
    Stopped { after: Stage },
}

pub fn new_run_id(seed: u64) -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("run-{seed}-{nanos:x}-{:x}", std::process::id())
}

/// Starts a new run under `config.output_dir/run_id`.
pub fn cmd_generate(
    config: PipelineConfig,
    run_id: Option<String>,
    providers: Option<RunProviders>,
    opts: RunOptions,
) -> Result<(PathBuf, RunOutcome), PipelineError> {
    let config = config.normalized();
    config.validate()?;
    let run_id = run_id.unwrap_or_else(|| new_run_id(config.seed));
    let run_dir = config.output_dir.join(&run_id);
    if run_dir.join(MANIFEST_FILE).exists() {
        return Err(PipelineError::Config(format!("run `{run_id}` already exists; use resume")));
    }
    std::fs::create_dir_all(&run_dir).map_err(|e| PipelineError::io(&run_dir, e))?;
    let providers = match providers {
        Some(p) => p,
        None => RunProviders::from_config(&config)?,
    };
    let mut manifest = RunManifest::new(run_id, config);
    manifest.save(&run_dir)?;
    let outcome = execute(&mut manifest, &run_dir, &providers, opts)?;
    Ok((run_dir, outcome))
}

/// Same as [`cmd_generate`] with the three elements taken from user images.
pub fn cmd_interactive(
    mut config: PipelineConfig,
    images: [PathBuf; 3],
    run_id: Option<String>,
    providers: Option<RunProviders>,
    opts: RunOptions,
) -> Result<(PathBuf, RunOutcome), PipelineError> {
    let [character, background, main_plot] = images;
    config.element_mode = ElementMode::UserImages { character, background, main_plot };
    cmd_generate(config, run_id, providers, opts)
}

/// Continues a run from its last completed checkpoint.
pub fn cmd_resume(run_dir: &Path, providers: Option<RunProviders>, opts: RunOptions) -> Result<RunOutcome, PipelineError> {
    let mut manifest = RunManifest::load(run_dir)?;
    manifest.config.validate()?;
    let providers = match providers {
        Some(p) => p,
        None => RunProviders::from_config(&manifest.config)?,
    };
    manifest.status = RunStatus::Running;
    execute(&mut manifest, run_dir, &providers, opts)
}

struct Session<'a> {
    manifest: &'a mut RunManifest,
    run_dir: &'a Path,
    providers: &'a RunProviders,
    base_usage: Usage,
    base_calls: u64,
}

impl Session<'_> {
    fn save(&mut self) -> Result<(), PipelineError> {
        self.manifest.usage = self.base_usage + self.providers.usage();
        self.manifest.chat_calls = self.base_calls + self.providers.calls();
        self.manifest.save(self.run_dir)
    }

    fn fail(&mut self, e: PipelineError) -> PipelineError {
        let stage = match &e {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        };
        self.manifest.status = RunStatus::Failed { stage, message: e.to_string() };
        if let Err(save) = self.save() {
            log::error!("could not record failure: {save}");
        }
        e
    }
}

fn execute(
    manifest: &mut RunManifest,
    run_dir: &Path,
    providers: &RunProviders,
    opts: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let base_usage = manifest.usage;
    let base_calls = manifest.chat_calls;
    let mut s = Session { manifest, run_dir, providers, base_usage, base_calls };
    match run_stages(&mut s, opts) {
        Ok(o) => Ok(o),
        Err(e) => Err(s.fail(e)),
    }
}

fn run_stages(s: &mut Session<'_>, opts: RunOptions) -> Result<RunOutcome, PipelineError> {
    let config = s.manifest.config.clone();
    let p = &s.providers.base;
    let stop = |s: &mut Session<'_>, stage: Stage| -> Result<Option<RunOutcome>, PipelineError> {
        if opts.stop_after == Some(stage) {
            s.manifest.status = RunStatus::Stopped { after: stage };
            s.save()?;
            log::info!("stopped after {stage}");
            return Ok(Some(RunOutcome::Stopped { after: stage }));
        }
        Ok(None)
    };

    if s.manifest.checkpoints.elements.is_none() {
        log::info!("imagining story elements ({:?})", config.element_mode);
        let elements = match &config.element_mode {
            ElementMode::UserImages { character, background, main_plot } => {
                let [c, b, m]: [ImageRef; 3] =
                    imagination::open_user_images(character, background, main_plot).map_err(classify_imagination)?;
                imagination::describe_user_images(&c, &b, &m, p).map_err(classify_imagination)?
            }
            mode => imagination::imagine_all(mode, &config.prompt_types, p).map_err(classify_imagination)?,
        };
        s.manifest.checkpoints.elements = Some(elements);
        s.save()?;
    }
    if let Some(o) = stop(s, Stage::Elements)? {
        return Ok(o);
    }
    let elements = s.manifest.checkpoints.elements.clone().expect("checkpointed");

    if s.manifest.checkpoints.persona.is_none() {
        log::info!("specifying persona");
        let persona = specification::specify_persona(&elements.character, &elements.background, p.chat.as_ref())
            .map_err(|e| classify_spec(Stage::Persona, e))?;
        s.manifest.checkpoints.persona = Some(persona);
        s.save()?;
    }
    if let Some(o) = stop(s, Stage::Persona)? {
        return Ok(o);
    }
    let persona = s.manifest.checkpoints.persona.clone().expect("checkpointed");

    if s.manifest.checkpoints.plot.is_none() {
        log::info!("clarifying the main plot");
        let clarified = match s.manifest.checkpoints.clarified.clone() {
            Some(c) => c,
            None => {
                let c = specification::chain_of_ask_why(
                    &elements.main_plot.description,
                    &persona,
                    &config.why_chain,
                    p.chat.as_ref(),
                )
                .map_err(|e| classify_spec(Stage::Plot, e))?;
                s.manifest.checkpoints.clarified = Some(c.clone());
                s.save()?;
                c
            }
        };
        let plot = specification::specify_main_plot(&clarified, &persona, p.chat.as_ref())
            .map_err(|e| classify_spec(Stage::Plot, e))?;
        s.manifest.checkpoints.plot = Some(plot);
        s.save()?;
    }
    if let Some(o) = stop(s, Stage::Plot)? {
        return Ok(o);
    }
    let plot = s.manifest.checkpoints.plot.clone().expect("checkpointed");

    if s.manifest.checkpoints.outline.is_none() {
        log::info!("planning the outline");
        let tree = planner::build_outline(&elements, &persona, &plot, &config.outline, p.chat.as_ref())
            .map_err(classify_planner)?;
        s.manifest.checkpoints.outline = Some(tree);
        s.save()?;
    }
    if let Some(o) = stop(s, Stage::Outline)? {
        return Ok(o);
    }
    let tree = s.manifest.checkpoints.outline.clone().expect("checkpointed");

    let (scorer, fallback) = build_scorer(&config.scorer, p.embed.clone());
    if !s.manifest.checkpoints.draft_complete {
        let state = s.manifest.checkpoints.draft.clone().unwrap_or_else(|| DraftState::new(persona.clone()));
        if let Some(f) = &fallback {
            if state.scorer_downgraded {
                f.force_downgrade();
            }
        }
        log::info!("drafting {} leaves ({} done)", tree.leaves().len(), state.leaves_done);
        let settings =
            DraftSettings { mw: config.mw, outline: config.outline, multiwriter: !config.no_mw, seed: config.seed };
        let dp = DraftProviders {
            draft: s.providers.draft.as_ref(),
            chat: s.providers.chat.as_ref(),
            embed: p.embed.as_ref(),
            scorer: scorer.as_ref(),
        };
        let downgraded = || fallback.as_ref().is_some_and(|f| f.downgraded());
        let mut save_err = None;
        let result = {
            let mut on_leaf = |st: &DraftState| {
                let mut st = st.clone();
                st.scorer_downgraded = downgraded();
                s.manifest.checkpoints.draft = Some(st);
                if let Err(e) = s.save() {
                    save_err.get_or_insert(e);
                }
            };
            multiwriter::run_draft(&tree, &elements, &plot, settings, dp, state, &mut on_leaf)
        };
        if let Some(e) = save_err {
            return Err(e);
        }
        match result {
            Ok(mut st) => {
                st.scorer_downgraded = downgraded();
                s.manifest.checkpoints.draft = Some(st);
                s.manifest.checkpoints.draft_complete = true;
                s.save()?;
            }
            Err(DraftFailure { error, state }) => {
                let mut st = *state;
                st.scorer_downgraded = downgraded();
                s.manifest.checkpoints.draft = Some(st);
                return Err(classify_draft(&error));
            }
        }
    }
    if let Some(o) = stop(s, Stage::Draft)? {
        return Ok(o);
    }
    let draft = s.manifest.checkpoints.draft.clone().expect("checkpointed");

    let bundle = StoryBundle {
        seed: config.seed,
        elements,
        story: draft.story_text(),
        persona_versions: draft.persona_versions,
        main_plot: plot,
        outline: tree,
        paragraphs: draft.paragraphs,
        scorer: match config.scorer.kind {
            ScorerKind::Remote => "remote".into(),
            ScorerKind::Baseline => "baseline".into(),
        },
        scorer_downgraded: draft.scorer_downgraded,
        warnings: draft.warnings,
        config_echo: config.echo(),
    };
    let bundle_path = s.run_dir.join(BUNDLE_FILE);
    write_json_atomic(&bundle_path, &bundle)?;
    s.manifest.status = RunStatus::Completed;
    s.save()?;
    Ok(RunOutcome::Completed { bundle: Box::new(bundle), bundle_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsDataOutput {
    pub dataset: PathBuf,
    pub stats: PathBuf,
    pub summary: DatasetStats,
}

#[derive(Serialize)]
struct StatsFile<'a> {
    seed: u64,
    params: &'a DatasetParams,
    examples: usize,
    #[serde(flatten)]
    stats: &'a DatasetStats,
}

/// Builds `dataset.jsonl` and `stats.json` in `out_dir` from a story directory.
pub fn cmd_csdata(corpus_dir: &Path, out_dir: &Path, params: &DatasetParams, seed: u64) -> Result<CsDataOutput, PipelineError> {
    params.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let loaded = cs_dataset::load_corpus(corpus_dir).map_err(|e| PipelineError::Input(e.to_string()))?;
    let mut ds = cs_dataset::build_dataset(&loaded.docs, params, seed).map_err(|e| PipelineError::Input(e.to_string()))?;
    ds.stats.skipped_files = loaded.skipped;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let dataset = out_dir.join("dataset.jsonl");
    let file = std::fs::File::create(&dataset).map_err(|e| PipelineError::io(&dataset, e))?;
    cs_dataset::write_jsonl(std::io::BufWriter::new(file), &ds.examples).map_err(|e| PipelineError::io(&dataset, e))?;
    let stats = out_dir.join("stats.json");
    write_json_atomic(&stats, &StatsFile { seed, params, examples: ds.examples.len(), stats: &ds.stats })?;
    Ok(CsDataOutput { dataset, stats, summary: ds.stats })
}

/// Evaluation input: plain-text items and, for relevance metrics, story
/// bundles (each contributes its story text and its initial persona).
#[derive(Debug, Clone, Default)]
pub struct EvalCorpus {
    pub items: Vec<(String, String)>,
    pub personas: Vec<(Persona, String)>,
}

impl EvalCorpus {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| PipelineError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut out = EvalCorpus::default();
        for p in paths {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            match p.extension().and_then(|e| e.to_str()) {
                Some("txt") => {
                    let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
                    if text.trim().is_empty() {
                        log::warn!("{}: empty, skipped", p.display());
                        continue;
                    }
                    out.items.push((id, text));
                }
                Some("json") => {
                    let b = StoryBundle::load(&p)?;
                    let persona = b.persona_versions.first().cloned().ok_or_else(|| {
                        PipelineError::Input(format!("{}: bundle has no persona", p.display()))
                    })?;
                    out.personas.push((persona, b.story.clone()));
                    out.items.push((id, b.story));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub metrics: Vec<Metric>,
    pub ngrams: Vec<usize>,
}

impl Default for EvalRequest {
    fn default() -> Self {
        EvalRequest { metrics: vec![Metric::Ws, Metric::Ss], ngrams: DEFAULT_NGRAMS.to_vec() }
    }
}

fn metric_err(e: MetricsError) -> PipelineError {
    match e {
        MetricsError::Provider(p) if provider_kind(&p) == FailureKind::Provider => PipelineError::Provider(p.to_string()),
        MetricsError::Provider(p) => PipelineError::Parse(p.to_string()),
        MetricsError::AllTraitsUnscorable => PipelineError::Parse(e.to_string()),
        other => PipelineError::Input(other.to_string()),
    }
}

/// Computes the requested metrics over an evaluation corpus.
pub fn evaluate(
    corpus: &EvalCorpus,
    req: &EvalRequest,
    embed: &dyn Embedder,
    chat: &dyn ChatProvider,
) -> Result<MetricsReport, PipelineError> {
    let texts: Vec<String> = corpus.items.iter().map(|(_, t)| t.clone()).collect();
    let mut report =
        MetricsReport { ngrams: req.ngrams.clone(), items: texts.len(), ..Default::default() };
    for m in &req.metrics {
        match m {
            Metric::Ws => {
                let per = metrics::per_ngram_bleu(&texts, &req.ngrams).map_err(metric_err)?;
                report.ws = Some(per.values().sum::<f64>() / per.len() as f64);
                report.per_ngram = per;
            }
            Metric::Ss => {
                report.ss = Some(metrics::sentence_similarity(&texts, embed).map_err(metric_err)?);
                report.embedder_model = Some(embed.model_id().to_string());
            }
            Metric::Sim => {
                report.similarity = Some(metrics::story_similarity(&texts, embed).map_err(metric_err)?);
                report.embedder_model = Some(embed.model_id().to_string());
            }
            Metric::Embrv | Metric::Llmrv => {
                if corpus.personas.is_empty() {
                    return Err(PipelineError::Input("relevance metrics need story bundle (.json) files".into()));
                }
                let mut sum = 0.0;
                for (persona, story) in &corpus.personas {
                    sum += if *m == Metric::Embrv {
                        metrics::embedding_relevance(persona, story, embed).map_err(metric_err)?
                    } else {
                        metrics::llm_relevance(persona, story, chat).map_err(metric_err)?.mean
                    };
                }
                let mean = sum / corpus.personas.len() as f64;
                if *m == Metric::Embrv {
                    report.emb_rv = Some(mean);
                    report.embedder_model = Some(embed.model_id().to_string());
                } else {
                    report.llm_rv = Some(mean);
                }
            }
        }
    }
    Ok(report)
}

/// Remote scorer health, for scripting around the scoring service.
pub fn scorer_health(config: &ScorerConfig) -> Result<(), ScorerError> {
    RemoteScorer::new(config.url.clone(), Duration::from_secs_f64(config.timeout_secs)).health()
}
