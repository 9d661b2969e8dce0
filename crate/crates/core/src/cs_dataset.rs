//! Continuation-score corpus: chunk stories into paragraphs, build golden,
//! misordered and hard-negative pairs, assign story-level splits, and the
//! scorers (remote service and embedding baseline) used during drafting.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::rng_for;
use crate::par;
use crate::providers::{ContinuationScorer, Embedder, ScorerError};
use crate::text::{after_first_sentence, first_sentence, last_sentences, split_sentences, word_count};

pub const MIN_TARGET_WORDS: usize = 20;

#[derive(Debug, Error)]
pub enum CsDatasetError {
    #[error("story `{story_id}` yields {chunks} chunk(s); need at least 2")]
    TooShort { story_id: String, chunks: usize },
    #[error("target_words must be >= {MIN_TARGET_WORDS}, got {0}")]
    BadTarget(usize),
    #[error("duplicate story id `{0}`")]
    DuplicateId(String),
    #[error("need at least 3 stories to split, got {0}")]
    TooFewStories(usize),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryDocument {
    pub id: String,
    pub text: String,
    pub source_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub story_id: String,
    pub index: usize,
    pub text: String,
    pub first_sentence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExampleKind {
    Golden,
    Negative,
    HardNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One line of the dataset JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CSExample {
    pub prev: String,
    pub next: String,
    pub label: f64,
    pub kind: ExampleKind,
    pub story_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub target_words: usize,
    pub negatives_per_golden: usize,
    pub hard_fraction: f64,
    pub split_counts: (usize, usize, usize),
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams { target_words: 200, negatives_per_golden: 1, hard_fraction: 0.5, split_counts: (1000, 100, 100) }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<(), CsDatasetError> {
        if self.target_words < MIN_TARGET_WORDS {
            return Err(CsDatasetError::BadTarget(self.target_words));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(CsDatasetError::Invalid(format!("hard_fraction {} not in [0, 1]", self.hard_fraction)));
        }
        Ok(())
    }
}

/// Greedy sentence-aligned packing: whole sentences are appended until the
/// chunk reaches `target_words`, then a new chunk starts.
pub fn chunk_story(doc: &StoryDocument, target_words: usize) -> Result<Vec<Chunk>, CsDatasetError> {
    if target_words < MIN_TARGET_WORDS {
        return Err(CsDatasetError::BadTarget(target_words));
    }
    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut words = 0;
    let push = |sentences: &mut Vec<&str>, chunks: &mut Vec<Chunk>| {
        let text = sentences.join(" ");
        chunks.push(Chunk {
            story_id: doc.id.clone(),
            index: chunks.len(),
            first_sentence: first_sentence(&text).to_string(),
            text,
        });
        sentences.clear();
    };
    for s in split_sentences(&doc.text) {
        current.push(s);
        words += word_count(s);
        if words >= target_words {
            push(&mut current, &mut chunks);
            words = 0;
        }
    }
    if !current.is_empty() {
        push(&mut current, &mut chunks);
    }
    if chunks.len() < 2 {
        return Err(CsDatasetError::TooShort { story_id: doc.id.clone(), chunks: chunks.len() });
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub goldens: usize,
    pub negatives: usize,
    pub hard_negatives: usize,
    /// Negatives that could not be drawn because the story had too few chunks.
    pub negative_shortfall: usize,
    /// Hard-negative conversions abandoned because the spliced text would not
    /// re-split to the successor's first sentence.
    pub hard_fallbacks: usize,
}

impl std::ops::AddAssign for PairStats {
    fn add_assign(&mut self, o: PairStats) {
        self.goldens += o.goldens;
        self.negatives += o.negatives;
        self.hard_negatives += o.hard_negatives;
        self.negative_shortfall += o.negative_shortfall;
        self.hard_fallbacks += o.hard_fallbacks;
    }
}

fn splice_hard(successor: &Chunk, decoy: &Chunk) -> Option<String> {
    let rest = after_first_sentence(&decoy.text);
    if rest.is_empty() {
        return None;
    }
    let next = format!("{} {}", successor.first_sentence, rest);
    (first_sentence(&next) == successor.first_sentence).then_some(next)
}

/// Goldens for every consecutive pair plus seeded within-story negatives.
pub fn build_pairs(
    chunks: &[Chunk],
    negatives_per_golden: usize,
    hard_fraction: f64,
    seed: u64,
    split: Split,
) -> (Vec<CSExample>, PairStats) {
    let mut stats = PairStats::default();
    if chunks.len() < 2 {
        return (Vec::new(), stats);
    }
    let story_id = chunks[0].story_id.clone();
    let mut rng = rng_for(seed, &["pairs", &story_id]);
    let example = |prev: &Chunk, next: String, kind| CSExample {
        prev: prev.text.clone(),
        next,
        label: if kind == ExampleKind::Golden { 1.0 } else { 0.0 },
        kind,
        story_id: story_id.clone(),
        split,
    };
    let mut out = Vec::new();
    // (index into out, golden index, decoy index)
    let mut negatives = Vec::new();
    for i in 0..chunks.len() - 1 {
        out.push(example(&chunks[i], chunks[i + 1].text.clone(), ExampleKind::Golden));
        stats.goldens += 1;
        let mut pool: Vec<usize> = (0..chunks.len()).filter(|&j| j != i && j != i + 1).collect();
        pool.shuffle(&mut rng);
        let take = negatives_per_golden.min(pool.len());
        stats.negative_shortfall += negatives_per_golden - take;
        for &j in &pool[..take] {
            negatives.push((out.len(), i, j));
            out.push(example(&chunks[i], chunks[j].text.clone(), ExampleKind::Negative));
        }
    }
    let hard_target = (hard_fraction * negatives.len() as f64).round() as usize;
    negatives.shuffle(&mut rng);
    for &(pos, i, j) in negatives.iter().take(hard_target) {
        match splice_hard(&chunks[i + 1], &chunks[j]) {
            Some(next) => {
                out[pos].next = next;
                out[pos].kind = ExampleKind::HardNegative;
            }
            None => stats.hard_fallbacks += 1,
        }
    }
    stats.hard_negatives = out.iter().filter(|e| e.kind == ExampleKind::HardNegative).count();
    stats.negatives = out.iter().filter(|e| e.kind == ExampleKind::Negative).count();
    (out, stats)
}

/// Story-level split assignment. With fewer stories than `counts` sums to,
/// dev and test each get `max(1, round(n / 12))` and the rest train.
/// Surplus stories beyond the requested counts are left unassigned.
pub fn split_corpus(
    ids: &[String],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<BTreeMap<String, Split>, CsDatasetError> {
    let n = ids.len();
    if n < 3 {
        return Err(CsDatasetError::TooFewStories(n));
    }
    let (train, dev, test) = if n >= counts.0 + counts.1 + counts.2 {
        counts
    } else {
        let small = ((n as f64 / 12.0).round() as usize).max(1);
        log::warn!("corpus has {n} stories; using a 10:1:1 split ({}/{small}/{small})", n - 2 * small);
        (n - 2 * small, small, small)
    };
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.shuffle(&mut rng_for(seed, &["split"]));
    let mut out = BTreeMap::new();
    for (pos, id) in order.into_iter().enumerate() {
        let split = if pos < train {
            Split::Train
        } else if pos < train + dev {
            Split::Dev
        } else if pos < train + dev + test {
            Split::Test
        } else {
            continue;
        };
        out.insert(id.clone(), split);
    }
    if out.len() < n {
        log::warn!("{} stories beyond the requested split sizes were left out", n - out.len());
    }
    Ok(out)
}

/// Stories read from a directory plus the files that could not be used.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub docs: Vec<StoryDocument>,
    /// `(story id, reason)` for empty or non-UTF-8 files.
    pub skipped: Vec<(String, String)>,
}

/// Reads every regular file in `dir` as one story; the id is the file stem.
/// Empty and undecodable files are skipped and reported.
pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus, CsDatasetError> {
    let io = |path: &Path, source| CsDatasetError::Io { path: path.display().to_string(), source };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut seen = HashSet::new();
    let mut out = LoadedCorpus::default();
    for p in paths {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if !seen.insert(id.clone()) {
            return Err(CsDatasetError::DuplicateId(id));
        }
        let bytes = std::fs::read(&p).map_err(|e| io(&p, e))?;
        match String::from_utf8(bytes) {
            Ok(text) if text.trim().is_empty() => {
                log::warn!("{}: empty, skipped", p.display());
                out.skipped.push((id, "empty".into()));
            }
            Ok(text) => out.docs.push(StoryDocument { id, text, source_path: Some(p) }),
            Err(_) => {
                log::warn!("{}: not UTF-8, skipped", p.display());
                out.skipped.push((id, "not utf-8".into()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub stories: usize,
    /// Files skipped at load time, with the reason.
    #[serde(default)]
    pub skipped_files: Vec<(String, String)>,
    pub skipped_too_short: Vec<String>,
    pub unassigned: usize,
    pub pairs: PairStats,
    pub per_split: BTreeMap<Split, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<CSExample>,
    pub stats: DatasetStats,
}

/// Chunks, splits and pairs a corpus. Stories are processed in parallel;
/// the output is ordered by story id and identical for a fixed seed.
pub fn build_dataset(docs: &[StoryDocument], params: &DatasetParams, seed: u64) -> Result<Dataset, CsDatasetError> {
    params.validate()?;
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(CsDatasetError::DuplicateId(d.id.clone()));
        }
    }
    let chunked: Vec<(String, Result<Vec<Chunk>, CsDatasetError>)> =
        par::map(docs, |d| (d.id.clone(), chunk_story(d, params.target_words)));
    let mut usable = Vec::new();
    let mut stats = DatasetStats { stories: docs.len(), ..Default::default() };
    for (id, r) in chunked {
        match r {
            Ok(c) => usable.push((id, c)),
            Err(CsDatasetError::TooShort { .. }) => {
                log::warn!("story `{id}` is too short to pair, skipped");
                stats.skipped_too_short.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    usable.sort_by(|a, b| a.0.cmp(&b.0));
    let ids: Vec<String> = usable.iter().map(|(id, _)| id.clone()).collect();
    let splits = split_corpus(&ids, params.split_counts, seed)?;
    stats.unassigned = ids.len() - splits.len();
    let assigned: Vec<(Vec<Chunk>, Split)> =
        usable.into_iter().filter_map(|(id, c)| splits.get(&id).map(|s| (c, *s))).collect();
    let built = par::map(&assigned, |(chunks, split)| {
        build_pairs(chunks, params.negatives_per_golden, params.hard_fraction, seed, *split)
    });
    let mut examples = Vec::new();
    for (ex, st) in built {
        for e in &ex {
            *stats.per_split.entry(e.split).or_insert(0) += 1;
        }
        stats.pairs += st;
        examples.extend(ex);
    }
    Ok(Dataset { examples, stats })
}

pub fn write_jsonl<W: Write>(mut out: W, examples: &[CSExample]) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl(text: &str) -> Result<Vec<CSExample>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Offline stand-in for the trained scorer:
/// `(cos(embed(last two sentences of prev)), embed(cand)) + 1) / 2`.
pub struct BaselineScorer {
    embed: Arc<dyn Embedder>,
}

impl BaselineScorer {
    pub fn new(embed: Arc<dyn Embedder>) -> Self {
        BaselineScorer { embed }
    }
}

impl ContinuationScorer for BaselineScorer {
    fn score(&self, prev: &str, cand: &str) -> Result<f64, ScorerError> {
        let tail = last_sentences(prev, 2);
        let tail = if tail.trim().is_empty() { prev.to_string() } else { tail };
        let v = self.embed.embed(&[tail, cand.to_string()])?;
        let cos = v[0].cosine(&v[1])?;
        Ok(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
    }

    fn name(&self) -> &str {
        "baseline"
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prev: &'a str,
    cand: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// Client for the scoring service: `POST /score {prev, cand} -> {score}`.
pub struct RemoteScorer {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        RemoteScorer { base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }

    /// `GET /healthz`; any 2xx is healthy.
    pub fn health(&self) -> Result<(), ScorerError> {
        let url = format!("{}/healthz", self.base_url);
        let resp = self.agent.get(&url).call().map_err(|e| ScorerError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(ScorerError::Unavailable(format!("{url}: HTTP {status}")))
        }
    }
}

impl ContinuationScorer for RemoteScorer {
    fn score(&self, prev: &str, cand: &str) -> Result<f64, ScorerError> {
        let url = format!("{}/score", self.base_url);
        let unavailable = |m: String| ScorerError::Unavailable(format!("{url}: {m}"));
        let mut resp =
            self.agent.post(&url).send_json(ScoreRequest { prev, cand }).map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| unavailable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(unavailable(format!("HTTP {status}: {body}")));
        }
        let parsed: ScoreResponse =
            serde_json::from_str(&body).map_err(|e| unavailable(format!("bad reply {body:?}: {e}")))?;
        if !parsed.score.is_finite() {
            return Err(unavailable(format!("non-finite score in {body:?}")));
        }
        if !(0.0..=1.0).contains(&parsed.score) {
            log::warn!("scorer returned {} outside [0, 1]; clamped", parsed.score);
        }
        Ok(parsed.score.clamp(0.0, 1.0))
    }

    fn name(&self) -> &str {
        "remote"
    }
}

/// Draws `n` random story-like documents; only used to exercise the
/// dataset path offline.
pub fn synthetic_corpus(n: usize, sentences: usize, seed: u64) -> Vec<StoryDocument> {
    (0..n)
        .map(|i| {
            let id = format!("story{i:04}");
            let mut t = crate::providers::mock::MockText::new(seed, &["corpus", &id]);
            let count = t.rng().gen_range(sentences..=sentences * 2);
            StoryDocument { text: t.sentences(count), id, source_path: None }
        })
        .collect()
}
