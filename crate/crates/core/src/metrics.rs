//! Diversity and relevance metrics: unsmoothed BLEU, leave-one-out word and
//! sentence similarity, story similarity, and persona relevance.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::prompts::{self, vars, TemplateError};
use crate::providers::{ChatProvider, ChatRequest, Embedder, EmbeddingVector, ProviderError};
use crate::specification::{Persona, TraitKind};
use crate::text::tokenize;

/// Whitespace tokens per embedding chunk for long texts.
pub const EMBED_CHUNK_TOKENS: usize = 512;

pub const DEFAULT_NGRAMS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("no trait could be scored")]
    AllTraitsUnscorable,
    #[error("invalid n-gram order {0}")]
    BadNgram(usize),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU over pre-tokenized input, scored against any number of
/// references. Counts are clipped by the maximum count in any reference and
/// the brevity penalty uses the reference length closest to the hypothesis.
pub fn bleu_tokens_multi(hyp: &[String], refs: &[&[String]], n: usize) -> f64 {
    if hyp.is_empty() || refs.is_empty() || refs.iter().all(|r| r.is_empty()) || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let h = ngram_counts(hyp, k);
        let total: usize = h.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, k)).collect();
        let clipped: usize = h
            .iter()
            .map(|(g, &c)| c.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln() / n as f64;
    }
    let h_len = hyp.len() as f64;
    let r_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - hyp.len() as i64).abs(), l))
        .unwrap_or(0) as f64;
    let bp = (1.0 - r_len / h_len).exp().min(1.0);
    bp * log_sum.exp()
}

pub fn bleu_tokens(hyp: &[String], reference: &[String], n: usize) -> f64 {
    bleu_tokens_multi(hyp, &[reference], n)
}

/// `BP * exp(sum_k log(p_k) / n)` with clipped precisions and no smoothing.
pub fn bleu_n(hypothesis: &str, reference: &str, n: usize) -> f64 {
    let h = tokenize(hypothesis);
    let r = tokenize(reference);
    if h.is_empty() || r.is_empty() {
        log::warn!("bleu on an empty {}", if h.is_empty() { "hypothesis" } else { "reference" });
        return 0.0;
    }
    bleu_tokens(&h, &r, n)
}

fn check_ngrams(ngrams: &[usize]) -> Result<(), MetricsError> {
    match ngrams.iter().find(|&&n| n == 0) {
        Some(&n) => Err(MetricsError::BadNgram(n)),
        None if ngrams.is_empty() => Err(MetricsError::BadNgram(0)),
        None => Ok(()),
    }
}

/// Mean BLEU-n over all ordered `(hypothesis, reference)` pairs, per `n`.
pub fn per_ngram_bleu(items: &[String], ngrams: &[usize]) -> Result<BTreeMap<usize, f64>, MetricsError> {
    check_ngrams(ngrams)?;
    let n = items.len();
    if n < 2 {
        return Err(MetricsError::TooFewItems(n));
    }
    let toks: Vec<Vec<String>> = par::map(items, |t| tokenize(t));
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let scores: Vec<Vec<f64>> = par::map(&pairs, |&(i, j)| ngrams.iter().map(|&k| bleu_tokens(&toks[i], &toks[j], k)).collect());
    let mut out = BTreeMap::new();
    for (col, &k) in ngrams.iter().enumerate() {
        let sum: f64 = scores.iter().map(|s| s[col]).sum();
        out.insert(k, sum / pairs.len() as f64);
    }
    Ok(out)
}

/// Leave-one-out word similarity: each item is the hypothesis once against
/// every other item, scored by the mean BLEU over `ngrams`.
pub fn word_similarity(items: &[String], ngrams: &[usize]) -> Result<f64, MetricsError> {
    let per = per_ngram_bleu(items, ngrams)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Embeds each text; texts longer than [`EMBED_CHUNK_TOKENS`] are split,
/// embedded per chunk and mean-pooled. Every result is L2-normalized.
pub fn embed_long(texts: &[String], embed: &dyn Embedder) -> Result<Vec<EmbeddingVector>, MetricsError> {
    let mut chunks = Vec::new();
    let mut owners = Vec::new();
    for (i, t) in texts.iter().enumerate() {
        let words: Vec<&str> = t.split_whitespace().collect();
        if words.is_empty() {
            return Err(ProviderError::InvalidInput(format!("text {i} is empty")).into());
        }
        for c in words.chunks(EMBED_CHUNK_TOKENS) {
            chunks.push(c.join(" "));
            owners.push(i);
        }
    }
    let vectors = embed.embed(&chunks)?;
    let mut grouped: Vec<Vec<EmbeddingVector>> = vec![Vec::new(); texts.len()];
    for (v, i) in vectors.into_iter().zip(owners) {
        grouped[i].push(v);
    }
    grouped
        .into_iter()
        .map(|g| {
            let mut v = EmbeddingVector::mean_pool(&g)?;
            v.normalize();
            Ok(v)
        })
        .collect()
}

fn mean_pairwise_cosine(vs: &[EmbeddingVector], ordered: bool) -> Result<f64, MetricsError> {
    let n = vs.len();
    if n < 2 {
        return Err(MetricsError::TooFewItems(n));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| if ordered { j != i } else { j > i }).map(move |j| (i, j)))
        .collect();
    let cos: Vec<Result<f64, ProviderError>> = par::map(&pairs, |&(i, j)| vs[i].cosine(&vs[j]));
    let mut sum = 0.0;
    for c in cos {
        sum += c?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean embedding cosine over all ordered pairs of distinct items.
pub fn sentence_similarity(items: &[String], embed: &dyn Embedder) -> Result<f64, MetricsError> {
    if items.len() < 2 {
        return Err(MetricsError::TooFewItems(items.len()));
    }
    let vs = embed_long(items, embed)?;
    mean_pairwise_cosine(&vs, true)
}

/// Mean cosine over unordered pairs of full-story embeddings.
pub fn story_similarity(stories: &[String], embed: &dyn Embedder) -> Result<f64, MetricsError> {
    if stories.len() < 2 {
        return Err(MetricsError::TooFewItems(stories.len()));
    }
    let vs = embed_long(stories, embed)?;
    mean_pairwise_cosine(&vs, false)
}

/// Mean over the seven traits of `cos(embed(trait), embed(story))`.
pub fn embedding_relevance(persona: &Persona, story: &str, embed: &dyn Embedder) -> Result<f64, MetricsError> {
    let mut texts: Vec<String> = persona.traits().map(|(_, v)| v.to_string()).collect();
    texts.push(story.to_string());
    let vs = embed_long(&texts, embed)?;
    let (story_v, traits) = vs.split_last().expect("non-empty");
    let mut sum = 0.0;
    for t in traits {
        sum += t.cosine(story_v)?;
    }
    Ok(sum / traits.len() as f64)
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?|\.\d+").expect("valid regex"))
}

/// First number in `reply`, if it lies in `[0, 1]`.
pub fn parse_unit_score(reply: &str) -> Option<f64> {
    let m = number_re().find(reply)?;
    let v: f64 = m.as_str().parse().ok()?;
    (0.0..=1.0).contains(&v).then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRelevance {
    pub mean: f64,
    pub per_trait: BTreeMap<TraitKind, f64>,
    pub skipped: Vec<TraitKind>,
}

/// Asks the chat model to rate each trait's presence in the story.
pub fn llm_relevance(persona: &Persona, story: &str, chat: &dyn ChatProvider) -> Result<LlmRelevance, MetricsError> {
    let reminder = prompts::EVAL_NUMBER_REMINDER.render(&Default::default())?;
    let traits: Vec<(TraitKind, String)> = persona.traits().map(|(k, v)| (k, v.to_string())).collect();
    let results: Vec<Result<(TraitKind, Option<f64>), MetricsError>> = par::map(&traits, |(kind, value)| {
        let prompt = prompts::EVAL_LLM_RELEVANCE.prompt(vars([("trait", value.as_str()), ("story", story)]))?;
        for attempt in 0..2 {
            let p = if attempt == 0 { prompt.clone() } else { prompt.with_suffix(&reminder) };
            let reply = chat.chat(&ChatRequest::from_prompt(&p))?.text;
            if let Some(v) = parse_unit_score(&reply) {
                return Ok((*kind, Some(v)));
            }
        }
        log::warn!("relevance for trait `{kind}` unscorable, skipped");
        Ok((*kind, None))
    });
    let mut per_trait = BTreeMap::new();
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            (k, Some(v)) => {
                per_trait.insert(k, v);
            }
            (k, None) => skipped.push(k),
        }
    }
    if per_trait.is_empty() {
        return Err(MetricsError::AllTraitsUnscorable);
    }
    let mean = per_trait.values().sum::<f64>() / per_trait.len() as f64;
    Ok(LlmRelevance { mean, per_trait, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    Element,
    FullStory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub items: Vec<(String, String)>,
    pub role: CorpusRole,
}

impl Corpus {
    /// Reads every `*.txt` file in `dir`, sorted by file name; ids are file stems.
    pub fn from_dir(dir: &Path, role: CorpusRole) -> Result<Corpus, MetricsError> {
        let io = |source| MetricsError::Io { path: dir.display().to_string(), source };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();
        let mut items = Vec::new();
        for p in paths {
            let text = std::fs::read_to_string(&p)
                .map_err(|source| MetricsError::Io { path: p.display().to_string(), source })?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            items.push((id, text));
        }
        Ok(Corpus { items, role })
    }

    pub fn texts(&self) -> Vec<String> {
        self.items.iter().map(|(_, t)| t.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ws,
    Ss,
    Sim,
    Embrv,
    Llmrv,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ws: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ss: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_ngram: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emb_rv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_rv: Option<f64>,
    pub ngrams: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder_model: Option<String>,
    pub items: usize,
}

/// Writes one CSV row per labelled report, for side-by-side comparison tables.
pub fn write_csv<W: std::io::Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<(), MetricsError> {
    let ngrams: Vec<usize> = {
        let mut all: Vec<usize> = rows.iter().flat_map(|(_, r)| r.per_ngram.keys().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string(), "ws".into(), "ss".into()];
    header.extend(ngrams.iter().map(|n| format!("bleu{n}")));
    header.extend(["similarity", "emb_rv", "llm_rv"].map(String::from));
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (label, r) in rows {
        let mut rec = vec![label.clone(), cell(r.ws), cell(r.ss)];
        rec.extend(ngrams.iter().map(|n| cell(r.per_ngram.get(n).copied())));
        rec.extend([cell(r.similarity), cell(r.emb_rv), cell(r.llm_rv)]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| MetricsError::Io { path: "csv output".into(), source })?;
    Ok(())
}
