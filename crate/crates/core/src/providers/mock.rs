//! Offline providers. Every reply is a pure function of the template id,
//! the request text, the sample index and the seed, so two runs with equal
//! inputs produce byte-identical output.
//!
//! Tests can override any reply with a responder closure; returning `None`
//! from the closure falls through to the built-in generator.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_texts, ChatProvider, ChatRequest, ChatResponse, Embedder, EmbeddingVector, ImageGenerator, ImageRef,
    ImageSource, ProviderError, Usage, VisionProvider,
};
use crate::hashing::{hash_u64, rng_for, sha256_hex};
use crate::prompts::Prompt;
use crate::text::word_count;

pub const MOCK_EMBED_DIM: usize = 256;
pub const MOCK_EMBED_MODEL: &str = "mock-hashed-bow-256";

const NAMES: &[&str] = &[
    "Hiro", "Elena", "Mara", "Tomas", "Aiko", "Rafael", "Nadia", "Kenji", "Lucia", "Oskar", "Yuna", "Idris",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th", "br", "kr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Pseudo-word text generator. The vocabulary is large enough that
/// independent sentences rarely share a bigram.
pub struct MockText {
    rng: ChaCha8Rng,
}

impl MockText {
    pub fn new(seed: u64, parts: &[&str]) -> Self {
        MockText { rng: rng_for(seed, parts) }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn word(&mut self) -> String {
        let syllables = self.rng.gen_range(2..=3);
        (0..syllables)
            .map(|_| {
                let o = ONSETS[self.rng.gen_range(0..ONSETS.len())];
                let v = VOWELS[self.rng.gen_range(0..VOWELS.len())];
                format!("{o}{v}")
            })
            .collect()
    }

    pub fn name(&mut self) -> String {
        NAMES[self.rng.gen_range(0..NAMES.len())].to_string()
    }

    /// A sentence body of `min..=max` words without terminator.
    pub fn clause(&mut self, min: usize, max: usize) -> String {
        let n = self.rng.gen_range(min..=max);
        (0..n).map(|_| self.word()).collect::<Vec<_>>().join(" ")
    }

    pub fn sentence(&mut self) -> String {
        let mut s = self.clause(6, 12);
        if let Some(first) = s.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        s.push('.');
        s
    }

    pub fn sentences(&mut self, n: usize) -> String {
        (0..n).map(|_| self.sentence()).collect::<Vec<_>>().join(" ")
    }
}

type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

pub struct MockChat {
    seed: u64,
    responder: Option<Arc<Responder>>,
    calls: AtomicU64,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        MockChat { seed, responder: None, calls: AtomicU64::new(0) }
    }

    pub fn with_responder(seed: u64, f: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        MockChat { seed, responder: Some(Arc::new(f)), calls: AtomicU64::new(0) }
    }

    /// Replies to `template_id` with `replies` in order (repeating the last
    /// one once exhausted); other templates use the built-in generator.
    /// Only use for sequentially issued calls.
    pub fn scripted(seed: u64, template_id: &str, replies: Vec<String>) -> Self {
        let id = template_id.to_string();
        let counter = AtomicU64::new(0);
        Self::with_responder(seed, move |req| {
            if req.template_id.as_deref() != Some(id.as_str()) || replies.is_empty() {
                return None;
            }
            let i = counter.fetch_add(1, Ordering::SeqCst) as usize;
            Some(replies[i.min(replies.len() - 1)].clone())
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn generate(&self, req: &ChatRequest) -> String {
        let template = req.template_id.as_deref().unwrap_or("");
        let sample = req.sample.to_string();
        let body = req.joined_text();
        let mut t = MockText::new(self.seed, &["chat", template, &body, &sample]);
        let var = |k: &str| req.vars.get(k).cloned().unwrap_or_default();
        let num = |k: &str, default: usize| req.vars.get(k).and_then(|v| v.parse().ok()).unwrap_or(default);
        match template {
            "text_only.character" => {
                let name = t.name();
                format!("{name} : {}", t.sentences(3))
            }
            "persona.questionnaire" => {
                let mut out = vec![format!("1. My dark secret is that {}", t.sentence().to_lowercase())];
                for i in 2..=7 {
                    let n = t.rng().gen_range(1..=2);
                    out.push(format!("{i}. {}", t.sentences(n)));
                }
                out.join("\n")
            }
            "persona.update" => (1..=6).map(|i| format!("{i}. {}", t.sentences(2))).collect::<Vec<_>>().join("\n"),
            "why.step1" => {
                let max = num("max_points", 3).max(1);
                let n = t.rng().gen_range(1..=max);
                (1..=n).map(|i| format!("{i}. Why {}?", t.clause(4, 8))).collect::<Vec<_>>().join("\n")
            }
            "why.step3" => {
                if t.rng().gen_bool(0.5) {
                    "Yes.".into()
                } else {
                    "No.".into()
                }
            }
            "plot.specify" => {
                let name = var("name");
                format!(
                    "1. {}\n2. {}\n3. The story of {name} who {}. {}",
                    t.sentences(3),
                    t.sentences(2),
                    t.clause(5, 9),
                    t.sentences(4)
                )
            }
            "plan.outline" => {
                let min = num("min_children", 2).max(1);
                let pref = num("preferred_max_children", 4).max(min);
                let depth = num("max_depth", 2);
                let top = t.rng().gen_range(min..=pref);
                let mut lines = Vec::new();
                for i in 1..=top {
                    lines.push(format!("{i}. {}", t.sentence()));
                    if depth >= 2 {
                        let kids = t.rng().gen_range(min..=pref);
                        for j in 1..=kids {
                            lines.push(format!("    {i}.{j}. {}", t.sentence()));
                        }
                    }
                }
                lines.join("\n")
            }
            "draft.passage" => {
                let name = var("name");
                let n = t.rng().gen_range(3..=5);
                format!("{} I am {name}, and I {}. {}", t.sentences(1), t.clause(5, 9), t.sentences(n))
            }
            "mw.candidate" => {
                let n = t.rng().gen_range(1..=2);
                format!("I {}. {}", t.clause(6, 10), t.sentences(n - 1)).trim().to_string()
            }
            "eval.llm_relevance" => format!("{:.2}", t.rng().gen_range(0.0..=1.0)),
            _ => t.sentences(3),
        }
    }
}

impl ChatProvider for MockChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        if request.messages.is_empty() {
            return Err(ProviderError::InvalidInput("empty message list".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .responder
            .as_ref()
            .and_then(|f| f(request))
            .unwrap_or_else(|| self.generate(request));
        let usage = Usage {
            prompt_tokens: word_count(&request.joined_text()) as u64,
            completion_tokens: word_count(&text) as u64,
        };
        Ok(ChatResponse { text, finish_reason: Some("stop".into()), usage })
    }

    fn model_id(&self) -> &str {
        "mock-chat"
    }
}

/// Offline text-to-image backend: the image is just an id derived from
/// the prompt and the seed.
pub struct MockImage {
    seed: u64,
    reject_first: AtomicU32,
}

impl MockImage {
    pub fn new(seed: u64) -> Self {
        MockImage { seed, reject_first: AtomicU32::new(0) }
    }

    /// Rejects the first `n` calls with a content-policy error.
    pub fn rejecting_first(seed: u64, n: u32) -> Self {
        MockImage { seed, reject_first: AtomicU32::new(n) }
    }

    pub fn mock_id(&self, prompt: &str) -> String {
        let digest = sha256_hex(format!("{}\u{0}{prompt}", self.seed).as_bytes());
        format!("mock-{}", &digest[..16])
    }
}

impl ImageGenerator for MockImage {
    fn generate_image(&self, prompt: &Prompt) -> Result<ImageRef, ProviderError> {
        if prompt.text.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty image prompt".into()));
        }
        let pending = self.reject_first.load(Ordering::SeqCst);
        if pending > 0 {
            self.reject_first.store(pending - 1, Ordering::SeqCst);
            return Err(ProviderError::ContentPolicyRejection("mock rejection".into()));
        }
        Ok(ImageRef::mock(self.mock_id(&prompt.text)))
    }
}

type VisionResponder = dyn Fn(&ImageRef, &Prompt) -> Option<String> + Send + Sync;

pub struct MockVision {
    seed: u64,
    responder: Option<Arc<VisionResponder>>,
}

impl MockVision {
    pub fn new(seed: u64) -> Self {
        MockVision { seed, responder: None }
    }

    pub fn with_responder(seed: u64, f: impl Fn(&ImageRef, &Prompt) -> Option<String> + Send + Sync + 'static) -> Self {
        MockVision { seed, responder: Some(Arc::new(f)) }
    }
}

impl VisionProvider for MockVision {
    fn describe_image(&self, image: &ImageRef, instruction: &Prompt) -> Result<String, ProviderError> {
        if instruction.text.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty instruction".into()));
        }
        let key = match &image.source {
            ImageSource::MockId(id) => id.clone(),
            ImageSource::RemoteUrl(u) => u.clone(),
            ImageSource::LocalPath(_) => {
                let bytes = image.local_bytes()?.expect("local image has bytes");
                sha256_hex(&bytes)
            }
        };
        if let Some(reply) = self.responder.as_ref().and_then(|f| f(image, instruction)) {
            return Ok(reply);
        }
        let mut t = MockText::new(self.seed, &["vision", &instruction.template_id, &key]);
        let n = t.rng().gen_range(3..=5);
        if instruction.template_id.starts_with("ig.character") {
            let name = t.name();
            Ok(format!("{name} : {}", t.sentences(n)))
        } else {
            Ok(t.sentences(n))
        }
    }
}

/// Hashed bag-of-words embedder: token counts in 256 buckets, L2-normalized.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub fn new() -> Self {
        MockEmbedder
    }

    pub fn bucket_of(token: &str) -> usize {
        (hash_u64(&["bow", token]) % MOCK_EMBED_DIM as u64) as usize
    }

    pub fn embed_one(text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; MOCK_EMBED_DIM];
        for tok in crate::text::tokenize(text) {
            values[Self::bucket_of(&tok)] += 1.0;
        }
        let mut v = EmbeddingVector { values, model_id: MOCK_EMBED_MODEL.into() };
        v.normalize();
        v
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_texts(texts)?;
        Ok(texts.iter().map(|t| Self::embed_one(t)).collect())
    }

    fn model_id(&self) -> &str {
        MOCK_EMBED_MODEL
    }
}
