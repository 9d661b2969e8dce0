//! Image-guided, persona-driven long story generation.
//!
//! The pipeline imagines three story elements (character, background, main
//! plot), expands the character into a seven-trait persona, clarifies the
//! plot, plans a bounded outline, and drafts the story leaf by leaf while a
//! panel of persona writers proposes descriptions that are filtered,
//! reranked by a continuation scorer, and injected into the text.
//!
//! Every model capability sits behind a trait in [`providers`], with an
//! OpenAI-compatible HTTP client and deterministic offline mocks.

pub mod cs_dataset;
pub mod hashing;
pub mod imagination;
pub mod metrics;
pub mod multiwriter;
pub mod par;
pub mod pipeline;
pub mod planner;
pub mod prompts;
pub mod providers;
pub mod sections;
pub mod specification;
pub mod text;
