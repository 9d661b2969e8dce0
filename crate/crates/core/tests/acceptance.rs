//! Acceptance checks. Each check prints one PASS or FAIL line; the target
//! exits non-zero if any check fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cci::cs_dataset::{build_dataset, chunk_story, synthetic_corpus, write_jsonl, DatasetParams, ExampleKind};
use cci::imagination::{ElementKind, Provenance, StoryElement, StoryElements};
use cci::metrics;
use cci::multiwriter::{
    generate_candidates, repetition_filter, rerank_select, select_per_writer, CandidateStatus, MWParams,
    PersonaCandidate, SimilarityTarget, WriterKind,
};
use cci::pipeline::StoryBundle;
use cci::planner::{build_outline, validate_outline, OutlineNode, OutlineParams, OutlineTree, PlannerError, ShapeProblem};
use cci::providers::mock::{MockChat, MockEmbedder};
use cci::providers::{ContinuationScorer, ScorerError};
use cci::specification::MainPlotSpec;
use cci::text::split_sentences;

use common::*;

type Check = Result<(), String>;
type Entry = (&'static str, Duration, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn bleu_oracle() -> Check {
    let (a, b) = ("the cat sat", "the cat ran");
    let got = metrics::bleu_n(a, b, 2);
    ensure!(close(got, (1.0f64 / 3.0).sqrt(), 1e-9), "cat fixture gave {got}");
    ensure!(close(oracle_bleu(&oracle_tokens(a), &oracle_tokens(b), 2), (1.0f64 / 3.0).sqrt(), 1e-12), "oracle disagrees on cat fixture");

    let vocab = ["a", "b", "c", "d", "e", "f"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nonzero = 0;
    for case in 0..50 {
        let draw = |rng: &mut ChaCha8Rng| {
            let len = rng.gen_range(1..=40);
            (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
        };
        let h = draw(&mut rng);
        let r = draw(&mut rng);
        let n = rng.gen_range(1..=3);
        let want = oracle_bleu(&oracle_tokens(&h), &oracle_tokens(&r), n);
        let got = metrics::bleu_n(&h, &r, n);
        ensure!(close(got, want, 1e-9), "case {case} n={n}: got {got}, oracle {want}\n  h={h}\n  r={r}");
        if want > 0.0 {
            nonzero += 1;
        }
    }
    ensure!(nonzero >= 25, "fixtures too degenerate: only {nonzero} non-zero");
    Ok(())
}

fn diversity_direction() -> Check {
    let near: Vec<String> =
        (0..20).map(|i| format!("the old keeper walked along the cliff at dawn and counted the gulls {i}")).collect();
    let disjoint: Vec<String> =
        (0..20).map(|i| (0..12).map(|j| format!("w{i}x{j}")).collect::<Vec<_>>().join(" ")).collect();
    let embed = MockEmbedder::new();
    let ngrams = metrics::DEFAULT_NGRAMS;
    let ws_a = metrics::word_similarity(&near, &ngrams).map_err(|e| e.to_string())?;
    let ws_b = metrics::word_similarity(&disjoint, &ngrams).map_err(|e| e.to_string())?;
    let ss_a = metrics::sentence_similarity(&near, &embed).map_err(|e| e.to_string())?;
    let ss_b = metrics::sentence_similarity(&disjoint, &embed).map_err(|e| e.to_string())?;
    ensure!(ws_a > ws_b, "ws near {ws_a} <= disjoint {ws_b}");
    ensure!(ss_a > ss_b, "ss near {ss_a} <= disjoint {ss_b}");
    Ok(())
}

fn candidate(writer: WriterKind, sample: u32, text: &str) -> PersonaCandidate {
    PersonaCandidate {
        writer,
        sample_index: sample,
        text: text.into(),
        persona_similarity: 0.0,
        repetition_score: None,
        cs: None,
        status: CandidateStatus::SelectedForWriter,
    }
}

/// Looks scores up by candidate text.
struct TableScorer(HashMap<String, f64>);

impl ContinuationScorer for TableScorer {
    fn score(&self, _prev: &str, cand: &str) -> Result<f64, ScorerError> {
        self.0.get(cand).copied().ok_or_else(|| ScorerError::Unavailable(format!("no score for {cand}")))
    }

    fn name(&self) -> &str {
        "table"
    }
}

fn mw_suite() -> Check {
    let params = MWParams::default();

    // (a) an exact repeat of an earlier sentence is discarded.
    let refs = vec!["She folded the map and left it on the counter.".to_string(), "Rain again.".to_string()];
    let mut cands = vec![
        candidate(WriterKind::Relationship, 0, "She folded the map and left it on the counter."),
        candidate(WriterKind::Psychology, 0, "Quiet orchids bloom beyond yesterday's gate."),
    ];
    let survivors = repetition_filter(&mut cands, &[0, 1], &refs, &params);
    ensure!(cands[0].status == CandidateStatus::DiscardedRepetition, "exact repeat kept: {:?}", cands[0].status);
    ensure!(cands[0].repetition_score.unwrap() > 0.0003, "repeat scored {:?}", cands[0].repetition_score);
    ensure!(survivors == vec![1], "survivors {survivors:?}");

    // (b) nothing scores above 0.1, so nothing is injected.
    let texts = ["one", "two", "three"];
    let mut cands: Vec<_> = WriterKind::ALL.iter().zip(texts).map(|(w, t)| candidate(*w, 0, t)).collect();
    let scorer = TableScorer(HashMap::from([("one".into(), 0.1), ("two".into(), 0.05), ("three".into(), 0.0)]));
    let chosen = rerank_select(&mut cands, &[0, 1, 2], "para", &scorer, &params).map_err(|e| e.to_string())?;
    ensure!(chosen.is_none(), "injected with all scores <= 0.1");
    ensure!(cands.iter().all(|c| c.status == CandidateStatus::DiscardedLowCs), "statuses {:?}", cands);

    // (c) argmax, and ties go to the earlier writer regardless of survivor order.
    let table: HashMap<String, f64> =
        [("r", 0.4), ("b", 0.7), ("p", 0.7), ("t", 0.2), ("s", 0.65)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let letters = ["r", "b", "p", "t", "s"];
    let mut cands: Vec<_> = WriterKind::ALL.iter().zip(letters).map(|(w, t)| candidate(*w, 0, t)).collect();
    let chosen = rerank_select(&mut cands, &[4, 2, 3, 1, 0], "para", &TableScorer(table.clone()), &params)
        .map_err(|e| e.to_string())?;
    ensure!(chosen == Some(1), "tie-break chose {chosen:?}");
    ensure!(cands[1].status == CandidateStatus::Injected, "winner status {:?}", cands[1].status);
    let mut table2 = table;
    table2.insert("s".into(), 0.9);
    let mut cands: Vec<_> = WriterKind::ALL.iter().zip(letters).map(|(w, t)| candidate(*w, 0, t)).collect();
    let chosen = rerank_select(&mut cands, &[0, 1, 2, 3, 4], "para", &TableScorer(table2), &params)
        .map_err(|e| e.to_string())?;
    ensure!(chosen == Some(4), "argmax chose {chosen:?}");

    // (d) per-writer top-1 matches an exhaustive similarity search.
    let persona = persona();
    let chat = MockChat::new(11);
    let paragraph = "The ferry horn sounded twice. Hiro watched the harbor lights.";
    let (mut cands, empty) = generate_candidates(&persona, paragraph, &params, &chat).map_err(|e| e.to_string())?;
    ensure!(empty.is_empty() && cands.len() == 40, "expected 5x8 candidates, got {} ({empty:?} empty)", cands.len());
    let selected = select_per_writer(&mut cands, &persona, SimilarityTarget::FullPersona, &MockEmbedder::new())
        .map_err(|e| e.to_string())?;
    let target = persona.full_text();
    let mut expected = Vec::new();
    for w in WriterKind::ALL {
        let mut best: Option<(usize, f64, u32)> = None;
        for (i, c) in cands.iter().enumerate().filter(|(_, c)| c.writer == w) {
            let sim = oracle_text_cosine(&c.text, &target);
            ensure!(close(sim, c.persona_similarity, 1e-9), "similarity of {w:?}/{}: {} vs oracle {sim}", c.sample_index, c.persona_similarity);
            let better = match best {
                None => true,
                Some((_, bs, bi)) => sim > bs + 1e-12 || (close(sim, bs, 1e-12) && c.sample_index < bi),
            };
            if better {
                best = Some((i, sim, c.sample_index));
            }
        }
        expected.push(best.expect("writer has candidates").0);
    }
    ensure!(selected == expected, "selected {selected:?}, oracle {expected:?}");
    Ok(())
}

fn cs_dataset_properties() -> Check {
    let docs = synthetic_corpus(20, 10, 5);
    let params = DatasetParams { target_words: 30, ..DatasetParams::default() };
    let ds = build_dataset(&docs, &params, 17).map_err(|e| e.to_string())?;
    let chunks: HashMap<String, Vec<String>> = docs
        .iter()
        .map(|d| Ok((d.id.clone(), chunk_story(d, 30).map_err(|e| e.to_string())?.into_iter().map(|c| c.text).collect())))
        .collect::<Result<_, String>>()?;
    let mut kinds = BTreeMap::new();
    let mut story_split = HashMap::new();
    for ex in &ds.examples {
        *kinds.entry(format!("{:?}", ex.kind)).or_insert(0) += 1;
        let cs = &chunks[&ex.story_id];
        let i = cs.iter().position(|c| *c == ex.prev).ok_or_else(|| format!("prev not a chunk of {}", ex.story_id))?;
        match ex.kind {
            ExampleKind::Golden => {
                ensure!(cs.get(i + 1) == Some(&ex.next), "golden in {} is not adjacent", ex.story_id);
                ensure!(ex.label == 1.0, "golden label {}", ex.label);
            }
            ExampleKind::HardNegative => {
                let truth = cs.get(i + 1).ok_or("hard negative after the last chunk")?;
                ensure!(split_sentences(&ex.next)[0] == split_sentences(truth)[0], "hard negative first sentence differs in {}", ex.story_id);
                ensure!(ex.next != *truth, "hard negative equals the true successor");
                ensure!(ex.label == 0.0, "hard negative label {}", ex.label);
            }
            ExampleKind::Negative => {
                ensure!(cs.get(i + 1) != Some(&ex.next), "negative in {} is adjacent", ex.story_id);
            }
        }
        if let Some(prev) = story_split.insert(ex.story_id.clone(), ex.split) {
            ensure!(prev == ex.split, "story {} spans splits", ex.story_id);
        }
    }
    ensure!(kinds.len() == 3, "missing example kinds: {kinds:?}");

    let again = build_dataset(&docs, &params, 17).map_err(|e| e.to_string())?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_jsonl(&mut x, &ds.examples).map_err(|e| e.to_string())?;
    write_jsonl(&mut y, &again.examples).map_err(|e| e.to_string())?;
    ensure!(x == y, "JSONL differs between identical builds");

    let big = synthetic_corpus(1200, 6, 9);
    let small = DatasetParams { target_words: 20, ..DatasetParams::default() };
    let ds = build_dataset(&big, &small, 3).map_err(|e| e.to_string())?;
    let mut per_split: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for ex in &ds.examples {
        per_split.entry(format!("{:?}", ex.split)).or_default().insert(ex.story_id.clone());
    }
    let sizes: Vec<(String, usize)> = per_split.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let want = vec![("Dev".to_string(), 100), ("Test".to_string(), 100), ("Train".to_string(), 1000)];
    ensure!(sizes == want, "split sizes {sizes:?}");
    Ok(())
}

fn check_bundle_shape(b: &StoryBundle, mw: bool) -> Check {
    ensure!(b.elements.iter().count() == 3, "element count");
    ensure!(b.elements.iter().all(|e| !e.description.trim().is_empty()), "empty element description");
    ensure!(b.persona_versions.len() >= 2, "only {} persona versions", b.persona_versions.len());
    for (i, p) in b.persona_versions.iter().enumerate() {
        ensure!(p.version as usize == i, "persona version {} at index {i}", p.version);
    }
    validate_outline(&b.outline, &b.outline.params).map_err(|e| e.to_string())?;
    for n in b.outline.nodes() {
        ensure!(n.depth() <= 2, "node {} at depth {}", n.id, n.depth());
        ensure!(n.is_leaf() || (2..=5).contains(&n.children.len()), "node {:?} has {} children", n.id, n.children.len());
    }
    let mut per_leaf: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &b.paragraphs {
        *per_leaf.entry(&p.leaf_id).or_insert(0) += 1;
    }
    let leaves = b.outline.leaf_ids();
    ensure!(per_leaf.len() == leaves.len(), "{} leaves drafted of {}", per_leaf.len(), leaves.len());
    let (lo, hi) = (b.outline.params.min_passages_per_node, b.outline.params.max_passages_per_node);
    for (leaf, n) in &per_leaf {
        ensure!((lo..=hi).contains(n), "leaf {leaf} has {n} paragraphs, bounds [{lo}, {hi}]");
    }
    let order: Vec<&str> = b.paragraphs.iter().map(|p| p.leaf_id.as_str()).collect();
    let mut dedup = order.clone();
    dedup.dedup();
    ensure!(dedup == leaves.iter().map(String::as_str).collect::<Vec<_>>(), "paragraphs out of leaf order");
    ensure!(b.story == b.paragraphs.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n\n"), "story text mismatch");
    if !mw {
        return Ok(());
    }
    let k = b.config_echo["mw"]["k"].as_u64().unwrap_or(8) as usize;
    let rep = b.config_echo["mw"]["repetition_threshold"].as_f64().unwrap_or(0.0003);
    let cst = b.config_echo["mw"]["cs_threshold"].as_f64().unwrap_or(0.1);
    for (idx, p) in b.paragraphs.iter().enumerate() {
        let r = p.injection.as_ref().ok_or_else(|| format!("paragraph {idx} has no injection record"))?;
        ensure!(r.leaf_id == p.leaf_id && r.paragraph_index == idx, "record {idx} points at {}/{}", r.leaf_id, r.paragraph_index);
        ensure!(!r.empty_writers.is_empty() || r.candidates.len() == 5 * k, "record {idx} has {} candidates", r.candidates.len());
        for w in WriterKind::ALL {
            let mine: Vec<_> = r.candidates.iter().filter(|c| c.writer == w).collect();
            let picked = mine.iter().filter(|c| c.status != CandidateStatus::Generated).count();
            ensure!(mine.is_empty() || picked == 1, "record {idx}: writer {w:?} has {picked} selections");
        }
        let mut best_cs = f64::NEG_INFINITY;
        for c in &r.candidates {
            match c.status {
                CandidateStatus::DiscardedRepetition => {
                    ensure!(c.repetition_score.is_some_and(|s| s > rep), "record {idx}: repetition discard below threshold")
                }
                CandidateStatus::DiscardedLowCs | CandidateStatus::Injected => {
                    ensure!(c.repetition_score.is_some_and(|s| s <= rep), "record {idx}: survivor above repetition threshold");
                    best_cs = best_cs.max(c.cs.ok_or("survivor without cs")?);
                }
                _ => {}
            }
        }
        match (r.injected(), &r.injected_text) {
            (Some(c), Some(t)) => {
                ensure!(c.text == *t && p.text.ends_with(t.as_str()), "record {idx}: injected text not appended");
                let cs = c.cs.unwrap_or(0.0);
                ensure!(cs > cst && cs == best_cs, "record {idx}: injected cs {cs}, best {best_cs}");
            }
            (None, None) => ensure!(best_cs <= cst, "record {idx}: nothing injected although best cs {best_cs}"),
            _ => return Err(format!("record {idx}: injected status and text disagree")),
        }
    }
    Ok(())
}

fn e2e_determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = mock_generate(a.path(), 7, &[])?;
    let pb = mock_generate(b.path(), 7, &[])?;
    let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    ensure!(ba == bb, "bundles differ between two seed-7 runs");
    let bundle = StoryBundle::load(&pa).map_err(|e| e.to_string())?;
    ensure!(bundle.injection_count() > 0, "no injections at all");
    check_bundle_shape(&bundle, true)
}

fn ablations() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let ig = StoryBundle::load(&mock_generate(dir.path(), 7, &["--no-ig"])?).map_err(|e| e.to_string())?;
    ensure!(ig.elements.provenance() == Some(Provenance::TextOnly), "provenance {:?}", ig.elements.provenance());
    ensure!(ig.elements.iter().all(|e| e.image.is_none() && e.image_prompt.is_none()), "text-only element carries an image");
    ensure!(ig.elements.character.character_name.is_some(), "text-only character has no name");
    ensure!(ig.injection_count() > 0, "--no-ig should keep persona injection");

    let dir = tempfile::tempdir().unwrap();
    let mw = StoryBundle::load(&mock_generate(dir.path(), 7, &["--no-mw"])?).map_err(|e| e.to_string())?;
    ensure!(mw.injection_count() == 0, "{} injection records with --no-mw", mw.injection_count());
    ensure!(mw.outline.params.max_passages_per_node == 3, "max passages {}", mw.outline.params.max_passages_per_node);
    ensure!(mw.elements.provenance() == Some(Provenance::Generated), "--no-mw changed element provenance");
    check_bundle_shape(&mw, false)
}

fn node(id: &str, children: Vec<OutlineNode>) -> OutlineNode {
    OutlineNode { id: id.into(), summary: format!("event {id}"), children }
}

fn flat(id: &str, n: usize) -> OutlineNode {
    node(id, (1..=n).map(|i| node(&format!("{id}.{i}"), vec![])).collect())
}

fn fixtures() -> (StoryElements, MainPlotSpec) {
    let el = |kind, text: &str, name: Option<&str>| StoryElement {
        kind,
        image: None,
        image_prompt: None,
        description: text.into(),
        character_name: name.map(str::to_string),
        provenance: Provenance::TextOnly,
    };
    let elements = StoryElements {
        character: el(ElementKind::Character, "A ferry mechanic.", Some("Hiro")),
        background: el(ElementKind::Background, "A harbor town in winter.", None),
        main_plot: el(ElementKind::MainPlot, "The harbor burns again.", None),
    };
    let plot = MainPlotSpec {
        original: "The harbor burns again.".into(),
        clarified: "The harbor burns again.".into(),
        qa_chain: vec![],
        why_inevitable: "Old debts.".into(),
        protagonist_response: "He runs toward it.".into(),
        summary_5_sentences: "One. Two. Three. Four. Five.".into(),
    };
    (elements, plot)
}

fn outline_validator() -> Check {
    let params = OutlineParams::default();
    let tree = |root| OutlineTree { root, params };
    let good = tree(node("", vec![flat("1", 2), flat("2", 5), node("3", vec![])]));
    validate_outline(&good, &params).map_err(|e| format!("conforming tree rejected: {e}"))?;
    let good_flat = tree(flat("", 4));
    validate_outline(&good_flat, &params).map_err(|e| format!("flat tree rejected: {e}"))?;

    let deep = tree(node("", vec![node("1", vec![flat("1.1", 2), node("1.2", vec![])]), flat("2", 2)]));
    let err = validate_outline(&deep, &params).err().ok_or("depth-3 tree accepted")?;
    ensure!(err.problems.iter().any(|p| matches!(p, ShapeProblem::TooDeep { .. })), "depth-3 problems {:?}", err.problems);

    let wide = tree(node("", vec![flat("1", 6), flat("2", 2)]));
    let err = validate_outline(&wide, &params).err().ok_or("six children accepted")?;
    ensure!(
        err.problems.iter().any(|p| matches!(p, ShapeProblem::TooManyChildren { count: 6, .. })),
        "child-count-6 problems {:?}",
        err.problems
    );

    let (elements, plot) = fixtures();
    let persona = persona();
    let bad = "1. Everything happens at once.\n".to_string();
    let fine = "1. Arrival\n1.1 He lands.\n1.2 He looks.\n2. Fire\n2.1 Smoke.\n2.2 Flames.\n".to_string();

    let chat = MockChat::scripted(1, "plan.outline", vec![bad.clone()]);
    match build_outline(&elements, &persona, &plot, &params, &chat) {
        Err(PlannerError::Shape(_)) => {}
        other => return Err(format!("always-bad outline gave {other:?}")),
    }
    ensure!(chat.calls() == 3, "expected 3 outline calls, saw {}", chat.calls());

    let chat = MockChat::scripted(1, "plan.outline", vec!["no numbering here".into(), bad, fine]);
    let t = build_outline(&elements, &persona, &plot, &params, &chat).map_err(|e| format!("recoverable outline: {e}"))?;
    ensure!(chat.calls() == 3 && t.leaf_ids() == ["1.1", "1.2", "2.1", "2.2"], "leaves {:?} after {} calls", t.leaf_ids(), chat.calls());
    Ok(())
}

fn scorer_fallback() -> Check {
    let stub = serve(|_| Reply::json(503, r#"{"error":"loading"}"#));
    let dir = tempfile::tempdir().unwrap();
    let path = mock_generate(dir.path(), 7, &["--scorer", "remote", "--scorer-url", &stub.url])?;
    let b = StoryBundle::load(&path).map_err(|e| e.to_string())?;
    ensure!(stub.hits() >= 1, "remote scorer never called");
    ensure!(b.scorer_downgraded, "downgrade not flagged");
    ensure!(b.injection_count() > 0, "no injections after fallback");
    check_bundle_shape(&b, true)
}

fn relevance() -> Check {
    let embed = MockEmbedder::new();
    let story = "Hiro taps the table twice and says nothing about the fire.";
    let mut p = persona();
    for t in cci::specification::TraitKind::ALL {
        p.set(t, story.into());
    }
    let r = metrics::embedding_relevance(&p, story, &embed).map_err(|e| e.to_string())?;
    ensure!(close(r, 1.0, 1e-9), "identical persona and story gave {r}");

    let reply = |text: &'static str| {
        MockChat::with_responder(3, move |req| (req.template_id.as_deref() == Some("eval.llm_relevance")).then(|| text.to_string()))
    };
    let r = metrics::llm_relevance(&persona(), story, &reply("0.7")).map_err(|e| e.to_string())?;
    ensure!(close(r.mean, 0.7, 1e-12) && r.skipped.is_empty(), "\"0.7\" parsed as {}", r.mean);
    let r = metrics::llm_relevance(&persona(), story, &reply("score: 0.25\nThe habit shows up.")).map_err(|e| e.to_string())?;
    ensure!(close(r.mean, 0.25, 1e-12), "first-number reply parsed as {}", r.mean);
    ensure!(metrics::parse_unit_score("I'd say .5, maybe 0.9") == Some(0.5), "bare-decimal variant");
    ensure!(metrics::parse_unit_score("7 out of 10").is_none(), "out-of-range first number accepted");

    let items: Vec<String> = [
        "the harbor burns and hiro runs",
        "hiro runs from the burning harbor again",
        "a quiet winter morning at the noodle shop",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cos = |i: usize, j: usize| oracle_text_cosine(&items[i], &items[j]);
    let want = (cos(0, 1) + cos(0, 2) + cos(1, 2)) / 3.0;
    let ss = metrics::sentence_similarity(&items, &embed).map_err(|e| e.to_string())?;
    let sim = metrics::story_similarity(&items, &embed).map_err(|e| e.to_string())?;
    ensure!(close(ss, want, 1e-9), "ss {ss} vs oracle {want}");
    ensure!(close(sim, want, 1e-9), "sim {sim} vs oracle {want}");
    ensure!(want > 0.0 && want < 1.0, "fixture is degenerate: {want}");
    Ok(())
}

fn main() {
    let checks: Vec<Entry> = vec![
        ("bleu oracle equivalence", Duration::from_secs(1), bleu_oracle),
        ("diversity directionality", Duration::from_secs(1), diversity_direction),
        ("multi-writer filter and rerank", Duration::from_secs(5), mw_suite),
        ("continuation dataset properties", Duration::from_secs(10), cs_dataset_properties),
        ("end-to-end mock determinism", Duration::from_secs(30), e2e_determinism),
        ("ablation flags", Duration::from_secs(30), ablations),
        ("outline validator", Duration::from_secs(5), outline_validator),
        ("scorer fallback", Duration::from_secs(30), scorer_fallback),
        ("relevance metrics", Duration::from_secs(5), relevance),
    ];
    let mut failed = 0;
    for (name, budget, f) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if took > budget {
                Err(format!("took {took:?}, budget {budget:?}"))
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => println!("PASS {name} ({} ms)", took.as_millis()),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
