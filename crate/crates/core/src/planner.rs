//! Outline planning: prompt for a numbered, depth-bounded outline, parse
//! it into a tree, and enforce the shape bounds.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagination::StoryElements;
use crate::prompts::{self, vars, TemplateError};
use crate::providers::{ChatProvider, ChatRequest, ProviderError};
use crate::specification::{MainPlotSpec, Persona};

pub const SHAPE_REPROMPTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlineParams {
    pub max_depth: usize,
    pub min_children: usize,
    /// Soft bound: only stated in the prompt.
    pub preferred_max_children: usize,
    /// Hard bound: enforced by the validator.
    pub max_children: usize,
    pub min_passages_per_node: usize,
    pub max_passages_per_node: usize,
}

impl Default for OutlineParams {
    fn default() -> Self {
        OutlineParams {
            max_depth: 2,
            min_children: 2,
            preferred_max_children: 4,
            max_children: 5,
            min_passages_per_node: 1,
            max_passages_per_node: 2,
        }
    }
}

impl OutlineParams {
    /// Passage bounds used when persona injection is switched off.
    pub fn without_multiwriter(self) -> Self {
        OutlineParams { max_passages_per_node: 3, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_depth == 0 {
            return Err("max_depth must be >= 1".into());
        }
        if !(1 <= self.min_children
            && self.min_children <= self.preferred_max_children
            && self.preferred_max_children <= self.max_children)
        {
            return Err("need 1 <= min_children <= preferred_max_children <= max_children".into());
        }
        if self.min_passages_per_node == 0 || self.min_passages_per_node > self.max_passages_per_node {
            return Err("need 1 <= min_passages_per_node <= max_passages_per_node".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineNode {
    /// Dotted position, e.g. `"1.3"`. The root's id is empty.
    pub id: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<OutlineNode>,
}

impl OutlineNode {
    pub fn depth(&self) -> usize {
        if self.id.is_empty() {
            0
        } else {
            self.id.split('.').count()
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Id of the top-level ancestor (the node itself when at depth 1).
    pub fn top_level_id(&self) -> &str {
        self.id.split('.').next().unwrap_or("")
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a OutlineNode>) {
        if self.is_leaf() {
            out.push(self);
        }
        for c in &self.children {
            c.collect_leaves(out);
        }
    }

    fn walk<'a>(&'a self, out: &mut Vec<&'a OutlineNode>) {
        out.push(self);
        for c in &self.children {
            c.walk(out);
        }
    }

    fn renumber(&mut self, id: String) {
        for (i, c) in self.children.iter_mut().enumerate() {
            let cid = if id.is_empty() { format!("{}", i + 1) } else { format!("{id}.{}", i + 1) };
            c.renumber(cid);
        }
        self.id = id;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineTree {
    pub root: OutlineNode,
    pub params: OutlineParams,
}

impl OutlineTree {
    /// Leaves in depth-first order; this is the drafting order.
    pub fn leaves(&self) -> Vec<&OutlineNode> {
        let mut out = Vec::new();
        for c in &self.root.children {
            c.collect_leaves(&mut out);
        }
        out
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.leaves().into_iter().map(|n| n.id.clone()).collect()
    }

    pub fn nodes(&self) -> Vec<&OutlineNode> {
        let mut out = Vec::new();
        self.root.walk(&mut out);
        out
    }

    pub fn find(&self, id: &str) -> Option<&OutlineNode> {
        self.nodes().into_iter().find(|n| n.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "problem")]
pub enum ShapeProblem {
    TooDeep { id: String, depth: usize },
    TooFewChildren { id: String, count: usize },
    TooManyChildren { id: String, count: usize },
    DuplicateLeafId { id: String },
}

impl std::fmt::Display for ShapeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = |id: &str| if id.is_empty() { "the root".to_string() } else { format!("node {id}") };
        match self {
            ShapeProblem::TooDeep { id, depth } => write!(f, "node {id} is at depth {depth}"),
            ShapeProblem::TooFewChildren { id, count } => write!(f, "{} has only {count} children", name(id)),
            ShapeProblem::TooManyChildren { id, count } => write!(f, "{} has {count} children", name(id)),
            ShapeProblem::DuplicateLeafId { id } => write!(f, "leaf id {id} appears twice"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("outline shape invalid: {}", problems.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; "))]
pub struct OutlineShapeError {
    pub problems: Vec<ShapeProblem>,
    /// `(node id, child count)` for every internal node.
    pub child_counts: Vec<(String, usize)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Shape(#[from] OutlineShapeError),
    #[error("outline parse error: {0}")]
    Parse(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Pure structural check of a tree against the bounds.
pub fn validate_outline(tree: &OutlineTree, params: &OutlineParams) -> Result<(), OutlineShapeError> {
    let mut problems = Vec::new();
    let mut child_counts = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for node in tree.nodes() {
        if node.depth() > params.max_depth {
            problems.push(ShapeProblem::TooDeep { id: node.id.clone(), depth: node.depth() });
        }
        if node.is_leaf() && node.depth() > 0 {
            if seen.insert(node.id.as_str(), ()).is_some() {
                problems.push(ShapeProblem::DuplicateLeafId { id: node.id.clone() });
            }
            continue;
        }
        let count = node.children.len();
        child_counts.push((node.id.clone(), count));
        if count < params.min_children {
            problems.push(ShapeProblem::TooFewChildren { id: node.id.clone(), count });
        } else if count > params.max_children {
            problems.push(ShapeProblem::TooManyChildren { id: node.id.clone(), count });
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(OutlineShapeError { problems, child_counts })
    }
}

fn line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*]\s*)?(?:\*\*)?(\d+(?:\.\d+)*)\.?(?:\*\*)?[:)]?\s+(.+?)\s*$").expect("valid regex")
    })
}

/// Parses numbered outline lines (`1.`, `1.1`, `1.1.`) into a tree under a
/// root carrying `premise`. Unnumbered lines are ignored; ids are
/// renumbered by position afterwards.
pub fn parse_outline(text: &str, premise: &str) -> Result<OutlineNode, PlannerError> {
    let mut root = OutlineNode { id: String::new(), summary: premise.to_string(), children: Vec::new() };
    // parsed id -> index path into the tree
    let mut paths: HashMap<String, Vec<usize>> = HashMap::new();
    for line in text.lines() {
        let Some(c) = line_re().captures(line) else { continue };
        let id = c[1].to_string();
        let summary = c[2].trim_matches(|ch: char| ch == '*').trim().to_string();
        if summary.is_empty() {
            continue;
        }
        if paths.contains_key(&id) {
            return Err(PlannerError::Parse(format!("duplicate outline id {id}")));
        }
        let parent_path = match id.rsplit_once('.') {
            None => Vec::new(),
            Some((parent, _)) => paths
                .get(parent)
                .cloned()
                .ok_or_else(|| PlannerError::Parse(format!("outline item {id} has no parent {parent}")))?,
        };
        let mut node = &mut root;
        for &i in &parent_path {
            node = &mut node.children[i];
        }
        node.children.push(OutlineNode { id: id.clone(), summary, children: Vec::new() });
        let mut path = parent_path;
        path.push(node.children.len() - 1);
        paths.insert(id, path);
    }
    if root.children.is_empty() {
        return Err(PlannerError::Parse("no numbered outline items".into()));
    }
    root.renumber(String::new());
    Ok(root)
}

/// Prompts for an outline, re-prompting with an explicit shape instruction
/// when the reply cannot be parsed or violates the bounds.
pub fn build_outline(
    elements: &StoryElements,
    persona: &Persona,
    plot: &MainPlotSpec,
    params: &OutlineParams,
    chat: &dyn ChatProvider,
) -> Result<OutlineTree, PlannerError> {
    params.validate().map_err(PlannerError::Precondition)?;
    if !persona.is_complete() || plot.summary_5_sentences.trim().is_empty() {
        return Err(PlannerError::Precondition("persona and plot summary must be populated".into()));
    }
    let premise = plot.summary_5_sentences.clone();
    let prompt = prompts::PLAN_OUTLINE.prompt(vars([
        ("premise", premise.clone()),
        ("setting", elements.background.description.clone()),
        ("characters", elements.character.full_text()),
        ("name", persona.name.clone()),
        ("min_children", params.min_children.to_string()),
        ("preferred_max_children", params.preferred_max_children.to_string()),
        ("max_depth", params.max_depth.to_string()),
    ]))?;
    let mut current = prompt.clone();
    let mut attempt = 0;
    loop {
        let reply = chat.chat(&ChatRequest::from_prompt(&current))?.text;
        let outcome = parse_outline(&reply, &premise).and_then(|root| {
            let tree = OutlineTree { root, params: *params };
            validate_outline(&tree, params)?;
            Ok(tree)
        });
        match outcome {
            Ok(tree) => return Ok(tree),
            Err(e @ (PlannerError::Shape(_) | PlannerError::Parse(_))) if attempt < SHAPE_REPROMPTS => {
                log::warn!("outline rejected (attempt {}): {e}", attempt + 1);
                attempt += 1;
                let reminder = prompts::PLAN_SHAPE_REMINDER.render(&vars([
                    ("problem", e.to_string()),
                    ("min_children", params.min_children.to_string()),
                    ("max_children", params.max_children.to_string()),
                    ("max_depth", params.max_depth.to_string()),
                ]))?;
                current = prompt.with_suffix(&reminder);
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagination::{ElementKind, Provenance, StoryElement};
    use crate::providers::mock::MockChat;
    use crate::specification::tests::sample_persona;

    fn tree(text: &str) -> OutlineTree {
        OutlineTree { root: parse_outline(text, "premise").unwrap(), params: OutlineParams::default() }
    }

    const TWO_BY_TWO: &str = "1. A\n1.1 x\n1.2 y\n2. B\n2.1 u\n2.2 v";

    #[test]
    fn parses_two_level_outline() {
        let t = tree(TWO_BY_TWO);
        assert_eq!(t.root.children.len(), 2);
        assert!(t.root.children.iter().all(|c| c.children.len() == 2));
        assert_eq!(t.leaf_ids(), vec!["1.1", "1.2", "2.1", "2.2"]);
        assert_eq!(t.find("2.1").unwrap().summary, "u");
        assert_eq!(t.find("2.1").unwrap().depth(), 2);
        assert!(validate_outline(&t, &t.params).is_ok());
    }

    #[test]
    fn tolerates_markup_and_indentation() {
        let t = tree("Outline:\n**1.** Start\n   1.1. a\n   1.2) b\n- 2: End\n  2.1 c\n  2.2 d\n");
        assert_eq!(t.leaf_ids(), vec!["1.1", "1.2", "2.1", "2.2"]);
        assert_eq!(t.find("1").unwrap().summary, "Start");
    }

    #[test]
    fn renumbers_skipped_ids() {
        let t = tree("1. A\n1.1 x\n1.2 y\n3. B\n3.1 u\n3.2 v");
        assert_eq!(t.leaf_ids(), vec!["1.1", "1.2", "2.1", "2.2"]);
    }

    #[test]
    fn orphan_and_empty_outlines_fail_to_parse() {
        assert!(matches!(parse_outline("1.1 x", "p"), Err(PlannerError::Parse(_))));
        assert!(matches!(parse_outline("no numbers", "p"), Err(PlannerError::Parse(_))));
        assert!(matches!(parse_outline("1. a\n1. b", "p"), Err(PlannerError::Parse(_))));
    }

    #[test]
    fn validator_rejects_depth_three() {
        let t = tree("1. A\n1.1 x\n1.1.1 deep\n1.1.2 deeper\n1.2 y\n2. B\n2.1 u\n2.2 v");
        let err = validate_outline(&t, &t.params).unwrap_err();
        assert!(err.problems.contains(&ShapeProblem::TooDeep { id: "1.1.1".into(), depth: 3 }));
        assert!(err.to_string().contains("1.1.1"));
    }

    #[test]
    fn validator_rejects_single_child_root() {
        let t = tree("1. A\n1.1 x\n1.2 y");
        let err = validate_outline(&t, &t.params).unwrap_err();
        assert_eq!(err.problems, vec![ShapeProblem::TooFewChildren { id: "".into(), count: 1 }]);
    }

    #[test]
    fn validator_rejects_six_children() {
        let six = (1..=6).map(|i| format!("1.{i} c")).collect::<Vec<_>>().join("\n");
        let t = tree(&format!("1. A\n{six}\n2. B\n2.1 u\n2.2 v"));
        let err = validate_outline(&t, &t.params).unwrap_err();
        assert_eq!(err.problems, vec![ShapeProblem::TooManyChildren { id: "1".into(), count: 6 }]);
        assert!(err.child_counts.contains(&("1".into(), 6)));
    }

    #[test]
    fn serialization_round_trips() {
        let t = tree(TWO_BY_TWO);
        let back: OutlineTree = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.leaf_ids(), t.leaf_ids());
    }

    fn inputs() -> (StoryElements, MainPlotSpec) {
        let el = |kind, name: Option<&str>| StoryElement {
            kind,
            image: None,
            image_prompt: None,
            description: "desc".into(),
            character_name: name.map(str::to_string),
            provenance: Provenance::TextOnly,
        };
        let elements = StoryElements {
            character: el(ElementKind::Character, Some("Hiro")),
            background: el(ElementKind::Background, None),
            main_plot: el(ElementKind::MainPlot, None),
        };
        let plot = MainPlotSpec {
            original: "p".into(),
            clarified: "p".into(),
            qa_chain: vec![],
            why_inevitable: "w".into(),
            protagonist_response: "r".into(),
            summary_5_sentences: "The story of Hiro.".into(),
        };
        (elements, plot)
    }

    #[test]
    fn build_accepts_scripted_outline() {
        let (e, p) = inputs();
        let chat = MockChat::scripted(1, "plan.outline", vec![TWO_BY_TWO.into()]);
        let t = build_outline(&e, &sample_persona(), &p, &OutlineParams::default(), &chat).unwrap();
        assert_eq!(t.leaf_ids(), vec!["1.1", "1.2", "2.1", "2.2"]);
        assert_eq!(t.root.summary, "The story of Hiro.");
    }

    #[test]
    fn build_reprompts_then_errors_on_persistent_violation() {
        let (e, p) = inputs();
        let six = (1..=6).map(|i| format!("1.{i} c")).collect::<Vec<_>>().join("\n");
        let bad = format!("1. A\n{six}\n2. B\n2.1 u\n2.2 v");
        let chat = MockChat::scripted(1, "plan.outline", vec![bad]);
        let err = build_outline(&e, &sample_persona(), &p, &OutlineParams::default(), &chat).unwrap_err();
        assert!(matches!(err, PlannerError::Shape(_)));
        assert_eq!(chat.calls(), 3);
    }

    #[test]
    fn build_recovers_after_a_bad_first_reply() {
        let (e, p) = inputs();
        let chat = MockChat::scripted(1, "plan.outline", vec!["1. only one\n1.1 a\n1.2 b".into(), TWO_BY_TWO.into()]);
        let t = build_outline(&e, &sample_persona(), &p, &OutlineParams::default(), &chat).unwrap();
        assert_eq!(t.leaves().len(), 4);
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn default_mock_outline_is_valid() {
        let (e, p) = inputs();
        for seed in 0..20 {
            let t = build_outline(&e, &sample_persona(), &p, &OutlineParams::default(), &MockChat::new(seed)).unwrap();
            assert!(validate_outline(&t, &t.params).is_ok());
        }
    }

    #[test]
    fn params_validation() {
        assert!(OutlineParams::default().validate().is_ok());
        assert_eq!(OutlineParams::default().without_multiwriter().max_passages_per_node, 3);
        assert!(OutlineParams { min_children: 5, ..Default::default() }.validate().is_err());
        assert!(OutlineParams { min_passages_per_node: 3, ..Default::default() }.validate().is_err());
    }
}
