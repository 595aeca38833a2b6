//! Sub-prompt planning.
//!
//! A prompt is split into *entities* (clause heads and attachments that carry
//! their own modifiers, e.g. "a green tracksuit") and *attributes* (head
//! modifiers plus bare attachments such as "with sunglasses"). The bare base
//! prompt keeps every entity and drops every attribute; each later branch
//! switches some attributes back on and names the entity they bind to.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use super::parse::{push_phrase, NounPhrase, PromptTree};
use super::CONJUNCTION;
use crate::error::{PdiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DecompositionConfig {
    /// Original prompt first, one subject per branch.
    A,
    /// Original prompt first, one attribute per branch.
    #[default]
    B,
    /// No original-prompt branch, one subject per branch.
    C,
    /// No original-prompt branch, one attribute per branch.
    D,
    /// No original-prompt branch; each branch keeps all earlier attributes.
    Accumulative,
}

impl DecompositionConfig {
    fn keeps_original(self) -> bool {
        matches!(self, Self::A | Self::B)
    }
}

impl FromStr for DecompositionConfig {
    type Err = PdiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "accum" | "accumulative" => Ok(Self::Accumulative),
            _ => Err(PdiError::config(format!(
                "unknown decomposition config {s:?} (expected A, B, C, D or accum)"
            ))),
        }
    }
}

impl fmt::Display for DecompositionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::Accumulative => "accum",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSubject {
    /// Entity index into [`PromptPlan::entities`].
    pub entity: usize,
    pub text: String,
    /// Token range of the subject inside this branch's tokens.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanBranch {
    /// Sub-prompt index `i` of `p_i`.
    pub index: usize,
    pub text: String,
    pub tokens: Vec<String>,
    /// Subject of the attribute this branch introduces (`q_{i-1}`).
    pub subject: Option<BranchSubject>,
    /// Token range of every entity's noun in this branch, indexed by entity.
    pub entity_spans: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPlan {
    pub config: DecompositionConfig,
    pub entities: Vec<String>,
    pub branches: Vec<PlanBranch>,
}

impl PromptPlan {
    pub fn sub_prompts(&self) -> Vec<&str> {
        self.branches.iter().map(|b| b.text.as_str()).collect()
    }

    /// The subject list `q_1..q_{n-1}` in branch order.
    pub fn subjects(&self) -> Vec<&str> {
        self.branches
            .iter()
            .filter_map(|b| b.subject.as_ref().map(|s| s.text.as_str()))
            .collect()
    }

    /// Largest sub-prompt index `n`.
    pub fn last_index(&self) -> usize {
        self.branches.last().map_or(0, |b| b.index)
    }

    pub fn branch_by_index(&self, index: usize) -> Option<&PlanBranch> {
        self.branches.iter().find(|b| b.index == index)
    }

    /// Token range of `q_branch` inside `p_{branch+1}`.
    pub fn subject_span(&self, branch: usize) -> Result<Range<usize>> {
        let n = self.last_index();
        let out_of_range = || PdiError::Index {
            index: branch,
            valid: format!("1..={}", n.saturating_sub(1)),
        };
        if branch == 0 || branch + 1 > n {
            return Err(out_of_range());
        }
        self.branch_by_index(branch + 1)
            .and_then(|b| b.subject.as_ref())
            .map(|s| s.span.clone())
            .ok_or_else(out_of_range)
    }

    /// Tab-separated listing, one line per branch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for b in &self.branches {
            let subject = b.subject.as_ref().map_or("-", |s| s.text.as_str());
            out.push_str(&format!("{}\t{}\t{}\n", b.index, b.text, subject));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EntityLoc {
    Head(usize),
    Attached(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttributeLoc {
    /// Modifier `m` of the phrase at an entity location.
    Modifier(EntityLoc, usize),
    /// Bare attachment `a` of clause `c`.
    Attachment(usize, usize),
}

struct Attribute {
    entity: usize,
    loc: AttributeLoc,
}

struct Analysis<'t> {
    tree: &'t PromptTree,
    entities: Vec<EntityLoc>,
    attributes: Vec<Attribute>,
}

impl<'t> Analysis<'t> {
    fn new(tree: &'t PromptTree) -> Self {
        let mut entities = Vec::new();
        let mut attributes = Vec::new();
        for (ci, clause) in tree.clauses.iter().enumerate() {
            let head = entities.len();
            entities.push(EntityLoc::Head(ci));
            for m in 0..clause.head.modifiers.len() {
                attributes.push(Attribute {
                    entity: head,
                    loc: AttributeLoc::Modifier(EntityLoc::Head(ci), m),
                });
            }
            for (ai, att) in clause.attachments.iter().enumerate() {
                if att.phrase.modifiers.is_empty() {
                    attributes.push(Attribute {
                        entity: head,
                        loc: AttributeLoc::Attachment(ci, ai),
                    });
                }
            }
            for (ai, att) in clause.attachments.iter().enumerate() {
                if !att.phrase.modifiers.is_empty() {
                    let id = entities.len();
                    let loc = EntityLoc::Attached(ci, ai);
                    entities.push(loc);
                    for m in 0..att.phrase.modifiers.len() {
                        attributes.push(Attribute {
                            entity: id,
                            loc: AttributeLoc::Modifier(loc, m),
                        });
                    }
                }
            }
        }
        Self {
            tree,
            entities,
            attributes,
        }
    }

    fn phrase(&self, loc: EntityLoc) -> &'t NounPhrase {
        match loc {
            EntityLoc::Head(c) => &self.tree.clauses[c].head,
            EntityLoc::Attached(c, a) => &self.tree.clauses[c].attachments[a].phrase,
        }
    }

    fn entity_name(&self, id: usize) -> String {
        self.phrase(self.entities[id]).noun_text()
    }

    fn attribute_enabled(&self, enabled: &[bool], loc: AttributeLoc) -> bool {
        self.attributes
            .iter()
            .position(|a| a.loc == loc)
            .is_some_and(|i| enabled[i])
    }

    /// Renders with the given attribute switches; returns tokens and the noun
    /// span of every entity.
    fn render(&self, enabled: &[bool]) -> (Vec<String>, Vec<Range<usize>>) {
        let mut tokens = Vec::new();
        let mut spans = vec![0..0; self.entities.len()];
        let mut emit_phrase = |tokens: &mut Vec<String>, loc: EntityLoc| {
            let phrase = self.phrase(loc);
            tokens.extend(phrase.article.iter().cloned());
            for (m, modifier) in phrase.modifiers.iter().enumerate() {
                if self.attribute_enabled(enabled, AttributeLoc::Modifier(loc, m)) {
                    tokens.extend(modifier.tokens());
                }
            }
            let start = tokens.len();
            tokens.extend(phrase.noun.iter().cloned());
            if let Some(id) = self.entities.iter().position(|&e| e == loc) {
                spans[id] = start..tokens.len();
            }
        };
        for (ci, clause) in self.tree.clauses.iter().enumerate() {
            if ci > 0 {
                tokens.push(CONJUNCTION.to_string());
            }
            emit_phrase(&mut tokens, EntityLoc::Head(ci));
            for (ai, att) in clause.attachments.iter().enumerate() {
                if !att.phrase.modifiers.is_empty() {
                    tokens.push(att.keyword.clone());
                    emit_phrase(&mut tokens, EntityLoc::Attached(ci, ai));
                } else if self.attribute_enabled(enabled, AttributeLoc::Attachment(ci, ai)) {
                    tokens.push(att.keyword.clone());
                    push_phrase(&mut tokens, &att.phrase, false);
                }
            }
        }
        (tokens, spans)
    }

    fn branch(&self, index: usize, enabled: &[bool], subject: Option<usize>) -> PlanBranch {
        let (tokens, entity_spans) = self.render(enabled);
        let mut text = tokens.join(" ");
        if self.tree.terminal_period {
            text.push('.');
        }
        let subject = subject.map(|entity| BranchSubject {
            entity,
            text: self.entity_name(entity),
            span: entity_spans[entity].clone(),
        });
        PlanBranch {
            index,
            text,
            tokens,
            subject,
            entity_spans,
        }
    }
}

/// Builds the sub-prompt plan for a parsed prompt.
pub fn decompose(tree: &PromptTree, config: DecompositionConfig) -> PromptPlan {
    let analysis = Analysis::new(tree);
    let n_attr = analysis.attributes.len();
    let all = vec![true; n_attr];
    let entities = (0..analysis.entities.len())
        .map(|e| analysis.entity_name(e))
        .collect();

    if n_attr == 0 {
        return PromptPlan {
            config,
            entities,
            branches: vec![analysis.branch(0, &all, None)],
        };
    }

    // (enabled switches, subject entity) for p_2..p_n
    let steps: Vec<(Vec<bool>, usize)> = match config {
        DecompositionConfig::A | DecompositionConfig::C => {
            let mut groups: Vec<usize> = Vec::new();
            for a in &analysis.attributes {
                if !groups.contains(&a.entity) {
                    groups.push(a.entity);
                }
            }
            groups
                .into_iter()
                .map(|entity| {
                    let enabled = analysis
                        .attributes
                        .iter()
                        .map(|a| a.entity == entity)
                        .collect();
                    (enabled, entity)
                })
                .collect()
        }
        DecompositionConfig::B | DecompositionConfig::D => (0..n_attr)
            .map(|i| {
                let enabled = (0..n_attr).map(|j| j == i).collect();
                (enabled, analysis.attributes[i].entity)
            })
            .collect(),
        DecompositionConfig::Accumulative => (0..n_attr)
            .map(|i| {
                let enabled = (0..n_attr).map(|j| j <= i).collect();
                (enabled, analysis.attributes[i].entity)
            })
            .collect(),
    };

    let mut branches = Vec::with_capacity(steps.len() + 2);
    if config.keeps_original() {
        branches.push(analysis.branch(0, &all, None));
    }
    branches.push(analysis.branch(1, &vec![false; n_attr], None));
    for (k, (enabled, entity)) in steps.iter().enumerate() {
        branches.push(analysis.branch(k + 2, enabled, Some(*entity)));
    }
    PromptPlan {
        config,
        entities,
        branches,
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_prompt;
    use super::*;

    fn plan(text: &str, config: DecompositionConfig) -> PromptPlan {
        decompose(&parse_prompt(text).unwrap(), config)
    }

    const TEDDY: &str = "a red teddy bear wearing a green tracksuit";
    const DOGCAT: &str = "a red dog with sunglasses and a blue cat with a necklace";

    #[test]
    fn teddy_bear_config_a() {
        let p = plan(TEDDY, DecompositionConfig::A);
        assert_eq!(
            p.sub_prompts(),
            [
                "a red teddy bear wearing a green tracksuit",
                "a teddy bear wearing a tracksuit",
                "a red teddy bear wearing a tracksuit",
                "a teddy bear wearing a green tracksuit",
            ]
        );
        assert_eq!(p.subjects(), ["teddy bear", "tracksuit"]);
        assert_eq!(p.subject_span(1).unwrap(), 2..4);
        let b2 = p.branch_by_index(2).unwrap();
        assert_eq!(b2.tokens[2..4], ["teddy", "bear"]);
    }

    #[test]
    fn dog_cat_config_b() {
        let p = plan(DOGCAT, DecompositionConfig::B);
        assert_eq!(
            p.sub_prompts(),
            [
                DOGCAT,
                "a dog and a cat",
                "a red dog and a cat",
                "a dog with sunglasses and a cat",
                "a dog and a blue cat",
                "a dog and a cat with a necklace",
            ]
        );
        assert_eq!(p.subjects(), ["dog", "dog", "cat", "cat"]);
        let span = p.subject_span(3).unwrap();
        assert_eq!(p.branch_by_index(4).unwrap().tokens[span], ["cat"]);
    }

    #[test]
    fn modifier_free_prompt_is_single_branch() {
        for config in [
            DecompositionConfig::A,
            DecompositionConfig::B,
            DecompositionConfig::C,
            DecompositionConfig::D,
            DecompositionConfig::Accumulative,
        ] {
            let p = plan("a dog and a cat", config);
            assert_eq!(p.sub_prompts(), ["a dog and a cat"]);
            assert!(p.subjects().is_empty());
        }
    }

    #[test]
    fn subject_span_range_checks() {
        let p = plan(DOGCAT, DecompositionConfig::B);
        assert!(matches!(p.subject_span(99), Err(PdiError::Index { .. })));
        assert!(matches!(p.subject_span(0), Err(PdiError::Index { .. })));
        assert!(p.subject_span(4).is_ok());
        assert!(p.subject_span(5).is_err());
    }

    #[test]
    fn style_prompt_decomposes_per_component() {
        let p = plan(
            "a lego style robot in a oil-painting style forest",
            DecompositionConfig::B,
        );
        assert_eq!(
            p.sub_prompts(),
            [
                "a lego style robot in a oil-painting style forest",
                "a robot in a forest",
                "a lego style robot in a forest",
                "a robot in a oil-painting style forest",
            ]
        );
        assert_eq!(p.subjects(), ["robot", "forest"]);
    }

    #[test]
    fn tsv_listing() {
        let p = plan(TEDDY, DecompositionConfig::A);
        assert_eq!(
            p.to_tsv(),
            "0\ta red teddy bear wearing a green tracksuit\t-\n\
             1\ta teddy bear wearing a tracksuit\t-\n\
             2\ta red teddy bear wearing a tracksuit\tteddy bear\n\
             3\ta teddy bear wearing a green tracksuit\ttracksuit\n"
        );
    }

    #[test]
    fn config_parsing() {
        assert_eq!("accum".parse::<DecompositionConfig>().unwrap(), DecompositionConfig::Accumulative);
        assert_eq!("b".parse::<DecompositionConfig>().unwrap(), DecompositionConfig::B);
        assert!("E".parse::<DecompositionConfig>().is_err());
    }
}
