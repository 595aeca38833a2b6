//! Controlled prompt language: tokenizer, modifier lexicon, parser and the
//! sub-prompt decomposition that drives the branches.

mod decompose;
mod parse;

pub use decompose::{decompose, BranchSubject, DecompositionConfig, PlanBranch, PromptPlan};
pub use parse::{parse, parse_prompt, Attachment, Clause, Modifier, NounPhrase, PromptTree};

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{PdiError, Result};

pub(crate) const ARTICLES: [&str; 3] = ["a", "an", "the"];
pub(crate) const ATTACHMENT_WORDS: [&str; 3] = ["with", "wearing", "in"];
pub(crate) const CONJUNCTION: &str = "and";
pub(crate) const STYLE_WORD: &str = "style";

const LEXICON_DATA: &str = include_str!("lexicon.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModifierCategory {
    Color,
    Texture,
    Style,
    Other,
}

impl ModifierCategory {
    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "color" => Some(Self::Color),
            "texture" => Some(Self::Texture),
            "style" => Some(Self::Style),
            "other" => Some(Self::Other),
            _ => None,
        }
    }
}

/// Built-in modifier vocabulary, loaded from the bundled data file.
pub fn lexicon() -> &'static HashMap<String, ModifierCategory> {
    static LEXICON: OnceLock<HashMap<String, ModifierCategory>> = OnceLock::new();
    LEXICON.get_or_init(|| {
        LEXICON_DATA
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let (tag, word) = l.split_once('\t').expect("lexicon line is tag<TAB>word");
                let cat = ModifierCategory::from_tag(tag).expect("known lexicon category");
                (word.to_string(), cat)
            })
            .collect()
    })
}

/// Lowercases, strips punctuation and splits on whitespace. Hyphens and
/// apostrophes inside a word are kept (`oil-painting`).
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    let tokens: Vec<String> = cleaned
        .split_whitespace()
        .map(|w| w.trim_matches(|c| c == '-' || c == '\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(PdiError::ParseInput("prompt has no tokens".into()));
    }
    Ok(tokens)
}
