//! Recursive-descent parser for the prompt grammar:
//!
//! ```text
//! prompt     := clause ("and" clause)*
//! clause     := phrase attachment*
//! attachment := ("with" | "wearing" | "in") phrase
//! phrase     := article? modifier* noun+
//! modifier   := adjective | style-word "style"
//! ```
//!
//! The style-composition form `a <style> style <subject> in a <style> style
//! <background>` is a clause whose head carries a style modifier and whose
//! `in` attachment is the background.

use super::{
    lexicon, tokenize, ModifierCategory, ARTICLES, ATTACHMENT_WORDS, CONJUNCTION, STYLE_WORD,
};
use crate::error::{PdiError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Modifier {
    pub word: String,
    pub category: ModifierCategory,
    /// Written as `<word> style`.
    pub style_suffix: bool,
}

impl Modifier {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = vec![self.word.clone()];
        if self.style_suffix {
            out.push(STYLE_WORD.to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounPhrase {
    pub article: Option<String>,
    pub modifiers: Vec<Modifier>,
    pub noun: Vec<String>,
}

impl NounPhrase {
    pub fn noun_text(&self) -> String {
        self.noun.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub keyword: String,
    pub phrase: NounPhrase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub head: NounPhrase,
    pub attachments: Vec<Attachment>,
}

impl Clause {
    /// Style modifier of the head noun, when the clause is in style form.
    pub fn style_prefix(&self) -> Option<&Modifier> {
        self.head
            .modifiers
            .iter()
            .find(|m| m.category == ModifierCategory::Style)
    }

    /// The `in ...` attachment, read as the scene background.
    pub fn background(&self) -> Option<&NounPhrase> {
        self.attachments
            .iter()
            .find(|a| a.keyword == "in")
            .map(|a| &a.phrase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTree {
    pub clauses: Vec<Clause>,
    /// The source text ended with a period; rendered sub-prompts keep it.
    pub terminal_period: bool,
}

impl PromptTree {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, clause) in self.clauses.iter().enumerate() {
            if i > 0 {
                out.push(CONJUNCTION.to_string());
            }
            push_phrase(&mut out, &clause.head, true);
            for att in &clause.attachments {
                out.push(att.keyword.clone());
                push_phrase(&mut out, &att.phrase, true);
            }
        }
        out
    }

    pub fn modifier_count(&self) -> usize {
        self.clauses
            .iter()
            .map(|c| {
                c.head.modifiers.len()
                    + c.attachments
                        .iter()
                        .map(|a| a.phrase.modifiers.len())
                        .sum::<usize>()
            })
            .sum()
    }
}

pub(crate) fn push_phrase(out: &mut Vec<String>, phrase: &NounPhrase, with_modifiers: bool) {
    out.extend(phrase.article.iter().cloned());
    if with_modifiers {
        out.extend(phrase.modifiers.iter().flat_map(Modifier::tokens));
    }
    out.extend(phrase.noun.iter().cloned());
}

/// Tokenizes and parses a prompt, remembering a terminal period.
pub fn parse_prompt(text: &str) -> Result<PromptTree> {
    let tokens = tokenize(text)?;
    let mut tree = parse(&tokens)?;
    tree.terminal_period = text.trim_end().ends_with('.');
    Ok(tree)
}

pub fn parse(tokens: &[String]) -> Result<PromptTree> {
    if tokens.is_empty() {
        return Err(PdiError::ParseInput("no tokens".into()));
    }
    let mut parser = Parser { tokens, pos: 0 };
    let mut clauses = vec![parser.clause()?];
    while parser.peek() == Some(CONJUNCTION) {
        parser.pos += 1;
        clauses.push(parser.clause()?);
    }
    if parser.pos < tokens.len() {
        return Err(parser.error("unexpected token after clause"));
    }
    Ok(PromptTree {
        clauses,
        terminal_period: false,
    })
}

struct Parser<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn error(&self, reason: &str) -> PdiError {
        PdiError::Parse {
            index: self.pos,
            token: self.peek().unwrap_or("<end>").to_string(),
            reason: reason.to_string(),
        }
    }

    fn clause(&mut self) -> Result<Clause> {
        let head = self.phrase()?;
        let mut attachments = Vec::new();
        while let Some(word) = self.peek().filter(|w| ATTACHMENT_WORDS.contains(w)) {
            let keyword = word.to_string();
            self.pos += 1;
            attachments.push(Attachment {
                keyword,
                phrase: self.phrase()?,
            });
        }
        Ok(Clause { head, attachments })
    }

    fn phrase(&mut self) -> Result<NounPhrase> {
        let article = self
            .peek()
            .filter(|w| ARTICLES.contains(w))
            .map(str::to_string);
        if article.is_some() {
            self.pos += 1;
        }
        let lex = lexicon();
        let mut modifiers = Vec::new();
        while let Some(word) = self.peek() {
            let Some(&category) = lex.get(word) else { break };
            let style_suffix = category == ModifierCategory::Style
                && self.tokens.get(self.pos + 1).map(String::as_str) == Some(STYLE_WORD);
            modifiers.push(Modifier {
                word: word.to_string(),
                category,
                style_suffix,
            });
            self.pos += 1 + usize::from(style_suffix);
        }
        let mut noun = Vec::new();
        while let Some(word) = self.peek() {
            if is_reserved(word) || lex.contains_key(word) {
                break;
            }
            noun.push(word.to_string());
            self.pos += 1;
        }
        if noun.is_empty() {
            return Err(self.error("expected a noun"));
        }
        Ok(NounPhrase {
            article,
            modifiers,
            noun,
        })
    }
}

fn is_reserved(word: &str) -> bool {
    word == CONJUNCTION || ARTICLES.contains(&word) || ATTACHMENT_WORDS.contains(&word)
}
