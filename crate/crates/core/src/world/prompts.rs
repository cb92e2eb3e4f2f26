use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::error::{Error, Result};

/// `prefix ⊕ phrase`: the attribute phrase joined onto the neutral prefix.
/// The empty phrase leaves the prefix unchanged.
pub fn compose_prompt(prefix: &str, phrase: &str) -> String {
    let phrase = phrase.trim();
    if phrase.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix} with {phrase}")
    }
}

fn normalize_key(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributePhrases {
    pub canonical: String,
    pub synonyms: Vec<String>,
}

/// Closed vocabulary of the text encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTable {
    neutral_prefix: String,
    entries: BTreeMap<String, Embedding>,
    attributes: Vec<AttributePhrases>,
}

impl PromptTable {
    pub(crate) fn new(neutral_prefix: String) -> Self {
        Self {
            neutral_prefix,
            entries: BTreeMap::new(),
            attributes: Vec::new(),
        }
    }

    pub(crate) fn insert(&mut self, prompt: &str, embedding: Embedding) {
        self.entries.insert(normalize_key(prompt), embedding);
    }

    pub(crate) fn push_attribute(&mut self, phrases: AttributePhrases) {
        self.attributes.push(phrases);
    }

    pub fn neutral_prefix(&self) -> &str {
        &self.neutral_prefix
    }

    pub fn attributes(&self) -> &[AttributePhrases] {
        &self.attributes
    }

    pub fn lookup(&self, prompt: &str) -> Result<&Embedding> {
        self.entries
            .get(&normalize_key(prompt))
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
    }

    pub fn contains(&self, prompt: &str) -> bool {
        self.entries.contains_key(&normalize_key(prompt))
    }

    /// Index of the attribute that `phrase` names, canonically or as a synonym.
    pub fn attribute_of_phrase(&self, phrase: &str) -> Option<usize> {
        let key = normalize_key(phrase);
        self.attributes.iter().position(|a| {
            normalize_key(&a.canonical) == key || a.synonyms.iter().any(|s| normalize_key(s) == key)
        })
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
