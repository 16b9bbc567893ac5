//! Phoneme inventory, pronunciation lexicon and the phonemizer.
//!
//! Synthetic words are spelled with one letter per phoneme, so a word's
//! phonemes are recoverable from its spelling. Acronyms are the exception:
//! they are pronounced letter by letter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONSONANTS: [&str; 16] = ["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z"];
pub const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// How flagged acronym tokens are turned into phonemes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcronymMode {
    /// Letter-by-letter pronunciation (what a speaker actually says).
    #[default]
    Spell,
    /// Pronounce the acronym like its lowercase homograph ("US" as "us"),
    /// reproducing a common grapheme-to-phoneme failure.
    Homograph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    inventory: Vec<String>,
    entries: BTreeMap<String, Vec<usize>>,
    acronyms: BTreeSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::standard()
    }
}

impl Lexicon {
    /// Empty lexicon over the standard 21-symbol inventory.
    pub fn standard() -> Self {
        let inventory = CONSONANTS.iter().chain(VOWELS.iter()).map(|s| s.to_string()).collect();
        Lexicon {
            inventory,
            entries: BTreeMap::new(),
            acronyms: BTreeSet::new(),
        }
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    pub fn num_phonemes(&self) -> usize {
        self.inventory.len()
    }

    pub fn symbol_id(&self, symbol: &str) -> Option<usize> {
        self.inventory.iter().position(|s| s == symbol)
    }

    pub fn is_vowel(&self, id: usize) -> bool {
        VOWELS.contains(&self.inventory[id].as_str())
    }

    pub fn insert(&mut self, token: impl Into<String>, phonemes: Vec<usize>) -> Result<()> {
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.inventory.len()) {
            return Err(Error::UnknownPhoneme(bad));
        }
        self.entries.insert(token.into(), phonemes);
        Ok(())
    }

    /// Register a word whose spelling is its phoneme string.
    pub fn insert_spelled(&mut self, token: &str) -> Result<Vec<usize>> {
        let ph = self.letters_to_phonemes(token)?;
        self.insert(token, ph.clone())?;
        Ok(ph)
    }

    pub fn flag_acronym(&mut self, token: impl Into<String>) {
        self.acronyms.insert(token.into());
    }

    pub fn is_acronym(&self, token: &str) -> bool {
        self.acronyms.contains(token)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token) || self.acronyms.contains(token)
    }

    pub fn lookup(&self, token: &str) -> Option<&[usize]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Phonemes of a lowercase-insensitive spelling, one phoneme per letter.
    pub fn letters_to_phonemes(&self, word: &str) -> Result<Vec<usize>> {
        word.chars()
            .map(|c| {
                let s = c.to_ascii_lowercase().to_string();
                self.symbol_id(&s).ok_or_else(|| Error::UnknownToken(word.to_string()))
            })
            .collect()
    }

    /// Letter-name pronunciation: vowels are said as themselves, consonants
    /// as `e` + consonant ("S" → "es").
    pub fn spell_letters(&self, token: &str) -> Result<Vec<usize>> {
        let e = self.symbol_id("e").expect("standard inventory has `e`");
        let mut out = Vec::new();
        for c in token.chars() {
            let s = c.to_ascii_lowercase().to_string();
            let id = self.symbol_id(&s).ok_or_else(|| Error::UnknownToken(token.to_string()))?;
            if self.is_vowel(id) {
                out.push(id);
            } else {
                out.extend([e, id]);
            }
        }
        Ok(out)
    }

    fn token_phonemes(&self, token: &str, mode: AcronymMode) -> Result<Vec<usize>> {
        if self.acronyms.contains(token) {
            return match mode {
                AcronymMode::Spell => self.spell_letters(token),
                AcronymMode::Homograph => self
                    .entries
                    .get(&token.to_lowercase())
                    .cloned()
                    .ok_or_else(|| Error::UnknownToken(token.to_lowercase())),
            };
        }
        self.entries
            .get(token)
            .cloned()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// Concatenated phonemes of `tokens`.
    pub fn phonemize<S: AsRef<str>>(&self, tokens: &[S], mode: AcronymMode) -> Result<Vec<usize>> {
        Ok(self.phonemize_with_spans(tokens, mode)?.0)
    }

    /// Phonemes plus the `(start, len)` span each token occupies.
    pub fn phonemize_with_spans<S: AsRef<str>>(&self, tokens: &[S], mode: AcronymMode) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
        let mut out = Vec::new();
        let mut spans = Vec::with_capacity(tokens.len());
        for t in tokens {
            let ph = self.token_phonemes(t.as_ref(), mode)?;
            spans.push((out.len(), ph.len()));
            out.extend(ph);
        }
        Ok((out, spans))
    }

    pub fn symbols(&self, phonemes: &[usize]) -> String {
        phonemes.iter().map(|&p| self.inventory[p].as_str()).collect()
    }
}

/// Whether `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_subsequence(haystack: &[usize], needle: &[usize]) -> bool {
    if needle.is_empty() {
        return true;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Levenshtein distance over phoneme ids.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        let mut l = Lexicon::standard();
        l.insert_spelled("tok").unwrap();
        l.insert_spelled("us").unwrap();
        l.flag_acronym("US");
        l
    }

    #[test]
    fn empty_tokens_give_empty_phonemes() {
        let tokens: [&str; 0] = [];
        assert!(lex().phonemize(&tokens, AcronymMode::Spell).unwrap().is_empty());
    }

    #[test]
    fn table_lookup() {
        let mut l = lex();
        l.insert("tok17", vec![3, 9]).unwrap();
        assert_eq!(l.phonemize(&["tok17"], AcronymMode::Spell).unwrap(), vec![3, 9]);
    }

    #[test]
    fn acronym_modes() {
        let l = lex();
        let homograph = l.phonemize(&["US"], AcronymMode::Homograph).unwrap();
        assert_eq!(homograph, l.lookup("us").unwrap());
        let spelled = l.phonemize(&["US"], AcronymMode::Spell).unwrap();
        assert_eq!(l.symbols(&spelled), "ues");
        assert!(!contains_subsequence(&spelled, &homograph));
    }

    #[test]
    fn out_of_vocabulary_names_the_token() {
        let err = lex().phonemize(&["tok", "zzq9"], AcronymMode::Spell).unwrap_err();
        assert!(err.to_string().contains("zzq9"));
    }

    #[test]
    fn spans_tile_the_phoneme_sequence() {
        let l = lex();
        let (ph, spans) = l.phonemize_with_spans(&["tok", "us", "tok"], AcronymMode::Spell).unwrap();
        assert_eq!(spans, vec![(0, 3), (3, 2), (5, 3)]);
        assert_eq!(ph.len(), 8);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }
}
