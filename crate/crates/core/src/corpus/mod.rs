//! Synthetic corpus: dictionary, utterances, persistence.

mod generate;
mod io;
pub mod phonemes;
pub mod speech;
mod types;

use std::collections::HashMap;

pub use generate::{generate_corpus, CorpusConfig};
pub use io::{load_corpus, save_corpus, FORMAT_VERSION};
pub use phonemes::{contains_subsequence, edit_distance, AcronymMode, Lexicon};
pub use speech::{phoneme_prototypes, synthesize_speech, DurationRange, Synthesized};
pub use types::{target_vocab, Category, GoldEntity, NamedEntity, Split, Splits, TextPair, Utterance, Vocab, BOS, EOS};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub lexicon: Lexicon,
    pub dictionary: Vec<NamedEntity>,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    /// Phoneme prototypes used to synthesise the speech frames.
    pub prototypes: Tensor,
    pub splits: Splits,
    /// Text-only parallel data, disjoint from the speech splits.
    pub mt: Vec<TextPair>,
}

impl Corpus {
    /// A corpus with no dictionary and no utterances.
    pub fn empty() -> Self {
        Corpus {
            seed: 0,
            config: CorpusConfig::default(),
            lexicon: Lexicon::standard(),
            dictionary: Vec::new(),
            source_vocab: Vocab::default(),
            target_vocab: target_vocab(Vec::new()),
            prototypes: Tensor::zeros(&[0, 0]),
            splits: Splits::default(),
            mt: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        self.splits.get(split)
    }

    pub fn entity_index(&self) -> HashMap<&str, usize> {
        self.dictionary.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    pub fn entity(&self, id: &str) -> Option<&NamedEntity> {
        self.dictionary.iter().find(|n| n.id == id)
    }

    pub fn num_phonemes(&self) -> usize {
        self.lexicon.num_phonemes()
    }

    /// Mean GPE/LOC/PER mentions per utterance of a split.
    pub fn scored_density(&self, split: Split) -> f64 {
        let utts = self.split(split);
        if utts.is_empty() {
            return 0.0;
        }
        let index = self.entity_index();
        let n: usize = utts
            .iter()
            .map(|u| {
                u.gold_entities
                    .iter()
                    .filter(|g| Category::SCORED.contains(&self.dictionary[index[g.ne_id.as_str()]].category))
                    .count()
            })
            .sum();
        n as f64 / utts.len() as f64
    }

    /// Check the structural invariants that hold for every valid corpus.
    pub fn validate(&self) -> Result<()> {
        let index = self.entity_index();
        if index.len() != self.dictionary.len() {
            return Err(Error::Config("duplicate entity ids in dictionary".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for ne in &self.dictionary {
            if ne.phonemes.is_empty() {
                return Err(Error::Config(format!("entity {} has no phonemes", ne.id)));
            }
            if !seen.insert((ne.source_surface.as_str(), ne.category)) {
                return Err(Error::Duplicate(ne.source_surface.clone()));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for split in Split::ALL {
            for u in self.split(split) {
                if !ids.insert(u.id.as_str()) {
                    return Err(Error::Duplicate(u.id.clone()));
                }
                if u.num_frames() < u.transcript_phonemes.len() {
                    return Err(Error::Config(format!("utterance {} has fewer frames than phonemes", u.id)));
                }
                if u.frame_alignment.len() != u.num_frames() {
                    return Err(Error::Config(format!("utterance {} alignment length mismatch", u.id)));
                }
                for g in &u.gold_entities {
                    if !index.contains_key(g.ne_id.as_str()) {
                        return Err(Error::Config(format!("utterance {} references unknown entity {}", u.id, g.ne_id)));
                    }
                    if g.token_len == 0 || g.token_start + g.token_len > u.transcript_tokens.len() {
                        return Err(Error::Config(format!("utterance {} has an out-of-range entity span", u.id)));
                    }
                }
                check_tags(u)?;
            }
        }
        Ok(())
    }
}

fn check_tags(u: &Utterance) -> Result<()> {
    let mut open: Option<Category> = None;
    for t in &u.target_tokens {
        if let Some((c, is_open)) = Category::parse_tag(t) {
            match (open, is_open) {
                (None, true) => open = Some(c),
                (Some(o), false) if o == c => open = None,
                _ => return Err(Error::Config(format!("utterance {} has unbalanced tags", u.id))),
            }
        }
    }
    if open.is_some() {
        return Err(Error::Config(format!("utterance {} has an unclosed tag", u.id)));
    }
    Ok(())
}
