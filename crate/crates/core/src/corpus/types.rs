use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "GPE")]
    Gpe,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "ORG")]
    Org,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Gpe, Category::Loc, Category::Per, Category::Org];
    /// Categories reported by the detection and translation metrics.
    pub const SCORED: [Category; 3] = [Category::Gpe, Category::Loc, Category::Per];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Gpe => "GPE",
            Category::Loc => "LOC",
            Category::Per => "PER",
            Category::Org => "ORG",
        }
    }

    pub fn open_tag(self) -> String {
        format!("<{}>", self.as_str())
    }

    pub fn close_tag(self) -> String {
        format!("</{}>", self.as_str())
    }

    /// Parse `<CAT>` / `</CAT>`; returns the category and whether it opens.
    pub fn parse_tag(token: &str) -> Option<(Category, bool)> {
        let inner = token.strip_prefix('<')?.strip_suffix('>')?;
        let (name, open) = match inner.strip_prefix('/') {
            Some(n) => (n, false),
            None => (inner, true),
        };
        name.parse().ok().map(|c| (c, open))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GPE" => Ok(Category::Gpe),
            "LOC" => Ok(Category::Loc),
            "PER" => Ok(Category::Per),
            "ORG" => Ok(Category::Org),
            other => Err(Error::Config(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedEntity {
    pub id: String,
    /// Space-separated source tokens.
    pub source_surface: String,
    /// Text-side phonemes as produced by the phonemizer for this entry.
    pub phonemes: Vec<usize>,
    /// Space-separated target-language tokens.
    pub target_form: String,
    pub category: Category,
}

impl NamedEntity {
    pub fn source_tokens(&self) -> Vec<&str> {
        self.source_surface.split_whitespace().collect()
    }

    pub fn target_tokens(&self) -> Vec<&str> {
        self.target_form.split_whitespace().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntity {
    pub ne_id: String,
    /// First transcript token of the mention.
    pub token_start: usize,
    pub token_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub transcript_tokens: Vec<String>,
    pub transcript_phonemes: Vec<usize>,
    /// `(start, len)` of each transcript token inside `transcript_phonemes`.
    pub token_phoneme_spans: Vec<(usize, usize)>,
    /// Transcript phoneme position emitted by each speech frame.
    pub frame_alignment: Vec<usize>,
    pub target_tokens: Vec<String>,
    pub gold_entities: Vec<GoldEntity>,
    #[serde(skip)]
    pub speech_frames: Tensor,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(&[0, 0])
    }
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.speech_frames.rows()
    }

    /// Phoneme range covered by transcript tokens `[start, start + len)`.
    pub fn phoneme_range(&self, token_start: usize, token_len: usize) -> (usize, usize) {
        let (s, _) = self.token_phoneme_spans[token_start];
        let (ls, ll) = self.token_phoneme_spans[token_start + token_len - 1];
        (s, ls + ll - s)
    }
}

/// Token table with dense ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_err(&self, token: &str) -> Result<usize> {
        self.id(token).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id_or_err(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Target-side vocabulary: `<s>`, `</s>`, the eight tag tokens, then words.
pub fn target_vocab(words: impl IntoIterator<Item = String>) -> Vocab {
    let mut tokens = vec![BOS.to_string(), EOS.to_string()];
    for c in Category::ALL {
        tokens.push(c.open_tag());
        tokens.push(c.close_tag());
    }
    let mut rest: Vec<String> = words.into_iter().collect();
    rest.sort();
    rest.dedup();
    tokens.extend(rest);
    Vocab::from(tokens)
}

/// A text-only translation pair (no speech) for the text-to-text objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextPair {
    pub source_tokens: Vec<String>,
    pub phonemes: Vec<usize>,
    pub target_tokens: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}
