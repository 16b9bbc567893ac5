//! Shallow fusion with a class LM over dictionary target forms (consulted
//! inside entity tags) and a generic LM over target text (outside tags).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biasdec::{beam_search, BeamConfig, S2tModel};
use crate::corpus::{Category, NamedEntity, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LM_FORMAT: &str = "nedict-ngram/1";
pub const LM_BOS: &str = "<s>";
pub const LM_EOS: &str = "</s>";
pub const LM_UNK: &str = "<unk>";

/// Add-k smoothed n-gram model. A word is predicted from the longest
/// suffix of its context that was seen as a context in training; unseen
/// contexts back off to shorter ones, down to the unigram distribution.
/// Every distribution is normalised over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramLM {
    order: usize,
    k: f64,
    /// Predictable tokens: training words, `</s>`, `<unk>`.
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// Raw n-gram counts keyed by token strings (orders 1..=n).
    counts: BTreeMap<Vec<String>, u64>,
    /// Context → (total count, successor counts by vocabulary id).
    contexts: HashMap<Vec<String>, (u64, Vec<(usize, u64)>)>,
}

impl NgramLM {
    /// Train on token sequences. Each sequence is padded with `<s>` on the
    /// left; `</s>` is appended when `close` is set.
    pub fn train<S: AsRef<str>>(sequences: &[(Vec<S>, bool)], order: usize, k: f64) -> Result<Self> {
        if order == 0 || !(k > 0.0) {
            return Err(Error::Config("LM order and smoothing constant must be positive".into()));
        }
        if sequences.iter().all(|(s, close)| s.is_empty() && !close) {
            return Err(Error::Empty("language-model training data"));
        }
        let mut counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for (seq, close) in sequences {
            let mut toks: Vec<String> = vec![LM_BOS.to_string(); order - 1];
            toks.extend(seq.iter().map(|t| t.as_ref().to_string()));
            if *close {
                toks.push(LM_EOS.to_string());
            }
            for i in (order - 1)..toks.len() {
                for n in 1..=order {
                    let gram = toks[i + 1 - n..=i].to_vec();
                    *counts.entry(gram).or_insert(0) += 1;
                }
            }
        }
        Self::from_counts(order, k, counts)
    }

    fn from_counts(order: usize, k: f64, counts: BTreeMap<Vec<String>, u64>) -> Result<Self> {
        let mut words: Vec<String> = counts
            .keys()
            .filter(|g| g.len() == 1)
            .map(|g| g[0].clone())
            .filter(|w| w != LM_BOS)
            .collect();
        for special in [LM_EOS, LM_UNK] {
            if !words.iter().any(|w| w == special) {
                words.push(special.to_string());
            }
        }
        words.sort();
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut contexts: HashMap<Vec<String>, (u64, Vec<(usize, u64)>)> = HashMap::new();
        for (gram, &c) in &counts {
            let (ctx, w) = gram.split_at(gram.len() - 1);
            let Some(&wi) = index.get(&w[0]) else {
                return Err(Error::Config(format!("n-gram predicts unknown token `{}`", w[0])));
            };
            let e = contexts.entry(ctx.to_vec()).or_insert((0, Vec::new()));
            e.0 += c;
            e.1.push((wi, c));
        }
        Ok(NgramLM {
            order,
            k,
            vocab: words,
            index,
            counts,
            contexts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Vocabulary id, with unknown words mapped to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.index[LM_UNK])
    }

    /// The longest seen suffix of `history` (padded with `<s>`).
    fn backoff_context(&self, history: &[String]) -> Vec<String> {
        let mut padded: Vec<String> = vec![LM_BOS.to_string(); self.order - 1];
        padded.extend_from_slice(history);
        let full = &padded[padded.len() - (self.order - 1)..];
        for n in (0..full.len() + 1).rev() {
            let ctx = full[full.len() - n..].to_vec();
            if self.contexts.contains_key(&ctx) {
                return ctx;
            }
        }
        Vec::new()
    }

    /// `P(· | history)` over [`NgramLM::vocab`].
    pub fn distribution(&self, history: &[String]) -> Vec<f64> {
        let ctx = self.backoff_context(history);
        let v = self.vocab.len() as f64;
        let (total, succ) = self.contexts.get(&ctx).map(|(t, s)| (*t, s.as_slice())).unwrap_or((0, &[]));
        let denom = total as f64 + self.k * v;
        let mut p = vec![self.k / denom; self.vocab.len()];
        for &(w, c) in succ {
            p[w] = (c as f64 + self.k) / denom;
        }
        p
    }

    pub fn logprob(&self, history: &[String], token: &str) -> f64 {
        self.distribution(history)[self.id(token)].ln()
    }

    /// Per-token perplexity of sequences (each closed with `</s>`).
    pub fn perplexity<S: AsRef<str>>(&self, sequences: &[Vec<S>]) -> Result<f64> {
        let (mut nll, mut n) = (0.0, 0usize);
        for seq in sequences {
            let mut hist: Vec<String> = Vec::new();
            for t in seq.iter().map(|t| t.as_ref().to_string()).chain(std::iter::once(LM_EOS.to_string())) {
                nll -= self.logprob(&hist, &t);
                hist.push(t);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("perplexity input"));
        }
        Ok((nll / n as f64).exp())
    }

    /// Text form: header lines, vocabulary, then n-gram counts sorted by
    /// order and tokens.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{LM_FORMAT}").unwrap();
        writeln!(s, "order {}", self.order).unwrap();
        writeln!(s, "smoothing {}", self.k).unwrap();
        let mut grams: Vec<(&Vec<String>, &u64)> = self.counts.iter().collect();
        grams.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then(a.0.cmp(b.0)));
        writeln!(s, "ngrams {}", grams.len()).unwrap();
        for (g, c) in grams {
            writeln!(s, "{}\t{c}", g.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut lines = text.lines();
        if lines.next() != Some(LM_FORMAT) {
            return Err(bad(format!("missing `{LM_FORMAT}` header")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{name}` line")))?;
            line.strip_prefix(&format!("{name} "))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{name}`, found `{line}`")))
        };
        let order: usize = field("order")?.parse().map_err(|e| bad(format!("order: {e}")))?;
        let k: f64 = field("smoothing")?.parse().map_err(|e| bad(format!("smoothing: {e}")))?;
        let n: usize = field("ngrams")?.parse().map_err(|e| bad(format!("ngrams: {e}")))?;
        let mut counts = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let (g, c) = line.split_once('\t').ok_or_else(|| bad(format!("count line {} malformed", i + 1)))?;
            let c: u64 = c.parse().map_err(|e| bad(format!("count line {}: {e}", i + 1)))?;
            counts.insert(g.split(' ').map(str::to_string).collect::<Vec<_>>(), c);
        }
        if counts.len() != n {
            return Err(bad(format!("{} n-grams, header says {n}", counts.len())));
        }
        Self::from_counts(order, k, counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "LM files are written by `nedict decode-fused`".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_text(path, &text)
    }
}

/// Class LM over the target forms of the given entities.
pub fn train_class_lm(entities: &[NamedEntity], order: usize, k: f64) -> Result<NgramLM> {
    if entities.is_empty() {
        return Err(Error::Empty("class LM entities"));
    }
    let seqs: Vec<(Vec<String>, bool)> = entities
        .iter()
        .map(|e| (e.target_tokens().iter().map(|s| s.to_string()).collect(), true))
        .collect();
    NgramLM::train(&seqs, order, k)
}

/// Split target text at tag tokens; each segment is an LM sequence and only
/// the sentence-final one is closed with `</s>`.
pub fn lm_segments(target_tokens: &[String]) -> Vec<(Vec<String>, bool)> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in target_tokens {
        if Category::parse_tag(t).is_some() {
            if !cur.is_empty() {
                out.push((std::mem::take(&mut cur), false));
            }
        } else {
            cur.push(t.clone());
        }
    }
    out.push((cur, true));
    out
}

/// Generic LM over the target side of a set of utterances.
pub fn train_generic_lm(utts: &[Utterance], order: usize, k: f64) -> Result<NgramLM> {
    if utts.is_empty() {
        return Err(Error::Empty("generic LM corpus"));
    }
    let seqs: Vec<(Vec<String>, bool)> = utts.iter().flat_map(|u| lm_segments(&u.target_tokens)).collect();
    NgramLM::train(&seqs, order, k)
}

/// Per-hypothesis tag state and LM history.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FusionState {
    pub inside_tag: Option<Category>,
    /// Tokens emitted since the open tag (0 outside tags).
    pub since_open: usize,
    /// Non-tag tokens since the last tag token or the sentence start.
    pub history: Vec<String>,
}

impl FusionState {
    pub fn advance(&self, token: &str) -> FusionState {
        match Category::parse_tag(token) {
            Some((c, true)) => FusionState {
                inside_tag: Some(c),
                since_open: 0,
                history: Vec::new(),
            },
            Some((_, false)) => FusionState::default(),
            None => {
                let mut next = self.clone();
                next.history.push(token.to_string());
                if next.inside_tag.is_some() {
                    next.since_open += 1;
                }
                next
            }
        }
    }
}

/// Counts of LM consultations, for checking the switching contract.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FusionCounters {
    pub class_lm: usize,
    pub generic_lm: usize,
}

/// Class and generic LMs with precomputed model-vocabulary mappings.
#[derive(Clone, Debug)]
pub struct FusionLms {
    pub class_lm: NgramLM,
    pub generic_lm: NgramLM,
    class_ids: Vec<usize>,
    generic_ids: Vec<usize>,
    is_tag: Vec<bool>,
    tokens: Vec<String>,
}

impl FusionLms {
    pub fn new(class_lm: NgramLM, generic_lm: NgramLM, model_vocab: &Vocab) -> Self {
        let tokens = model_vocab.tokens().to_vec();
        let map = |lm: &NgramLM| tokens.iter().map(|t| lm.id(t)).collect::<Vec<_>>();
        FusionLms {
            class_ids: map(&class_lm),
            generic_ids: map(&generic_lm),
            is_tag: tokens.iter().map(|t| Category::parse_tag(t).is_some()).collect(),
            tokens,
            class_lm,
            generic_lm,
        }
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}

/// `model + λ·LM` per token, with the class LM inside tags and the generic LM
/// outside. Tag tokens keep their model score.
pub fn fused_scores(
    model_logprobs: &[f64],
    state: &FusionState,
    lms: &FusionLms,
    lambda: f64,
    counters: &mut FusionCounters,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("fusion weight {lambda} must be non-negative")));
    }
    if model_logprobs.len() != lms.tokens.len() {
        return Err(Error::shape(
            "fused_scores",
            format!("{} model scores for {} tokens", model_logprobs.len(), lms.tokens.len()),
        ));
    }
    if lambda == 0.0 {
        return Ok(model_logprobs.to_vec());
    }
    let (lm, ids) = if state.inside_tag.is_some() {
        counters.class_lm += 1;
        (&lms.class_lm, &lms.class_ids)
    } else {
        counters.generic_lm += 1;
        (&lms.generic_lm, &lms.generic_ids)
    };
    let dist = lm.distribution(&state.history);
    Ok(model_logprobs
        .iter()
        .enumerate()
        .map(|(t, &lp)| if lms.is_tag[t] { lp } else { lp + lambda * dist[ids[t]].ln() })
        .collect())
}

/// Beam search over the base model with per-step shallow fusion.
pub fn beam_search_fused(
    model: &S2tModel,
    enc_out: &Tensor,
    lms: &FusionLms,
    lambda: f64,
    beam: &BeamConfig,
    counters: &mut FusionCounters,
) -> Result<Vec<usize>> {
    beam_search(
        beam,
        model.bos(),
        model.eos(),
        FusionState::default(),
        |prefix, state| {
            let lp = model.next_logprobs(enc_out, prefix)?;
            fused_scores(&lp, state, lms, lambda, counters)
        },
        |state, t| state.advance(lms.token(t)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
    pub order: usize,
    pub smoothing: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 0.10,
            order: 3,
            smoothing: 0.1,
        }
    }
}

/// The fusion weights compared in the translation table.
pub const LAMBDA_GRID: [f64; 3] = [0.10, 0.15, 0.20];
