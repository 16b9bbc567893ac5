//! Synthetic speech-translation corpus with a named-entity dictionary.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phonemes::{AcronymMode, Lexicon, CONSONANTS, VOWELS};
use super::speech::{phoneme_prototypes, synthesize_speech, DurationRange};
use super::types::{target_vocab, Category, GoldEntity, NamedEntity, Split, Splits, TextPair, Utterance, Vocab};
use super::Corpus;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub dictionary_size: usize,
    /// Dictionary shares per category; PER takes the remainder.
    pub gpe_share: f64,
    pub loc_share: f64,
    pub org_share: f64,
    pub common_words: usize,
    /// Text-only translation pairs of common words for the text objective.
    pub mt_pairs: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Mean GPE/LOC/PER mentions per utterance.
    pub train_ne_density: f64,
    pub test_ne_density: f64,
    /// Mean ORG mentions per utterance.
    pub org_density: f64,
    pub acronyms: usize,
    /// Fraction of GPE/LOC names created as a one-letter variant of an
    /// earlier name (phonetically confusable distractors).
    pub variant_rate: f64,
    /// Fraction of ORG entries that embed a GPE name ("Treaty of X" style).
    pub nested_org_rate: f64,
    pub first_names: usize,
    pub surnames: usize,
    pub speech_dim: usize,
    pub noise_sigma: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Pronunciation used for the dictionary's text-side phonemes.
    pub acronym_mode: AcronymMode,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_utterances: 2000,
            dev_utterances: 100,
            test_utterances: 200,
            dictionary_size: 294,
            gpe_share: 0.30,
            loc_share: 0.20,
            org_share: 0.15,
            common_words: 300,
            mt_pairs: 8000,
            min_words: 2,
            max_words: 5,
            train_ne_density: 0.6,
            test_ne_density: 0.34,
            org_density: 0.05,
            acronyms: 6,
            variant_rate: 0.15,
            nested_org_rate: 0.3,
            first_names: 40,
            surnames: 90,
            speech_dim: 32,
            noise_sigma: 0.3,
            min_frames: 1,
            max_frames: 4,
            acronym_mode: AcronymMode::Spell,
        }
    }
}

impl CorpusConfig {
    /// A few-second corpus for unit tests.
    pub fn tiny() -> Self {
        CorpusConfig {
            train_utterances: 60,
            dev_utterances: 10,
            test_utterances: 20,
            dictionary_size: 24,
            common_words: 40,
            mt_pairs: 100,
            acronyms: 2,
            first_names: 6,
            surnames: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shares = [self.gpe_share, self.loc_share, self.org_share];
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || shares.iter().sum::<f64>() > 1.0 {
            return Err(Error::Config("category shares must lie in [0,1] and sum to at most 1".into()));
        }
        for (name, p) in [
            ("variant_rate", self.variant_rate),
            ("nested_org_rate", self.nested_org_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1]")));
            }
        }
        for (name, d) in [
            ("train_ne_density", self.train_ne_density),
            ("test_ne_density", self.test_ne_density),
            ("org_density", self.org_density),
        ] {
            if !(0.0..=MAX_SCORED_PER_UTT as f64).contains(&d) {
                return Err(Error::Config(format!("{name} must lie in [0,{MAX_SCORED_PER_UTT}]")));
            }
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if self.common_words < self.max_words {
            return Err(Error::Config("common_words must be at least max_words".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("need 1 <= min_frames <= max_frames".into()));
        }
        if self.speech_dim == 0 {
            return Err(Error::Config("speech_dim must be positive".into()));
        }
        if self.first_names == 0 || self.surnames == 0 {
            return Err(Error::Config("name pools must be non-empty".into()));
        }
        Ok(())
    }

    fn category_counts(&self) -> [(Category, usize); 4] {
        let n = self.dictionary_size as f64;
        let gpe = (n * self.gpe_share).round() as usize;
        let loc = (n * self.loc_share).round() as usize;
        let org = (n * self.org_share).round() as usize;
        let per = self.dictionary_size.saturating_sub(gpe + loc + org);
        [
            (Category::Gpe, gpe),
            (Category::Loc, loc),
            (Category::Per, per),
            (Category::Org, org),
        ]
    }
}

const MAX_SCORED_PER_UTT: usize = 2;
const MAX_ORG_PER_UTT: usize = 1;
const ORG_HEADS: usize = 5;
const GEO_WORDS: usize = 4;

struct WordFactory {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordFactory {
    fn syllable(&mut self, closed: bool) -> String {
        let c = CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())];
        let v = VOWELS[self.rng.gen_range(0..VOWELS.len())];
        let mut s = format!("{c}{v}");
        if closed {
            s.push_str(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())]);
        }
        s
    }

    /// Fresh lowercase word of `syllables` syllables, unique across the corpus.
    fn fresh(&mut self, syllables: std::ops::RangeInclusive<usize>, closed_p: f64) -> String {
        loop {
            let n = self.rng.gen_range(syllables.clone());
            let mut w = String::new();
            for _ in 0..n {
                let closed = self.rng.gen_bool(closed_p);
                w.push_str(&self.syllable(closed));
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    /// One-letter substitution of `base` (same consonant/vowel class).
    fn variant(&mut self, base: &str) -> Option<String> {
        let chars: Vec<char> = base.chars().collect();
        for _ in 0..20 {
            let i = self.rng.gen_range(0..chars.len());
            let c = chars[i].to_string();
            let pool: &[&str] = if VOWELS.contains(&c.as_str()) { &VOWELS } else { &CONSONANTS };
            let r = pool[self.rng.gen_range(0..pool.len())];
            if r == c {
                continue;
            }
            let mut out = chars.clone();
            out[i] = r.chars().next().expect("non-empty symbol");
            let w: String = out.into_iter().collect();
            if self.used.insert(w.clone()) {
                return Some(w);
            }
        }
        None
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

/// Deterministic "target-language" respelling of a proper noun.
fn respell(w: &str) -> String {
    w.chars()
        .map(|c| match c {
            'b' => 'p',
            'p' => 'b',
            'd' => 't',
            't' => 'd',
            'v' => 'f',
            'f' => 'v',
            'k' => 'g',
            'g' => 'k',
            's' => 'z',
            'z' => 's',
            'B' => 'P',
            'P' => 'B',
            'D' => 'T',
            'T' => 'D',
            'V' => 'F',
            'F' => 'V',
            'K' => 'G',
            'G' => 'K',
            'S' => 'Z',
            'Z' => 'S',
            other => other,
        })
        .collect::<String>()
        + "a"
}

/// Derive a per-utterance seed from the corpus seed.
fn derive_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((split as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Builder {
    words: WordFactory,
    lexicon: Lexicon,
    common: Vec<String>,
    translation: HashMap<String, String>,
}

impl Builder {
    fn register_common(&mut self, w: String) -> Result<()> {
        self.lexicon.insert_spelled(&w)?;
        let t = self.words.fresh(1..=2, 0.3);
        self.translation.insert(w.clone(), t);
        self.common.push(w);
        Ok(())
    }

    fn proper(&mut self, syllables: std::ops::RangeInclusive<usize>) -> Result<String> {
        let w = capitalize(&self.words.fresh(syllables, 0.25));
        self.lexicon.insert_spelled(&w)?;
        Ok(w)
    }
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let counts = config.category_counts();
    let count_of = |c: Category| counts.iter().find(|(k, _)| *k == c).map_or(0, |(_, n)| *n);
    let scored_dict: usize = Category::SCORED.iter().map(|&c| count_of(c)).sum();
    let org_dict = count_of(Category::Org);
    let scored_mentions_train = ((config.train_ne_density * config.train_utterances as f64).round() as usize).max(scored_dict);
    let org_mentions_train = ((config.org_density * config.train_utterances as f64).round() as usize).max(org_dict);
    if scored_mentions_train > MAX_SCORED_PER_UTT * config.train_utterances || org_mentions_train > MAX_ORG_PER_UTT * config.train_utterances {
        return Err(Error::Config(format!(
            "dictionary of {} entries cannot be covered by {} training utterances",
            config.dictionary_size, config.train_utterances
        )));
    }
    if config.dictionary_size > 0 && config.train_utterances == 0 {
        return Err(Error::Config("a non-empty dictionary needs training utterances".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        words: WordFactory {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_F00D),
            used: HashSet::new(),
        },
        lexicon: Lexicon::standard(),
        common: Vec::new(),
        translation: HashMap::new(),
    };

    // Acronym homographs are ordinary words too ("us" next to "US").
    let mut acronyms = Vec::new();
    for _ in 0..config.acronyms.min(config.common_words) {
        let w = b.words.fresh(1..=1, 0.5);
        acronyms.push(w.to_uppercase());
        b.register_common(w)?;
    }
    while b.common.len() < config.common_words {
        let w = b.words.fresh(1..=2, 0.3);
        b.register_common(w)?;
    }

    let mut dictionary: Vec<NamedEntity> = Vec::new();
    let mut target_words: BTreeSet<String> = b.translation.values().cloned().collect();
    let mut surfaces: HashSet<(String, Category)> = HashSet::new();
    let mut push_entity = |dict: &mut Vec<NamedEntity>, source: String, target: String, cat: Category, lexicon: &Lexicon| -> Result<bool> {
        if !surfaces.insert((source.clone(), cat)) {
            return Ok(false);
        }
        let tokens: Vec<&str> = source.split_whitespace().collect();
        let phonemes = lexicon.phonemize(&tokens, config.acronym_mode)?;
        dict.push(NamedEntity {
            id: format!("ne{:04}", dict.len()),
            source_surface: source,
            phonemes,
            target_form: target,
            category: cat,
        });
        Ok(true)
    };

    // GPE: single proper nouns, some as confusable variants of earlier ones.
    let mut gpe_names: Vec<String> = Vec::new();
    while gpe_names.len() < count_of(Category::Gpe) {
        let name = if !gpe_names.is_empty() && rng.gen_bool(config.variant_rate) {
            let base = gpe_names[rng.gen_range(0..gpe_names.len())].to_lowercase();
            match b.words.variant(&base) {
                Some(v) => {
                    let v = capitalize(&v);
                    b.lexicon.insert_spelled(&v)?;
                    v
                }
                None => b.proper(2..=3)?,
            }
        } else {
            b.proper(2..=3)?
        };
        let target = respell(&name);
        target_words.insert(target.clone());
        if push_entity(&mut dictionary, name.clone(), target, Category::Gpe, &b.lexicon)? {
            gpe_names.push(name);
        }
    }

    // LOC: a proper noun, optionally followed by a geographic word.
    let geo: Vec<(String, String)> = (0..GEO_WORDS)
        .map(|_| -> Result<(String, String)> {
            let w = b.proper(1..=2)?;
            let t = capitalize(&b.words.fresh(1..=2, 0.3));
            Ok((w, t))
        })
        .collect::<Result<_>>()?;
    for (_, t) in &geo {
        target_words.insert(t.clone());
    }
    let mut loc_names: Vec<String> = Vec::new();
    let mut produced = 0;
    while produced < count_of(Category::Loc) {
        let name = if !loc_names.is_empty() && rng.gen_bool(config.variant_rate) {
            let base = loc_names[rng.gen_range(0..loc_names.len())].to_lowercase();
            match b.words.variant(&base) {
                Some(v) => {
                    let v = capitalize(&v);
                    b.lexicon.insert_spelled(&v)?;
                    v
                }
                None => b.proper(2..=3)?,
            }
        } else {
            b.proper(2..=3)?
        };
        let target_name = respell(&name);
        target_words.insert(target_name.clone());
        let (source, target) = if rng.gen_bool(0.4) {
            let (g, gt) = &geo[rng.gen_range(0..geo.len())];
            (format!("{name} {g}"), format!("{gt} {target_name}"))
        } else {
            (name.clone(), target_name)
        };
        if push_entity(&mut dictionary, source, target, Category::Loc, &b.lexicon)? {
            loc_names.push(name);
            produced += 1;
        }
    }

    // PER: first name + surname from shared pools; identical in the target.
    let firsts: Vec<String> = (0..config.first_names).map(|_| b.proper(2..=2)).collect::<Result<_>>()?;
    let lasts: Vec<String> = (0..config.surnames).map(|_| b.proper(2..=3)).collect::<Result<_>>()?;
    let per_target = count_of(Category::Per);
    if per_target > firsts.len() * lasts.len() {
        return Err(Error::Config("person name pools are too small for the PER share".into()));
    }
    let mut produced = 0;
    while produced < per_target {
        let f = &firsts[rng.gen_range(0..firsts.len())];
        let l = &lasts[rng.gen_range(0..lasts.len())];
        let full = format!("{f} {l}");
        if push_entity(&mut dictionary, full.clone(), full.clone(), Category::Per, &b.lexicon)? {
            target_words.insert(f.clone());
            target_words.insert(l.clone());
            produced += 1;
        }
    }

    // ORG: acronyms, "<Head> <GPE>" nested entries and "<Word> <Head>" bodies.
    let heads: Vec<(String, String)> = (0..ORG_HEADS)
        .map(|_| -> Result<(String, String)> {
            let h = b.proper(2..=3)?;
            let t = capitalize(&b.words.fresh(2..=3, 0.3));
            Ok((h, t))
        })
        .collect::<Result<_>>()?;
    for (_, t) in &heads {
        target_words.insert(t.clone());
    }
    let mut acronym_pool = acronyms.clone();
    let mut produced = 0;
    let mut attempts = 0;
    while produced < count_of(Category::Org) {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config("cannot realise enough distinct ORG entries".into()));
        }
        let roll: f64 = rng.gen();
        let (source, target) = if let Some(a) = acronym_pool.pop() {
            b.lexicon.flag_acronym(a.clone());
            (a.clone(), a)
        } else if roll < config.nested_org_rate && !gpe_names.is_empty() {
            let (h, ht) = &heads[rng.gen_range(0..heads.len())];
            let g = &gpe_names[rng.gen_range(0..gpe_names.len())];
            (format!("{h} {g}"), format!("{ht} {}", respell(g)))
        } else {
            let w = b.common[rng.gen_range(0..b.common.len())].clone();
            let cap = capitalize(&w);
            if b.lexicon.lookup(&cap).is_none() {
                let ph = b.lexicon.lookup(&w).expect("common word").to_vec();
                b.lexicon.insert(cap.clone(), ph)?;
            }
            let cap_t = capitalize(&b.translation[&w]);
            let (h, ht) = &heads[rng.gen_range(0..heads.len())];
            (format!("{cap} {h}"), format!("{ht} {cap_t}"))
        };
        let tgt_tokens: Vec<String> = target.split_whitespace().map(str::to_string).collect();
        if push_entity(&mut dictionary, source, target, Category::Org, &b.lexicon)? {
            target_words.extend(tgt_tokens);
            produced += 1;
        }
    }

    let mut source_words: Vec<String> = b.common.clone();
    for ne in &dictionary {
        source_words.extend(ne.source_tokens().iter().map(|s| s.to_string()));
    }
    source_words.sort();
    source_words.dedup();
    let source_vocab = Vocab::from(source_words);
    target_words.extend(b.translation.values().cloned());
    let target_vocab = target_vocab(target_words);

    let prototypes = phoneme_prototypes(b.lexicon.num_phonemes(), config.speech_dim, seed ^ 0xA11C_E5);

    let by_cat = |c: Category| -> Vec<usize> {
        dictionary
            .iter()
            .enumerate()
            .filter(|(_, n)| n.category == c)
            .map(|(i, _)| i)
            .collect()
    };
    let scored: Vec<usize> = Category::SCORED.iter().flat_map(|&c| by_cat(c)).collect();
    let orgs = by_cat(Category::Org);

    let mut splits = Splits::default();
    for split in Split::ALL {
        let n = match split {
            Split::Train => config.train_utterances,
            Split::Dev => config.dev_utterances,
            Split::Test => config.test_utterances,
        };
        let density = match split {
            Split::Train => config.train_ne_density,
            _ => config.test_ne_density,
        };
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut org_slots: Vec<Vec<usize>> = vec![Vec::new(); n];
        if n > 0 {
            let (scored_total, org_total) = match split {
                Split::Train => (scored_mentions_train, org_mentions_train),
                _ => (
                    (density * n as f64).round() as usize,
                    (config.org_density * n as f64).round() as usize,
                ),
            };
            let cover = split == Split::Train;
            allocate_mentions(&mut rng, &scored, scored_total, cover, MAX_SCORED_PER_UTT, &mut slots)?;
            allocate_mentions(&mut rng, &orgs, org_total, cover, MAX_ORG_PER_UTT, &mut org_slots)?;
        }
        let mut utts = Vec::with_capacity(n);
        for i in 0..n {
            let mut mentions = slots[i].clone();
            mentions.extend(&org_slots[i]);
            let u = build_utterance(
                &mut rng,
                &b,
                &dictionary,
                &prototypes,
                config,
                format!("{}-{:05}", split.as_str(), i),
                &mentions,
                derive_seed(seed, split, i),
            )?;
            utts.push(u);
        }
        *splits.get_mut(split) = utts;
    }

    let mut mt_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E47_0A1B);
    let mt = (0..config.mt_pairs)
        .map(|_| -> Result<TextPair> {
            let n = mt_rng.gen_range(config.min_words..=config.max_words);
            let source: Vec<String> = (0..n).map(|_| b.common[mt_rng.gen_range(0..b.common.len())].clone()).collect();
            Ok(TextPair {
                phonemes: b.lexicon.phonemize(&source, AcronymMode::Spell)?,
                target_tokens: source.iter().map(|w| b.translation[w].clone()).collect(),
                source_tokens: source,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        seed,
        mt,
        config: config.clone(),
        lexicon: b.lexicon,
        dictionary,
        source_vocab,
        target_vocab,
        prototypes,
        splits,
    })
}

/// Spread `total` mentions drawn from `pool` over utterance slots, at most
/// `cap` per utterance and never the same entity twice in one utterance.
/// With `cover`, every pool entry is used at least once.
fn allocate_mentions(rng: &mut ChaCha8Rng, pool: &[usize], total: usize, cover: bool, cap: usize, slots: &mut [Vec<usize>]) -> Result<()> {
    if pool.is_empty() || total == 0 {
        return Ok(());
    }
    let mut mentions: Vec<usize> = Vec::with_capacity(total);
    if cover {
        mentions.extend(pool.iter().copied());
    }
    while mentions.len() < total {
        mentions.push(pool[rng.gen_range(0..pool.len())]);
    }
    mentions.shuffle(rng);
    let mut order: Vec<usize> = (0..slots.len()).collect();
    for ne in mentions {
        order.shuffle(rng);
        let slot = order
            .iter()
            .copied()
            .find(|&i| slots[i].len() < cap && !slots[i].contains(&ne))
            .ok_or_else(|| Error::Config("too many entity mentions for the utterance count".into()))?;
        slots[slot].push(ne);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_utterance(
    rng: &mut ChaCha8Rng,
    b: &Builder,
    dictionary: &[NamedEntity],
    prototypes: &crate::numerics::Tensor,
    config: &CorpusConfig,
    id: String,
    mentions: &[usize],
    speech_seed: u64,
) -> Result<Utterance> {
    let n_words = rng.gen_range(config.min_words..=config.max_words);
    // Segments: Ok(word) or Err(entity index); entities go between words.
    let mut segments: Vec<std::result::Result<String, usize>> = (0..n_words)
        .map(|_| Ok(b.common[rng.gen_range(0..b.common.len())].clone()))
        .collect();
    for &ne in mentions {
        let at = rng.gen_range(0..=segments.len());
        segments.insert(at, Err(ne));
    }

    let mut transcript = Vec::new();
    let mut target = Vec::new();
    let mut gold = Vec::new();
    for seg in segments {
        match seg {
            Ok(w) => {
                target.push(b.translation[&w].clone());
                transcript.push(w);
            }
            Err(i) => {
                let ne = &dictionary[i];
                let toks = ne.source_tokens();
                gold.push(GoldEntity {
                    ne_id: ne.id.clone(),
                    token_start: transcript.len(),
                    token_len: toks.len(),
                });
                transcript.extend(toks.iter().map(|s| s.to_string()));
                target.push(ne.category.open_tag());
                target.extend(ne.target_tokens().iter().map(|s| s.to_string()));
                target.push(ne.category.close_tag());
            }
        }
    }
    let (phonemes, spans) = b.lexicon.phonemize_with_spans(&transcript, AcronymMode::Spell)?;
    let synth = synthesize_speech(
        &phonemes,
        prototypes,
        config.noise_sigma,
        DurationRange {
            min: config.min_frames,
            max: config.max_frames,
        },
        speech_seed,
    )?;
    Ok(Utterance {
        id,
        transcript_tokens: transcript,
        transcript_phonemes: phonemes,
        token_phoneme_spans: spans,
        frame_alignment: synth.alignment,
        target_tokens: target,
        gold_entities: gold,
        speech_frames: synth.frames,
    })
}
