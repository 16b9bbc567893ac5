//! Cross-modal named-entity detector.
//!
//! The input sequence is `[CLS, text₁+TXT, …, text_P+TXT, SEP, speech₁+SPC, …]`
//! built from the shared encoder's outputs for an entity's phonemes and for an
//! utterance's speech. Three transformer layers follow; the CLS output goes
//! through a linear projection and a sigmoid. Speech positions attend only to
//! speech positions within `window_mult · P` of themselves, plus every text
//! and special position.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{contains_subsequence, Corpus, NamedEntity, Split, Utterance};
use crate::encoder::{check_probability, layer_keep_mask, text_graph, SharedEncoder};
use crate::error::{Error, Result};
use crate::numerics::nn::{self, LayerDims};
use crate::numerics::optim::warmup_lr;
use crate::numerics::{cosine, sigmoid, Adam, AttnMask, Gradients, Graph, ParameterSet, Tensor, Var};
use crate::par;

pub const DETECTOR_LAYERS: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.86;

/// Architecture and inference-relevant switches, stored with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Add the TXT/SPC modality embeddings.
    pub modality_emb: bool,
    /// Restrict speech-to-speech attention to a window around each query.
    pub attn_mask: bool,
    pub window_mult: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d: 64,
            heads: 4,
            ffn: 128,
            modality_emb: true,
            attn_mask: true,
            window_mult: 2,
        }
    }
}

impl DetectorConfig {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d: self.d,
            heads: self.heads,
            ffn: self.ffn,
        }
    }
}

/// Training-time switches and optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    /// LayerDrop probability for encoder feature extraction; 0 disables it.
    pub layerdrop: f64,
    /// Independent LayerDrop passes precomputed per training utterance.
    pub feature_passes: usize,
    /// Also drop detector layers with `layerdrop` during training.
    pub head_layerdrop: bool,
    /// Use gold entities as positives with probability `ne_prob`.
    pub train_on_ne: bool,
    pub ne_prob: f64,
    /// Longest random-word span, in words.
    pub max_words: usize,
    pub margin_ranking: bool,
    pub margin: f64,
    pub rank_weight: f64,
    /// Fraction of speech positions zeroed in one contiguous span; 0 disables.
    pub speech_masking: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_utterance: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            layerdrop: 0.1,
            feature_passes: 4,
            head_layerdrop: false,
            train_on_ne: true,
            ne_prob: 0.8,
            max_words: 5,
            margin_ranking: true,
            margin: 0.2,
            rank_weight: 1.0,
            speech_masking: 0.0,
            epochs: 24,
            batch_size: 8,
            pairs_per_utterance: 1,
            lr: 1e-3,
            warmup: 200,
            seed: 11,
            jobs: 1,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability("layerdrop", self.layerdrop)?;
        check_probability("ne_prob", self.ne_prob)?;
        if !(0.0..=0.5).contains(&self.speech_masking) {
            return Err(Error::Config("speech_masking must lie in [0, 0.5]".into()));
        }
        if self.max_words == 0 || self.batch_size < 2 || self.feature_passes == 0 || self.pairs_per_utterance == 0 {
            return Err(Error::Config(
                "max_words, feature_passes and pairs_per_utterance must be positive; batch_size at least 2".into(),
            ));
        }
        if self.margin < 0.0 || self.rank_weight < 0.0 {
            return Err(Error::Config("margin and rank_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the ablation table: cumulative feature switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub model: DetectorConfig,
    pub train: DetectorTrainConfig,
}

/// A detector feature that can be switched off for an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorFeature {
    Layerdrop,
    TrainOnNe,
    ModalityEmb,
    AttnMask,
    MaxWords5,
    Margin,
}

impl DetectorFeature {
    pub const ALL: [DetectorFeature; 6] = [
        DetectorFeature::Layerdrop,
        DetectorFeature::TrainOnNe,
        DetectorFeature::ModalityEmb,
        DetectorFeature::AttnMask,
        DetectorFeature::MaxWords5,
        DetectorFeature::Margin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorFeature::Layerdrop => "layerdrop",
            DetectorFeature::TrainOnNe => "train-on-ne",
            DetectorFeature::ModalityEmb => "modality-emb",
            DetectorFeature::AttnMask => "attn-mask",
            DetectorFeature::MaxWords5 => "max-words-5",
            DetectorFeature::Margin => "margin",
        }
    }

    /// Turn the feature off in a copy of the configs.
    pub fn disable(self, model: &DetectorConfig, train: &DetectorTrainConfig) -> (DetectorConfig, DetectorTrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            DetectorFeature::Layerdrop => t.layerdrop = 0.0,
            DetectorFeature::TrainOnNe => t.train_on_ne = false,
            DetectorFeature::ModalityEmb => m.modality_emb = false,
            DetectorFeature::AttnMask => m.attn_mask = false,
            DetectorFeature::MaxWords5 => t.max_words = 1,
            DetectorFeature::Margin => t.margin_ranking = false,
        }
        (m, t)
    }
}

impl fmt::Display for DetectorFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorFeature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DetectorFeature::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown detector feature `{s}`")))
    }
}

/// Rows in table order, each adding one feature to the previous row, plus a
/// final row that also enables speech masking.
pub fn ablation_rows(model: &DetectorConfig, train: &DetectorTrainConfig) -> Vec<AblationRow> {
    let mut m = DetectorConfig {
        modality_emb: false,
        attn_mask: false,
        ..model.clone()
    };
    let mut t = DetectorTrainConfig {
        layerdrop: 0.0,
        train_on_ne: false,
        max_words: 1,
        margin_ranking: false,
        speech_masking: 0.0,
        ..train.clone()
    };
    let mut rows = vec![AblationRow {
        name: "base".into(),
        model: m.clone(),
        train: t.clone(),
    }];
    let mut push = |name: &str, m: &DetectorConfig, t: &DetectorTrainConfig| {
        rows.push(AblationRow {
            name: name.into(),
            model: m.clone(),
            train: t.clone(),
        })
    };
    t.layerdrop = train.layerdrop.max(0.1);
    push("+layerdrop", &m, &t);
    t.train_on_ne = true;
    push("+train-on-ne", &m, &t);
    m.modality_emb = true;
    push("+modality-emb", &m, &t);
    m.attn_mask = true;
    push("+attn-mask", &m, &t);
    t.max_words = train.max_words.max(5);
    push("+max-words-5", &m, &t);
    t.margin_ranking = true;
    push("+margin", &m, &t);
    t.speech_masking = 0.1;
    push("+speech-masking", &m, &t);
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParameterSet,
}

impl DetectorModel {
    pub const KIND: &'static str = "detector";

    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.dims().validate()?;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for name in ["cls", "sep", "txt", "spc"] {
            params.insert(format!("det.{name}"), Tensor::randn(&[1, d], 1.0, &mut rng))?;
        }
        for l in 0..DETECTOR_LAYERS {
            nn::init_encoder_layer(&mut params, &format!("det.layer{l}"), config.dims(), &mut rng)?;
        }
        nn::init_layer_norm(&mut params, "det.ln_f", d)?;
        nn::init_linear(&mut params, "det.out", d, 1, &mut rng)?;
        Ok(DetectorModel { config, params })
    }

    /// Probability that the entity encoded by `ne_text_enc` occurs in the
    /// utterance encoded by `speech_enc`.
    pub fn score(&self, ne_text_enc: &Tensor, speech_enc: &Tensor) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let t = g.input(ne_text_enc)?;
        let s = g.input(speech_enc)?;
        let z = logit_graph(&mut g, &self.config, t, s, None)?;
        Ok(sigmoid(g.scalar(z)))
    }

    /// The concatenated input sequence (tensor form of the first stage).
    pub fn build_input(&self, ne_text_enc: &Tensor, speech_enc: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let t = g.input(ne_text_enc)?;
        let s = g.input(speech_enc)?;
        let x = input_graph(&mut g, &self.config, t, s)?;
        Ok(g.tensor(x))
    }
}

pub fn build_input_graph(g: &mut Graph<'_>, modality_emb: bool, text: Var, speech: Var) -> Result<Var> {
    if g.rows(text) == 0 {
        return Err(Error::Empty("entity encoding"));
    }
    if g.rows(speech) == 0 {
        return Err(Error::Empty("speech encoding"));
    }
    if g.cols(text) != g.cols(speech) {
        return Err(Error::shape(
            "build_input",
            format!("text dim {} vs speech dim {}", g.cols(text), g.cols(speech)),
        ));
    }
    let cls = g.param("det.cls")?;
    let sep = g.param("det.sep")?;
    let (t, s) = if modality_emb {
        let txt = g.param("det.txt")?;
        let spc = g.param("det.spc")?;
        (g.add_row(text, txt)?, g.add_row(speech, spc)?)
    } else {
        (text, speech)
    };
    g.concat_rows(&[cls, t, sep, s])
}

fn input_graph(g: &mut Graph<'_>, cfg: &DetectorConfig, text: Var, speech: Var) -> Result<Var> {
    build_input_graph(g, cfg.modality_emb, text, speech)
}

/// Attention mask over `[CLS, P text, SEP, S speech]`: a (query, key) pair is
/// forbidden iff both are speech positions more than `window_mult · P` apart.
pub fn build_attention_mask(p: usize, s: usize, window_mult: usize) -> AttnMask {
    let n = p + s + 2;
    let first_speech = p + 2;
    let window = window_mult * p;
    AttnMask::from_fn(n, n, |q, k| {
        !(q >= first_speech && k >= first_speech && q.abs_diff(k) > window)
    })
}

/// Detector logit (`1×1`). `keep` optionally drops detector layers.
pub fn logit_graph(g: &mut Graph<'_>, cfg: &DetectorConfig, text: Var, speech: Var, keep: Option<&[bool]>) -> Result<Var> {
    let x = input_graph(g, cfg, text, speech)?;
    let mask = cfg
        .attn_mask
        .then(|| build_attention_mask(g.rows(text), g.rows(speech), cfg.window_mult));
    let mut h = x;
    for l in 0..DETECTOR_LAYERS {
        if keep.map_or(true, |k| k[l]) {
            h = nn::encoder_layer(g, h, &format!("det.layer{l}"), cfg.heads, mask.as_ref())?;
        }
    }
    let first = g.slice_rows(h, 0, 1)?;
    let first = nn::layer_norm(g, first, "det.ln_f")?;
    nn::linear(g, first, "det.out")
}

/// `max(0, m − (s⁺ − s⁻))`.
pub fn ranking_term(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - (s_pos - s_neg)).max(0.0)
}

/// Zero one contiguous span of `⌈fraction · S⌉` rows at a seeded offset.
pub fn speech_span_mask(speech_enc: &Tensor, fraction: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::Config(format!("speech mask fraction {fraction} outside [0, 0.5]")));
    }
    let s = speech_enc.rows();
    let n = ((fraction * s as f64).ceil() as usize).min(s);
    let mut out = speech_enc.clone();
    if n == 0 {
        return Ok(out);
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..=s - n);
    for r in start..start + n {
        out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Ne { ne_id: String },
    RandomWords { token_start: usize, token_len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub phonemes: Vec<usize>,
    /// Utterance the sample was taken from.
    pub source_utterance: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub utterance_id: String,
    pub positive: Sample,
    pub negative: Sample,
}

fn random_words<R: Rng + ?Sized>(u: &Utterance, max_words: usize, rng: &mut R) -> Sample {
    let n_tok = u.transcript_tokens.len();
    let len = rng.gen_range(1..=max_words.min(n_tok));
    let start = rng.gen_range(0..=n_tok - len);
    let (ps, pl) = u.phoneme_range(start, len);
    Sample {
        phonemes: u.transcript_phonemes[ps..ps + pl].to_vec(),
        source_utterance: u.id.clone(),
        provenance: Provenance::RandomWords {
            token_start: start,
            token_len: len,
        },
    }
}

fn gold_sample<R: Rng + ?Sized>(u: &Utterance, rng: &mut R) -> Sample {
    let g = &u.gold_entities[rng.gen_range(0..u.gold_entities.len())];
    let (ps, pl) = u.phoneme_range(g.token_start, g.token_len);
    Sample {
        phonemes: u.transcript_phonemes[ps..ps + pl].to_vec(),
        source_utterance: u.id.clone(),
        provenance: Provenance::Ne { ne_id: g.ne_id.clone() },
    }
}

const NEGATIVE_RETRIES: usize = 64;

/// Draw a positive from `batch[index]` and a negative from another utterance
/// of the batch whose phonemes do not occur in `batch[index]`'s transcript.
///
/// Positives are gold entities with probability `ne_prob` when `use_ne` is
/// set and the utterance has any, otherwise spans of `1..=max_words`
/// consecutive words. Negatives mirror the positive's provenance when the
/// donor utterance allows it.
pub fn sample_training_pair<R: Rng + ?Sized>(
    batch: &[&Utterance],
    index: usize,
    use_ne: bool,
    ne_prob: f64,
    max_words: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    if batch.len() < 2 {
        return Err(Error::Sampling("need at least two utterances per batch".into()));
    }
    if max_words == 0 {
        return Err(Error::Config("max_words must be positive".into()));
    }
    let u = batch[index];
    let positive = if use_ne && !u.gold_entities.is_empty() && rng.gen_bool(ne_prob) {
        gold_sample(u, rng)
    } else {
        random_words(u, max_words, rng)
    };
    let want_ne = matches!(positive.provenance, Provenance::Ne { .. });
    for _ in 0..NEGATIVE_RETRIES {
        let mut j = rng.gen_range(0..batch.len() - 1);
        if j >= index {
            j += 1;
        }
        let donor = batch[j];
        let negative = if want_ne && !donor.gold_entities.is_empty() {
            gold_sample(donor, rng)
        } else {
            random_words(donor, max_words, rng)
        };
        if !contains_subsequence(&u.transcript_phonemes, &negative.phonemes) {
            return Ok(TrainingPair {
                utterance_id: u.id.clone(),
                positive,
                negative,
            });
        }
    }
    Err(Error::Sampling(format!(
        "no negative absent from utterance {} after {NEGATIVE_RETRIES} draws",
        u.id
    )))
}

/// Pair loss: `BCE(s⁺,1) + BCE(s⁻,0) + w·max(0, m − (s⁺ − s⁻))`, the ranking
/// term only when `margin_ranking` is set.
pub fn pair_loss_graph(g: &mut Graph<'_>, z_pos: Var, z_neg: Var, cfg: &DetectorTrainConfig) -> Result<Var> {
    let bp = g.bce_with_logits(z_pos, 1.0)?;
    let bn = g.bce_with_logits(z_neg, 0.0)?;
    let mut loss = g.add(bp, bn)?;
    if cfg.margin_ranking {
        let sp = g.sigmoid(z_pos)?;
        let sn = g.sigmoid(z_neg)?;
        let diff = g.sub(sp, sn)?;
        let neg = g.scale(diff, -1.0)?;
        let gap = g.add_const(neg, cfg.margin)?;
        let r = g.relu(gap)?;
        let r = g.scale(r, cfg.rank_weight)?;
        loss = g.add(loss, r)?;
    }
    Ok(loss)
}

/// Full training objective for one pair with fixed encoder features.
pub fn detector_loss_graph(
    g: &mut Graph<'_>,
    cfg: &DetectorConfig,
    train: &DetectorTrainConfig,
    pos_text: &Tensor,
    neg_text: &Tensor,
    speech: &Tensor,
    keep: Option<&[bool]>,
) -> Result<Var> {
    let s = g.input(speech)?;
    let tp = g.input(pos_text)?;
    let tn = g.input(neg_text)?;
    let zp = logit_graph(g, cfg, tp, s, keep)?;
    let zn = logit_graph(g, cfg, tn, s, keep)?;
    pair_loss_graph(g, zp, zn, train)
}

fn encode_text_with(encoder: &SharedEncoder, phonemes: &[usize], p: f64, seed: u64) -> Result<Tensor> {
    let keep = layer_keep_mask(encoder.config.layers, p, seed)?;
    let mut g = Graph::new(&encoder.params);
    let v = text_graph(&mut g, &encoder.config, phonemes, &keep)?;
    Ok(g.tensor(v))
}

fn derive(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Speech encodings for training: `feature_passes` LayerDrop passes per
/// utterance, or one deterministic pass when LayerDrop is off.
pub fn training_features(encoder: &SharedEncoder, utts: &[Utterance], cfg: &DetectorTrainConfig) -> Result<Vec<Vec<Tensor>>> {
    let passes = if cfg.layerdrop > 0.0 { cfg.feature_passes } else { 1 };
    let idx: Vec<usize> = (0..utts.len()).collect();
    par::try_map(cfg.jobs, &idx, |&i| {
        (0..passes)
            .map(|k| {
                encoder
                    .encode_speech(&utts[i].speech_frames, cfg.layerdrop, derive(cfg.seed, i as u64, k as u64))
                    .map(|o| o.vectors)
            })
            .collect()
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of dev positives scored at or above the default threshold.
    pub dev_pos_recall: f64,
    /// Fraction of dev negatives scored below 0.5.
    pub dev_neg_reject: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub epochs: Vec<DetectorEpochLog>,
}

/// Train the detector head on frozen encoder features.
pub fn train_detector(
    corpus: &Corpus,
    encoder: &SharedEncoder,
    model_cfg: &DetectorConfig,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, DetectorReport)> {
    cfg.validate()?;
    if model_cfg.d != encoder.config.d {
        return Err(Error::Config(format!(
            "detector dim {} must equal encoder dim {}",
            model_cfg.d, encoder.config.d
        )));
    }
    let train = corpus.split(Split::Train);
    if train.len() < 2 {
        return Err(Error::Empty("training split needs at least two utterances"));
    }
    let features = training_features(encoder, train, cfg)?;
    let dev = corpus.split(Split::Dev);
    let dev_pairs = if dev.len() >= 2 { dev_probe(encoder, dev, cfg)? } else { Vec::new() };

    let mut model = DetectorModel::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 7, 7));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = DetectorReport::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
            let mut jobs = Vec::with_capacity(chunk.len() * cfg.pairs_per_utterance);
            for (bi, &ui) in chunk.iter().enumerate() {
                for _ in 0..cfg.pairs_per_utterance {
                    let pair = sample_training_pair(&batch, bi, cfg.train_on_ne, cfg.ne_prob, cfg.max_words, &mut rng)?;
                    let pass = rng.gen_range(0..features[ui].len());
                    jobs.push((ui, pair, pass, rng.gen::<u64>()));
                }
            }
            let results = par::try_map(cfg.jobs, &jobs, |(ui, pair, pass, seed)| -> Result<(f64, Gradients)> {
                let p = cfg.layerdrop;
                let pos = encode_text_with(encoder, &pair.positive.phonemes, p, derive(*seed, 1, 0))?;
                let neg = encode_text_with(encoder, &pair.negative.phonemes, p, derive(*seed, 2, 0))?;
                let mut speech = features[*ui][*pass].clone();
                if cfg.speech_masking > 0.0 {
                    speech = speech_span_mask(&speech, cfg.speech_masking, derive(*seed, 3, 0))?;
                }
                let keep = if cfg.head_layerdrop {
                    Some(layer_keep_mask(DETECTOR_LAYERS, p, derive(*seed, 4, 0))?)
                } else {
                    None
                };
                let mut g = Graph::new(&model.params);
                let loss = detector_loss_graph(&mut g, &model.config, cfg, &pos, &neg, &speech, keep.as_deref())?;
                Ok((g.scalar(loss), g.backward(loss)?))
            })?;
            let mut grads = Gradients::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            for (l, gr) in &results {
                batch_loss += l;
                grads.add_assign(gr);
            }
            let n = results.len() as f64;
            if !(batch_loss / n).is_finite() {
                return Err(Error::Divergence { step, loss: batch_loss / n });
            }
            grads.scale(1.0 / n);
            opt.lr = warmup_lr(cfg.lr, step, cfg.warmup);
            opt.step(&mut model.params, &grads)?;
            total += batch_loss;
            count += results.len();
            step += 1;
        }
        let (recall, reject) = evaluate_probe(&model, &dev_pairs, cfg.jobs)?;
        let entry = DetectorEpochLog {
            epoch,
            train_loss: total / count.max(1) as f64,
            dev_pos_recall: recall,
            dev_neg_reject: reject,
        };
        log::info!(
            "detector epoch {epoch}: train {:.4} dev recall@{DEFAULT_THRESHOLD} {recall:.3} reject@0.5 {reject:.3}",
            entry.train_loss
        );
        report.epochs.push(entry);
    }
    Ok((model, report))
}

/// Fixed dev pairs (NE positives where available) with deterministic features.
fn dev_probe(encoder: &SharedEncoder, dev: &[Utterance], cfg: &DetectorTrainConfig) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 99, 0));
    let batch: Vec<&Utterance> = dev.iter().collect();
    let mut out = Vec::new();
    for i in 0..batch.len() {
        let pair = sample_training_pair(&batch, i, true, 1.0, cfg.max_words, &mut rng)?;
        let speech = encoder.encode_speech(&dev[i].speech_frames, 0.0, 0)?.vectors;
        let pos = encoder.encode_text(&pair.positive.phonemes, 0.0, 0)?.vectors;
        let neg = encoder.encode_text(&pair.negative.phonemes, 0.0, 0)?.vectors;
        out.push((pos, neg, speech));
    }
    Ok(out)
}

fn evaluate_probe(model: &DetectorModel, pairs: &[(Tensor, Tensor, Tensor)], jobs: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let scores = par::try_map(jobs, pairs, |(p, n, s)| -> Result<(f64, f64)> {
        Ok((model.score(p, s)?, model.score(n, s)?))
    })?;
    let k = scores.len() as f64;
    Ok((
        scores.iter().filter(|s| s.0 >= DEFAULT_THRESHOLD).count() as f64 / k,
        scores.iter().filter(|s| s.1 < 0.5).count() as f64 / k,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub utterance_id: String,
    pub ne_id: String,
    pub probability: f64,
    pub detected: bool,
}

/// Deterministic text encodings of every dictionary entry.
#[derive(Clone, Debug)]
pub struct EntityBank {
    pub ne_ids: Vec<String>,
    pub encodings: Vec<Tensor>,
}

impl EntityBank {
    pub fn new(encoder: &SharedEncoder, dictionary: &[NamedEntity], jobs: usize) -> Result<Self> {
        let encodings = par::try_map(jobs, dictionary, |ne| encoder.encode_text(&ne.phonemes, 0.0, 0).map(|o| o.vectors))?;
        Ok(EntityBank {
            ne_ids: dictionary.iter().map(|n| n.id.clone()).collect(),
            encodings,
        })
    }

    pub fn len(&self) -> usize {
        self.ne_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ne_ids.is_empty()
    }
}

/// Scores of every entity (dictionary order) for each utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub utterance_ids: Vec<String>,
    pub ne_ids: Vec<String>,
    /// `scores[u][n]`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreGrid {
    /// Thresholded detections, utterance-major in dictionary order.
    pub fn detections(&self, threshold: f64) -> Vec<Vec<DetectionResult>> {
        self.scores
            .iter()
            .zip(&self.utterance_ids)
            .map(|(row, uid)| {
                row.iter()
                    .zip(&self.ne_ids)
                    .map(|(&p, nid)| DetectionResult {
                        utterance_id: uid.clone(),
                        ne_id: nid.clone(),
                        probability: p,
                        detected: p >= threshold,
                    })
                    .collect()
            })
            .collect()
    }

    /// Ids of the entities scored at or above `threshold` for utterance `u`.
    pub fn detected_ids(&self, u: usize, threshold: f64) -> Vec<&str> {
        self.scores[u]
            .iter()
            .zip(&self.ne_ids)
            .filter(|(p, _)| **p >= threshold)
            .map(|(_, id)| id.as_str())
            .collect()
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0,1)")));
    }
    Ok(())
}

/// Detector scores for every (utterance, entity) pair.
pub fn detector_grid(model: &DetectorModel, encoder: &SharedEncoder, bank: &EntityBank, utts: &[Utterance], jobs: usize) -> Result<ScoreGrid> {
    let scores = par::try_map(jobs, utts, |u| -> Result<Vec<f64>> {
        let speech = encoder.encode_utterance(u)?.vectors;
        bank.encodings.iter().map(|t| model.score(t, &speech)).collect()
    })?;
    Ok(ScoreGrid {
        utterance_ids: utts.iter().map(|u| u.id.clone()).collect(),
        ne_ids: bank.ne_ids.clone(),
        scores,
    })
}

/// Mean over the entity's phoneme positions of the best cosine similarity
/// with any speech frame.
pub fn cosine_score(ne_text_enc: &Tensor, speech_enc: &Tensor) -> Result<f64> {
    if ne_text_enc.rows() == 0 || speech_enc.rows() == 0 {
        return Err(Error::Empty("cosine baseline input"));
    }
    let mut total = 0.0;
    for i in 0..ne_text_enc.rows() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..speech_enc.rows() {
            let c = cosine(ne_text_enc.row(i), speech_enc.row(j))
                .ok_or_else(|| Error::ZeroNorm(format!("phoneme {i} / frame {j}")))?;
            best = best.max(c);
        }
        total += best;
    }
    Ok(total / ne_text_enc.rows() as f64)
}

pub fn cosine_grid(encoder: &SharedEncoder, bank: &EntityBank, utts: &[Utterance], jobs: usize) -> Result<ScoreGrid> {
    let scores = par::try_map(jobs, utts, |u| -> Result<Vec<f64>> {
        let speech = encoder.encode_utterance(u)?.vectors;
        bank.encodings.iter().map(|t| cosine_score(t, &speech)).collect()
    })?;
    Ok(ScoreGrid {
        utterance_ids: utts.iter().map(|u| u.id.clone()).collect(),
        ne_ids: bank.ne_ids.clone(),
        scores,
    })
}

/// One result per dictionary entry for a single utterance.
pub fn detect(
    dictionary: &[NamedEntity],
    utterance: &Utterance,
    model: &DetectorModel,
    encoder: &SharedEncoder,
    threshold: f64,
) -> Result<Vec<DetectionResult>> {
    check_threshold(threshold)?;
    if dictionary.is_empty() {
        return Ok(Vec::new());
    }
    let bank = EntityBank::new(encoder, dictionary, 1)?;
    let grid = detector_grid(model, encoder, &bank, std::slice::from_ref(utterance), 1)?;
    Ok(grid.detections(threshold).remove(0))
}

pub fn cosine_baseline_detect(
    dictionary: &[NamedEntity],
    utterance: &Utterance,
    encoder: &SharedEncoder,
    threshold: f64,
) -> Result<Vec<DetectionResult>> {
    check_threshold(threshold)?;
    if dictionary.is_empty() {
        return Ok(Vec::new());
    }
    let bank = EntityBank::new(encoder, dictionary, 1)?;
    let grid = cosine_grid(encoder, &bank, std::slice::from_ref(utterance), 1)?;
    Ok(grid.detections(threshold).remove(0))
}

pub fn write_detections_jsonl(path: &Path, detections: &[Vec<DetectionResult>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in detections.iter().flatten() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<DetectionResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `nedict detect` first".into(),
        },
        _ => Error::Io(e),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GoldEntity;

    fn cfg(d: usize) -> DetectorConfig {
        DetectorConfig {
            d,
            heads: 2,
            ffn: 2 * d,
            ..DetectorConfig::default()
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn input_layout() {
        let m = DetectorModel::new(cfg(8), 1).unwrap();
        let (t, s) = (rand(2, 8, 2), rand(3, 8, 3));
        let x = m.build_input(&t, &s).unwrap();
        assert_eq!(x.rows(), 7);
        assert_eq!(x.row(0), m.params.get("det.cls").unwrap().row(0));
        assert_eq!(x.row(3), m.params.get("det.sep").unwrap().row(0));
        let txt = m.params.get("det.txt").unwrap().row(0);
        for c in 0..8 {
            assert!((x.row(1)[c] - t.row(0)[c] - txt[c]).abs() < 1e-12);
        }
        let off = DetectorModel {
            config: DetectorConfig {
                modality_emb: false,
                ..cfg(8)
            },
            params: m.params.clone(),
        };
        let y = off.build_input(&t, &s).unwrap();
        assert_eq!(y.row(2), t.row(1));
        assert_eq!(y.row(6), s.row(2));

        let mut zeroed = m.clone();
        for name in ["det.txt", "det.spc"] {
            zeroed.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let off = DetectorModel {
            config: off.config,
            params: zeroed.params.clone(),
        };
        assert_eq!(zeroed.build_input(&t, &s).unwrap(), off.build_input(&t, &s).unwrap());
        assert!(matches!(m.build_input(&Tensor::zeros(&[0, 8]), &s), Err(Error::Empty(_))));
    }

    #[test]
    fn mask_examples() {
        let m = build_attention_mask(1, 10, 2);
        let q = 3 + 5;
        let allowed: Vec<usize> = (3..13).filter(|&k| m.allows(q, k)).map(|k| k - 3).collect();
        assert_eq!(allowed, vec![3, 4, 5, 6, 7]);
        assert!((0..3).all(|k| m.allows(q, k)));
        // Offsets 0 and 9 are 9 > 6 apart, so S=10 is not fully covered; S=7 is.
        assert!(!build_attention_mask(3, 10, 2).is_all_true());
        let m3 = build_attention_mask(3, 7, 2);
        assert!(m3.is_all_true());
        for q in 0..3 {
            assert!((0..13).all(|k| m.allows(q, k)));
        }
    }

    #[test]
    fn zero_output_projection_scores_half() {
        let mut m = DetectorModel::new(cfg(8), 1).unwrap();
        m.params.get_mut("det.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let p = m.score(&rand(2, 8, 1), &rand(6, 8, 2)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(ranking_term(0.9, 0.1, 0.2), 0.0);
        assert!((ranking_term(0.5, 0.45, 0.2) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn span_mask() {
        let s = rand(20, 4, 1);
        assert_eq!(speech_span_mask(&s, 0.0, 3).unwrap(), s);
        let m = speech_span_mask(&s, 0.1, 3).unwrap();
        let zero_rows: Vec<usize> = (0..20).filter(|&r| m.row(r).iter().all(|v| *v == 0.0)).collect();
        assert_eq!(zero_rows.len(), 2);
        assert_eq!(zero_rows[1], zero_rows[0] + 1);
        assert!(speech_span_mask(&s, 0.6, 3).is_err());
    }

    fn utt(id: &str, tokens: &[&str], phon_per_tok: &[Vec<usize>], gold: Vec<GoldEntity>) -> Utterance {
        let mut phon = Vec::new();
        let mut spans = Vec::new();
        for p in phon_per_tok {
            spans.push((phon.len(), p.len()));
            phon.extend(p);
        }
        Utterance {
            id: id.into(),
            transcript_tokens: tokens.iter().map(|s| s.to_string()).collect(),
            frame_alignment: (0..phon.len()).collect(),
            transcript_phonemes: phon,
            token_phoneme_spans: spans,
            target_tokens: vec![],
            gold_entities: gold,
            speech_frames: Tensor::default(),
        }
    }

    #[test]
    fn sampling_without_entities_uses_random_words() {
        let a = utt("a", &["x", "y"], &[vec![1, 2], vec![3]], vec![]);
        let b = utt("b", &["z"], &[vec![4, 5]], vec![]);
        let batch = [&a, &b];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = sample_training_pair(&batch, 0, true, 0.8, 5, &mut rng).unwrap();
            assert!(matches!(p.positive.provenance, Provenance::RandomWords { .. }));
            assert!(contains_subsequence(&a.transcript_phonemes, &p.positive.phonemes));
            assert!(!contains_subsequence(&a.transcript_phonemes, &p.negative.phonemes));
        }
        assert!(sample_training_pair(&batch[..1], 0, true, 0.8, 5, &mut rng).is_err());
    }

    #[test]
    fn impossible_negative_is_an_error() {
        let a = utt("a", &["x"], &[vec![1, 2]], vec![]);
        let b = utt("b", &["x"], &[vec![1, 2]], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_training_pair(&[&a, &b], 0, false, 0.8, 5, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn grid_detections_respect_threshold() {
        let grid = ScoreGrid {
            utterance_ids: vec!["u".into()],
            ne_ids: vec!["a".into(), "b".into()],
            scores: vec![vec![0.9, 0.4]],
        };
        assert_eq!(grid.detected_ids(0, 0.86), vec!["a"]);
        let d = grid.detections(0.3);
        assert!(d[0].iter().all(|r| r.detected));
    }
}
