//! Shared text/speech encoder, joint S2T+T2T training with an explicit
//! cross-modal alignment term, LayerDrop feature extraction and similarity
//! heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biasdec::{decoder_forward, DecoderConfig, S2tModel};
use crate::corpus::{Corpus, Split, TextPair, Utterance};
use crate::error::{Error, Result};
use crate::numerics::nn::{self, LayerDims};
use crate::numerics::optim::warmup_lr;
use crate::numerics::{cosine, Adam, Gradients, Graph, ParameterSet, Tensor, Var};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub speech_dim: usize,
    pub num_phonemes: usize,
    /// Speech frame `j` sits at position `j / speech_time_scale`, roughly
    /// the phoneme rate.
    pub speech_time_scale: f64,
    pub position_scale: f64,
    /// Training-time LayerDrop probability.
    pub layerdrop: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            d: 64,
            heads: 4,
            ffn: 128,
            speech_dim: 32,
            num_phonemes: 21,
            speech_time_scale: 2.5,
            position_scale: 1.0,
            layerdrop: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d: self.d,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        check_probability("layerdrop", self.layerdrop)?;
        if self.speech_dim == 0 || self.num_phonemes == 0 {
            return Err(Error::Config("speech_dim and num_phonemes must be positive".into()));
        }
        if !(self.speech_time_scale > 0.0) {
            return Err(Error::Config("speech_time_scale must be positive".into()));
        }
        Ok(())
    }

    /// Insert freshly initialised `enc.*` parameters.
    pub fn init_params<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.validate()?;
        ps.insert("enc.phon_emb", Tensor::randn(&[self.num_phonemes, self.d], 1.0, rng))?;
        nn::init_linear(ps, "enc.frame_proj", self.speech_dim, self.d, rng)?;
        for l in 0..self.layers {
            nn::init_encoder_layer(ps, &format!("enc.layer{l}"), self.dims(), rng)?;
        }
        nn::init_layer_norm(ps, "enc.ln_f", self.d)?;
        ps.set_trainable("enc.ln_f.b", false);
        Ok(())
    }
}

pub(crate) fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} must lie in [0,1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub vectors: Tensor,
    pub modality: Modality,
    pub source_id: String,
}

/// Layers kept (`true`) in one LayerDrop pass: each layer is skipped
/// independently with probability `p`.
pub fn layer_keep_mask(layers: usize, p: f64, seed: u64) -> Result<Vec<bool>> {
    check_probability("layerdrop_p", p)?;
    if p == 0.0 {
        return Ok(vec![true; layers]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..layers).map(|_| !rng.gen_bool(p)).collect())
}

/// Input embeddings plus positions for a phoneme sequence.
pub fn text_input_graph(g: &mut Graph<'_>, cfg: &EncoderConfig, phonemes: &[usize]) -> Result<Var> {
    if phonemes.is_empty() {
        return Err(Error::Empty("phoneme sequence"));
    }
    if let Some(&bad) = phonemes.iter().find(|&&p| p >= cfg.num_phonemes) {
        return Err(Error::UnknownPhoneme(bad));
    }
    let table = g.param("enc.phon_emb")?;
    let x = g.gather(table, phonemes)?;
    let pos: Vec<f64> = (0..phonemes.len()).map(|i| i as f64).collect();
    add_positions(g, cfg, x, &pos)
}

/// Projected frames plus positions on the phoneme time scale.
pub fn speech_input_graph(g: &mut Graph<'_>, cfg: &EncoderConfig, frames: &Tensor) -> Result<Var> {
    if frames.rows() == 0 {
        return Err(Error::Empty("speech frames"));
    }
    if frames.cols() != cfg.speech_dim {
        return Err(Error::shape(
            "encode_speech",
            format!("frame dim {} but encoder expects {}", frames.cols(), cfg.speech_dim),
        ));
    }
    let f = g.input(frames)?;
    let x = nn::linear(g, f, "enc.frame_proj")?;
    let pos: Vec<f64> = (0..frames.rows()).map(|j| j as f64 / cfg.speech_time_scale).collect();
    add_positions(g, cfg, x, &pos)
}

fn add_positions(g: &mut Graph<'_>, cfg: &EncoderConfig, x: Var, pos: &[f64]) -> Result<Var> {
    let mut p = nn::positions(pos, cfg.d);
    p.data_mut().iter_mut().for_each(|v| *v *= cfg.position_scale);
    let p = g.input(&p)?;
    g.add(x, p)
}

/// Shared layer stack and final norm; layers with `keep[l] == false` are skipped.
pub fn encoder_stack_graph(g: &mut Graph<'_>, cfg: &EncoderConfig, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.len() != cfg.layers {
        return Err(Error::shape("encoder", format!("{} keep flags for {} layers", keep.len(), cfg.layers)));
    }
    let mut h = x;
    for (l, &k) in keep.iter().enumerate() {
        if k {
            h = nn::encoder_layer(g, h, &format!("enc.layer{l}"), cfg.heads, None)?;
        }
    }
    nn::layer_norm(g, h, "enc.ln_f")
}

pub fn text_graph(g: &mut Graph<'_>, cfg: &EncoderConfig, phonemes: &[usize], keep: &[bool]) -> Result<Var> {
    let x = text_input_graph(g, cfg, phonemes)?;
    encoder_stack_graph(g, cfg, x, keep)
}

pub fn speech_graph(g: &mut Graph<'_>, cfg: &EncoderConfig, frames: &Tensor, keep: &[bool]) -> Result<Var> {
    let x = speech_input_graph(g, cfg, frames)?;
    encoder_stack_graph(g, cfg, x, keep)
}

/// The trained shared encoder: `enc.*` parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedEncoder {
    pub config: EncoderConfig,
    pub params: ParameterSet,
}

impl SharedEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut params = ParameterSet::new();
        config.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(SharedEncoder { config, params })
    }

    /// Copy the `enc.*` parameters out of a larger model.
    pub fn from_params(config: EncoderConfig, all: &ParameterSet) -> Result<Self> {
        let mut params = ParameterSet::new();
        for p in all.iter().filter(|p| p.name.starts_with("enc.")) {
            params.insert(p.name.clone(), p.value.clone())?;
        }
        params.set_all_trainable(false);
        Ok(SharedEncoder { config, params })
    }

    pub fn encode_text(&self, phonemes: &[usize], layerdrop_p: f64, seed: u64) -> Result<EncoderOutput> {
        let keep = layer_keep_mask(self.config.layers, layerdrop_p, seed)?;
        let mut g = Graph::new(&self.params);
        let out = text_graph(&mut g, &self.config, phonemes, &keep)?;
        Ok(EncoderOutput {
            vectors: g.tensor(out),
            modality: Modality::Text,
            source_id: String::new(),
        })
    }

    pub fn encode_speech(&self, frames: &Tensor, layerdrop_p: f64, seed: u64) -> Result<EncoderOutput> {
        let keep = layer_keep_mask(self.config.layers, layerdrop_p, seed)?;
        let mut g = Graph::new(&self.params);
        let out = speech_graph(&mut g, &self.config, frames, &keep)?;
        Ok(EncoderOutput {
            vectors: g.tensor(out),
            modality: Modality::Speech,
            source_id: String::new(),
        })
    }

    /// Deterministic inference encodings of an utterance's speech.
    pub fn encode_utterance(&self, u: &Utterance) -> Result<EncoderOutput> {
        let mut out = self.encode_speech(&u.speech_frames, 0.0, 0)?;
        out.source_id = u.id.clone();
        Ok(out)
    }
}

/// `F×P` matrix of cosine similarities between speech rows and text rows.
pub fn similarity_heatmap(text_enc: &Tensor, speech_enc: &Tensor) -> Result<Tensor> {
    if text_enc.cols() != speech_enc.cols() {
        return Err(Error::shape(
            "similarity_heatmap",
            format!("text dim {} vs speech dim {}", text_enc.cols(), speech_enc.cols()),
        ));
    }
    let (f, p) = (speech_enc.rows(), text_enc.rows());
    let mut out = Vec::with_capacity(f * p);
    for j in 0..f {
        for i in 0..p {
            let c = cosine(speech_enc.row(j), text_enc.row(i))
                .ok_or_else(|| Error::ZeroNorm(format!("frame {j} / phoneme {i}")))?;
            out.push(c.clamp(-1.0, 1.0));
        }
    }
    Tensor::matrix(f, p, out)
}

/// Mean aligned-cell similarity minus mean of all other cells, given each
/// frame's phoneme index.
pub fn alignment_margin(heatmap: &Tensor, frame_alignment: &[usize]) -> Result<f64> {
    if frame_alignment.len() != heatmap.rows() {
        return Err(Error::shape("alignment_margin", "one alignment entry per frame required"));
    }
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for (j, &a) in frame_alignment.iter().enumerate() {
        for (i, &v) in heatmap.row(j).iter().enumerate() {
            if i == a {
                on += v;
                n_on += 1;
            } else {
                off += v;
                n_off += 1;
            }
        }
    }
    if n_on == 0 || n_off == 0 {
        return Err(Error::Empty("heatmap needs both aligned and unaligned cells"));
    }
    Ok(on / n_on as f64 - off / n_off as f64)
}

pub fn write_heatmap_csv(path: &Path, heatmap: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for j in 0..heatmap.rows() {
        let row: Vec<String> = heatmap.row(j).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary PGM, one pixel per cell, lighter = more similar.
pub fn write_heatmap_pgm(path: &Path, heatmap: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", heatmap.cols(), heatmap.rows())?;
    let px: Vec<u8> = heatmap
        .data()
        .iter()
        .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&px)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Weight of the cross-modal alignment term.
    pub alpha: f64,
    /// Text-only pairs added to every step (text-to-text loss only).
    pub mt_batch: usize,
    pub seed: u64,
    /// Dev alignment margin the trained encoder must reach.
    pub min_alignment_margin: f64,
    pub dev_limit: usize,
    pub jobs: usize,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            epochs: 24,
            batch_size: 8,
            lr: 3e-3,
            warmup: 200,
            alpha: 0.5,
            mt_batch: 16,
            seed: 1,
            min_alignment_margin: 0.2,
            dev_limit: 100,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_alignment_margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub epochs: Vec<EpochLog>,
    pub final_dev_loss: f64,
    pub dev_alignment_margin: f64,
}

/// Index of the middle frame of each phoneme's run.
pub fn phoneme_center_frames(frame_alignment: &[usize], num_phonemes: usize) -> Result<Vec<usize>> {
    let mut first = vec![usize::MAX; num_phonemes];
    let mut last = vec![0usize; num_phonemes];
    for (j, &p) in frame_alignment.iter().enumerate() {
        if p >= num_phonemes {
            return Err(Error::shape("alignment", format!("frame {j} aligned to phoneme {p} of {num_phonemes}")));
        }
        first[p] = first[p].min(j);
        last[p] = j;
    }
    first
        .iter()
        .zip(&last)
        .enumerate()
        .map(|(i, (&a, &b))| {
            if a == usize::MAX {
                Err(Error::shape("alignment", format!("phoneme {i} has no frames")))
            } else {
                Ok((a + b) / 2)
            }
        })
        .collect()
}

/// Target ids with BOS prepended (decoder input) and EOS appended (labels).
pub fn teacher_forcing(model: &S2tModel, u: &Utterance) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids = model.target_vocab.encode(&u.target_tokens)?;
    let mut input = vec![model.bos()];
    input.extend_from_slice(&ids);
    let mut labels = ids;
    labels.push(model.eos());
    Ok((input, labels))
}

/// Text-to-text cross-entropy of a text-only pair.
pub fn text_pair_loss_graph(g: &mut Graph<'_>, model: &S2tModel, pair: &TextPair, keep: &[bool]) -> Result<Var> {
    let ids = model.target_vocab.encode(&pair.target_tokens)?;
    let mut input = vec![model.bos()];
    input.extend_from_slice(&ids);
    let mut labels = ids;
    labels.push(model.eos());
    let text = text_graph(g, &model.encoder, &pair.phonemes, keep)?;
    let logits = decoder_forward(g, &model.decoder, text, &input, None)?;
    g.cross_entropy(logits, &labels)
}

/// Joint objective for one utterance:
/// `CE_s2t + CE_t2t + alpha · (1 − mean cos(text_i, speech_center(i)))`.
pub fn joint_loss_graph(
    g: &mut Graph<'_>,
    model: &S2tModel,
    u: &Utterance,
    alpha: f64,
    keep_speech: &[bool],
    keep_text: &[bool],
) -> Result<Var> {
    let (input, labels) = teacher_forcing(model, u)?;
    let speech = speech_graph(g, &model.encoder, &u.speech_frames, keep_speech)?;
    let text = text_graph(g, &model.encoder, &u.transcript_phonemes, keep_text)?;
    let ls = decoder_forward(g, &model.decoder, speech, &input, None)?;
    let ce_s = g.cross_entropy(ls, &labels)?;
    let lt = decoder_forward(g, &model.decoder, text, &input, None)?;
    let ce_t = g.cross_entropy(lt, &labels)?;
    let mut loss = g.add(ce_s, ce_t)?;
    if alpha != 0.0 {
        let centers = phoneme_center_frames(&u.frame_alignment, u.transcript_phonemes.len())?;
        let paired = g.gather(speech, &centers)?;
        let cos = g.row_cosine(text, paired)?;
        let mean = g.mean(cos)?;
        let neg = g.scale(mean, -alpha)?;
        let align = g.add_const(neg, alpha)?;
        loss = g.add(loss, align)?;
    }
    Ok(loss)
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mean S2T cross-entropy and mean alignment margin over (a prefix of) dev.
pub fn evaluate_joint(model: &S2tModel, utts: &[Utterance], jobs: usize) -> Result<(f64, f64)> {
    if utts.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let keep = vec![true; model.encoder.layers];
    let rows = par::try_map(jobs, utts, |u| -> Result<(f64, f64)> {
        let (input, labels) = teacher_forcing(model, u)?;
        let mut g = Graph::new(&model.params);
        let speech = speech_graph(&mut g, &model.encoder, &u.speech_frames, &keep)?;
        let text = text_graph(&mut g, &model.encoder, &u.transcript_phonemes, &keep)?;
        let logits = decoder_forward(&mut g, &model.decoder, speech, &input, None)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let heat = similarity_heatmap(&g.tensor(text), &g.tensor(speech))?;
        Ok((g.scalar(ce), alignment_margin(&heat, &u.frame_alignment)?))
    })?;
    let n = rows.len() as f64;
    Ok((
        rows.iter().map(|r| r.0).sum::<f64>() / n,
        rows.iter().map(|r| r.1).sum::<f64>() / n,
    ))
}

/// Train encoder and base decoder jointly on S2T and T2T with the alignment
/// term. Fails if the dev alignment margin stays below the configured minimum.
pub fn train_joint(
    corpus: &Corpus,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    config: &JointTrainConfig,
) -> Result<(S2tModel, JointReport)> {
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let dev: Vec<Utterance> = corpus.split(Split::Dev).iter().take(config.dev_limit).cloned().collect();
    let dev = if dev.is_empty() { train[..train.len().min(config.dev_limit.max(1))].to_vec() } else { dev };
    let mut model = S2tModel::new(encoder, decoder, corpus.target_vocab.clone(), config.seed)?;
    let mut opt = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut mt_order: Vec<usize> = (0..corpus.mt.len()).collect();
    let mut mt_cursor = mt_order.len();
    let mut report = JointReport::default();
    let mut step = 0usize;
    let p = model.encoder.layerdrop;
    let layers = model.encoder.layers;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.gen())).collect();
            let results = par::try_map(config.jobs, &seeds, |&(i, s)| -> Result<(f64, Gradients)> {
                let ks = layer_keep_mask(layers, p, s)?;
                let kt = layer_keep_mask(layers, p, s.wrapping_add(1))?;
                let mut g = Graph::new(&model.params);
                let loss = joint_loss_graph(&mut g, &model, &train[i], config.alpha, &ks, &kt)?;
                Ok((g.scalar(loss), g.backward(loss)?))
            })?;
            let mut grads = Gradients::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            for (l, gr) in &results {
                batch_loss += l;
                grads.add_assign(gr);
            }
            batch_loss /= results.len() as f64;
            grads.scale(1.0 / results.len() as f64);
            if config.mt_batch > 0 && !corpus.mt.is_empty() {
                let picks: Vec<(usize, u64)> = (0..config.mt_batch)
                    .map(|_| {
                        if mt_cursor == mt_order.len() {
                            mt_order.shuffle(&mut rng);
                            mt_cursor = 0;
                        }
                        mt_cursor += 1;
                        (mt_order[mt_cursor - 1], rng.gen())
                    })
                    .collect();
                let mt_results = par::try_map(config.jobs, &picks, |&(i, s)| -> Result<(f64, Gradients)> {
                    let keep = layer_keep_mask(layers, p, s)?;
                    let mut g = Graph::new(&model.params);
                    let loss = text_pair_loss_graph(&mut g, &model, &corpus.mt[i], &keep)?;
                    Ok((g.scalar(loss), g.backward(loss)?))
                })?;
                let mut mt_grads = Gradients::zeros_like(&model.params);
                let mut mt_loss = 0.0;
                for (l, gr) in &mt_results {
                    mt_loss += l;
                    mt_grads.add_assign(gr);
                }
                mt_grads.scale(1.0 / mt_results.len() as f64);
                grads.add_assign(&mt_grads);
                batch_loss += mt_loss / mt_results.len() as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { step, loss: batch_loss });
            }
            opt.lr = warmup_lr(config.lr, step, config.warmup);
            opt.step(&mut model.params, &grads)?;
            epoch_loss += batch_loss * results.len() as f64;
            step += 1;
        }
        let (dev_loss, margin) = evaluate_joint(&model, &dev, config.jobs)?;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_loss,
            dev_alignment_margin: margin,
        };
        log::info!(
            "joint epoch {epoch}: train {:.4} dev {:.4} margin {:.3}",
            entry.train_loss,
            dev_loss,
            margin
        );
        report.final_dev_loss = dev_loss;
        report.dev_alignment_margin = margin;
        report.epochs.push(entry);
    }
    if report.epochs.is_empty() {
        let (dev_loss, margin) = evaluate_joint(&model, &dev, config.jobs)?;
        report.final_dev_loss = dev_loss;
        report.dev_alignment_margin = margin;
    }
    if report.dev_alignment_margin < config.min_alignment_margin {
        return Err(Error::Quality {
            what: "dev alignment margin".into(),
            value: report.dev_alignment_margin,
            required: config.min_alignment_margin,
        });
    }
    Ok((model, report))
}
