//! Transformer decoder for speech/text-to-text translation and its CLAS-style
//! biased variant: detected entities' target forms are encoded by a bias
//! encoder, mean-pooled, prefixed with a learned no-bias vector, and attended
//! from every decoder layer either in parallel with or after cross-attention.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NamedEntity, Split, Utterance, Vocab, BOS, EOS};
use crate::encoder::{check_probability, teacher_forcing, EncoderConfig, SharedEncoder};
use crate::error::{Error, Result};
use crate::numerics::nn::{self, LayerDims};
use crate::numerics::optim::warmup_lr;
use crate::numerics::{Adam, AttnMask, Gradients, Graph, ParameterSet, Tensor, Var};
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMethod {
    #[default]
    Parallel,
    Sequential,
}

impl BiasMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasMethod::Parallel => "parallel",
            BiasMethod::Sequential => "sequential",
        }
    }
}

impl fmt::Display for BiasMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(BiasMethod::Parallel),
            "sequential" => Ok(BiasMethod::Sequential),
            other => Err(Error::Config(format!("unknown bias method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            d: 64,
            heads: 4,
            ffn: 128,
            vocab_size: 0,
        }
    }
}

impl DecoderConfig {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d: self.d,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    /// Token embedding (tied with the output projection), self-attention,
    /// cross-attention and FFN per layer, final norm and output bias.
    pub fn init_params<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.dims().validate()?;
        if self.vocab_size == 0 {
            return Err(Error::Config("decoder vocabulary is empty".into()));
        }
        let std = (self.d as f64).powf(-0.5);
        ps.insert("dec.emb", Tensor::randn(&[self.vocab_size, self.d], std, rng))?;
        for l in 0..self.layers {
            let p = format!("dec.layer{l}");
            nn::init_layer_norm(ps, &format!("{p}.ln1"), self.d)?;
            nn::init_attention(ps, &format!("{p}.self_attn"), self.d, rng)?;
            nn::init_layer_norm(ps, &format!("{p}.ln2"), self.d)?;
            nn::init_attention(ps, &format!("{p}.cross_attn"), self.d, rng)?;
            nn::init_layer_norm(ps, &format!("{p}.ln3"), self.d)?;
            nn::init_ffn(ps, &format!("{p}.ffn"), self.d, self.ffn, rng)?;
        }
        nn::init_layer_norm(ps, "dec.ln_f", self.d)?;
        ps.insert("dec.out.b", Tensor::zeros(&[1, self.vocab_size]))?;
        Ok(())
    }
}

/// Scaled token embeddings plus sinusoidal positions, sharing `table`.
fn embed_tokens(g: &mut Graph<'_>, table: &str, d: usize, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let t = g.param(table)?;
    let x = g.gather(t, tokens)?;
    let x = g.scale(x, (d as f64).sqrt())?;
    let pos: Vec<f64> = (0..tokens.len()).map(|i| i as f64).collect();
    let p = g.input(&nn::positions(&pos, d))?;
    g.add(x, p)
}

/// Bias input to the decoder layers: a `(B+1)×d` set and the attention method.
#[derive(Clone, Copy, Debug)]
pub struct BiasInput {
    pub set: Var,
    pub method: BiasMethod,
}

/// One decoder layer, optionally with bias attention.
///
/// Plain: `h = x + SelfAttn(LN1 x)`, `h += Cross(LN2 h)`, `h += FFN(LN3 h)`.
/// Parallel: the cross and bias attentions read the same `LN2 h` query and
/// their outputs are summed before the residual add. Sequential: bias
/// attention reads `LN_b` of the post-cross residual stream and adds its own
/// residual.
pub fn decoder_layer_graph(
    g: &mut Graph<'_>,
    prefix: &str,
    heads: usize,
    x: Var,
    enc: Var,
    bias: Option<BiasInput>,
) -> Result<Var> {
    let t = g.rows(x);
    let causal = AttnMask::causal(t);
    let n1 = nn::layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let a = nn::mha(g, n1, n1, &format!("{prefix}.self_attn"), heads, Some(&causal))?;
    let mut h = g.add(x, a)?;
    let n2 = nn::layer_norm(g, h, &format!("{prefix}.ln2"))?;
    let c = nn::mha(g, n2, enc, &format!("{prefix}.cross_attn"), heads, None)?;
    match bias {
        None => h = g.add(h, c)?,
        Some(BiasInput {
            set,
            method: BiasMethod::Parallel,
        }) => {
            let b = nn::mha(g, n2, set, &format!("{prefix}.bias_attn"), heads, None)?;
            let cb = g.add(c, b)?;
            h = g.add(h, cb)?;
        }
        Some(BiasInput {
            set,
            method: BiasMethod::Sequential,
        }) => {
            h = g.add(h, c)?;
            let nb = nn::layer_norm(g, h, &format!("{prefix}.ln_b"))?;
            let b = nn::mha(g, nb, set, &format!("{prefix}.bias_attn"), heads, None)?;
            h = g.add(h, b)?;
        }
    }
    let n3 = nn::layer_norm(g, h, &format!("{prefix}.ln3"))?;
    let f = nn::ffn(g, n3, &format!("{prefix}.ffn"))?;
    g.add(h, f)
}

/// Next-token logits (`T×V`) for every prefix position of `tokens`.
pub fn decoder_forward(
    g: &mut Graph<'_>,
    cfg: &DecoderConfig,
    enc: Var,
    tokens: &[usize],
    bias: Option<BiasInput>,
) -> Result<Var> {
    let mut h = embed_tokens(g, "dec.emb", cfg.d, tokens)?;
    for l in 0..cfg.layers {
        h = decoder_layer_graph(g, &format!("dec.layer{l}"), cfg.heads, h, enc, bias)?;
    }
    let h = nn::layer_norm(g, h, "dec.ln_f")?;
    let emb = g.param("dec.emb")?;
    let logits = g.matmul_t(h, emb)?;
    let b = g.param("dec.out.b")?;
    g.add_row(logits, b)
}

/// Tensor-level decoder layer for inspection and tests. `bias_set` and
/// `method` must be given together.
pub fn clas_layer_forward(
    params: &ParameterSet,
    prefix: &str,
    heads: usize,
    x: &Tensor,
    enc_out: &Tensor,
    bias: Option<(&Tensor, BiasMethod)>,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let xv = g.input(x)?;
    let ev = g.input(enc_out)?;
    let b = match bias {
        Some((set, method)) => Some(BiasInput {
            set: g.input(set)?,
            method,
        }),
        None => None,
    };
    let out = decoder_layer_graph(&mut g, prefix, heads, xv, ev, b)?;
    Ok(g.tensor(out))
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Base speech/text-to-text model: shared encoder plus decoder in one
/// parameter set (`enc.*`, `dec.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct S2tModel {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub target_vocab: Vocab,
    pub params: ParameterSet,
}

#[derive(Serialize, Deserialize)]
pub struct S2tHeader {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub target_vocab: Vocab,
}

impl S2tModel {
    pub const KIND: &'static str = "s2t";

    pub fn new(encoder: EncoderConfig, mut decoder: DecoderConfig, target_vocab: Vocab, seed: u64) -> Result<Self> {
        if encoder.d != decoder.d {
            return Err(Error::Config(format!("encoder dim {} != decoder dim {}", encoder.d, decoder.d)));
        }
        decoder.vocab_size = target_vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        encoder.init_params(&mut params, &mut rng)?;
        decoder.init_params(&mut params, &mut rng)?;
        Ok(S2tModel {
            encoder,
            decoder,
            target_vocab,
            params,
        })
    }

    pub fn bos(&self) -> usize {
        self.target_vocab.id(BOS).expect("target vocabulary has BOS")
    }

    pub fn eos(&self) -> usize {
        self.target_vocab.id(EOS).expect("target vocabulary has EOS")
    }

    pub fn shared_encoder(&self) -> Result<SharedEncoder> {
        SharedEncoder::from_params(self.encoder.clone(), &self.params)
    }

    pub fn header(&self) -> S2tHeader {
        S2tHeader {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            target_vocab: self.target_vocab.clone(),
        }
    }

    pub fn from_header(h: S2tHeader, params: ParameterSet) -> Self {
        S2tModel {
            encoder: h.encoder,
            decoder: h.decoder,
            target_vocab: h.target_vocab,
            params,
        }
    }

    /// Next-token log-probabilities after `prefix` given encoder outputs.
    pub fn next_logprobs(&self, enc_out: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let e = g.input(enc_out)?;
        let logits = decoder_forward(&mut g, &self.decoder, e, prefix, None)?;
        let t = g.tensor(logits);
        Ok(log_softmax(t.row(t.rows() - 1)))
    }

    /// Beam search without biasing.
    pub fn translate(&self, enc_out: &Tensor, beam: &BeamConfig) -> Result<Vec<usize>> {
        beam_search(beam, self.bos(), self.eos(), (), |p, _| self.next_logprobs(enc_out, p), |_, _| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 5, max_len: 32 }
    }
}

struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
}

/// Length-normalised beam search. `scores(prefix, state)` returns the
/// per-token log-score of extending `prefix`; `advance` updates the
/// hypothesis state. Ties are broken towards the lower token id, then the
/// earlier hypothesis. Returned tokens exclude BOS and EOS.
pub fn beam_search<S: Clone>(
    cfg: &BeamConfig,
    bos: usize,
    eos: usize,
    init: S,
    mut scores: impl FnMut(&[usize], &S) -> Result<Vec<f64>>,
    advance: impl Fn(&S, usize) -> S,
) -> Result<Vec<usize>> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam and max_len must be positive".into()));
    }
    let mut alive = vec![Hyp {
        tokens: vec![bos],
        score: 0.0,
        state: init,
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let lp = scores(&h.tokens, &h.state)?;
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in idx.iter().take(cfg.beam) {
                cands.push((h.score + lp[t], hi, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let mut next = Vec::new();
        for &(score, hi, t) in cands.iter().take(cfg.beam) {
            let h = &alive[hi];
            if t == eos {
                finished.push((score / h.tokens.len() as f64, h.tokens[1..].to_vec()));
            } else {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                next.push(Hyp {
                    tokens,
                    score,
                    state: advance(&h.state, t),
                });
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= cfg.beam {
            break;
        }
    }
    for h in alive {
        let len = (h.tokens.len() - 1).max(1) as f64;
        finished.push((h.score / len, h.tokens[1..].to_vec()));
    }
    finished
        .into_iter()
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, t)| t)
        .ok_or(Error::Empty("beam search produced no hypothesis"))
}

/// Matrix of bias vectors: row 0 is the no-bias vector, row `i+1` belongs to
/// `ne_ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSet {
    pub vectors: Tensor,
    pub ne_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClasConfig {
    pub method: BiasMethod,
    pub bias_layers: usize,
    /// Train only the new bias components and the (tied) output projection.
    pub freeze_decoder: bool,
    pub distractors: usize,
    pub p_drop: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for ClasConfig {
    fn default() -> Self {
        ClasConfig {
            method: BiasMethod::Parallel,
            bias_layers: 3,
            freeze_decoder: true,
            distractors: 3,
            p_drop: 0.1,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            seed: 3,
            jobs: 1,
        }
    }
}

/// Base model extended with a bias encoder and per-layer bias attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ClasModel {
    pub base: S2tModel,
    pub method: BiasMethod,
    pub bias_layers: usize,
    pub freeze_decoder: bool,
}

#[derive(Serialize, Deserialize)]
pub struct ClasHeader {
    pub base: S2tHeader,
    pub method: BiasMethod,
    pub bias_layers: usize,
    pub freeze_decoder: bool,
}

/// True for parameters introduced by the CLAS extension.
pub fn is_bias_param(name: &str) -> bool {
    name.starts_with("bias.") || name.contains(".bias_attn.") || name.contains(".ln_b.")
}

/// True for the output projection (tied with the decoder token embedding).
pub fn is_output_projection(name: &str) -> bool {
    name == "dec.emb" || name == "dec.out.b"
}

impl ClasModel {
    pub const KIND: &'static str = "clas";

    /// Copy the base weights, add bias components, and set trainable flags:
    /// the encoder is always frozen; with `freeze_decoder` only the new
    /// components and the output projection train.
    pub fn from_base(base: &S2tModel, method: BiasMethod, bias_layers: usize, freeze_decoder: bool, seed: u64) -> Result<Self> {
        let mut m = ClasModel {
            base: base.clone(),
            method,
            bias_layers,
            freeze_decoder,
        };
        let d = base.decoder.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = &mut m.base.params;
        let emb = ps.get("dec.emb")?.clone();
        ps.insert("bias.emb", emb)?;
        let dims = base.decoder.dims();
        for l in 0..bias_layers {
            nn::init_encoder_layer(ps, &format!("bias.layer{l}"), dims, &mut rng)?;
        }
        nn::init_layer_norm(ps, "bias.ln_f", d)?;
        ps.insert("bias.nobias", Tensor::randn(&[1, d], 1.0, &mut rng))?;
        for l in 0..base.decoder.layers {
            nn::init_attention(ps, &format!("dec.layer{l}.bias_attn"), d, &mut rng)?;
            if method == BiasMethod::Sequential {
                nn::init_layer_norm(ps, &format!("dec.layer{l}.ln_b"), d)?;
            }
        }
        m.apply_freezing();
        Ok(m)
    }

    pub fn apply_freezing(&mut self) {
        let freeze_decoder = self.freeze_decoder;
        let ps = &mut self.base.params;
        let names: Vec<String> = ps.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let trainable = if name.starts_with("enc.") {
                false
            } else if freeze_decoder {
                is_bias_param(&name) || is_output_projection(&name)
            } else {
                true
            };
            let id = ps.id(&name).expect("name from iteration");
            ps.entry_mut(id).trainable = trainable;
        }
    }

    pub fn header(&self) -> ClasHeader {
        ClasHeader {
            base: self.base.header(),
            method: self.method,
            bias_layers: self.bias_layers,
            freeze_decoder: self.freeze_decoder,
        }
    }

    pub fn from_header(h: ClasHeader, params: ParameterSet) -> Self {
        ClasModel {
            base: S2tModel::from_header(h.base, params),
            method: h.method,
            bias_layers: h.bias_layers,
            freeze_decoder: h.freeze_decoder,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.base.params
    }

    /// Target-vocabulary ids of each entity's target form.
    pub fn bias_forms(&self, nes: &[&NamedEntity]) -> Result<Vec<Vec<usize>>> {
        nes.iter().map(|n| self.base.target_vocab.encode(&n.target_tokens())).collect()
    }

    pub fn encode_bias(&self, nes: &[&NamedEntity]) -> Result<BiasSet> {
        let forms = self.bias_forms(nes)?;
        let mut g = Graph::new(self.params());
        let v = bias_set_graph(&mut g, self.base.decoder.d, self.base.decoder.heads, self.bias_layers, &forms)?;
        Ok(BiasSet {
            vectors: g.tensor(v),
            ne_ids: nes.iter().map(|n| n.id.clone()).collect(),
        })
    }

    pub fn next_logprobs(&self, enc_out: &Tensor, bias: &BiasSet, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.params());
        let e = g.input(enc_out)?;
        let b = g.input(&bias.vectors)?;
        let logits = decoder_forward(
            &mut g,
            &self.base.decoder,
            e,
            prefix,
            Some(BiasInput {
                set: b,
                method: self.method,
            }),
        )?;
        let t = g.tensor(logits);
        Ok(log_softmax(t.row(t.rows() - 1)))
    }

    pub fn translate(&self, enc_out: &Tensor, bias: &BiasSet, beam: &BeamConfig) -> Result<Vec<usize>> {
        beam_search(
            beam,
            self.base.bos(),
            self.base.eos(),
            (),
            |p, _| self.next_logprobs(enc_out, bias, p),
            |_, _| (),
        )
    }
}

/// Bias encoder over each form, mean-pooled per form, after the no-bias row.
pub fn bias_set_graph(g: &mut Graph<'_>, d: usize, heads: usize, layers: usize, forms: &[Vec<usize>]) -> Result<Var> {
    let mut rows = vec![g.param("bias.nobias")?];
    for form in forms {
        let mut h = embed_tokens(g, "bias.emb", d, form)?;
        for l in 0..layers {
            h = nn::encoder_layer(g, h, &format!("bias.layer{l}"), heads, None)?;
        }
        let h = nn::layer_norm(g, h, "bias.ln_f")?;
        rows.push(g.mean_rows(h)?);
    }
    g.concat_rows(&rows)
}

/// Teacher-forced CLAS cross-entropy for one utterance.
pub fn clas_loss_graph(
    g: &mut Graph<'_>,
    model: &ClasModel,
    enc_out: &Tensor,
    forms: &[Vec<usize>],
    input: &[usize],
    labels: &[usize],
) -> Result<Var> {
    let e = g.input(enc_out)?;
    let dec = &model.base.decoder;
    let set = bias_set_graph(g, dec.d, dec.heads, model.bias_layers, forms)?;
    let logits = decoder_forward(
        g,
        dec,
        e,
        input,
        Some(BiasInput {
            set,
            method: model.method,
        }),
    )?;
    g.cross_entropy(logits, labels)
}

/// Training bias list for one utterance: gold entities each kept with
/// probability `1 − p_drop`, plus `k` distinct non-gold distractors, shuffled.
pub fn training_bias_list<'c, R: Rng + ?Sized>(
    corpus: &'c Corpus,
    u: &Utterance,
    k: usize,
    p_drop: f64,
    rng: &mut R,
) -> Vec<&'c NamedEntity> {
    let gold: Vec<&str> = u.gold_entities.iter().map(|g| g.ne_id.as_str()).collect();
    let mut out: Vec<&NamedEntity> = Vec::new();
    for id in &gold {
        if !rng.gen_bool(p_drop) {
            if let Some(ne) = corpus.entity(id) {
                if !out.iter().any(|n| n.id == ne.id) {
                    out.push(ne);
                }
            }
        }
    }
    let pool: Vec<&NamedEntity> = corpus.dictionary.iter().filter(|n| !gold.contains(&n.id.as_str())).collect();
    out.extend(pool.choose_multiple(rng, k.min(pool.len())).copied());
    out.shuffle(rng);
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClasReport {
    pub epoch_losses: Vec<f64>,
}

/// Precomputed deterministic encoder outputs for a split.
pub fn encode_split(encoder: &SharedEncoder, utts: &[Utterance], jobs: usize) -> Result<Vec<Tensor>> {
    par::try_map(jobs, utts, |u| encoder.encode_utterance(u).map(|o| o.vectors))
}

/// Fine-tune a CLAS model from the base model with the encoder frozen.
pub fn train_clas(base: &S2tModel, corpus: &Corpus, config: &ClasConfig) -> Result<(ClasModel, ClasReport)> {
    check_probability("p_drop", config.p_drop)?;
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut model = ClasModel::from_base(base, config.method, config.bias_layers, config.freeze_decoder, config.seed)?;
    let encoder = base.shared_encoder()?;
    let enc_out = encode_split(&encoder, train, config.jobs)?;
    let targets: Vec<(Vec<usize>, Vec<usize>)> = train.iter().map(|u| teacher_forcing(base, u)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = ClasReport::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<(usize, Vec<Vec<usize>>)> = batch
                .iter()
                .map(|&i| {
                    let nes = training_bias_list(corpus, &train[i], config.distractors, config.p_drop, &mut rng);
                    model.bias_forms(&nes).map(|f| (i, f))
                })
                .collect::<Result<_>>()?;
            let results = par::try_map(config.jobs, &items, |(i, forms)| -> Result<(f64, Gradients)> {
                let mut g = Graph::new(model.params());
                let (input, labels) = &targets[*i];
                let loss = clas_loss_graph(&mut g, &model, &enc_out[*i], forms, input, labels)?;
                Ok((g.scalar(loss), g.backward(loss)?))
            })?;
            let mut grads = Gradients::zeros_like(model.params());
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
            opt.lr = warmup_lr(config.lr, step, config.warmup);
            opt.step(&mut model.base.params, &grads)?;
            total += batch_loss;
            step += 1;
        }
        let mean = total / train.len() as f64;
        log::info!("clas epoch {epoch}: train {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}
