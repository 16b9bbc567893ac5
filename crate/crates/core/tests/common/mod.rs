#![allow(dead_code)]

use nedict::biasdec::{clas_loss_graph, BiasMethod, ClasModel, DecoderConfig, S2tModel};
use std::path::{Path, PathBuf};

use nedict::corpus::{generate_corpus, Corpus, CorpusConfig, NamedEntity, Split};
use nedict::detector::{detector_loss_graph, DetectorConfig, DetectorModel, DetectorTrainConfig};
use nedict::encoder::{joint_loss_graph, teacher_forcing, text_pair_loss_graph, EncoderConfig};
use nedict::numerics::{finite_difference_check, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
const ELEMS_PER_PARAM: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    let heads = [1, 2][rng.gen_range(0..2)];
    let d = heads * [4, 6][rng.gen_range(0..2)];
    Shape {
        d,
        heads,
        ffn: rng.gen_range(6..14),
        layers: rng.gen_range(1..3),
    }
}

pub fn tiny_corpus() -> Corpus {
    generate_corpus(&CorpusConfig::tiny(), 3).expect("tiny corpus")
}

fn base_model(corpus: &Corpus, s: Shape, seed: u64) -> S2tModel {
    let u = &corpus.split(Split::Train)[0];
    let enc = EncoderConfig {
        layers: s.layers,
        d: s.d,
        heads: s.heads,
        ffn: s.ffn,
        speech_dim: u.speech_frames.cols(),
        num_phonemes: corpus.num_phonemes(),
        ..Default::default()
    };
    let dec = DecoderConfig {
        layers: s.layers,
        d: s.d,
        heads: s.heads,
        ffn: s.ffn,
        vocab_size: 0,
    };
    S2tModel::new(enc, dec, corpus.target_vocab.clone(), seed).expect("model")
}

fn check(name: String, r: nedict::Result<GradCheckReport>) -> (String, GradCheckReport) {
    (name.clone(), r.unwrap_or_else(|e| panic!("{name}: {e}")))
}

/// Finite-difference checks over every trainable module on randomized
/// shapes: shared encoder with decoder and output projection (joint and
/// text-only losses), detector head with every toggle combination, and the
/// CLAS bias encoder and bias attention in both placements.
pub fn gradient_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    let corpus = tiny_corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for trial in 0..2 {
        let s = random_shape(&mut rng);
        let m = base_model(&corpus, s, rng.gen());
        let train = corpus.split(Split::Train);
        let u = &train[rng.gen_range(0..train.len())];
        let keep = vec![true; s.layers];
        out.push(check(
            format!("encoder+decoder joint {trial} {s:?}"),
            finite_difference_check(&m.params, GRAD_EPS, Some(ELEMS_PER_PARAM), |g| {
                joint_loss_graph(g, &m, u, 0.5, &keep, &keep)
            }),
        ));
        let pair = &corpus.mt[rng.gen_range(0..corpus.mt.len())];
        out.push(check(
            format!("encoder+decoder text pair {trial} {s:?}"),
            finite_difference_check(&m.params, GRAD_EPS, Some(ELEMS_PER_PARAM), |g| {
                text_pair_loss_graph(g, &m, pair, &keep)
            }),
        ));
    }

    for (modality_emb, attn_mask) in [(true, true), (false, false), (true, false)] {
        let s = random_shape(&mut rng);
        let cfg = DetectorConfig {
            d: s.d,
            heads: s.heads,
            ffn: s.ffn,
            modality_emb,
            attn_mask,
            ..Default::default()
        };
        let det = DetectorModel::new(cfg.clone(), rng.gen()).expect("detector");
        let train = DetectorTrainConfig::default();
        let p = rng.gen_range(1..5);
        let sl = rng.gen_range(3..12);
        let pos = Tensor::randn(&[p, s.d], 1.0, &mut rng);
        let neg = Tensor::randn(&[rng.gen_range(1..5), s.d], 1.0, &mut rng);
        let speech = Tensor::randn(&[sl, s.d], 1.0, &mut rng);
        out.push(check(
            format!("detector emb={modality_emb} mask={attn_mask} {s:?}"),
            finite_difference_check(&det.params, GRAD_EPS, Some(ELEMS_PER_PARAM), |g| {
                detector_loss_graph(g, &cfg, &train, &pos, &neg, &speech, None)
            }),
        ));
    }

    for method in [BiasMethod::Parallel, BiasMethod::Sequential] {
        let s = random_shape(&mut rng);
        let base = base_model(&corpus, s, rng.gen());
        let clas = ClasModel::from_base(&base, method, s.layers, false, rng.gen()).expect("clas");
        let u = &corpus.split(Split::Train)[rng.gen_range(0..corpus.split(Split::Train).len())];
        let (input, labels) = teacher_forcing(&base, u).expect("teacher forcing");
        let n = rng.gen_range(0..3);
        let nes: Vec<_> = (0..n).map(|_| &corpus.dictionary[rng.gen_range(0..corpus.dictionary.len())]).collect();
        let forms = clas.bias_forms(&nes).expect("forms");
        let enc_out = Tensor::randn(&[rng.gen_range(3..10), s.d], 1.0, &mut rng);
        out.push(check(
            format!("clas {} bias={n} {s:?}", method.as_str()),
            finite_difference_check(clas.params(), GRAD_EPS, Some(ELEMS_PER_PARAM), |g| {
                clas_loss_graph(g, &clas, &enc_out, &forms, &input, &labels)
            }),
        ));
    }
    out
}

pub const GOLDEN_TOL: f64 = 1e-9;
pub const PERMUTATION_TOL: f64 = 1e-6;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nobias_golden.json")
}

/// Small fixed-seed CLAS model over the tiny corpus.
pub fn fixture_clas() -> Result<(ClasModel, Corpus), String> {
    let corpus = tiny_corpus();
    let s = Shape {
        d: 8,
        heads: 2,
        ffn: 12,
        layers: 2,
    };
    let base = base_model(&corpus, s, 21);
    let clas = ClasModel::from_base(&base, BiasMethod::Parallel, 2, true, 22).map_err(err)?;
    Ok((clas, corpus))
}

/// Next-token log-probabilities with an empty bias list for the first two
/// test utterances at prefixes of length 1–3.
pub fn golden_outputs(clas: &ClasModel, corpus: &Corpus) -> Result<Vec<Vec<f64>>, String> {
    let enc = clas.base.shared_encoder().map_err(err)?;
    let empty = clas.encode_bias(&[]).map_err(err)?;
    let mut out = Vec::new();
    for u in corpus.split(Split::Test).iter().take(2) {
        let e = enc.encode_utterance(u).map_err(err)?.vectors;
        let ids = clas.base.target_vocab.encode(&u.target_tokens).map_err(err)?;
        for len in [0, 1, 2] {
            let mut prefix = vec![clas.base.bos()];
            prefix.extend(ids.iter().take(len));
            out.push(clas.next_logprobs(&e, &empty, &prefix).map_err(err)?);
        }
    }
    Ok(out)
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return f64::INFINITY;
    }
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Returns (empty-bias output vs golden fixture, empty-bias output vs the same
/// model with perturbed bias-encoder weights, max difference over all 24
/// orderings of a 4-entity bias list). `NEDICT_BLESS` rewrites the fixture.
pub fn empty_bias_and_permutation() -> Result<(f64, f64, f64), String> {
    let (clas, corpus) = fixture_clas()?;
    let got = golden_outputs(&clas, &corpus)?;
    let path = fixture_path();
    if std::env::var_os("NEDICT_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().expect("fixture dir")).map_err(err)?;
        std::fs::write(&path, serde_json::to_string_pretty(&got).map_err(err)?).map_err(err)?;
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let golden: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(err)?;
    let golden_diff = max_diff(&got, &golden);

    let mut perturbed = clas.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = perturbed
        .params()
        .iter()
        .filter(|p| p.name.starts_with("bias.") && p.name != "bias.nobias")
        .map(|p| p.name.clone())
        .collect();
    if names.is_empty() {
        return Err("no bias-encoder parameters".into());
    }
    for name in &names {
        let t = perturbed.base.params.get_mut(name).map_err(err)?;
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
    }
    let encoder_diff = max_diff(&golden_outputs(&perturbed, &corpus)?, &got);

    let u = &corpus.split(Split::Test)[0];
    let e = clas.base.shared_encoder().map_err(err)?.encode_utterance(u).map_err(err)?.vectors;
    let nes: Vec<&NamedEntity> = corpus.dictionary.iter().take(4).collect();
    let prefix = vec![clas.base.bos()];
    let reference = clas.next_logprobs(&e, &clas.encode_bias(&nes).map_err(err)?, &prefix).map_err(err)?;
    let mut perm_diff: f64 = 0.0;
    for perm in permutations(nes.len()) {
        let list: Vec<&NamedEntity> = perm.iter().map(|&i| nes[i]).collect();
        let lp = clas.next_logprobs(&e, &clas.encode_bias(&list).map_err(err)?, &prefix).map_err(err)?;
        perm_diff = reference.iter().zip(&lp).map(|(a, b)| (a - b).abs()).fold(perm_diff, f64::max);
    }
    Ok((golden_diff, encoder_diff, perm_diff))
}
