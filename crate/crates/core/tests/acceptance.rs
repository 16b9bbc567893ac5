//! One PASS/FAIL line per acceptance criterion.
//!
//! Trained artifacts live under `NEDICT_ACCEPTANCE_OUT` (default: a directory
//! in cargo's target tmpdir) and are reused when present, so only the first
//! run pays for training. A directory written with a different configuration
//! is rejected. The process exits non-zero on a FAIL only when
//! `NEDICT_ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nedict::biasdec::DecoderConfig;
use nedict::corpus::{Category, Corpus, CorpusConfig, NamedEntity, Split, Utterance};
use nedict::detector::{build_attention_mask, logit_graph, DetectorConfig, DetectorFeature, DetectorModel, ScoreGrid};
use nedict::encoder::{EncoderConfig, JointTrainConfig};
use nedict::eval::{
    corpus_bleu, entity_accuracy, gold_mentions, grid_detected, precision_nested_excluded, retrieved_at_recall, threshold_sweep,
    DetectionReport, GoldMention, ReferenceEntity, TranslationReport,
};
use nedict::numerics::{Graph, Tensor};
use nedict::pipeline::{self, BiasFrom, Layout, RunConfig, COSINE, FULL};
use nedict::rescore::{beam_search_fused, train_class_lm, train_generic_lm, FusionCounters, FusionLms, LAMBDA_GRID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<(bool, String), String>;

const DETECTOR_BUDGET_SECS: f64 = 20.0 * 60.0;
const GRADIENT_BUDGET_SECS: f64 = 120.0;
const CLAS_MARGIN: f64 = 0.03;
const IDENTITY_UTTERANCES: usize = 25;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// Shared full-scale run.

struct Run {
    cfg: RunConfig,
    layout: Layout,
    corpus: Corpus,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn open() -> Result<Run, String> {
        let root = std::env::var_os("NEDICT_ACCEPTANCE_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run"));
        let cfg = RunConfig::default();
        let layout = Layout::new(&root);
        let resolved = layout.resolved_config();
        if resolved.exists() {
            let existing = RunConfig::load(&resolved).map_err(err)?;
            if existing != cfg {
                return Err(format!("{} holds a run with a different configuration; remove it", root.display()));
            }
        }
        let corpus = if layout.corpus().join("meta.json").exists() {
            pipeline::load_run_corpus(&layout).map_err(err)?
        } else {
            pipeline::gen_data(&cfg, &layout).map_err(err)?
        };
        let timings = std::fs::read_to_string(root.join("timings.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        let mut run = Run {
            cfg,
            layout,
            corpus,
            timings,
        };
        if !run.layout.base_model().exists() {
            run.timed("train-encoder", |r| pipeline::train_encoder(&r.cfg, &r.layout).map(|_| ()))?;
        }
        Ok(run)
    }

    fn timed(&mut self, key: &str, f: impl FnOnce(&Run) -> nedict::Result<()>) -> Result<(), String> {
        let t = Instant::now();
        f(self).map_err(err)?;
        self.timings.insert(key.to_string(), t.elapsed().as_secs_f64());
        let text = serde_json::to_string_pretty(&self.timings).map_err(err)?;
        std::fs::write(self.layout.root.join("timings.json"), text).map_err(err)
    }

    fn detector(&mut self, name: &str, without: Option<DetectorFeature>) -> Result<(), String> {
        if self.layout.detector_model(name).exists() {
            return Ok(());
        }
        let (m, t) = match without {
            Some(f) => f.disable(&self.cfg.detector, &self.cfg.detector_train),
            None => (self.cfg.detector.clone(), self.cfg.detector_train.clone()),
        };
        self.timed(&format!("train-detector-{name}"), |r| {
            pipeline::train_detector_variant(&r.cfg, &r.layout, name, &m, &t).map(|_| ())
        })
    }

    fn grid(&mut self, scorer: &str) -> Result<ScoreGrid, String> {
        if !self.layout.scores(scorer, Split::Test).exists() {
            self.timed(&format!("grid-{scorer}"), |r| pipeline::score_grid(&r.cfg, &r.layout, scorer, Split::Test).map(|_| ()))?;
        }
        pipeline::score_grid(&self.cfg, &self.layout, scorer, Split::Test).map_err(err)
    }

    fn gold(&self) -> Result<Vec<Vec<GoldMention>>, String> {
        gold_mentions(&self.corpus, self.corpus.split(Split::Test)).map_err(err)
    }

    fn report(&self, grid: &ScoreGrid) -> Result<DetectionReport, String> {
        let utts = self.corpus.split(Split::Test);
        let det = grid_detected(grid, self.cfg.threshold);
        DetectionReport::compute(self.cfg.threshold, &det, &self.gold()?, utts, &self.corpus.dictionary).map_err(err)
    }

    fn hypotheses(&mut self, name: &str, make: impl FnOnce(&Run) -> nedict::Result<()>) -> Result<TranslationReport, String> {
        if !self.layout.hypotheses(name).exists() {
            self.timed(&format!("decode-{name}"), make)?;
        }
        pipeline::evaluate_hypotheses(&self.layout, name, Split::Test).map_err(err)
    }
}

fn run_handle(slot: &mut Option<Result<Run, String>>) -> Result<&mut Run, String> {
    slot.get_or_insert_with(Run::open).as_mut().map_err(|e| e.clone())
}

// Criteria.

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = common::gradient_suite(11);
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .ok_or("empty suite")?;
    let all_ok = results.iter().all(|(_, r)| r.checked_params > 0 && r.max_rel_error < common::GRAD_TOL);
    Ok((
        all_ok && secs < GRADIENT_BUDGET_SECS,
        format!(
            "{} checks, max rel err {:.2e} ({worst_name} / {}), eps {:e}, {secs:.1}s",
            results.len(),
            worst.max_rel_error,
            worst.worst_param,
            common::GRAD_EPS
        ),
    ))
}

/// Role-based restatement of the masking rule used as the oracle.
fn mask_oracle(p: usize, q: usize, k: usize) -> bool {
    let speech_index = |pos: usize| pos.checked_sub(p + 2);
    match (speech_index(q), speech_index(k)) {
        (Some(i), Some(j)) => {
            let dist = if i > j { i - j } else { j - i };
            dist <= 2 * p
        }
        _ => true,
    }
}

fn attention_mask() -> Outcome {
    let mut mismatches = 0;
    for p in 1..=8 {
        for s in 1..=40 {
            let m = build_attention_mask(p, s, 2);
            for q in 0..p + s + 2 {
                for k in 0..p + s + 2 {
                    mismatches += (m.allows(q, k) != mask_oracle(p, q, k)) as usize;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DetectorConfig {
        d: 8,
        heads: 2,
        ffn: 16,
        ..Default::default()
    };
    let det = DetectorModel::new(cfg.clone(), 9).map_err(err)?;
    let (mut leaked, mut checked) = (0.0f64, 0usize);
    for _ in 0..12 {
        let (p, s) = (rng.gen_range(1..=8), rng.gen_range(1..=40));
        let text = Tensor::randn(&[p, 8], 1.0, &mut rng);
        let speech = Tensor::randn(&[s, 8], 1.0, &mut rng);
        let mut g = Graph::new(&det.params);
        let (t, sp) = (g.input(&text).map_err(err)?, g.input(&speech).map_err(err)?);
        logit_graph(&mut g, &cfg, t, sp, None).map_err(err)?;
        let n = p + s + 2;
        let nodes = g.attention_nodes();
        if nodes.len() != 3 {
            return Err(format!("expected 3 attention layers, found {}", nodes.len()));
        }
        for v in nodes {
            let probs = g.attention_probs(v).ok_or("attention node without probabilities")?;
            for (i, &w) in probs.iter().enumerate() {
                let (q, k) = ((i / n) % n, i % n);
                if !mask_oracle(p, q, k) {
                    leaked = leaked.max(w.abs());
                    checked += 1;
                }
            }
        }
    }
    Ok((
        mismatches == 0 && leaked == 0.0 && checked > 0,
        format!("{mismatches} mask mismatches over P<=8, S<=40; max weight on {checked} forbidden pairs = {leaked:e}"),
    ))
}

fn detector_end_to_end(run: &mut Run) -> Outcome {
    run.detector(FULL, None)?;
    let grid = run.grid(FULL)?;
    let cos = run.grid(COSINE)?;
    let report = run.report(&grid)?;
    let gold = run.gold()?;
    let recall_ok = Category::SCORED
        .iter()
        .all(|c| report.recall.get(c).is_some_and(|&r| r >= 0.85));
    let target = report.micro_recall.ok_or("no gold mentions")?;
    let full_at = retrieved_at_recall(&grid, &gold, target).map_err(err)?.map(|x| x.1);
    let cos_at = retrieved_at_recall(&cos, &gold, target).map_err(err)?.map(|x| x.1);
    let cos_more = matches!((full_at, cos_at), (Some(f), Some(c)) if c > f);
    let secs = match (run.timings.get("train-detector-full"), run.timings.get(&format!("grid-{FULL}"))) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    };
    let recall: Vec<String> = Category::SCORED
        .iter()
        .map(|c| format!("{c}={:.3}", report.recall.get(c).copied().unwrap_or(f64::NAN)))
        .collect();
    Ok((
        recall_ok && report.retrieved <= 2.5 && cos_more && secs.is_some_and(|s| s <= DETECTOR_BUDGET_SECS),
        format!(
            "recall {} retrieved {:.3} at {}; at matched recall {target:.3}: detector {} vs cosine {}; train+detect {}",
            recall.join(" "),
            report.retrieved,
            run.cfg.threshold,
            full_at.map_or("n/a".into(), |v| format!("{v:.3}")),
            cos_at.map_or("n/a".into(), |v| format!("{v:.3}")),
            secs.map_or("not measured (artifacts reused)".into(), |s| format!("{s:.0}s"))
        ),
    ))
}

fn ablation_trends(run: &mut Run) -> Outcome {
    run.detector(FULL, None)?;
    let full = run.grid(FULL)?;
    let full_report = run.report(&full)?;
    let gold = run.gold()?;
    let target = full_report.micro_recall.ok_or("no gold mentions")?;
    let at = |g: &ScoreGrid| retrieved_at_recall(g, &gold, target).map_err(err).map(|x| x.map(|v| v.1));
    let mut variant = |f: DetectorFeature| -> Result<(ScoreGrid, DetectionReport), String> {
        let name = format!("without-{f}");
        run.detector(&name, Some(f))?;
        let g = run.grid(&name)?;
        let r = run.report(&g)?;
        Ok((g, r))
    };
    let (no_margin, _) = variant(DetectorFeature::Margin)?;
    let (_, no_ne) = variant(DetectorFeature::TrainOnNe)?;
    let (_, no_mask) = variant(DetectorFeature::AttnMask)?;
    let (full_at, nm_at) = (at(&full)?, at(&no_margin)?);
    let margin_ok = matches!((full_at, nm_at), (Some(f), Some(n)) if n > f);
    let ne_ok = matches!((full_report.micro_recall, no_ne.micro_recall), (Some(f), Some(n)) if n < f);
    let per = |r: &DetectionReport| r.recall.get(&Category::Per).copied();
    let mask_ok = matches!((per(&full_report), per(&no_mask)), (Some(f), Some(n)) if n < f);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    Ok((
        margin_ok && ne_ok && mask_ok,
        format!(
            "-margin retrieved@{target:.3} {} vs {} [{}]; -train-on-ne recall {} vs {} [{}]; -attn-mask PER recall {} vs {} [{}]",
            fmt(nm_at),
            fmt(full_at),
            ok(margin_ok),
            fmt(no_ne.micro_recall),
            fmt(full_report.micro_recall),
            ok(ne_ok),
            fmt(per(&no_mask)),
            fmt(per(&full_report)),
            ok(mask_ok)
        ),
    ))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "wrong direction"
    }
}

fn clas_accuracy(run: &mut Run) -> Outcome {
    run.detector(FULL, None)?;
    run.grid(FULL)?;
    let method = run.cfg.clas.method;
    if !run.layout.clas_model(method).exists() {
        run.timed("train-clas", |r| pipeline::train_clas_stage(&r.cfg, &r.layout).map(|_| ()))?;
    }
    let base = run.hypotheses("base-test", |r| {
        pipeline::translate_split(&r.cfg, &r.layout, Split::Test, BiasFrom::None, method).map(|_| ())
    })?;
    let clas = run.hypotheses(&format!("clas-{method}-detector-test"), |r| {
        pipeline::translate_split(&r.cfg, &r.layout, Split::Test, BiasFrom::Detector, method).map(|_| ())
    })?;
    let mut fused = Vec::new();
    for &lambda in LAMBDA_GRID.iter() {
        let name = pipeline::fused_name(lambda, Split::Test);
        let rep = run.hypotheses(&name, |r| pipeline::decode_fused_split(&r.cfg, &r.layout, Split::Test, lambda).map(|_| ()))?;
        fused.push((lambda, rep));
    }
    let per = |r: &TranslationReport| r.accuracy.get(&Category::Per).copied();
    let best_fused = fused
        .iter()
        .filter_map(|(l, r)| per(r).map(|p| (*l, p)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let (ba, ca) = (base.average.ok_or("no references")?, clas.average.ok_or("no references")?);
    let per_ok = matches!((per(&clas), best_fused), (Some(c), Some((_, f))) if c > f);
    Ok((
        ca - ba >= CLAS_MARGIN && per_ok,
        format!(
            "macro accuracy CLAS {:.1} vs base {:.1} (+{:.1}, need +{:.0}); PER CLAS {:.1} vs best fused {} (BLEU base {:.1}, CLAS {:.1})",
            100.0 * ca,
            100.0 * ba,
            100.0 * (ca - ba),
            100.0 * CLAS_MARGIN,
            100.0 * per(&clas).unwrap_or(f64::NAN),
            best_fused.map_or("n/a".into(), |(l, p)| format!("{:.1} at lambda {l:.2}", 100.0 * p)),
            base.bleu,
            clas.bleu
        ),
    ))
}

fn degenerate_identities(run: &mut Run) -> Outcome {
    // Zero fusion weight is the base beam search.
    let base = pipeline::load_base(&run.layout).map_err(err)?;
    let enc = base.shared_encoder().map_err(err)?;
    let class = train_class_lm(&run.corpus.dictionary, run.cfg.fusion.order, run.cfg.fusion.smoothing).map_err(err)?;
    let generic = train_generic_lm(run.corpus.split(Split::Train), run.cfg.fusion.order, run.cfg.fusion.smoothing).map_err(err)?;
    let lms = FusionLms::new(class, generic, &base.target_vocab);
    let mut same = 0;
    let test = run.corpus.split(Split::Test);
    let n = test.len().min(IDENTITY_UTTERANCES);
    for u in &test[..n] {
        let e = enc.encode_utterance(u).map_err(err)?.vectors;
        let plain = base.translate(&e, &run.cfg.beam).map_err(err)?;
        let fused = beam_search_fused(&base, &e, &lms, 0.0, &run.cfg.beam, &mut FusionCounters::default()).map_err(err)?;
        same += (plain == fused) as usize;
    }

    let (golden_diff, encoder_diff, perm_diff) = common::empty_bias_and_permutation()?;

    Ok((
        same == n && golden_diff <= common::GOLDEN_TOL && encoder_diff <= common::GOLDEN_TOL && perm_diff <= common::PERMUTATION_TOL,
        format!(
            "lambda=0 equals base on {same}/{n}; empty bias vs golden {golden_diff:.1e}, vs perturbed bias encoder {encoder_diff:.1e}; permutation max diff {perm_diff:.1e} over 24 orders"
        ),
    ))
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn metric_self_tests(run: &mut Run) -> Outcome {
    let mut notes = Vec::new();
    let refs: Vec<Vec<String>> = run
        .corpus
        .split(Split::Test)
        .iter()
        .map(|u| nedict::eval::strip_tags(&u.target_tokens))
        .collect();
    let ident = corpus_bleu(&refs, &refs).map_err(err)?;
    let ident_ok = (ident - 100.0).abs() < 1e-9;
    notes.push(format!("BLEU(x,x)={ident:.6}"));

    let hyps = [toks("the cat sat on the mat"), toks("a dog")];
    let rfs = [toks("the cat is on the mat"), toks("a dog runs")];
    let p: [f64; 4] = [7.0 / 8.0, 4.0 / 6.0, 1.0 / 4.0, 1.0 / 6.0];
    let oracle = 100.0 * (1.0 - 9.0f64 / 8.0).exp() * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
    let fixture = corpus_bleu(&hyps, &rfs).map_err(err)?;
    let fixture_ok = (fixture - oracle).abs() < 1e-6;
    notes.push(format!("fixture {fixture:.6} vs oracle {oracle:.6}"));

    let reference = |form: &str| ReferenceEntity {
        target_form: form.into(),
        category: Category::Gpe,
    };
    let refs_acc = vec![vec![reference("Lisboa")], vec![reference("Nova Lisboa")]];
    let acc = entity_accuracy(&[toks("em lisboa"), toks("a Nova Lisboa")], &refs_acc).map_err(err)?;
    let case_ok = acc.per_category.get(&Category::Gpe) == Some(&0.5);
    notes.push(format!("case-sensitive accuracy {:?}", acc.per_category.get(&Category::Gpe)));

    let entity = |id: &str, surface: &str, category| NamedEntity {
        id: id.into(),
        source_surface: surface.into(),
        phonemes: vec![0],
        target_form: surface.into(),
        category,
    };
    let dict = vec![
        entity("lis", "Lisbon", Category::Gpe),
        entity("treaty", "Treaty of Lisbon", Category::Org),
        entity("far", "Farland", Category::Gpe),
    ];
    let utts = vec![Utterance {
        id: "u".into(),
        transcript_tokens: toks("the Treaty of Lisbon holds"),
        ..Default::default()
    }];
    let gold = vec![vec![GoldMention {
        ne_id: "treaty".into(),
        category: Category::Org,
    }]];
    let prec = |d: &[&str]| precision_nested_excluded(&[d.iter().map(|s| s.to_string()).collect()], &gold, &utts, &dict);
    let nested_ok = prec(&["treaty", "lis"]).map_err(err)? == Some(1.0) && prec(&["treaty", "far"]).map_err(err)? == Some(0.5);
    notes.push(format!("nested exclusion {}", ok(nested_ok)));

    run.detector(FULL, None)?;
    let grid = run.grid(FULL)?;
    let gold = run.gold()?;
    let thresholds: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
    let rows = threshold_sweep(&grid, &gold, &thresholds).map_err(err)?;
    let counts: Vec<usize> = thresholds
        .iter()
        .map(|&t| grid_detected(&grid, t).iter().map(Vec::len).sum())
        .collect();
    let mono = counts.windows(2).all(|w| w[1] <= w[0]) && rows.windows(2).all(|w| w[1].retrieved <= w[0].retrieved);
    notes.push(format!("10-point sweep detections {counts:?}"));

    Ok((ident_ok && fixture_ok && case_ok && nested_ok && mono, notes.join("; ")))
}

fn sha256_file(path: &Path) -> Result<String, String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?)))
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        corpus: CorpusConfig::tiny(),
        jobs: 2,
        ..Default::default()
    };
    cfg.encoder = EncoderConfig {
        layers: 2,
        d: 16,
        heads: 2,
        ffn: 32,
        ..cfg.encoder
    };
    cfg.decoder = DecoderConfig {
        layers: 2,
        d: 16,
        heads: 2,
        ffn: 32,
        ..cfg.decoder
    };
    cfg.joint = JointTrainConfig {
        epochs: 1,
        min_alignment_margin: 0.0,
        ..cfg.joint
    };
    cfg.detector.d = 16;
    cfg.detector.ffn = 32;
    cfg.detector.heads = 2;
    cfg.detector_train.epochs = 1;
    cfg
}

fn reproduce(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let cfg = small_run_config();
    let layout = Layout::new(root);
    pipeline::gen_data(&cfg, &layout).map_err(err)?;
    pipeline::train_encoder(&cfg, &layout).map_err(err)?;
    pipeline::train_detector_variant(&cfg, &layout, FULL, &cfg.detector, &cfg.detector_train).map_err(err)?;
    pipeline::detect_split(&cfg, &layout, FULL, Split::Test, cfg.threshold).map_err(err)?;
    pipeline::translate_split(&cfg, &layout, Split::Test, BiasFrom::None, cfg.clas.method).map_err(err)?;
    pipeline::evaluate_hypotheses(&layout, "base-test", Split::Test).map_err(err)?;
    let mut hashes: BTreeMap<String, String> = pipeline::corpus_hashes(&layout)
        .map_err(err)?
        .into_iter()
        .map(|(k, v)| (format!("corpus/{k}"), v))
        .collect();
    for path in [
        layout.base_model(),
        layout.detector_model(FULL),
        layout.metrics(&format!("detection-{FULL}-test")),
        layout.metrics("base-test"),
    ] {
        let key = path.strip_prefix(root).map_err(err)?.display().to_string();
        hashes.insert(key, sha256_file(&path)?);
    }
    Ok(hashes)
}

fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let ha = reproduce(a.path())?;
    let hb = reproduce(b.path())?;
    let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    Ok((
        differing.is_empty() && ha.len() == hb.len(),
        if differing.is_empty() {
            format!("{} files bit-identical across two runs (corpus, checkpoints, metric JSONs)", ha.len())
        } else {
            format!("differing files: {differing:?}")
        },
    ))
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let strict = std::env::var("NEDICT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut run: Option<Result<Run, String>> = None;
    let criteria: Vec<(u8, &str, Box<dyn FnMut(&mut Option<Result<Run, String>>) -> Outcome>)> = vec![
        (1, "gradient suite", Box::new(|_| gradients())),
        (2, "attention mask oracle", Box::new(|_| attention_mask())),
        (3, "detector end-to-end", Box::new(|r| detector_end_to_end(run_handle(r)?))),
        (4, "ablation trends", Box::new(|r| ablation_trends(run_handle(r)?))),
        (5, "CLAS entity accuracy", Box::new(|r| clas_accuracy(run_handle(r)?))),
        (6, "degenerate identities", Box::new(|r| degenerate_identities(run_handle(r)?))),
        (7, "metric self-tests", Box::new(|r| metric_self_tests(run_handle(r)?))),
        (8, "reproducibility", Box::new(|_| reproducibility())),
    ];
    let mut failed = 0;
    for (id, name, mut f) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut run))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let (pass, detail) = match outcome {
            Ok(x) => x,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!(
            "criterion {id} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
