//! Run configuration, artifact layout and the end-to-end stages driven by
//! the command-line tool.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::biasdec::{train_clas, BeamConfig, BiasMethod, ClasConfig, ClasHeader, ClasModel, DecoderConfig, S2tHeader, S2tModel};
use crate::checkpoint::{file_hash, load_checkpoint, save_checkpoint};
use crate::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusConfig, NamedEntity, Split, Utterance};
use crate::detector::{
    ablation_rows, cosine_grid, detector_grid, train_detector, write_detections_jsonl, DetectorConfig, DetectorModel,
    DetectorReport, DetectorTrainConfig, EntityBank, ScoreGrid, DEFAULT_THRESHOLD,
};
use crate::encoder::{alignment_margin, similarity_heatmap, train_joint, write_heatmap_csv, write_heatmap_pgm, EncoderConfig, JointReport, JointTrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    upsert_csv, gold_mentions, grid_detected, retrieved_at_recall, threshold_sweep, write_json, DetectionReport, SweepRow,
    TranslationReport,
};
use crate::par;
use crate::rescore::{beam_search_fused, train_class_lm, train_generic_lm, FusionConfig, FusionCounters, FusionLms};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NEDICT_OUT";
pub const DEFAULT_OUT: &str = "runs/default";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-utterance work (1 = sequential).
    pub jobs: usize,
    pub threshold: f64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub joint: JointTrainConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub clas: ClasConfig,
    pub fusion: FusionConfig,
    pub beam: BeamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            jobs: 1,
            threshold: DEFAULT_THRESHOLD,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            joint: JointTrainConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            clas: ClasConfig::default(),
            fusion: FusionConfig::default(),
            beam: BeamConfig::default(),
        }
    }
}

fn probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} must lie in [0,1]")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "pass an existing TOML file, or omit --config for defaults".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        probability("threshold", self.threshold)?;
        probability("encoder.layerdrop", self.encoder.layerdrop)?;
        probability("detector_train.layerdrop", self.detector_train.layerdrop)?;
        probability("detector_train.ne_prob", self.detector_train.ne_prob)?;
        probability("detector_train.speech_masking", self.detector_train.speech_masking)?;
        probability("clas.p_drop", self.clas.p_drop)?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.fusion.lambda < 0.0 {
            return Err(Error::Config("fusion.lambda must be non-negative".into()));
        }
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.detector_train.validate()
    }

    /// Push the global job count into the stage configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.joint.jobs = c.jobs;
        c.detector_train.jobs = c.jobs;
        c.clas.jobs = c.jobs;
        c
    }
}

/// Where every artifact of a run lives.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    /// `explicit`, else `$NEDICT_OUT`, else `runs/default`.
    pub fn resolve(explicit: Option<PathBuf>) -> Self {
        let root = explicit
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Layout { root }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
    pub fn base_model(&self) -> PathBuf {
        self.root.join("models/base.ckpt")
    }
    pub fn detector_model(&self, name: &str) -> PathBuf {
        self.root.join(format!("models/detector-{name}.ckpt"))
    }
    pub fn clas_model(&self, method: BiasMethod) -> PathBuf {
        self.root.join(format!("models/clas-{method}.ckpt"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(format!("reports/{name}.json"))
    }
    pub fn scores(&self, scorer: &str, split: Split) -> PathBuf {
        self.root.join(format!("scores/{scorer}-{}.json", split.as_str()))
    }
    pub fn detections(&self, scorer: &str, split: Split) -> PathBuf {
        self.root.join(format!("detections/{scorer}-{}.jsonl", split.as_str()))
    }
    pub fn hypotheses(&self, name: &str) -> PathBuf {
        self.root.join(format!("hyps/{name}.jsonl"))
    }
    pub fn lm(&self, name: &str) -> PathBuf {
        self.root.join(format!("lm/{name}.ngram.txt"))
    }
    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join(format!("metrics/{name}.json"))
    }
    pub fn metrics_csv(&self, table: &str) -> PathBuf {
        self.root.join(format!("metrics/{table}.csv"))
    }
    pub fn heatmaps(&self) -> PathBuf {
        self.root.join("heatmaps")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.resolved_config(), cfg.to_toml()?)?;
        Ok(())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn missing(path: PathBuf, hint: &str) -> Error {
    Error::MissingArtifact {
        path,
        hint: hint.to_string(),
    }
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<Corpus> {
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    save_corpus(&corpus, &layout.corpus())?;
    layout.write_config(cfg)?;
    Ok(corpus)
}

pub fn load_run_corpus(layout: &Layout) -> Result<Corpus> {
    let dir = layout.corpus();
    if !dir.join("meta.json").exists() {
        return Err(missing(dir, "run `nedict gen-data` first"));
    }
    load_corpus(&dir)
}

/// SHA-256 of every corpus file, by file name.
pub fn corpus_hashes(layout: &Layout) -> Result<Vec<(String, String)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(layout.corpus())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    names
        .into_iter()
        .map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), file_hash(&p)?)))
        .collect()
}

pub fn train_encoder(cfg: &RunConfig, layout: &Layout) -> Result<(S2tModel, JointReport)> {
    let cfg = cfg.resolved();
    let corpus = load_run_corpus(layout)?;
    let enc = EncoderConfig {
        num_phonemes: corpus.num_phonemes(),
        speech_dim: cfg.corpus.speech_dim,
        ..cfg.encoder.clone()
    };
    let (model, report) = train_joint(&corpus, enc, cfg.decoder.clone(), &cfg.joint)?;
    save_checkpoint(&layout.base_model(), S2tModel::KIND, &model.header(), &model.params)?;
    write_json(&layout.report("encoder"), &report)?;
    layout.write_config(&cfg)?;
    Ok((model, report))
}

pub fn load_base(layout: &Layout) -> Result<S2tModel> {
    let path = layout.base_model();
    if !path.exists() {
        return Err(missing(path, "run `nedict train-encoder` first"));
    }
    let (h, params): (S2tHeader, _) = load_checkpoint(&path, S2tModel::KIND)?;
    Ok(S2tModel::from_header(h, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub utterance_id: String,
    pub margin: f64,
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Export text/speech similarity heatmaps for the first `count` utterances.
pub fn export_heatmaps(layout: &Layout, split: Split, count: usize) -> Result<Vec<HeatmapSummary>> {
    let corpus = load_run_corpus(layout)?;
    let enc = load_base(layout)?.shared_encoder()?;
    let dir = layout.heatmaps();
    std::fs::create_dir_all(&dir)?;
    corpus
        .split(split)
        .iter()
        .take(count)
        .map(|u| {
            let text = enc.encode_text(&u.transcript_phonemes, 0.0, 0)?.vectors;
            let speech = enc.encode_utterance(u)?.vectors;
            let h = similarity_heatmap(&text, &speech)?;
            let csv = dir.join(format!("{}.csv", u.id));
            let pgm = dir.join(format!("{}.pgm", u.id));
            write_heatmap_csv(&csv, &h)?;
            write_heatmap_pgm(&pgm, &h)?;
            Ok(HeatmapSummary {
                utterance_id: u.id.clone(),
                margin: alignment_margin(&h, &u.frame_alignment)?,
                csv,
                pgm,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DetectorHeader {
    config: DetectorConfig,
    train: DetectorTrainConfig,
}

/// Train a detector variant and save it as `detector-{name}`.
pub fn train_detector_variant(
    cfg: &RunConfig,
    layout: &Layout,
    name: &str,
    model_cfg: &DetectorConfig,
    train_cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, DetectorReport)> {
    let corpus = load_run_corpus(layout)?;
    let enc = load_base(layout)?.shared_encoder()?;
    let train_cfg = DetectorTrainConfig {
        jobs: cfg.jobs,
        ..train_cfg.clone()
    };
    let model_cfg = DetectorConfig {
        d: enc.config.d,
        ..model_cfg.clone()
    };
    let (model, report) = train_detector(&corpus, &enc, &model_cfg, &train_cfg)?;
    let header = DetectorHeader {
        config: model.config.clone(),
        train: train_cfg,
    };
    save_checkpoint(&layout.detector_model(name), DetectorModel::KIND, &header, &model.params)?;
    write_json(&layout.report(&format!("detector-{name}")), &report)?;
    Ok((model, report))
}

pub fn load_detector(layout: &Layout, name: &str) -> Result<DetectorModel> {
    let path = layout.detector_model(name);
    if !path.exists() {
        return Err(missing(path, "run `nedict train-detector` first"));
    }
    let (h, params): (DetectorHeader, _) = load_checkpoint(&path, DetectorModel::KIND)?;
    Ok(DetectorModel { config: h.config, params })
}

pub const COSINE: &str = "cosine";
pub const FULL: &str = "full";

/// Score grid for a detector variant or the cosine baseline, cached on disk.
pub fn score_grid(cfg: &RunConfig, layout: &Layout, scorer: &str, split: Split) -> Result<ScoreGrid> {
    let path = layout.scores(scorer, split);
    if path.exists() {
        let f = std::fs::File::open(&path)?;
        return serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::format(&path, e.to_string()));
    }
    let corpus = load_run_corpus(layout)?;
    let enc = load_base(layout)?.shared_encoder()?;
    let bank = EntityBank::new(&enc, &corpus.dictionary, cfg.jobs)?;
    let utts = corpus.split(split);
    let grid = if scorer == COSINE {
        cosine_grid(&enc, &bank, utts, cfg.jobs)?
    } else {
        detector_grid(&load_detector(layout, scorer)?, &enc, &bank, utts, cfg.jobs)?
    };
    write_json(&path, &grid)?;
    Ok(grid)
}

/// Threshold a score grid, write the detections and a report.
pub fn detect_split(cfg: &RunConfig, layout: &Layout, scorer: &str, split: Split, threshold: f64) -> Result<DetectionReport> {
    let corpus = load_run_corpus(layout)?;
    let grid = score_grid(cfg, layout, scorer, split)?;
    let path = layout.detections(scorer, split);
    ensure_parent(&path)?;
    write_detections_jsonl(&path, &grid.detections(threshold))?;
    let utts = corpus.split(split);
    let gold = gold_mentions(&corpus, utts)?;
    let report = DetectionReport::compute(threshold, &grid_detected(&grid, threshold), &gold, utts, &corpus.dictionary)?;
    write_json(&layout.metrics(&format!("detection-{scorer}-{}", split.as_str())), &report)?;
    Ok(report)
}

/// Detection metrics over an evenly spaced threshold grid.
pub fn sweep_thresholds(cfg: &RunConfig, layout: &Layout, scorer: &str, split: Split, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    let corpus = load_run_corpus(layout)?;
    let grid = score_grid(cfg, layout, scorer, split)?;
    let gold = gold_mentions(&corpus, corpus.split(split))?;
    let rows = threshold_sweep(&grid, &gold, thresholds)?;
    let path = layout.metrics_csv(&format!("sweep-{scorer}-{}", split.as_str()));
    ensure_parent(&path)?;
    let mut w = BufWriter::new(std::fs::File::create(&path)?);
    writeln!(w, "threshold,recall_gpe,recall_loc,recall_per,micro_recall,retrieved")?;
    for r in &rows {
        let get = |c| r.recall.get(&c).map_or(String::new(), |v: &f64| format!("{v:.6}"));
        writeln!(
            w,
            "{:.4},{},{},{},{},{:.6}",
            r.threshold,
            get(crate::corpus::Category::Gpe),
            get(crate::corpus::Category::Loc),
            get(crate::corpus::Category::Per),
            r.micro_recall.map_or(String::new(), |v| format!("{v:.6}")),
            r.retrieved
        )?;
    }
    w.flush()?;
    Ok(rows)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub report: DetectionReport,
    /// Retrieved per utterance at the recall the full model reaches at the
    /// configured threshold.
    pub matched_recall: Option<f64>,
    pub retrieved_at_matched: Option<f64>,
}

/// Train every cumulative ablation row, evaluate on `split`, and write a
/// CSV with one row per configuration plus the cosine baseline.
pub fn ablate(cfg: &RunConfig, layout: &Layout, split: Split) -> Result<Vec<AblationResult>> {
    let corpus = load_run_corpus(layout)?;
    let utts = corpus.split(split);
    let gold = gold_mentions(&corpus, utts)?;
    let rows = ablation_rows(&cfg.detector, &cfg.detector_train);
    let mut reports = Vec::new();
    for row in &rows {
        let name = format!("ablate-{}", row.name.trim_start_matches('+'));
        if !layout.detector_model(&name).exists() {
            train_detector_variant(cfg, layout, &name, &row.model, &row.train)?;
        }
        let grid = score_grid(cfg, layout, &name, split)?;
        let det = grid_detected(&grid, cfg.threshold);
        reports.push((row.name.clone(), grid, DetectionReport::compute(cfg.threshold, &det, &gold, utts, &corpus.dictionary)?));
    }
    let cos = score_grid(cfg, layout, COSINE, split)?;
    let target = reports.last().and_then(|(_, _, r)| r.micro_recall);
    let mut out = Vec::new();
    let path = layout.metrics_csv(&format!("ablation-{}", split.as_str()));
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let header = format!("{},matched_recall,retrieved_at_matched", DetectionReport::CSV_HEADER);
    let mut push = |name: String, grid: &ScoreGrid, report: DetectionReport| -> Result<()> {
        let at = match target {
            Some(t) => retrieved_at_recall(grid, &gold, t)?.map(|(_, r)| r),
            None => None,
        };
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        upsert_csv(&path, &header, &format!("{},{},{}", report.csv_row(&name), opt(target), opt(at)))?;
        out.push(AblationResult {
            name,
            report,
            matched_recall: target,
            retrieved_at_matched: at,
        });
        Ok(())
    };
    let cos_report = DetectionReport::compute(cfg.threshold, &grid_detected(&cos, cfg.threshold), &gold, utts, &corpus.dictionary)?;
    push("cosine".into(), &cos, cos_report)?;
    for (name, grid, report) in reports {
        push(name, &grid, report)?;
    }
    write_json(&layout.metrics(&format!("ablation-{}", split.as_str())), &out)?;
    Ok(out)
}

pub fn train_clas_stage(cfg: &RunConfig, layout: &Layout) -> Result<ClasModel> {
    let cfg = cfg.resolved();
    let corpus = load_run_corpus(layout)?;
    let base = load_base(layout)?;
    let (model, report) = train_clas(&base, &corpus, &cfg.clas)?;
    save_checkpoint(&layout.clas_model(model.method), ClasModel::KIND, &model.header(), model.params())?;
    write_json(&layout.report(&format!("clas-{}", model.method)), &report)?;
    Ok(model)
}

pub fn load_clas(layout: &Layout, method: BiasMethod) -> Result<ClasModel> {
    let path = layout.clas_model(method);
    if !path.exists() {
        return Err(missing(path, "run `nedict train-clas` with this --method first"));
    }
    let (h, params): (ClasHeader, _) = load_checkpoint(&path, ClasModel::KIND)?;
    Ok(ClasModel::from_header(h, params))
}

/// Where the bias list for CLAS decoding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasFrom {
    /// Entities flagged by the full detector at the run threshold.
    Detector,
    /// Gold entities of each utterance.
    Oracle,
    /// CLAS model with only the no-bias vector.
    Empty,
    /// The base model, without bias attention.
    None,
}

impl BiasFrom {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasFrom::Detector => "detector",
            BiasFrom::Oracle => "oracle",
            BiasFrom::Empty => "empty",
            BiasFrom::None => "none",
        }
    }
}

impl fmt::Display for BiasFrom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasFrom {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(BiasFrom::Detector),
            "oracle" => Ok(BiasFrom::Oracle),
            "empty" => Ok(BiasFrom::Empty),
            "none" => Ok(BiasFrom::None),
            _ => Err(Error::Config(format!("unknown bias source `{s}` (detector|oracle|empty|none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub utterance_id: String,
    pub hypothesis: String,
    pub bias_ne_ids: Vec<String>,
}

impl Hypothesis {
    pub fn tokens(&self) -> Vec<String> {
        self.hypothesis.split_whitespace().map(str::to_string).collect()
    }
}

pub fn write_hypotheses(path: &Path, hyps: &[Hypothesis]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for h in hyps {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<Hypothesis>> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => missing(path.to_path_buf(), "run `nedict translate` or `nedict decode-fused` first"),
        _ => Error::Io(e),
    })?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(&l?).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Bias lists per utterance of `split`.
pub fn bias_lists<'c>(cfg: &RunConfig, layout: &Layout, corpus: &'c Corpus, split: Split, from: BiasFrom) -> Result<Vec<Vec<&'c NamedEntity>>> {
    let utts = corpus.split(split);
    match from {
        BiasFrom::Oracle => utts
            .iter()
            .map(|u| {
                let mut ids: Vec<&str> = u.gold_entities.iter().map(|g| g.ne_id.as_str()).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.into_iter()
                    .map(|id| corpus.entity(id).ok_or_else(|| Error::UnknownToken(id.to_string())))
                    .collect()
            })
            .collect(),
        BiasFrom::Detector => {
            let grid = score_grid(cfg, layout, FULL, split)?;
            let index: HashMap<&str, &NamedEntity> = corpus.dictionary.iter().map(|e| (e.id.as_str(), e)).collect();
            (0..utts.len())
                .map(|u| {
                    grid.detected_ids(u, cfg.threshold)
                        .into_iter()
                        .map(|id| index.get(id).copied().ok_or_else(|| Error::UnknownToken(id.to_string())))
                        .collect()
                })
                .collect()
        }
        BiasFrom::Empty | BiasFrom::None => Ok(vec![Vec::new(); utts.len()]),
    }
}

/// Beam-decode `split` with the base model or a CLAS model.
pub fn translate_split(cfg: &RunConfig, layout: &Layout, split: Split, from: BiasFrom, method: BiasMethod) -> Result<Vec<Hypothesis>> {
    let corpus = load_run_corpus(layout)?;
    let utts = corpus.split(split);
    let lists = bias_lists(cfg, layout, &corpus, split, from)?;
    let base = load_base(layout)?;
    let enc = base.shared_encoder()?;
    let clas = match from {
        BiasFrom::None => None,
        _ => Some(load_clas(layout, method)?),
    };
    let items: Vec<(&Utterance, &Vec<&NamedEntity>)> = utts.iter().zip(&lists).collect();
    let hyps = par::try_map(cfg.jobs, &items, |(u, list)| -> Result<Hypothesis> {
        let out = enc.encode_utterance(u)?.vectors;
        let ids = match &clas {
            Some(m) => m.translate(&out, &m.encode_bias(list)?, &cfg.beam)?,
            None => base.translate(&out, &cfg.beam)?,
        };
        Ok(Hypothesis {
            utterance_id: u.id.clone(),
            hypothesis: base.target_vocab.decode(&ids).join(" "),
            bias_ne_ids: list.iter().map(|e| e.id.clone()).collect(),
        })
    })?;
    let name = match from {
        BiasFrom::None => format!("base-{}", split.as_str()),
        _ => format!("clas-{method}-{from}-{}", split.as_str()),
    };
    write_hypotheses(&layout.hypotheses(&name), &hyps)?;
    Ok(hyps)
}

/// Name of the hypothesis file written by [`decode_fused_split`].
pub fn fused_name(lambda: f64, split: Split) -> String {
    format!("fused-{lambda:.2}-{}", split.as_str())
}

/// Base-model beam search with class/generic LM shallow fusion.
pub fn decode_fused_split(cfg: &RunConfig, layout: &Layout, split: Split, lambda: f64) -> Result<(Vec<Hypothesis>, FusionCounters)> {
    let corpus = load_run_corpus(layout)?;
    let base = load_base(layout)?;
    let enc = base.shared_encoder()?;
    let class_lm = train_class_lm(&corpus.dictionary, cfg.fusion.order, cfg.fusion.smoothing)?;
    let generic_lm = train_generic_lm(corpus.split(Split::Train), cfg.fusion.order, cfg.fusion.smoothing)?;
    class_lm.save(&layout.lm("class"))?;
    generic_lm.save(&layout.lm("generic"))?;
    let lms = FusionLms::new(class_lm, generic_lm, &base.target_vocab);
    let utts = corpus.split(split);
    let results = par::try_map(cfg.jobs, utts, |u| -> Result<(Hypothesis, FusionCounters)> {
        let out = enc.encode_utterance(u)?.vectors;
        let mut counters = FusionCounters::default();
        let ids = beam_search_fused(&base, &out, &lms, lambda, &cfg.beam, &mut counters)?;
        Ok((
            Hypothesis {
                utterance_id: u.id.clone(),
                hypothesis: base.target_vocab.decode(&ids).join(" "),
                bias_ne_ids: Vec::new(),
            },
            counters,
        ))
    })?;
    let mut total = FusionCounters::default();
    let hyps: Vec<Hypothesis> = results
        .into_iter()
        .map(|(h, c)| {
            total.class_lm += c.class_lm;
            total.generic_lm += c.generic_lm;
            h
        })
        .collect();
    write_hypotheses(&layout.hypotheses(&fused_name(lambda, split)), &hyps)?;
    Ok((hyps, total))
}

/// Score a hypothesis file against `split`; writes a metrics JSON and
/// appends a CSV row to `metrics/translation.csv`.
pub fn evaluate_hypotheses(layout: &Layout, name: &str, split: Split) -> Result<TranslationReport> {
    let corpus = load_run_corpus(layout)?;
    let hyps = read_hypotheses(&layout.hypotheses(name))?;
    let utts = corpus.split(split);
    let by_id: HashMap<&str, &Hypothesis> = hyps.iter().map(|h| (h.utterance_id.as_str(), h)).collect();
    let tokens: Vec<Vec<String>> = utts
        .iter()
        .map(|u| {
            by_id
                .get(u.id.as_str())
                .map(|h| h.tokens())
                .ok_or_else(|| Error::format(layout.hypotheses(name), format!("no hypothesis for {}", u.id)))
        })
        .collect::<Result<_>>()?;
    let report = TranslationReport::compute(&tokens, utts, &corpus)?;
    write_json(&layout.metrics(name), &report)?;
    upsert_csv(&layout.metrics_csv("translation"), TranslationReport::CSV_HEADER, &report.csv_row(name))?;
    Ok(report)
}
