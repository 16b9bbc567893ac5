//! Detection and translation metrics: per-category recall, retrieved
//! counts, nested-excluded precision, entity accuracy, BLEU and
//! false-positive triage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{edit_distance, Category, Corpus, NamedEntity, Utterance};
use crate::detector::{DetectionResult, ScoreGrid};
use crate::error::{Error, Result};

/// A gold mention reduced to what detection metrics need.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMention {
    pub ne_id: String,
    pub category: Category,
}

/// Gold entities per utterance, one entry per distinct entity.
pub fn gold_mentions(corpus: &Corpus, utts: &[Utterance]) -> Result<Vec<Vec<GoldMention>>> {
    utts.iter()
        .map(|u| {
            let mut seen = BTreeSet::new();
            let mut out = Vec::new();
            for g in &u.gold_entities {
                let ne = corpus.entity(&g.ne_id).ok_or_else(|| Error::UnknownToken(g.ne_id.clone()))?;
                if seen.insert(g.ne_id.clone()) {
                    out.push(GoldMention {
                        ne_id: g.ne_id.clone(),
                        category: ne.category,
                    });
                }
            }
            Ok(out)
        })
        .collect()
}

/// Detected entity ids per utterance, in `utts` order.
pub fn group_detections(results: &[DetectionResult], utts: &[Utterance]) -> Result<Vec<Vec<String>>> {
    let index: HashMap<&str, usize> = utts.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    let mut out = vec![Vec::new(); utts.len()];
    for r in results.iter().filter(|r| r.detected) {
        let &i = index
            .get(r.utterance_id.as_str())
            .ok_or_else(|| Error::UnknownToken(r.utterance_id.clone()))?;
        out[i].push(r.ne_id.clone());
    }
    Ok(out)
}

fn check_aligned<A, B>(op: &'static str, a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} utterances", a.len(), b.len())));
    }
    Ok(())
}

/// Detected gold / gold per scored category; categories without gold
/// mentions are absent.
pub fn recall_by_category(detected: &[Vec<String>], gold: &[Vec<GoldMention>]) -> Result<BTreeMap<Category, f64>> {
    check_aligned("recall_by_category", detected, gold)?;
    let mut hits: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for (d, g) in detected.iter().zip(gold) {
        let d: BTreeSet<&str> = d.iter().map(String::as_str).collect();
        for m in g.iter().filter(|m| Category::SCORED.contains(&m.category)) {
            let e = hits.entry(m.category).or_insert((0, 0));
            e.1 += 1;
            if d.contains(m.ne_id.as_str()) {
                e.0 += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|(c, (h, n))| (c, h as f64 / n as f64)).collect())
}

/// Recall pooled over all scored categories.
pub fn micro_recall(detected: &[Vec<String>], gold: &[Vec<GoldMention>]) -> Result<Option<f64>> {
    check_aligned("micro_recall", detected, gold)?;
    let (mut h, mut n) = (0usize, 0usize);
    for (d, g) in detected.iter().zip(gold) {
        for m in g.iter().filter(|m| Category::SCORED.contains(&m.category)) {
            n += 1;
            h += d.contains(&m.ne_id) as usize;
        }
    }
    Ok((n > 0).then(|| h as f64 / n as f64))
}

/// Mean number of detected entities per utterance.
pub fn avg_retrieved(detected: &[Vec<String>]) -> f64 {
    if detected.is_empty() {
        return 0.0;
    }
    detected.iter().map(Vec::len).sum::<usize>() as f64 / detected.len() as f64
}

fn entity_surfaces(dictionary: &[NamedEntity]) -> HashMap<&str, Vec<&str>> {
    dictionary.iter().map(|e| (e.id.as_str(), e.source_tokens())).collect()
}

fn contains_tokens<S: AsRef<str>, T: AsRef<str>>(haystack: &[S], needle: &[T]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(a, b)| a.as_ref() == b.as_ref()))
}

/// TP / (TP + FP), where a non-gold detection whose source surface occurs
/// verbatim in the transcript (part of a bigger entity) counts as neither.
/// `None` when nothing countable was detected.
pub fn precision_nested_excluded(
    detected: &[Vec<String>],
    gold: &[Vec<GoldMention>],
    utts: &[Utterance],
    dictionary: &[NamedEntity],
) -> Result<Option<f64>> {
    check_aligned("precision_nested_excluded", detected, gold)?;
    check_aligned("precision_nested_excluded", detected, utts)?;
    let surfaces = entity_surfaces(dictionary);
    let (mut tp, mut fp) = (0usize, 0usize);
    for ((d, g), u) in detected.iter().zip(gold).zip(utts) {
        for id in d {
            if g.iter().any(|m| &m.ne_id == id) {
                tp += 1;
            } else {
                let s = surfaces.get(id.as_str()).ok_or_else(|| Error::UnknownToken(id.clone()))?;
                if !contains_tokens(&u.transcript_tokens, s) {
                    fp += 1;
                }
            }
        }
    }
    Ok((tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64))
}

/// Plain TP / detections.
pub fn naive_precision(detected: &[Vec<String>], gold: &[Vec<GoldMention>]) -> Result<Option<f64>> {
    check_aligned("naive_precision", detected, gold)?;
    let (mut tp, mut all) = (0usize, 0usize);
    for (d, g) in detected.iter().zip(gold) {
        all += d.len();
        tp += d.iter().filter(|id| g.iter().any(|m| &m.ne_id == *id)).count();
    }
    Ok((all > 0).then(|| tp as f64 / all as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub recall: BTreeMap<Category, f64>,
    pub micro_recall: Option<f64>,
    pub retrieved: f64,
}

pub fn threshold_sweep(grid: &ScoreGrid, gold: &[Vec<GoldMention>], thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let detected = grid_detected(grid, t);
            Ok(SweepRow {
                threshold: t,
                recall: recall_by_category(&detected, gold)?,
                micro_recall: micro_recall(&detected, gold)?,
                retrieved: avg_retrieved(&detected),
            })
        })
        .collect()
}

pub fn grid_detected(grid: &ScoreGrid, threshold: f64) -> Vec<Vec<String>> {
    (0..grid.scores.len())
        .map(|u| grid.detected_ids(u, threshold).into_iter().map(str::to_string).collect())
        .collect()
}

/// The highest threshold at which pooled recall reaches `target`, and the
/// mean retrieved count there. `None` if there is no scored gold.
pub fn retrieved_at_recall(grid: &ScoreGrid, gold: &[Vec<GoldMention>], target: f64) -> Result<Option<(f64, f64)>> {
    check_aligned("retrieved_at_recall", &grid.scores, gold)?;
    let col: HashMap<&str, usize> = grid.ne_ids.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut gold_scores = Vec::new();
    for (row, g) in grid.scores.iter().zip(gold) {
        for m in g.iter().filter(|m| Category::SCORED.contains(&m.category)) {
            gold_scores.push(col.get(m.ne_id.as_str()).map_or(f64::NEG_INFINITY, |&c| row[c]));
        }
    }
    if gold_scores.is_empty() {
        return Ok(None);
    }
    gold_scores.sort_by(|a, b| b.total_cmp(a));
    let need = ((target.clamp(0.0, 1.0) * gold_scores.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let t = gold_scores[need.min(gold_scores.len()) - 1];
    let retrieved = grid.scores.iter().map(|r| r.iter().filter(|&&s| s >= t).count()).sum::<usize>() as f64
        / grid.scores.len().max(1) as f64;
    Ok(Some((t, retrieved)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub threshold: f64,
    pub recall: BTreeMap<Category, f64>,
    pub micro_recall: Option<f64>,
    pub retrieved: f64,
    pub precision: Option<f64>,
    pub utterances: usize,
}

impl DetectionReport {
    pub fn compute(
        threshold: f64,
        detected: &[Vec<String>],
        gold: &[Vec<GoldMention>],
        utts: &[Utterance],
        dictionary: &[NamedEntity],
    ) -> Result<Self> {
        Ok(DetectionReport {
            threshold,
            recall: recall_by_category(detected, gold)?,
            micro_recall: micro_recall(detected, gold)?,
            retrieved: avg_retrieved(detected),
            precision: precision_nested_excluded(detected, gold, utts, dictionary)?,
            utterances: utts.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "name,threshold,recall_gpe,recall_loc,recall_per,retrieved,precision";

    pub fn csv_row(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let r = |c: Category| opt(self.recall.get(&c).copied());
        format!(
            "{name},{},{},{},{},{:.6},{}",
            self.threshold,
            r(Category::Gpe),
            r(Category::Loc),
            r(Category::Per),
            self.retrieved,
            opt(self.precision)
        )
    }
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "threshold {:.2}:", self.threshold)?;
        for (c, r) in &self.recall {
            write!(f, " {c} {:.1}%", 100.0 * r)?;
        }
        write!(f, ", retrieved {:.2}", self.retrieved)?;
        if let Some(p) = self.precision {
            write!(f, ", precision {:.1}%", 100.0 * p)?;
        }
        Ok(())
    }
}

/// A gold entity's expected target form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntity {
    pub target_form: String,
    pub category: Category,
}

pub fn reference_entities(corpus: &Corpus, utts: &[Utterance]) -> Result<Vec<Vec<ReferenceEntity>>> {
    utts.iter()
        .map(|u| {
            u.gold_entities
                .iter()
                .map(|g| {
                    let ne = corpus.entity(&g.ne_id).ok_or_else(|| Error::UnknownToken(g.ne_id.clone()))?;
                    Ok(ReferenceEntity {
                        target_form: ne.target_form.clone(),
                        category: ne.category,
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityAccuracy {
    pub per_category: BTreeMap<Category, f64>,
    /// Mean over the scored categories that have references.
    pub average: Option<f64>,
}

/// A reference entity is correct iff its target form occurs as a
/// contiguous, case-sensitive token sequence in the hypothesis.
pub fn entity_accuracy<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<ReferenceEntity>]) -> Result<EntityAccuracy> {
    check_aligned("entity_accuracy", hyps, refs)?;
    let mut hits: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        for e in r {
            let form: Vec<&str> = e.target_form.split_whitespace().collect();
            let x = hits.entry(e.category).or_insert((0, 0));
            x.1 += 1;
            x.0 += contains_tokens(h, &form) as usize;
        }
    }
    let per_category: BTreeMap<Category, f64> = hits.into_iter().map(|(c, (k, n))| (c, k as f64 / n as f64)).collect();
    let scored: Vec<f64> = Category::SCORED.iter().filter_map(|c| per_category.get(c).copied()).collect();
    let average = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(EntityAccuracy { per_category, average })
}

/// Remove entity tag tokens.
pub fn strip_tags<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .filter(|t| Category::parse_tag(t).is_none())
        .map(str::to_string)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on whitespace tokens: clipped 1–4-gram precisions, brevity
/// penalty, and exponential smoothing of zero match counts (the k-th zero
/// precision becomes 1 / (2^k · total)). Orders longer than every
/// hypothesis are left out of the geometric mean.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<f64> {
    check_aligned("corpus_bleu", hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            break;
        }
        let p = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok((100.0 * bp * (log_sum / orders as f64).exp()).min(100.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub bleu: f64,
    pub accuracy: BTreeMap<Category, f64>,
    pub average: Option<f64>,
    pub utterances: usize,
}

impl TranslationReport {
    /// BLEU on tag-stripped text; entity accuracy on the raw hypotheses.
    pub fn compute(hyps: &[Vec<String>], utts: &[Utterance], corpus: &Corpus) -> Result<Self> {
        let refs = reference_entities(corpus, utts)?;
        let acc = entity_accuracy(hyps, &refs)?;
        let stripped_h: Vec<Vec<String>> = hyps.iter().map(|h| strip_tags(h)).collect();
        let stripped_r: Vec<Vec<String>> = utts.iter().map(|u| strip_tags(&u.target_tokens)).collect();
        Ok(TranslationReport {
            bleu: corpus_bleu(&stripped_h, &stripped_r)?,
            accuracy: acc.per_category,
            average: acc.average,
            utterances: utts.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "name,bleu,acc_gpe,acc_loc,acc_per,acc_avg";

    pub fn csv_row(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let a = |c: Category| opt(self.accuracy.get(&c).copied());
        format!(
            "{name},{:.4},{},{},{},{}",
            self.bleu,
            a(Category::Gpe),
            a(Category::Loc),
            a(Category::Per),
            opt(self.average)
        )
    }
}

impl fmt::Display for TranslationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BLEU {:.2}", self.bleu)?;
        for (c, a) in &self.accuracy {
            write!(f, ", {c} {:.1}%", 100.0 * a)?;
        }
        if let Some(a) = self.average {
            write!(f, ", avg {:.1}%", 100.0 * a)?;
        }
        Ok(())
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Write `row` into a CSV keyed by its first field: a row with the same key is
/// replaced in place, otherwise `row` is appended. A new file gets `header`.
pub fn upsert_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let key = |line: &str| line.split(',').next().unwrap_or("").to_string();
    let mut lines: Vec<String> = match std::fs::read_to_string(path) {
        Ok(text) => text.lines().map(str::to_string).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![header.to_string()],
        Err(e) => return Err(e.into()),
    };
    let k = key(row);
    match lines.iter_mut().skip(1).find(|l| key(l) == k) {
        Some(l) => *l = row.to_string(),
        None => lines.push(row.to_string()),
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpCategory {
    PartialMatch,
    SimilarPhonetic,
    Acronym,
    /// Needs human judgement; never assigned by the heuristics.
    DifferentFormOrPartial,
    Other,
}

impl FpCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FpCategory::PartialMatch => "partial_match",
            FpCategory::SimilarPhonetic => "similar_phonetic",
            FpCategory::Acronym => "acronym",
            FpCategory::DifferentFormOrPartial => "different_form_or_partial",
            FpCategory::Other => "other",
        }
    }
}

impl fmt::Display for FpCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const PHONETIC_RATIO: f64 = 0.4;

fn is_acronym(surface: &str) -> bool {
    let n = surface.chars().count();
    (1..=4).contains(&n) && surface.chars().all(|c| c.is_ascii_uppercase())
}

/// Smallest edit distance between `needle` and any transcript window of
/// length `|needle| - 1 ..= |needle| + 1`, relative to `|needle|`.
pub fn best_span_ratio(needle: &[usize], haystack: &[usize]) -> Option<f64> {
    if needle.is_empty() || haystack.is_empty() {
        return None;
    }
    let l = needle.len();
    let mut best = usize::MAX;
    for w in l.saturating_sub(1).max(1)..=(l + 1) {
        if w > haystack.len() {
            break;
        }
        for win in haystack.windows(w) {
            best = best.min(edit_distance(needle, win));
        }
    }
    (best != usize::MAX).then(|| best as f64 / l as f64)
}

/// Heuristic triage of a false positive: shared source token, then the
/// acronym shape, then a phonetically close transcript span.
pub fn categorize_false_positive(ne: &NamedEntity, u: &Utterance) -> FpCategory {
    let tokens = ne.source_tokens();
    if tokens.iter().any(|t| u.transcript_tokens.iter().any(|w| w == t)) {
        return FpCategory::PartialMatch;
    }
    if is_acronym(&ne.source_surface) {
        return FpCategory::Acronym;
    }
    match best_span_ratio(&ne.phonemes, &u.transcript_phonemes) {
        Some(r) if r < PHONETIC_RATIO => FpCategory::SimilarPhonetic,
        _ => FpCategory::Other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_rows_are_replaced_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        upsert_csv(&path, "name,v", "a,1").unwrap();
        upsert_csv(&path, "name,v", "b,2").unwrap();
        upsert_csv(&path, "name,v", "a,3").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "name,v\na,3\nb,2\n");
    }

    fn gm(id: &str, c: Category) -> GoldMention {
        GoldMention {
            ne_id: id.into(),
            category: c,
        }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn entity(id: &str, surface: &str, phonemes: Vec<usize>, cat: Category) -> NamedEntity {
        NamedEntity {
            id: id.into(),
            source_surface: surface.into(),
            phonemes,
            target_form: surface.into(),
            category: cat,
        }
    }

    fn utt(id: &str, transcript: &str, phonemes: Vec<usize>) -> Utterance {
        Utterance {
            id: id.into(),
            transcript_tokens: toks(transcript),
            transcript_phonemes: phonemes,
            ..Default::default()
        }
    }

    #[test]
    fn recall_examples() {
        let gold = vec![
            vec![gm("a", Category::Per), gm("b", Category::Per)],
            vec![gm("c", Category::Per), gm("g", Category::Gpe)],
        ];
        let det = vec![ids(&["a", "b"]), ids(&["x"])];
        let r = recall_by_category(&det, &gold).unwrap();
        assert!((r[&Category::Per] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r[&Category::Gpe], 0.0);
        assert!(!r.contains_key(&Category::Loc));
        assert_eq!(avg_retrieved(&det), 1.5);
        let none = vec![vec![], vec![]];
        assert_eq!(recall_by_category(&none, &gold).unwrap()[&Category::Per], 0.0);
        assert_eq!(avg_retrieved(&none), 0.0);
        let all = vec![ids(&["a", "b", "c", "g"]); 2];
        assert!(recall_by_category(&all, &gold).unwrap().values().all(|&v| v == 1.0));
        assert_eq!(avg_retrieved(&all), 4.0);
        assert!(recall_by_category(&det[..1], &gold).is_err());
    }

    #[test]
    fn nested_detection_is_excluded() {
        let dict = vec![
            entity("lis", "Lisbon", vec![], Category::Gpe),
            entity("treaty", "Treaty of Lisbon", vec![], Category::Org),
            entity("far", "Farland", vec![], Category::Gpe),
        ];
        let utts = vec![utt("u", "the Treaty of Lisbon holds", vec![])];
        let gold = vec![vec![gm("treaty", Category::Org)]];
        let p = |d: &[&str]| precision_nested_excluded(&[ids(d)], &gold, &utts, &dict).unwrap();
        assert_eq!(p(&["treaty"]), Some(1.0));
        assert_eq!(p(&["treaty", "lis"]), Some(1.0));
        assert_eq!(p(&["treaty", "far"]), Some(0.5));
        assert_eq!(naive_precision(&[ids(&["treaty", "lis"])], &gold).unwrap(), Some(0.5));
        assert_eq!(p(&[]), None);
    }

    fn rent(form: &str, c: Category) -> ReferenceEntity {
        ReferenceEntity {
            target_form: form.into(),
            category: c,
        }
    }

    #[test]
    fn entity_accuracy_is_case_sensitive_containment() {
        let refs = vec![vec![rent("Lisboa", Category::Gpe)], vec![rent("Ana Sousa", Category::Per)]];
        let acc = entity_accuracy(&[toks("em Lisboa hoje"), toks("Ana e Sousa")], &refs).unwrap();
        assert_eq!(acc.per_category[&Category::Gpe], 1.0);
        assert_eq!(acc.per_category[&Category::Per], 0.0);
        assert_eq!(acc.average, Some(0.5));
        let lower = entity_accuracy(&[toks("em lisboa"), toks("Ana Sousa")], &refs).unwrap();
        assert_eq!(lower.per_category[&Category::Gpe], 0.0);
        assert_eq!(lower.per_category[&Category::Per], 1.0);
        let ident = entity_accuracy(&[toks("Lisboa"), toks("Ana Sousa")], &refs).unwrap();
        assert!(ident.per_category.values().all(|&v| v == 1.0));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let x = vec![toks("a b c d e"), toks("f g")];
        assert!((corpus_bleu(&x, &x).unwrap() - 100.0).abs() < 1e-9);
        let short = vec![toks("one")];
        assert!((corpus_bleu(&short, &short).unwrap() - 100.0).abs() < 1e-9);
        let long = |p: &str| vec![(0..20).map(|i| format!("{p}{i}")).collect::<Vec<_>>()];
        assert!(corpus_bleu(&long("h"), &long("r")).unwrap() < 1.0);
        assert!(corpus_bleu::<String, String>(&[], &[]).is_err());
    }

    #[test]
    fn bleu_matches_hand_computed_fixture() {
        // hyp1 "the cat sat on the mat" / ref1 "the cat is on the mat"
        //   1-grams 5/6, 2-grams 3/5 (the cat, on the, the mat),
        //   3-grams 1/4 (on the mat), 4-grams 0/3
        // hyp2 "a dog" / ref2 "a dog runs"
        //   1-grams 2/2, 2-grams 1/1, no 3- or 4-grams
        // corpus: p1 = 7/8, p2 = 4/6, p3 = 1/4, p4 = 0/3 -> 1/(2·3)
        // lengths: hyp 8, ref 9 -> BP = exp(1 - 9/8)
        let hyps = vec![toks("the cat sat on the mat"), toks("a dog")];
        let refs = vec![toks("the cat is on the mat"), toks("a dog runs")];
        let logs = [7.0f64 / 8.0, 4.0 / 6.0, 1.0 / 4.0, 1.0 / 6.0].map(f64::ln);
        let oracle = 100.0 * (1.0f64 - 9.0 / 8.0).exp() * (logs.iter().sum::<f64>() / 4.0).exp();
        let bleu = corpus_bleu(&hyps, &refs).unwrap();
        assert!((bleu - oracle).abs() < 1e-6, "{bleu} vs {oracle}");
    }

    #[test]
    fn strip_tags_removes_only_tags() {
        assert_eq!(strip_tags(&toks("x <PER> A B </PER> y")), toks("x A B y"));
    }

    #[test]
    fn false_positive_triage() {
        let u = utt("u", "the Budget Committee met", vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let fisheries = entity("f", "Fisheries Committee", vec![9, 10], Category::Org);
        assert_eq!(categorize_false_positive(&fisheries, &u), FpCategory::PartialMatch);
        let us = entity("us", "US", vec![11, 12, 13], Category::Gpe);
        assert_eq!(categorize_false_positive(&us, &u), FpCategory::Acronym);
        let close = entity("c", "Zedo", vec![3, 9, 10, 6], Category::Gpe);
        assert_eq!(categorize_false_positive(&close, &u), FpCategory::Other);
        let closer = entity("c", "Zedo", vec![3, 4, 5, 6, 9], Category::Gpe);
        assert_eq!(categorize_false_positive(&closer, &u), FpCategory::SimilarPhonetic);
        let far = entity("o", "Quux", vec![14, 15, 16, 17], Category::Loc);
        assert_eq!(categorize_false_positive(&far, &u), FpCategory::Other);
    }

    fn grid(scores: Vec<Vec<f64>>) -> ScoreGrid {
        ScoreGrid {
            utterance_ids: (0..scores.len()).map(|i| format!("u{i}")).collect(),
            ne_ids: ids(&["a", "b", "c"]),
            scores,
        }
    }

    #[test]
    fn matched_recall_threshold() {
        let g = grid(vec![vec![0.9, 0.2, 0.6], vec![0.3, 0.7, 0.1]]);
        let gold = vec![vec![gm("a", Category::Per)], vec![gm("b", Category::Per)]];
        let (t, r) = retrieved_at_recall(&g, &gold, 1.0).unwrap().unwrap();
        assert_eq!(t, 0.7);
        assert_eq!(r, 1.0);
        let (t, r) = retrieved_at_recall(&g, &gold, 0.5).unwrap().unwrap();
        assert_eq!(t, 0.9);
        assert_eq!(r, 0.5);
    }

    proptest! {
        #[test]
        fn detections_shrink_as_threshold_rises(
            scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..6),
        ) {
            let g = grid(scores);
            let gold: Vec<Vec<GoldMention>> = (0..g.scores.len()).map(|_| vec![gm("a", Category::Gpe)]).collect();
            let ts: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
            let rows = threshold_sweep(&g, &gold, &ts).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].retrieved <= w[0].retrieved);
                prop_assert!(w[1].micro_recall <= w[0].micro_recall);
            }
            for (i, t) in ts.iter().enumerate().skip(1) {
                let hi = grid_detected(&g, *t);
                let lo = grid_detected(&g, ts[i - 1]);
                for (h, l) in hi.iter().zip(&lo) {
                    prop_assert!(h.iter().all(|x| l.contains(x)));
                }
            }
        }

        #[test]
        fn metrics_are_order_invariant_and_bounded(
            det in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 1..8),
            gold in prop::collection::vec(prop::collection::vec((0usize..4, 0usize..3), 0..3), 1..8),
            seed in any::<u64>(),
        ) {
            let n = det.len().min(gold.len());
            let names = ["a", "b", "c", "d"];
            let det: Vec<Vec<String>> = det[..n].iter().map(|d| {
                let mut v: Vec<String> = d.iter().map(|&i| names[i].to_string()).collect();
                v.sort();
                v.dedup();
                v
            }).collect();
            let gold: Vec<Vec<GoldMention>> = gold[..n].iter().map(|g| {
                let mut seen = BTreeSet::new();
                g.iter().filter(|(i, _)| seen.insert(*i)).map(|&(i, c)| gm(names[i], Category::SCORED[c])).collect()
            }).collect();
            let dict: Vec<NamedEntity> = names.iter().map(|n| entity(n, &n.to_uppercase(), vec![], Category::Gpe)).collect();
            let utts: Vec<Utterance> = (0..n).map(|i| utt(&format!("u{i}"), if i % 2 == 0 { "A x" } else { "y" }, vec![])).collect();

            let mut perm: Vec<usize> = (0..n).collect();
            use rand::{seq::SliceRandom, SeedableRng};
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pd: Vec<_> = perm.iter().map(|&i| det[i].clone()).collect();
            let pg: Vec<_> = perm.iter().map(|&i| gold[i].clone()).collect();
            let pu: Vec<_> = perm.iter().map(|&i| utts[i].clone()).collect();

            let r = recall_by_category(&det, &gold).unwrap();
            prop_assert_eq!(&r, &recall_by_category(&pd, &pg).unwrap());
            prop_assert!(r.values().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((avg_retrieved(&det) - avg_retrieved(&pd)).abs() < 1e-12);
            let p = precision_nested_excluded(&det, &gold, &utts, &dict).unwrap();
            prop_assert_eq!(p, precision_nested_excluded(&pd, &pg, &pu, &dict).unwrap());
            if let (Some(p), Some(q)) = (p, naive_precision(&det, &gold).unwrap()) {
                prop_assert!(p >= q && p <= 1.0);
            }
        }

        #[test]
        fn bleu_bounded_and_identity(
            hyp in prop::collection::vec(prop::collection::vec(0usize..5, 0..8), 1..5),
            refs in prop::collection::vec(prop::collection::vec(0usize..5, 1..8), 1..5),
        ) {
            let n = hyp.len().min(refs.len());
            let w = |s: &Vec<usize>| s.iter().map(|i| format!("w{i}")).collect::<Vec<_>>();
            let h: Vec<_> = hyp[..n].iter().map(w).collect();
            let r: Vec<_> = refs[..n].iter().map(w).collect();
            let b = corpus_bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0).contains(&b));
            prop_assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
            let mut hr = h.clone();
            let mut rr = r.clone();
            hr.reverse();
            rr.reverse();
            prop_assert!((corpus_bleu(&hr, &rr).unwrap() - b).abs() < 1e-9);
        }
    }
}
