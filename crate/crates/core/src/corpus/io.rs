//! On-disk corpus layout.
//!
//! ```text
//! meta.json           format version, seed, config, lexicon, vocabularies, prototypes
//! dict.jsonl          one NamedEntity per line
//! {split}.jsonl       one Utterance per line (frames excluded)
//! {split}.frames.bin  frame blocks, see below
//! ```
//!
//! Frame files start with the 8-byte magic `NEDFRAME`, a `u32` format
//! revision and a `u32` utterance count. Each block is
//! `u32 id_len, id bytes, u32 rows, u32 cols, rows·cols f64`, all little-endian,
//! in the same order as the split's JSONL.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::CorpusConfig;
use super::phonemes::Lexicon;
use super::types::{NamedEntity, Split, Splits, TextPair, Utterance, Vocab};
use super::Corpus;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: &str = "nedict-corpus/1";
const FRAME_MAGIC: &[u8; 8] = b"NEDFRAME";
const FRAME_REVISION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: String,
    seed: u64,
    config: CorpusConfig,
    lexicon: Lexicon,
    source_vocab: Vocab,
    target_vocab: Vocab,
    prototypes: Tensor,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        format_version: FORMAT_VERSION.to_string(),
        seed: corpus.seed,
        config: corpus.config.clone(),
        lexicon: corpus.lexicon.clone(),
        source_vocab: corpus.source_vocab.clone(),
        target_vocab: corpus.target_vocab.clone(),
        prototypes: corpus.prototypes.clone(),
    };
    let mut w = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.write_all(b"\n")?;
    w.flush()?;

    write_jsonl(&dir.join("dict.jsonl"), &corpus.dictionary)?;
    write_jsonl(&dir.join("mt.jsonl"), &corpus.mt)?;
    for split in Split::ALL {
        let utts = corpus.split(split);
        write_jsonl(&dir.join(format!("{}.jsonl", split.as_str())), utts)?;
        write_frames(&dir.join(format!("{}.frames.bin", split.as_str())), utts)?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_frames(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&FRAME_REVISION.to_le_bytes())?;
    w.write_all(&(utts.len() as u32).to_le_bytes())?;
    for u in utts {
        w.write_all(&(u.id.len() as u32).to_le_bytes())?;
        w.write_all(u.id.as_bytes())?;
        w.write_all(&(u.speech_frames.rows() as u32).to_le_bytes())?;
        w.write_all(&(u.speech_frames.cols() as u32).to_le_bytes())?;
        for v in u.speech_frames.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact {
            path: meta_path,
            hint: "run `nedict gen-data` first".into(),
        });
    }
    let meta: Meta = serde_json::from_reader(BufReader::new(File::open(&meta_path)?))
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("format version `{}`, expected `{FORMAT_VERSION}`", meta.format_version),
        ));
    }
    let dictionary: Vec<NamedEntity> = read_jsonl(&dir.join("dict.jsonl"))?;
    let mut splits = Splits::default();
    for split in Split::ALL {
        let mut utts: Vec<Utterance> = read_jsonl(&dir.join(format!("{}.jsonl", split.as_str())))?;
        read_frames(&dir.join(format!("{}.frames.bin", split.as_str())), &mut utts)?;
        *splits.get_mut(split) = utts;
    }
    let mt: Vec<TextPair> = read_jsonl(&dir.join("mt.jsonl"))?;
    let corpus = Corpus {
        seed: meta.seed,
        mt,
        config: meta.config,
        lexicon: meta.lexicon,
        dictionary,
        source_vocab: meta.source_vocab,
        target_vocab: meta.target_vocab,
        prototypes: meta.prototypes,
        splits,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_frames(path: &Path, utts: &mut [Utterance]) -> Result<()> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::format(path, e.to_string()))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &magic != FRAME_MAGIC {
        return Err(Error::format(path, "not a frame file"));
    }
    let rev = read_u32(&mut r).map_err(|_| Error::format(path, "truncated header"))?;
    if rev != FRAME_REVISION {
        return Err(Error::format(path, format!("frame revision {rev}, expected {FRAME_REVISION}")));
    }
    let count = read_u32(&mut r).map_err(|_| Error::format(path, "truncated header"))? as usize;
    if count != utts.len() {
        return Err(Error::format(path, format!("{count} frame blocks for {} utterances", utts.len())));
    }
    for u in utts.iter_mut() {
        let bad = |what: &str| Error::format(path, format!("utterance {}: {what}", u.id));
        let id_len = read_u32(&mut r).map_err(|_| bad("truncated block header"))? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|_| bad("truncated block header"))?;
        if id != u.id.as_bytes() {
            return Err(bad(&format!("frame block belongs to `{}`", String::from_utf8_lossy(&id))));
        }
        let rows = read_u32(&mut r).map_err(|_| bad("truncated block header"))? as usize;
        let cols = read_u32(&mut r).map_err(|_| bad("truncated block header"))? as usize;
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| bad(&format!("frame block shorter than {rows}×{cols}")))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        u.speech_frames = Tensor::matrix(rows, cols, data)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(())
}
