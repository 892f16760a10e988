//! Parallel corpus loading and toy-task generation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::Vocab;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Line-aligned raw text pair, one sentence per line, whitespace tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParallel {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// Id-encoded parallel corpus.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src_tokens(&self) -> usize {
        self.src.iter().map(|s| s.len()).sum()
    }
}

pub fn load_raw(src_path: &Path, tgt_path: &Path) -> Result<RawParallel> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let reader = BufReader::new(std::fs::File::open(p)?);
        reader.lines().map(|l| Ok(l?)).collect()
    };
    let src = read(src_path)?;
    let tgt = read(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Config(format!(
            "parallel files differ in length: {} vs {} lines",
            src.len(),
            tgt.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::Empty("parallel corpus".into()));
    }
    Ok(RawParallel { src, tgt })
}

pub fn encode(raw: &RawParallel, vocab: &Vocab) -> ParallelCorpus {
    ParallelCorpus {
        src: raw.src.iter().map(|l| vocab.encode_line(l)).collect(),
        tgt: raw.tgt.iter().map(|l| vocab.encode_line(l)).collect(),
    }
}

pub fn write_parallel(raw: &RawParallel, src_path: &Path, tgt_path: &Path) -> Result<()> {
    let write = |lines: &[String], p: &Path| -> Result<()> {
        let mut f = std::fs::File::create(p)?;
        for l in lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    };
    write(&raw.src, src_path)?;
    write(&raw.tgt, tgt_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    Copy,
    Reverse,
}

impl ToyTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reverse" => Ok(ToyTask::Reverse),
            _ => Err(Error::Config(format!("unknown toy task `{s}`"))),
        }
    }
}

/// Generates a deterministic toy corpus: random source sentences over the
/// alphabet `w4..w{vocab_size-1}` (ids line up with vocabulary slots after
/// the reserved four), with the target equal to the source (copy) or its
/// reversal (reverse).
pub fn gen_toy_corpus(
    task: ToyTask,
    n_sentences: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<RawParallel> {
    if vocab_size < 5 {
        return Err(Error::Config(format!(
            "toy corpus vocab_size {vocab_size} < 5 (needs one real token)"
        )));
    }
    if max_len == 0 || n_sentences == 0 {
        return Err(Error::Config("toy corpus needs max_len, sentences >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let alphabet = vocab_size - 4;
    let mut src = Vec::with_capacity(n_sentences);
    let mut tgt = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let len = rng.below(max_len as u64) as usize + 1;
        let toks: Vec<String> = (0..len)
            .map(|_| format!("w{}", 4 + rng.below(alphabet as u64)))
            .collect();
        let t = match task {
            ToyTask::Copy => toks.clone(),
            ToyTask::Reverse => toks.iter().rev().cloned().collect(),
        };
        src.push(toks.join(" "));
        tgt.push(t.join(" "));
    }
    Ok(RawParallel { src, tgt })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_task_reverses() {
        let raw = gen_toy_corpus(ToyTask::Reverse, 20, 6, 12, 9).unwrap();
        for (s, t) in raw.src.iter().zip(&raw.tgt) {
            let mut toks: Vec<&str> = s.split_whitespace().collect();
            toks.reverse();
            assert_eq!(toks.join(" "), *t);
        }
    }

    #[test]
    fn copy_task_target_equals_source() {
        let raw = gen_toy_corpus(ToyTask::Copy, 10, 5, 8, 3).unwrap();
        assert_eq!(raw.src, raw.tgt);
    }

    #[test]
    fn same_seed_same_files() {
        let a = gen_toy_corpus(ToyTask::Reverse, 15, 7, 20, 42).unwrap();
        let b = gen_toy_corpus(ToyTask::Reverse, 15, 7, 20, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_toy_corpus(ToyTask::Reverse, 15, 7, 20, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn round_trips_through_files_and_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let raw = gen_toy_corpus(ToyTask::Reverse, 30, 8, 16, 1).unwrap();
        let sp = dir.path().join("train.src");
        let tp = dir.path().join("train.tgt");
        write_parallel(&raw, &sp, &tp).unwrap();
        let loaded = load_raw(&sp, &tp).unwrap();
        assert_eq!(loaded, raw);

        let vocab = Vocab::build(
            loaded.src.iter().chain(&loaded.tgt).map(|s| s.as_str()),
            64,
        )
        .unwrap();
        let corpus = encode(&loaded, &vocab);
        assert_eq!(corpus.len(), 30);
        // The toy alphabet is in-vocab, so nothing maps to UNK.
        assert!(corpus
            .src
            .iter()
            .flatten()
            .all(|&id| id >= 4 && id < vocab.len()));
    }

    #[test]
    fn mismatched_line_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("a.src");
        let tp = dir.path().join("a.tgt");
        std::fs::write(&sp, "one line\nand two\n").unwrap();
        std::fs::write(&tp, "solo\n").unwrap();
        assert!(load_raw(&sp, &tp).is_err());
    }
}
