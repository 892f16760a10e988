//! Token vocabulary with fixed reserved ids.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token <-> id map; ids 0..3 are PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from whitespace-tokenized lines, keeping the
    /// `max_size - 4` most frequent tokens; frequency ties break
    /// lexicographically.
    pub fn build<'a>(lines: impl Iterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
        if max_size < 4 {
            return Err(Error::Config(format!(
                "vocab max_size {max_size} < 4 reserved ids"
            )));
        }
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        let mut any = false;
        for line in lines {
            any = true;
            for tok in line.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Empty("vocabulary corpus".into()));
        }
        let mut by_freq: Vec<(&str, u64)> = freq.into_iter().collect();
        // Descending frequency; the BTreeMap already yielded tokens in
        // lexicographic order and the sort is stable, so ties keep it.
        by_freq.sort_by(|a, b| b.1.cmp(&a.1));
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (tok, _) in by_freq.into_iter().take(max_size - 4) {
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn from_files(paths: &[&Path], max_size: usize) -> Result<Vocab> {
        let mut lines = Vec::new();
        for p in paths {
            let reader = BufReader::new(std::fs::File::open(p)?);
            for line in reader.lines() {
                lines.push(line?);
            }
        }
        Vocab::build(lines.iter().map(|s| s.as_str()), max_size)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> &str {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .unwrap_or(RESERVED[UNK])
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id_of(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token_of(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order (reserved ids included).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in &self.id_to_token {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut id_to_token = Vec::new();
        for line in reader.lines() {
            id_to_token.push(line?);
        }
        if id_to_token.len() < 4 || id_to_token[..4] != RESERVED.map(String::from) {
            return Err(Error::Config(format!(
                "vocab file {} lacks the reserved id header",
                path.display()
            )));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocab::build(["a a b"].into_iter(), 6).unwrap();
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), 5);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let v = Vocab::build(["z y x z y x"].into_iter(), 6).unwrap();
        // All frequency 2: keep x, y (lexicographic), z falls out.
        assert_eq!(v.id_of("x"), 4);
        assert_eq!(v.id_of("y"), 5);
        assert_eq!(v.id_of("z"), UNK);
    }

    #[test]
    fn max_size_four_maps_everything_to_unk() {
        let v = Vocab::build(["a b c"].into_iter(), 4).unwrap();
        assert_eq!(v.encode_line("a b c"), vec![UNK, UNK, UNK]);
    }

    #[test]
    fn encode_decode_round_trip_for_in_vocab_text() {
        let v = Vocab::build(["hello world again"].into_iter(), 10).unwrap();
        let ids = v.encode_line("world hello again");
        assert_eq!(v.encode_line(&v.decode_ids(&ids)), ids);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build(std::iter::empty(), 10).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["a b c b"].into_iter(), 8).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
