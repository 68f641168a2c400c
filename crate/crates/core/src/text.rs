//! Transcript tokenization and word-embedding lookup.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 500;

/// Lowercases, splits on whitespace and strips punctuation, keeping
/// apostrophes only between two alphanumeric characters.
pub fn tokenize(transcript: &str) -> Vec<String> {
    transcript
        .split_whitespace()
        .filter_map(|word| {
            let chars: Vec<char> = word.to_lowercase().chars().collect();
            let kept: String = chars
                .iter()
                .enumerate()
                .filter(|&(i, c)| {
                    c.is_alphanumeric()
                        || (*c == '\''
                            && i > 0
                            && i + 1 < chars.len()
                            && chars[i - 1].is_alphanumeric()
                            && chars[i + 1].is_alphanumeric())
                })
                .map(|(_, c)| *c)
                .collect();
            (!kept.is_empty()).then_some(kept)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OovPolicy {
    /// Unknown tokens embed as zero (pretrained, frozen tables).
    Zero,
    /// Unknown tokens share the final, trainable row.
    SharedRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor,
    oov: OovPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub tensor: Tensor,
    pub valid_tokens: usize,
    /// Transcript produced no tokens.
    pub empty: bool,
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, matrix: Tensor) -> Result<Self> {
        let [v, _] = matrix.dims2("embedding table")?;
        if v != tokens.len() {
            return Err(Error::shape("embedding table", &[tokens.len()], matrix.shape()));
        }
        let mut index = HashMap::with_capacity(v);
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        Ok(EmbeddingTable {
            tokens,
            index,
            matrix,
            oov: OovPolicy::Zero,
        })
    }

    /// Uniform(-0.05, 0.05) table over `tokens` plus one shared OOV row.
    pub fn random(tokens: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = tokens.len() + 1;
        let matrix = Tensor::from_fn(vec![rows, dim], |_| rng.gen_range(-0.05..0.05));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        Ok(EmbeddingTable {
            tokens,
            index,
            matrix,
            oov: OovPolicy::SharedRow,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov
    }

    /// Row index for a token: known rows, the shared OOV row, or `None`.
    pub fn row_of(&self, token: &str) -> Option<usize> {
        match (self.index.get(token), self.oov) {
            (Some(&i), _) => Some(i),
            (None, OovPolicy::SharedRow) => Some(self.tokens.len()),
            (None, OovPolicy::Zero) => None,
        }
    }

    /// Row indices of the first [`MAX_TOKENS`] tokens, `None` past the end
    /// and for zero-policy OOV tokens.
    pub fn token_ids(&self, tokens: &[String]) -> Vec<Option<usize>> {
        let mut ids: Vec<Option<usize>> = tokens.iter().take(MAX_TOKENS).map(|t| self.row_of(t)).collect();
        ids.resize(MAX_TOKENS, None);
        ids
    }

    pub fn embed(&self, tokens: &[String]) -> TextFeatures {
        let e = self.dim();
        let valid = tokens.len().min(MAX_TOKENS);
        let mut data = vec![0.0; MAX_TOKENS * e];
        for (i, id) in self.token_ids(tokens).into_iter().enumerate().take(valid) {
            if let Some(r) = id {
                data[i * e..(i + 1) * e].copy_from_slice(self.matrix.row(r));
            }
        }
        TextFeatures {
            tensor: Tensor::new(vec![MAX_TOKENS, e], data).expect("sized above"),
            valid_tokens: valid,
            empty: tokens.is_empty(),
        }
    }

    /// Parses `token v1 v2 ... vE` lines; the first line fixes `E`.
    /// Duplicate tokens keep their first vector.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashMap::new();
        let mut dim = None;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = n + 1;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: e.to_string(),
                })?;
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected || expected == 0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("expected {expected} values, found {}", values.len()),
                });
            }
            if seen.contains_key(token) {
                log::warn!("{}:{lineno}: duplicate token {token:?} ignored", path.display());
                continue;
            }
            seen.insert(token.to_string(), tokens.len());
            tokens.push(token.to_string());
            data.extend(values);
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no embeddings".into(),
        })?;
        let matrix = Tensor::new(vec![tokens.len(), dim], data)?;
        EmbeddingTable::new(tokens, matrix)
    }

    /// Writes the known rows in the format [`EmbeddingTable::load`] reads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for (i, t) in self.tokens.iter().enumerate() {
            let mut line = t.clone();
            for v in self.matrix.row(i) {
                line.push(' ');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("I'm FINE."), toks(&["i'm", "fine"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("'quoted' -- rock'n'roll!"), toks(&["quoted", "rock'n'roll"]));
        let long = vec!["w"; 600].join(" ");
        let table = EmbeddingTable::new(toks(&["w"]), Tensor::full(vec![1, 2], 1.0)).unwrap();
        let f = table.embed(&tokenize(&long));
        assert_eq!(f.valid_tokens, 500);
        assert!(f.tensor.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn embed_pads_and_zeroes_oov() {
        let m = Tensor::from_fn(vec![2, 300], |i| i as f64 + 1.0);
        let table = EmbeddingTable::new(toks(&["hello", "there"]), m).unwrap();
        let f = table.embed(&toks(&["hello", "there"]));
        assert_eq!(f.tensor.shape(), &[500, 300]);
        assert_eq!(f.tensor.row(1), table.matrix().row(1));
        assert!(f.tensor.data()[600..].iter().all(|&v| v == 0.0));

        let oov = table.embed(&toks(&["what", "now"]));
        assert!(oov.tensor.data().iter().all(|&v| v == 0.0));
        assert_eq!(oov.valid_tokens, 2);
        assert_eq!(table.embed(&toks(&["hello"])), table.embed(&toks(&["hello"])));
    }

    #[test]
    fn random_table_routes_oov_to_shared_row() {
        let t = EmbeddingTable::random(toks(&["a", "b"]), 128, 1).unwrap();
        assert_eq!(t.matrix().shape(), &[3, 128]);
        assert_eq!(t.row_of("zzz"), Some(2));
        let f = t.embed(&toks(&["zzz"]));
        assert_eq!(f.tensor.shape(), &[500, 128]);
        assert_eq!(f.tensor.row(0), t.matrix().row(2));
    }

    #[test]
    fn load_small_file_and_reject_ragged_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "a 1 2 3 4\nb 5 6 7 8\nc 0.5 0 0 1e-3\na 9 9 9 9\n").unwrap();
        let t = EmbeddingTable::load(&p).unwrap();
        assert_eq!(t.vocab_size(), 3);
        assert_eq!(t.dim(), 4);
        assert_eq!(t.matrix().row(0), &[1.0, 2.0, 3.0, 4.0]);

        let mut ragged = String::from("x");
        for _ in 0..300 {
            ragged.push_str(" 0.1");
        }
        ragged.push_str("\ny");
        for _ in 0..299 {
            ragged.push_str(" 0.1");
        }
        fs::write(&p, ragged).unwrap();
        match EmbeddingTable::load(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(EmbeddingTable::load(&dir.path().join("missing")).is_err());
    }
}
