//! Deterministic synthetic transduction task: token sequences rendered as
//! noisy one-hot frame matrices with variable per-character duration, so the
//! model must learn alignment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::ScatterMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Letters plus the word separator (space).
    pub alphabet: Vec<char>,
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_repeats: usize,
    pub max_repeats: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alphabet: "abcdefgh ".chars().collect(),
            vocab_size: 24,
            min_words: 2,
            max_words: 4,
            min_word_len: 2,
            max_word_len: 5,
            min_repeats: 2,
            max_repeats: 3,
            sigma: 0.1,
            seed: 17,
        }
    }
}

impl SynthConfig {
    /// One-hot character channels plus an energy channel.
    pub fn feature_dim(&self) -> usize {
        self.alphabet.len() + 1
    }

    fn char_index(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|a| *a == c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Tensor,
    pub reference_tokens: Vec<usize>,
    pub reference_text: String,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    text: String,
    tokens: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

/// Deterministic vocabulary over the alphabet: every single character plus
/// seeded multi-character subwords (letters only, no doubled letters), with
/// blank implicit as the final id.
pub fn gen_vocab(config: &SynthConfig) -> Result<ScatterMap> {
    let letters: Vec<char> = config
        .alphabet
        .iter()
        .copied()
        .filter(|c| *c != ' ')
        .collect();
    let mut vocab: Vec<String> = config.alphabet.iter().map(|c| c.to_string()).collect();
    if config.vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} smaller than alphabet {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x5eed_u64);
    while vocab.len() < config.vocab_size {
        let len = rng.gen_range(2..=3usize);
        let mut s = String::new();
        let mut last = None;
        for _ in 0..len {
            let mut c = letters[rng.gen_range(0..letters.len())];
            while Some(c) == last {
                c = letters[rng.gen_range(0..letters.len())];
            }
            s.push(c);
            last = Some(c);
        }
        if !vocab.contains(&s) {
            vocab.push(s);
        }
    }
    ScatterMap::new(vocab)
}

/// Deterministically sample one utterance: space-separated words of letters,
/// no adjacent equal characters, so the noise-free task is perfectly
/// transcribable. Reference tokens are the per-character token ids.
pub fn gen_utterance(config: &SynthConfig, map: &ScatterMap, index: u64) -> Result<Utterance> {
    if config.min_words < 1 || config.max_words < config.min_words {
        return Err(Error::Config("word count bounds must satisfy 1 <= min <= max".into()));
    }
    if config.min_word_len < 1 || config.max_word_len < config.min_word_len {
        return Err(Error::Config("word length bounds must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(index.wrapping_add(1));
    let letters: Vec<char> = config.alphabet.iter().copied().filter(|c| *c != ' ').collect();
    let n_words = rng.gen_range(config.min_words..=config.max_words);
    let mut text = String::new();
    for w in 0..n_words {
        if w > 0 {
            text.push(' ');
        }
        let len = rng.gen_range(config.min_word_len..=config.max_word_len);
        let mut last = None;
        for _ in 0..len {
            let mut c = letters[rng.gen_range(0..letters.len())];
            while Some(c) == last {
                c = letters[rng.gen_range(0..letters.len())];
            }
            text.push(c);
            last = Some(c);
        }
    }
    // label sequence: one single-character token per character
    let tokens: Vec<usize> = text
        .chars()
        .map(|c| {
            map.tokens()
                .iter()
                .position(|t| t.len() == 1 && t.starts_with(c))
                .ok_or_else(|| Error::Config(format!("character {c:?} has no vocabulary token")))
        })
        .collect::<Result<_>>()?;
    let noise = Normal::new(0.0, config.sigma)
        .map_err(|e| Error::Config(format!("bad sigma: {e}")))?;
    let dim = config.feature_dim();
    let mut frames: Vec<f64> = Vec::new();
    let mut t_len = 0usize;
    for c in text.chars() {
        let ci = config
            .char_index(c)
            .ok_or_else(|| Error::Config(format!("character {c:?} not in alphabet")))?;
        let reps = rng.gen_range(config.min_repeats..=config.max_repeats);
        for _ in 0..reps {
            for d in 0..dim {
                let base = if d == ci {
                    1.0
                } else if d == dim - 1 {
                    1.0 // energy channel
                } else {
                    0.0
                };
                let n = if config.sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                frames.push(base + n);
            }
            t_len += 1;
        }
    }
    Ok(Utterance {
        id: format!("utt-{index:06}"),
        frames: Tensor::new(vec![t_len, dim], frames)?,
        reference_tokens: tokens,
        reference_text: text,
    })
}

pub fn write_dataset(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utterances {
        let dim = u.frames.shape()[1];
        let rec = UtteranceRecord {
            id: u.id.clone(),
            text: u.reference_text.clone(),
            tokens: u.reference_tokens.clone(),
            frames: u
                .frames
                .data()
                .chunks(dim)
                .map(|c| c.to_vec())
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let t_len = rec.frames.len();
        let dim = rec.frames.first().map(|f| f.len()).unwrap_or(0);
        if t_len == 0 || rec.frames.iter().any(|f| f.len() != dim) {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "ragged or empty frame matrix".into(),
            });
        }
        out.push(Utterance {
            id: rec.id,
            frames: Tensor::new(vec![t_len, dim], rec.frames.concat())?,
            reference_tokens: rec.tokens,
            reference_text: rec.text,
        });
    }
    Ok(out)
}

/// Vocabulary file: one subword per line, line number = token id; blank is
/// implicit as the final id.
pub fn write_vocab(path: &Path, map: &ScatterMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for tok in map.tokens() {
        writeln!(w, "{tok}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<ScatterMap> {
    let r = BufReader::new(File::open(path)?);
    let mut tokens = Vec::new();
    for line in r.lines() {
        let line = line?;
        // a lone space token serializes as a line containing one space
        if line.is_empty() {
            continue;
        }
        tokens.push(line);
    }
    ScatterMap::new(tokens)
}
