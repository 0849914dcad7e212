//! Repeat-task corpora and intervention datasets.
//!
//! Token ids are `0..n_symbols`; two special tokens follow them: `S`
//! (`n_symbols`, start of the repeat phase) and `PAD` (`n_symbols + 1`, fed
//! during no-input decoding). Positions in counterfactual and edit records are
//! 1-based.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CORPUS_MAGIC: &[u8] = b"ONCORP1";

/// Resampling budget per requested test sequence before giving up.
const RESAMPLE_FACTOR: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_symbols: usize,
    pub l_max: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TaskConfig {
    /// 30 symbols, length up to 9, 1M train / 5K test sequences.
    pub fn paper() -> Self {
        Self {
            n_symbols: 30,
            l_max: 9,
            train_size: 1_000_000,
            test_size: 5_000,
            seed: 0,
        }
    }

    /// CPU-sized profile: 200K train sequences.
    pub fn desk() -> Self {
        Self {
            train_size: 200_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 1 || self.n_symbols > 254 {
            return Err(Error::contract(format!(
                "n_symbols must be in 1..=254, got {}",
                self.n_symbols
            )));
        }
        if self.l_max < 1 || self.l_max > 255 {
            return Err(Error::contract(format!(
                "l_max must be in 1..=255, got {}",
                self.l_max
            )));
        }
        Ok(())
    }

    /// Input/output vocabulary including `S` and `PAD`.
    pub fn vocab_size(&self) -> usize {
        self.n_symbols + 2
    }

    pub fn start_token(&self) -> usize {
        self.n_symbols
    }

    pub fn pad_token(&self) -> usize {
        self.n_symbols + 1
    }

    /// Number of distinct sequences of length `1..=l_max` (saturating).
    pub fn sequence_space(&self) -> u128 {
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for _ in 0..self.l_max {
            pow = pow.saturating_mul(self.n_symbols as u128);
            total = total.saturating_add(pow);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RepeatExample {
    pub tokens: Vec<usize>,
}

impl RepeatExample {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Unigram,
    Bigram,
}

impl Granularity {
    /// Number of causal variables for sequences up to `l_max`.
    pub fn num_variables(self, l_max: usize) -> usize {
        match self {
            Granularity::Unigram => l_max,
            Granularity::Bigram => l_max.saturating_sub(1),
        }
    }
}

/// An interchange-intervention instance: patch `s` into `b`, expect `y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualExample {
    pub y: Vec<usize>,
    pub b: Vec<usize>,
    pub s: Vec<usize>,
    /// Intervened token positions (1-based, ascending).
    #[serde(rename = "I")]
    pub positions: Vec<usize>,
    pub granularity: Granularity,
}

impl CounterfactualExample {
    /// Variables whose subspaces are exchanged (1-based).
    ///
    /// Unigram: the positions themselves. Bigram: variable `v` holds
    /// `(i_v, i_{v+1})`, so position `j` touches `{j-1, j} ∩ [1, L-1]`.
    pub fn variables(&self) -> Vec<usize> {
        match self.granularity {
            Granularity::Unigram => self.positions.clone(),
            Granularity::Bigram => {
                let l = self.y.len();
                let mut vars: Vec<usize> = self
                    .positions
                    .iter()
                    .flat_map(|&j| [j.wrapping_sub(1), j])
                    .filter(|&v| v >= 1 && v < l)
                    .collect();
                vars.sort_unstable();
                vars.dedup();
                vars
            }
        }
    }

    /// Identity example: base, source and target all equal `seq`.
    pub fn identity(seq: Vec<usize>, granularity: Granularity) -> Self {
        Self {
            y: seq.clone(),
            b: seq.clone(),
            s: seq,
            positions: vec![1],
            granularity,
        }
    }
}

/// Replace the token at position `j` of `base`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnionEditExample {
    pub base: Vec<usize>,
    /// 1-based position.
    pub j: usize,
    #[serde(rename = "old")]
    pub old_token: usize,
    #[serde(rename = "new")]
    pub new_token: usize,
}

impl OnionEditExample {
    pub fn target(&self) -> Vec<usize> {
        let mut t = self.base.clone();
        t[self.j - 1] = self.new_token;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<RepeatExample>,
    pub test: Vec<RepeatExample>,
}

pub fn random_tokens(rng: &mut Rng, n_symbols: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(n_symbols)).collect()
}

/// Length uniform on `1..=l_max`, tokens i.i.d. uniform.
pub fn sample_repeat_example(rng: &mut Rng, cfg: &TaskConfig) -> RepeatExample {
    let len = rng.range_inclusive(1, cfg.l_max);
    RepeatExample::new(random_tokens(rng, cfg.n_symbols, len))
}

/// Train and test sets, disjoint at the sequence level.
///
/// Fails with [`Error::GenerationExhausted`] when the sequence space cannot
/// hold `train_size + test_size` distinct sequences, or when rejection
/// sampling of the test set runs out of budget.
pub fn build_corpus(cfg: &TaskConfig) -> Result<Corpus> {
    cfg.validate()?;
    let needed = cfg.train_size as u128 + cfg.test_size as u128;
    if cfg.test_size > 0 && cfg.sequence_space() < needed {
        return Err(Error::GenerationExhausted(format!(
            "{} distinct sequences exist, {} train + {} test requested",
            cfg.sequence_space(),
            cfg.train_size,
            cfg.test_size
        )));
    }
    let mut rng = Rng::derive(cfg.seed, "corpus/train");
    let train: Vec<RepeatExample> = (0..cfg.train_size)
        .map(|_| sample_repeat_example(&mut rng, cfg))
        .collect();
    let seen: HashSet<&[usize]> = train.iter().map(|e| e.tokens.as_slice()).collect();
    let mut rng = Rng::derive(cfg.seed, "corpus/test");
    let mut test = Vec::with_capacity(cfg.test_size);
    let mut budget = RESAMPLE_FACTOR.saturating_mul(cfg.test_size.max(1));
    while test.len() < cfg.test_size {
        if budget == 0 {
            return Err(Error::GenerationExhausted(format!(
                "only {} of {} disjoint test sequences found",
                test.len(),
                cfg.test_size
            )));
        }
        budget -= 1;
        let ex = sample_repeat_example(&mut rng, cfg);
        if !seen.contains(ex.tokens.as_slice()) {
            test.push(ex);
        }
    }
    Ok(Corpus { train, test })
}

/// Unigram counterfactual built around a given target `y`.
///
/// Each position joins `I` with probability 1/2 (redrawn until non-empty);
/// `b` is `y` with positions in `I` randomized, `s` is `y` with positions
/// outside `I` randomized.
pub fn unigram_counterfactual_from(rng: &mut Rng, y: Vec<usize>, n_symbols: usize) -> CounterfactualExample {
    let len = y.len();
    let positions = loop {
        let picked: Vec<usize> = (1..=len).filter(|_| rng.bernoulli(0.5)).collect();
        if !picked.is_empty() {
            break picked;
        }
    };
    let mut b = y.clone();
    let mut s = y.clone();
    let mut in_set = vec![false; len];
    for &k in &positions {
        in_set[k - 1] = true;
    }
    for k in 0..len {
        if in_set[k] {
            b[k] = rng.below(n_symbols);
        } else {
            s[k] = rng.below(n_symbols);
        }
    }
    CounterfactualExample {
        y,
        b,
        s,
        positions,
        granularity: Granularity::Unigram,
    }
}

pub fn make_unigram_counterfactual(rng: &mut Rng, cfg: &TaskConfig) -> CounterfactualExample {
    let y = sample_repeat_example(rng, cfg).tokens;
    unigram_counterfactual_from(rng, y, cfg.n_symbols)
}

/// Bigram counterfactual around a given target `y` (length ≥ 2, `n_symbols ≥ 2`).
///
/// One position `j` is edited: `b` differs from `y` only at `j`; `s` agrees
/// with `y` at `j - 1`, `j`, `j + 1` and is random elsewhere.
pub fn bigram_counterfactual_from(rng: &mut Rng, y: Vec<usize>, n_symbols: usize) -> CounterfactualExample {
    let len = y.len();
    let j = rng.range_inclusive(1, len);
    let mut b = y.clone();
    b[j - 1] = other_token(rng, y[j - 1], n_symbols);
    let mut s = random_tokens(rng, n_symbols, len);
    for k in j.saturating_sub(1).max(1)..=(j + 1).min(len) {
        s[k - 1] = y[k - 1];
    }
    CounterfactualExample {
        y,
        b,
        s,
        positions: vec![j],
        granularity: Granularity::Bigram,
    }
}

pub fn make_bigram_counterfactual(rng: &mut Rng, cfg: &TaskConfig) -> Result<CounterfactualExample> {
    if cfg.l_max < 2 || cfg.n_symbols < 2 {
        return Err(Error::contract(
            "bigram counterfactuals need l_max >= 2 and n_symbols >= 2",
        ));
    }
    let y = loop {
        let ex = sample_repeat_example(rng, cfg);
        if ex.len() >= 2 {
            break ex.tokens;
        }
    };
    Ok(bigram_counterfactual_from(rng, y, cfg.n_symbols))
}

pub fn make_counterfactual(
    rng: &mut Rng,
    cfg: &TaskConfig,
    granularity: Granularity,
) -> Result<CounterfactualExample> {
    match granularity {
        Granularity::Unigram => Ok(make_unigram_counterfactual(rng, cfg)),
        Granularity::Bigram => make_bigram_counterfactual(rng, cfg),
    }
}

/// Uniform token different from `old` (requires `n_symbols ≥ 2`).
fn other_token(rng: &mut Rng, old: usize, n_symbols: usize) -> usize {
    let t = rng.below(n_symbols - 1);
    if t >= old {
        t + 1
    } else {
        t
    }
}

/// Position uniform on `1..=L`, replacement token uniform over the others.
pub fn make_onion_edit(rng: &mut Rng, base: &RepeatExample, n_symbols: usize) -> Result<OnionEditExample> {
    if base.is_empty() || n_symbols < 2 {
        return Err(Error::contract("onion edits need L >= 1 and n_symbols >= 2"));
    }
    let j = rng.range_inclusive(1, base.len());
    let old_token = base.tokens[j - 1];
    let new_token = other_token(rng, old_token, n_symbols);
    Ok(OnionEditExample {
        base: base.tokens.clone(),
        j,
        old_token,
        new_token,
    })
}

/// Encode sequences in the `ONCORP1` format.
pub fn encode_corpus(examples: &[RepeatExample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(11 + examples.len() * 6);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    for ex in examples {
        if ex.len() > 255 || ex.tokens.iter().any(|&t| t > 255) {
            return Err(Error::contract("corpus records hold at most 255 u8 tokens"));
        }
        out.push(ex.len() as u8);
        out.extend(ex.tokens.iter().map(|&t| t as u8));
    }
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8], path: &Path) -> Result<Vec<RepeatExample>> {
    let fail = |field: &str, reason: &str| Error::Format {
        path: path.to_owned(),
        field: field.into(),
        reason: reason.into(),
    };
    if bytes.len() < CORPUS_MAGIC.len() + 4 || &bytes[..CORPUS_MAGIC.len()] != CORPUS_MAGIC {
        return Err(fail("magic", "expected \"ONCORP1\""));
    }
    let mut pos = CORPUS_MAGIC.len();
    let count = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = *bytes
            .get(pos)
            .ok_or_else(|| fail(&format!("record {i}"), "truncated length"))? as usize;
        pos += 1;
        let toks = bytes
            .get(pos..pos + len)
            .ok_or_else(|| fail(&format!("record {i}"), "truncated tokens"))?;
        pos += len;
        out.push(RepeatExample::new(toks.iter().map(|&t| t as usize).collect()));
    }
    if pos != bytes.len() {
        return Err(fail("records", "trailing bytes"));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, examples: &[RepeatExample]) -> Result<()> {
    write_atomic(path, &encode_corpus(examples)?)
}

pub fn read_corpus(path: &Path) -> Result<Vec<RepeatExample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes, path)
}

/// One JSON object per line.
pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.write_all(b"\n").expect("vec write");
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_owned(),
            field: format!("line {}", i + 1),
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
