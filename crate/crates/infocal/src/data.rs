//! Corpus ingestion, vocabulary construction, splits, and synthetic corpora
//! with planted rationales.
//!
//! The on-disk format is JSONL: one object per line with `tokens`, `label`
//! (class index or real score in [0,1]), optional `rationales` as half-open
//! `[start, end)` token index pairs, and an optional `aspect` tag. Inputs
//! arrive pre-tokenized; this module never splits text.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_SEQ_LEN: usize = 1000;
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("no instances loaded from {0}")]
    NoInstances(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("trigger pattern of length {pattern} exceeds minimum sequence length {min_len}")]
    PatternTooLong { pattern: usize, min_len: usize },
    #[error("trigger patterns must be disjoint across classes; {0:?} appears twice")]
    PatternsOverlap(Vec<usize>),
    #[error("synthetic spec invalid: {0}")]
    BadSynthSpec(String),
    #[error("unknown corpus preset {0:?}; known presets: ngram, xor-pair")]
    UnknownPreset(String),
}

/// Half-open token index interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

/// Class index for classification or a real score in [0,1] for regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn as_class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Score(_) => None,
        }
    }

    pub fn as_score(&self) -> f64 {
        match self {
            Label::Class(c) => *c as f64,
            Label::Score(s) => *s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationales: Option<Vec<Span>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
}

impl Instance {
    fn validate(&self) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err("empty token list".into());
        }
        if let Label::Score(s) = self.label {
            if !(0.0..=1.0).contains(&s) || !s.is_finite() {
                return Err(format!("regression label {s} outside [0,1]"));
            }
        }
        if let Some(spans) = &self.rationales {
            for sp in spans {
                if sp.start >= sp.end || sp.end > self.tokens.len() {
                    return Err(format!(
                        "rationale [{}, {}) out of bounds for {} tokens",
                        sp.start,
                        sp.end,
                        self.tokens.len()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Cap the instance at `max_len` tokens, clipping or dropping spans that
    /// reach past the cap. Returns true when anything was cut.
    fn truncate(&mut self, max_len: usize) -> bool {
        if self.tokens.len() <= max_len {
            return false;
        }
        self.tokens.truncate(max_len);
        if let Some(spans) = &mut self.rationales {
            spans.retain(|s| s.start < max_len);
            for s in spans.iter_mut() {
                s.end = s.end.min(max_len);
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub instances: Vec<Instance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.instances.iter().map(|i| i.tokens.len()).sum()
    }

    /// Number of classes implied by the labels (max class index + 1).
    pub fn num_classes(&self) -> usize {
        self.instances
            .iter()
            .filter_map(|i| i.label.as_class())
            .max()
            .map(|m| m + 1)
            .unwrap_or(0)
    }

    pub fn has_gold_spans(&self) -> bool {
        self.instances.iter().any(|i| i.rationales.is_some())
    }

    /// Seeded 8:1:1 shuffle split into (train, dev, test).
    pub fn split(&self, seed: u64) -> (Corpus, Corpus, Corpus) {
        let mut idx: Vec<usize> = (0..self.instances.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_dev = n / 10;
        let n_test = n / 10;
        let take = |ids: &[usize]| Corpus {
            instances: ids.iter().map(|&i| self.instances[i].clone()).collect(),
        };
        let dev = take(&idx[..n_dev]);
        let test = take(&idx[n_dev..n_dev + n_test]);
        let train = take(&idx[n_dev + n_test..]);
        (train, dev, test)
    }

    /// FNV-1a over the canonical JSONL serialization, independent of the
    /// incidental formatting of the source file.
    pub fn hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instance serialization");
            h = fnv1a64_continue(h, line.as_bytes());
            h = fnv1a64_continue(h, b"\n");
        }
        h
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub truncated: usize,
    /// 1-based line number and reason for every rejected line.
    pub rejected: Vec<(usize, String)>,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<(Corpus, LoadReport), DataError> {
    let path_str = path.as_ref().display().to_string();
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut report = LoadReport::default();
    let mut instances = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Instance>(line) {
            Ok(mut inst) => match inst.validate() {
                Ok(()) => {
                    if inst.truncate(MAX_SEQ_LEN) {
                        report.truncated += 1;
                    }
                    report.loaded += 1;
                    instances.push(inst);
                }
                Err(msg) => report.rejected.push((lineno, msg)),
            },
            Err(e) => report.rejected.push((lineno, e.to_string())),
        }
    }
    if instances.is_empty() {
        return Err(DataError::NoInstances(path_str));
    }
    Ok((Corpus { instances }, report))
}

pub fn save_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path_str = path.as_ref().display().to_string();
    let mut out = String::new();
    for inst in &corpus.instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serialization"));
        out.push('\n');
    }
    fs::write(&path, out).map_err(|source| DataError::Io {
        path: path_str,
        source,
    })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_continue(FNV_OFFSET, bytes)
}

fn fnv1a64_continue(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Token/id bijection with PAD and UNK specials and unigram counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Raw unigram counts per id; UNK carries the mass of all dropped tokens.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Stable hash of the id→token table, for checkpoint/corpus pairing.
    pub fn hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for token in &self.id_to_token {
            h = fnv1a64_continue(h, &(token.len() as u32).to_le_bytes());
            h = fnv1a64_continue(h, token.as_bytes());
        }
        h
    }
}

/// Deterministic vocabulary: ids ordered by descending frequency, ties broken
/// lexicographically; tokens below `min_freq` fold into UNK.
pub fn build_vocab(corpus: &Corpus, min_freq: u64) -> Result<Vocab, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    let mut unk_count = 0u64;
    for inst in &corpus.instances {
        for tok in &inst.tokens {
            if tok == PAD_TOKEN || tok == UNK_TOKEN {
                unk_count += 1;
                continue;
            }
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = Vec::new();
    for (tok, count) in freq {
        if count >= min_freq.max(1) {
            kept.push((tok, count));
        } else {
            unk_count += count;
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut counts = vec![0, unk_count];
    let mut token_to_id = BTreeMap::new();
    token_to_id.insert(PAD_TOKEN.to_string(), PAD_ID);
    token_to_id.insert(UNK_TOKEN.to_string(), UNK_ID);
    for (tok, count) in kept {
        token_to_id.insert(tok.to_string(), id_to_token.len());
        id_to_token.push(tok.to_string());
        counts.push(count);
    }
    Ok(Vocab {
        token_to_id,
        id_to_token,
        counts,
    })
}

/// An instance mapped into id space, ready for the models.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub ids: Vec<usize>,
    pub label: Label,
    pub gold: Option<Vec<Span>>,
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab) -> Vec<EncodedInstance> {
    corpus
        .instances
        .iter()
        .map(|inst| EncodedInstance {
            ids: vocab.encode(&inst.tokens),
            label: inst.label,
            gold: inst.rationales.clone(),
        })
        .collect()
}

/// Recipe for a synthetic corpus: filler sequences with exactly one trigger
/// pattern planted per instance; the label is the trigger's class and the
/// gold rationale is the trigger span.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// patterns[c] lists the trigger token-index n-grams for class c.
    pub patterns: Vec<Vec<Vec<usize>>>,
    /// Probability that a filler position carries a stray trigger-alphabet
    /// token (never forming a complete pattern).
    pub noise_rate: f64,
    pub n_instances: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn preset(name: &str, n_instances: usize, seed: u64) -> Result<SynthSpec, DataError> {
        let patterns = match name {
            "ngram" => vec![vec![vec![2, 3]], vec![vec![4, 5]]],
            "xor-pair" => vec![
                vec![vec![2, 4, 2], vec![3, 4, 3]],
                vec![vec![2, 4, 3], vec![3, 4, 2]],
            ],
            other => return Err(DataError::UnknownPreset(other.to_string())),
        };
        Ok(SynthSpec {
            vocab_size: 200,
            min_len: 20,
            max_len: 40,
            patterns,
            noise_rate: 0.0,
            n_instances,
            seed,
        })
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_instances == 0 {
            return Err(DataError::BadSynthSpec("n_instances must be > 0".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::BadSynthSpec(format!(
                "bad length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.patterns.iter().all(|c| c.is_empty()) {
            return Err(DataError::BadSynthSpec("no trigger patterns".into()));
        }
        let mut seen: Vec<(&Vec<usize>, usize)> = Vec::new();
        for (class, pats) in self.patterns.iter().enumerate() {
            for pat in pats {
                if pat.is_empty() {
                    return Err(DataError::BadSynthSpec("empty trigger pattern".into()));
                }
                if pat.len() > self.min_len {
                    return Err(DataError::PatternTooLong {
                        pattern: pat.len(),
                        min_len: self.min_len,
                    });
                }
                if let Some(tok) = pat.iter().find(|&&t| t >= self.vocab_size) {
                    return Err(DataError::BadSynthSpec(format!(
                        "pattern token {tok} outside vocab of {}",
                        self.vocab_size
                    )));
                }
                if let Some((_, other)) = seen.iter().find(|(p, c)| *p == pat && *c != class) {
                    let _ = other;
                    return Err(DataError::PatternsOverlap(pat.clone()));
                }
                seen.push((pat, class));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(DataError::BadSynthSpec(format!(
                "noise_rate {} outside [0,1]",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

fn synth_token(index: usize) -> String {
    format!("t{index:04}")
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let trigger_alphabet: Vec<usize> = {
        let mut v: Vec<usize> = spec
            .patterns
            .iter()
            .flatten()
            .flatten()
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let fillers: Vec<usize> = (0..spec.vocab_size)
        .filter(|t| !trigger_alphabet.contains(t))
        .collect();
    if fillers.is_empty() {
        return Err(DataError::BadSynthSpec(
            "vocab has no filler tokens outside the trigger alphabet".into(),
        ));
    }
    let all_patterns: Vec<&Vec<usize>> = spec.patterns.iter().flatten().collect();
    let n_classes = spec.patterns.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut instances = Vec::with_capacity(spec.n_instances);
    for _ in 0..spec.n_instances {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let class = loop {
            let c = rng.gen_range(0..n_classes);
            if !spec.patterns[c].is_empty() {
                break c;
            }
        };
        let pat = &spec.patterns[class][rng.gen_range(0..spec.patterns[class].len())];
        let pos = rng.gen_range(0..=len - pat.len());
        let mut ids: Vec<usize> = (0..len)
            .map(|_| fillers[rng.gen_range(0..fillers.len())])
            .collect();
        let base = ids.clone();
        ids[pos..pos + pat.len()].copy_from_slice(pat);
        if spec.noise_rate > 0.0 {
            for i in 0..len {
                if i >= pos && i < pos + pat.len() {
                    continue;
                }
                if rng.gen::<f64>() < spec.noise_rate {
                    ids[i] = trigger_alphabet[rng.gen_range(0..trigger_alphabet.len())];
                }
            }
            scrub_stray_patterns(&mut ids, &base, &all_patterns, pos, pat.len());
        }
        instances.push(Instance {
            tokens: ids.iter().map(|&t| synth_token(t)).collect(),
            label: Label::Class(class),
            rationales: Some(vec![Span::new(pos, pos + pat.len())]),
            aspect: None,
        });
    }
    Ok(Corpus { instances })
}

/// Remove any accidental complete trigger window outside the planted span by
/// restoring its noise positions to the original filler draw. Restoration
/// only removes trigger-alphabet tokens, so it cannot mint new matches.
fn scrub_stray_patterns(
    ids: &mut [usize],
    base: &[usize],
    patterns: &[&Vec<usize>],
    planted_pos: usize,
    planted_len: usize,
) {
    loop {
        let mut dirty = false;
        for pat in patterns {
            if pat.len() > ids.len() {
                continue;
            }
            for start in 0..=ids.len() - pat.len() {
                if start >= planted_pos && start + pat.len() <= planted_pos + planted_len {
                    continue;
                }
                if &ids[start..start + pat.len()] == pat.as_slice() {
                    for i in start..start + pat.len() {
                        if i < planted_pos || i >= planted_pos + planted_len {
                            ids[i] = base[i];
                        }
                    }
                    dirty = true;
                }
            }
        }
        if !dirty {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("infocal_data_test_{name}_{}", std::process::id()));
        p
    }

    #[test]
    fn parses_schema_line_with_rationale() {
        let p = tmp_path("schema");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(f, r#"{{"tokens":["a","b"],"label":1,"rationales":[[0,1]]}}"#).unwrap();
        drop(f);
        let (corpus, report) = load_jsonl(&p).unwrap();
        fs::remove_file(&p).unwrap();
        assert_eq!(report.loaded, 1);
        assert!(report.rejected.is_empty());
        assert_eq!(corpus.instances[0].label, Label::Class(1));
        assert_eq!(
            corpus.instances[0].rationales,
            Some(vec![Span::new(0, 1)])
        );
    }

    #[test]
    fn rejects_out_of_bounds_rationale_with_line_number() {
        let p = tmp_path("oob");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(f, r#"{{"tokens":["a","b"],"label":0}}"#).unwrap();
        writeln!(f, r#"{{"tokens":["a","b"],"label":0,"rationales":[[5,9]]}}"#).unwrap();
        drop(f);
        let (corpus, report) = load_jsonl(&p).unwrap();
        fs::remove_file(&p).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].0, 2);
        assert!(report.rejected[0].1.contains("out of bounds"));
    }

    #[test]
    fn empty_file_is_an_error() {
        let p = tmp_path("empty");
        fs::File::create(&p).unwrap();
        let err = load_jsonl(&p).unwrap_err();
        fs::remove_file(&p).unwrap();
        assert!(matches!(err, DataError::NoInstances(_)));
    }

    #[test]
    fn save_then_load_round_trips() {
        let corpus = Corpus {
            instances: vec![
                Instance {
                    tokens: vec!["x".into(), "y".into(), "z".into()],
                    label: Label::Class(0),
                    rationales: Some(vec![Span::new(1, 3)]),
                    aspect: Some("look".into()),
                },
                Instance {
                    tokens: vec!["u".into(), "v".into()],
                    label: Label::Score(0.25),
                    rationales: None,
                    aspect: None,
                },
            ],
        };
        let p = tmp_path("roundtrip");
        save_jsonl(&corpus, &p).unwrap();
        let (back, report) = load_jsonl(&p).unwrap();
        fs::remove_file(&p).unwrap();
        assert!(report.rejected.is_empty());
        assert_eq!(back, corpus);
        assert_eq!(back.hash(), corpus.hash());
    }

    #[test]
    fn over_long_instances_are_truncated_and_counted() {
        let long = Instance {
            tokens: (0..MAX_SEQ_LEN + 7).map(|i| format!("w{i}")).collect(),
            label: Label::Class(0),
            rationales: Some(vec![Span::new(0, 2), Span::new(MAX_SEQ_LEN + 1, MAX_SEQ_LEN + 3)]),
            aspect: None,
        };
        let corpus = Corpus {
            instances: vec![long],
        };
        let p = tmp_path("trunc");
        save_jsonl(&corpus, &p).unwrap();
        let (back, report) = load_jsonl(&p).unwrap();
        fs::remove_file(&p).unwrap();
        assert_eq!(report.truncated, 1);
        assert_eq!(back.instances[0].tokens.len(), MAX_SEQ_LEN);
        assert_eq!(back.instances[0].rationales, Some(vec![Span::new(0, 2)]));
    }

    fn tiny_corpus(lines: &[&str]) -> Corpus {
        Corpus {
            instances: lines
                .iter()
                .map(|l| Instance {
                    tokens: l.split(' ').map(String::from).collect(),
                    label: Label::Class(0),
                    rationales: None,
                    aspect: None,
                })
                .collect(),
        }
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let corpus = tiny_corpus(&["b a a", "c b"]);
        let vocab = build_vocab(&corpus, 1).unwrap();
        assert_eq!(vocab.id(PAD_TOKEN), PAD_ID);
        assert_eq!(vocab.id(UNK_TOKEN), UNK_ID);
        assert_eq!(vocab.id("a"), 2);
        assert_eq!(vocab.id("b"), 3);
        assert_eq!(vocab.id("c"), 4);
        assert_eq!(vocab.counts()[2], 2);
        assert_eq!(vocab.counts()[4], 1);
    }

    #[test]
    fn below_min_freq_tokens_fold_into_unk() {
        let corpus = tiny_corpus(&["a a b"]);
        let vocab = build_vocab(&corpus, 2).unwrap();
        assert_eq!(vocab.id("a"), 2);
        assert_eq!(vocab.id("b"), UNK_ID);
        assert_eq!(vocab.counts()[UNK_ID], 1);
        let again = build_vocab(&corpus, 2).unwrap();
        assert_eq!(vocab, again);
    }

    #[test]
    fn split_is_disjoint_and_ratioed() {
        let corpus = tiny_corpus(&vec!["a b"; 100]);
        let (train, dev, test) = corpus.split(7);
        assert_eq!(train.len(), 80);
        assert_eq!(dev.len(), 10);
        assert_eq!(test.len(), 10);
        let (train2, _, _) = corpus.split(7);
        assert_eq!(train, train2);
    }

    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn synthetic_plants_exactly_one_consistent_trigger() {
        let spec = SynthSpec::preset("xor-pair", 300, 5).unwrap();
        let corpus = generate_synthetic(&spec).unwrap();
        assert_eq!(corpus.len(), 300);
        let vocab_ids = |inst: &Instance| -> Vec<usize> {
            inst.tokens
                .iter()
                .map(|t| t[1..].parse::<usize>().unwrap())
                .collect()
        };
        for inst in &corpus.instances {
            let ids = vocab_ids(inst);
            let span = inst.rationales.as_ref().unwrap()[0];
            let window = &ids[span.start..span.end];
            let class = inst.label.as_class().unwrap();
            assert!(
                spec.patterns[class].iter().any(|p| p.as_slice() == window),
                "planted window {window:?} not a class-{class} pattern"
            );
            let mut matches = 0;
            for pat in spec.patterns.iter().flatten() {
                for start in 0..=ids.len() - pat.len() {
                    if &ids[start..start + pat.len()] == pat.as_slice() {
                        matches += 1;
                    }
                }
            }
            assert_eq!(matches, 1, "stray trigger window in {ids:?}");
        }
    }

    #[test]
    fn synthetic_noise_never_completes_a_pattern() {
        let mut spec = SynthSpec::preset("xor-pair", 200, 9).unwrap();
        spec.noise_rate = 0.15;
        let corpus = generate_synthetic(&spec).unwrap();
        for inst in &corpus.instances {
            let ids: Vec<usize> = inst
                .tokens
                .iter()
                .map(|t| t[1..].parse::<usize>().unwrap())
                .collect();
            let span = inst.rationales.as_ref().unwrap()[0];
            for pat in spec.patterns.iter().flatten() {
                for start in 0..=ids.len() - pat.len() {
                    if start == span.start {
                        continue;
                    }
                    assert_ne!(
                        &ids[start..start + pat.len()],
                        pat.as_slice(),
                        "noise completed a trigger in {ids:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic_and_balanced() {
        let spec = SynthSpec::preset("ngram", 10_000, 3).unwrap();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let ones = a
            .instances
            .iter()
            .filter(|i| i.label == Label::Class(1))
            .count();
        let frac = ones as f64 / a.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "class balance off: {frac}");
    }

    #[test]
    fn overlong_pattern_and_shared_pattern_are_rejected() {
        let mut spec = SynthSpec::preset("ngram", 10, 1).unwrap();
        spec.patterns[0][0] = (0..spec.min_len + 1).map(|i| i % 5).collect();
        assert!(matches!(
            generate_synthetic(&spec),
            Err(DataError::PatternTooLong { .. })
        ));
        let mut spec = SynthSpec::preset("ngram", 10, 1).unwrap();
        spec.patterns[1] = spec.patterns[0].clone();
        assert!(matches!(
            generate_synthetic(&spec),
            Err(DataError::PatternsOverlap(_))
        ));
    }
}
