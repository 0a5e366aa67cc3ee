//! Random-context baselines and readability statistics.
//!
//! Words are whitespace-separated tokens everywhere in this module. The four
//! length-controlled generators (characters, words, salad, wiki) emit exactly
//! the requested number of words; the shuffle baseline reassigns whole
//! contexts between statements as a derangement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actdump::ContextKind;
use crate::exec::Exec;

/// Placeholder used when a salad template slot has no lexicon words.
pub const PLACEHOLDER_WORD: &str = "word";
pub const MIN_CHAR_TOKEN: usize = 2;
pub const MAX_CHAR_TOKEN: usize = 12;

#[derive(Debug, Error)]
pub enum ContextGenError {
    #[error("target word count must be at least 1")]
    ZeroTarget,
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("corpus has {available} words, need {needed}")]
    CorpusTooShort { available: usize, needed: usize },
    #[error("shuffle needs at least 2 contexts, got {0}")]
    TooFewContexts(usize),
    #[error("text is empty")]
    EmptyText,
    #[error("salad template set is empty")]
    NoTemplates,
    #[error("{0:?} is not a random-context kind")]
    NotRandomKind(ContextKind),
    #[error("context for statement {0:?} has no words")]
    EmptyContext(String),
}

pub type Result<T> = std::result::Result<T, ContextGenError>;

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `target_words` tokens of 2–12 uniformly random lowercase ASCII letters.
pub fn gen_random_chars(target_words: usize, seed: u64) -> Result<String> {
    if target_words == 0 {
        return Err(ContextGenError::ZeroTarget);
    }
    let mut rng = rng_for(seed);
    let words: Vec<String> = (0..target_words)
        .map(|_| {
            let len = rng.random_range(MIN_CHAR_TOKEN..=MAX_CHAR_TOKEN);
            (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
        })
        .collect();
    Ok(words.join(" "))
}

/// `target_words` words drawn uniformly with replacement from `lexicon`.
pub fn gen_random_words<S: AsRef<str>>(target_words: usize, lexicon: &[S], seed: u64) -> Result<String> {
    if lexicon.is_empty() {
        return Err(ContextGenError::EmptyLexicon);
    }
    if target_words == 0 {
        return Err(ContextGenError::ZeroTarget);
    }
    let mut rng = rng_for(seed);
    let words: Vec<&str> = (0..target_words)
        .map(|_| lexicon[rng.random_range(0..lexicon.len())].as_ref())
        .collect();
    Ok(words.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosTag {
    Article,
    Adjective,
    Noun,
    Verb,
    Adverb,
}

impl PosTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "article" | "art" | "det" | "dt" => Some(PosTag::Article),
            "adjective" | "adj" | "jj" => Some(PosTag::Adjective),
            "noun" | "n" | "nn" => Some(PosTag::Noun),
            "verb" | "v" | "vb" => Some(PosTag::Verb),
            "adverb" | "adv" | "rb" => Some(PosTag::Adverb),
            _ => None,
        }
    }
}

/// Word list with optional part-of-speech tags.
///
/// File format: one entry per line, `word` or `word<whitespace>tag`. Blank
/// lines and lines starting with `#` are ignored. Every word feeds the
/// random-word generator; tagged words also feed the salad generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub tagged: BTreeMap<PosTag, Vec<String>>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Self {
        let mut lex = Lexicon::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line").to_string();
            if let Some(tag) = parts.next().and_then(PosTag::parse) {
                lex.tagged.entry(tag).or_default().push(word.clone());
            }
            lex.words.push(word);
        }
        lex
    }

    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        Self { words: words.into_iter().map(Into::into).collect(), tagged: BTreeMap::new() }
    }

    pub fn with_tagged<S: Into<String>>(mut self, tag: PosTag, words: impl IntoIterator<Item = S>) -> Self {
        let entry = self.tagged.entry(tag).or_default();
        for w in words {
            let w = w.into();
            entry.push(w.clone());
            self.words.push(w);
        }
        self
    }
}

/// Sentence structures for the salad generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaladTemplates(pub Vec<Vec<PosTag>>);

impl Default for SaladTemplates {
    fn default() -> Self {
        use PosTag::*;
        Self(vec![
            vec![Article, Adjective, Noun, Verb, Adverb],
            vec![Adjective, Adjective, Noun, Verb, Adverb],
            vec![Article, Noun, Verb, Adverb],
            vec![Adjective, Noun, Verb, Article, Noun],
            vec![Article, Adjective, Noun, Verb, Article, Adjective, Noun],
        ])
    }
}

/// Grammatical but incoherent text: templates are picked at random and their
/// slots filled from the tagged lexicon, with [`PLACEHOLDER_WORD`] for tags
/// that have no entries. The word stream is cut at exactly `target_words`.
pub fn gen_random_salad(
    target_words: usize,
    lexicon: &Lexicon,
    templates: &SaladTemplates,
    seed: u64,
) -> Result<String> {
    if target_words == 0 {
        return Err(ContextGenError::ZeroTarget);
    }
    if templates.0.is_empty() || templates.0.iter().all(Vec::is_empty) {
        return Err(ContextGenError::NoTemplates);
    }
    let mut rng = rng_for(seed);
    let mut words: Vec<String> = Vec::with_capacity(target_words);
    while words.len() < target_words {
        let template = &templates.0[rng.random_range(0..templates.0.len())];
        for (i, tag) in template.iter().enumerate() {
            if words.len() == target_words {
                break;
            }
            let mut word = match lexicon.tagged.get(tag) {
                Some(pool) if !pool.is_empty() => pool[rng.random_range(0..pool.len())].clone(),
                _ => PLACEHOLDER_WORD.to_string(),
            };
            if i + 1 == template.len() {
                word.push('.');
            }
            words.push(word);
        }
    }
    Ok(words.join(" "))
}

/// A contiguous window of `target_words` words from `corpus`, starting at a
/// uniformly random word offset.
pub fn gen_random_wiki(target_words: usize, corpus: &str, seed: u64) -> Result<String> {
    let words: Vec<&str> = corpus.split_whitespace().collect();
    gen_random_wiki_words(target_words, &words, seed)
}

pub fn gen_random_wiki_words(target_words: usize, corpus_words: &[&str], seed: u64) -> Result<String> {
    if target_words == 0 {
        return Err(ContextGenError::ZeroTarget);
    }
    if corpus_words.len() < target_words {
        return Err(ContextGenError::CorpusTooShort { available: corpus_words.len(), needed: target_words });
    }
    let start = wiki_offset(target_words, corpus_words.len(), seed);
    Ok(corpus_words[start..start + target_words].join(" "))
}

fn wiki_offset(target_words: usize, corpus_len: usize, seed: u64) -> usize {
    rng_for(seed).random_range(0..=corpus_len - target_words)
}

/// A uniformly random derangement of `0..n` by rejection sampling.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(ContextGenError::TooFewContexts(n));
    }
    let mut rng = rng_for(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Reassign contexts so that no statement keeps its own: entry `i` of the
/// result pairs statement `i` with the context of statement `perm[i]`.
pub fn gen_shuffle(contexts: &[(String, String)], seed: u64) -> Result<Vec<(String, String)>> {
    let perm = derangement(contexts.len(), seed)?;
    Ok(contexts
        .iter()
        .zip(&perm)
        .map(|((id, _), &j)| (id.clone(), contexts[j].1.clone()))
        .collect())
}

/// One input row: a statement and its relevant context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextInput {
    pub statement_id: String,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub statement_id: String,
    pub context: String,
    pub kind: ContextKind,
    pub word_count: usize,
}

impl ContextRecord {
    pub fn new(statement_id: impl Into<String>, context: String, kind: ContextKind) -> Self {
        let word_count = word_count(&context);
        Self { statement_id: statement_id.into(), context, kind, word_count }
    }
}

/// External material the generators draw from.
#[derive(Debug, Clone, Default)]
pub struct GeneratorResources {
    pub lexicon: Lexicon,
    pub templates: SaladTemplates,
    pub corpus: String,
}

/// Build a random-context record for every input. Length-controlled kinds use
/// the per-record seed `seed ^ index`, so the output does not depend on `exec`.
pub fn generate(
    kind: ContextKind,
    inputs: &[ContextInput],
    resources: &GeneratorResources,
    seed: u64,
    exec: Exec,
) -> Result<Vec<ContextRecord>> {
    match kind {
        ContextKind::RandShuffle => {
            let pairs: Vec<(String, String)> =
                inputs.iter().map(|r| (r.statement_id.clone(), r.context.clone())).collect();
            Ok(gen_shuffle(&pairs, seed)?
                .into_iter()
                .map(|(id, ctx)| ContextRecord::new(id, ctx, kind))
                .collect())
        }
        ContextKind::RandChar | ContextKind::RandWord | ContextKind::RandSalad | ContextKind::RandWiki => {
            let corpus_words: Vec<&str> = resources.corpus.split_whitespace().collect();
            exec.try_map(inputs.len(), |i| {
                let input = &inputs[i];
                let target = word_count(&input.context);
                if target == 0 {
                    return Err(ContextGenError::EmptyContext(input.statement_id.clone()));
                }
                let record_seed = seed ^ i as u64;
                let text = match kind {
                    ContextKind::RandChar => gen_random_chars(target, record_seed),
                    ContextKind::RandWord => gen_random_words(target, &resources.lexicon.words, record_seed),
                    ContextKind::RandSalad => {
                        gen_random_salad(target, &resources.lexicon, &resources.templates, record_seed)
                    }
                    _ => gen_random_wiki_words(target, &corpus_words, record_seed),
                }?;
                Ok(ContextRecord::new(input.statement_id.clone(), text, kind))
            })
        }
        other => Err(ContextGenError::NotRandomKind(other)),
    }
}

/// Vowel-group syllable estimate: maximal runs of `aeiouy`, minus one for a
/// trailing silent `e`, at least one.
pub fn count_syllables(word: &str) -> usize {
    let letters: Vec<char> = word
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut groups = 0usize;
    let mut prev_vowel = false;
    for &c in &letters {
        let v = is_vowel(c);
        if v && !prev_vowel {
            groups += 1;
        }
        prev_vowel = v;
    }
    if letters.last() == Some(&'e') && groups > 0 {
        groups -= 1;
    }
    groups.max(1)
}

/// Flesch Reading Ease:
/// `206.835 − 1.015·(words/sentences) − 84.6·(syllables/words)`.
///
/// Sentences end at runs of `.`, `!` or `?`; trailing text without a
/// terminator counts as one more sentence.
pub fn flesch_score(text: &str) -> Result<f64> {
    let words: Vec<&str> = text
        .split_whitespace()
        .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
        .collect();
    if words.is_empty() {
        return Err(ContextGenError::EmptyText);
    }
    let sentences = count_sentences(text).max(1);
    let syllables: usize = words.iter().map(|w| count_syllables(w)).sum();
    let (w, s, y) = (words.len() as f64, sentences as f64, syllables as f64);
    Ok(206.835 - 1.015 * (w / s) - 84.6 * (y / w))
}

fn count_sentences(text: &str) -> usize {
    let mut count = 0;
    let mut pending = false;
    let mut in_terminator = false;
    for c in text.chars() {
        if matches!(c, '.' | '!' | '?') {
            if pending && !in_terminator {
                count += 1;
                pending = false;
            }
            in_terminator = true;
        } else {
            in_terminator = false;
            if c.is_alphanumeric() {
                pending = true;
            }
        }
    }
    if pending {
        count += 1;
    }
    count
}

/// Length and readability summary of a set of contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_rows: usize,
    pub mean_words: f64,
    /// Mean of the per-row Flesch scores over rows with at least one word.
    pub flesch: f64,
}

pub fn corpus_stats<S: AsRef<str>>(texts: &[S]) -> Result<CorpusStats> {
    if texts.is_empty() {
        return Err(ContextGenError::EmptyText);
    }
    let counts: Vec<f64> = texts.iter().map(|t| word_count(t.as_ref()) as f64).collect();
    let scores: Vec<f64> = texts.iter().filter_map(|t| flesch_score(t.as_ref()).ok()).collect();
    if scores.is_empty() {
        return Err(ContextGenError::EmptyText);
    }
    Ok(CorpusStats {
        n_rows: texts.len(),
        mean_words: crate::numeric::pairwise_sum(&counts) / counts.len() as f64,
        flesch: crate::numeric::pairwise_sum(&scores) / scores.len() as f64,
    })
}
