//! Segment-wise preference sampling and its coarse/fine/rollout baselines.
//!
//! The core loop samples k candidate translations per line under the chosen
//! prefix, deduplicates, drops the bottom quality slice, and keeps the
//! min/max-penalty pair. Whole-response sampling (coarse), two-pass
//! segment-wise sampling (fine), and single-sample rollouts (for the PPO
//! baseline) reuse the same machinery.

use crate::corpus::{self, Document, LinePair, QualityKey};
use crate::duration::{penalty_unchecked, DurationOracle};
use crate::policy::sample::{PrefixSampler, SamplerConfig};
use crate::policy::sft::encode_prompt;
use crate::policy::vocab::Vocabulary;
use crate::policy::{PolicyError, PolicyParams};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("need at least 2 surviving candidates to select a pair, got {0}")]
    InsufficientDiversity(usize),
    #[error("sampling needs k >= 2, got {0}")]
    BadK(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error("sampled file does not match the query split: {0}")]
    Mismatch(String),
}

/// Deterministic stream-seed derivation (splitmix-style), so per-document
/// and per-line RNG streams are stable across platforms and worker counts.
pub fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(27).wrapping_mul(0x94D0_49BB_1331_11EB);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h
}

const PASS_CHOSEN: u64 = 0;
const PASS_REJECTED: u64 = 1;

/// Reference-free quality scorer over the generator's ground truth: target
/// tokens must be in-order synonyms of the source tokens; function words
/// are neutral. Scores land in [0, 100] and the reference translation of
/// any line scores exactly 100.
#[derive(Debug, Clone)]
pub struct QualityOracle {
    synonyms: BTreeMap<String, BTreeSet<String>>,
    function_words: BTreeSet<String>,
}

impl QualityOracle {
    pub fn new(key: &QualityKey) -> Self {
        Self {
            synonyms: key
                .synonyms
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
                .collect(),
            function_words: key.function_words.iter().cloned().collect(),
        }
    }

    pub fn score(&self, source_text: &str, target_text: &str) -> f64 {
        let src: Vec<&str> = source_text.split_whitespace().collect();
        let content: Vec<&str> = target_text
            .split_whitespace()
            .filter(|t| !self.function_words.contains(*t))
            .collect();
        if src.is_empty() {
            return 0.0;
        }
        let matched = src
            .iter()
            .zip(&content)
            .filter(|(s, c)| {
                self.synonyms
                    .get(**s)
                    .map(|set| set.contains(**c))
                    .unwrap_or(false)
            })
            .count();
        100.0 * matched as f64 / src.len().max(content.len()) as f64
    }
}

/// Mean over the configured scorers. One synthetic scorer by default; the
/// two-scorer averaging of the original selection table is preserved when
/// two are configured.
fn quality_of(scorers: &[QualityOracle], source: &str, target: &str) -> f64 {
    if scorers.is_empty() {
        return 0.0;
    }
    scorers.iter().map(|s| s.score(source, target)).sum::<f64>() / scorers.len() as f64
}

/// Everything candidate scoring needs, precomputed against one vocabulary.
pub struct SamplingContext<'a> {
    pub duration_oracle: &'a DurationOracle,
    pub scorers: Vec<QualityOracle>,
    pub vocab: &'a Vocabulary,
    durations_by_id: Vec<f64>,
}

impl<'a> SamplingContext<'a> {
    pub fn new(
        duration_oracle: &'a DurationOracle,
        key: &QualityKey,
        vocab: &'a Vocabulary,
    ) -> Self {
        Self {
            duration_oracle,
            scorers: vec![QualityOracle::new(key)],
            vocab,
            durations_by_id: vocab.durations_by_id(duration_oracle),
        }
    }

    pub fn duration_of_ids(&self, tokens: &[u32]) -> f64 {
        self.duration_oracle.pause
            + tokens
                .iter()
                .map(|&t| self.durations_by_id[t as usize])
                .sum::<f64>()
    }
}

/// One candidate translation of a line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub tokens: Vec<u32>,
    pub duration: f64,
    pub quality: f64,
    pub penalty: f64,
}

/// The k-sample result for one line after dedup and the bottom-20% discard.
///
/// `dedup_count` is the number of distinct texts before the quality discard
/// (the diversity count the thresholds gate on); `candidates` holds the
/// survivors, `discarded` the quality cut.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub line_index: usize,
    pub candidates: Vec<Candidate>,
    pub dedup_count: usize,
    pub discarded: Vec<Candidate>,
}

/// Candidate before penalty assignment.
#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub text: String,
    pub tokens: Vec<u32>,
    pub duration: f64,
    pub quality: f64,
}

/// Dedup, rank, discard, and measure raw samples into a [`CandidateSet`].
/// The discard count is floor(0.2 * distinct), reduced so that at least two
/// candidates survive whenever two distinct ones exist.
pub fn filter_and_score(line_index: usize, raw: Vec<ScoredCandidate>, dur_s: f64) -> CandidateSet {
    // Dedup by exact text, first occurrence wins.
    let mut seen = BTreeSet::new();
    let mut distinct: Vec<ScoredCandidate> = Vec::with_capacity(raw.len());
    for c in raw {
        if seen.insert(c.text.clone()) {
            distinct.push(c);
        }
    }
    let dedup_count = distinct.len();

    let mut discard_n = (0.2 * dedup_count as f64).floor() as usize;
    while discard_n > 0 && dedup_count - discard_n < 2 {
        discard_n -= 1;
    }

    // Rank ascending by quality (ties by text) and cut the bottom.
    let mut order: Vec<usize> = (0..distinct.len()).collect();
    order.sort_by(|&a, &b| {
        distinct[a]
            .quality
            .partial_cmp(&distinct[b].quality)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| distinct[a].text.cmp(&distinct[b].text))
    });
    let cut: BTreeSet<usize> = order[..discard_n].iter().copied().collect();

    let mut candidates = Vec::with_capacity(dedup_count - discard_n);
    let mut discarded = Vec::with_capacity(discard_n);
    for (i, c) in distinct.into_iter().enumerate() {
        let cand = Candidate {
            penalty: penalty_unchecked(dur_s, c.duration),
            text: c.text,
            tokens: c.tokens,
            duration: c.duration,
            quality: c.quality,
        };
        if cut.contains(&i) {
            discarded.push(cand);
        } else {
            candidates.push(cand);
        }
    }
    CandidateSet {
        line_index,
        candidates,
        dedup_count,
        discarded,
    }
}

/// Chosen = minimum penalty, rejected = maximum penalty. Penalty ties fall
/// back to higher quality then text order; the text order is mirrored
/// between the two ends so the pair is always two distinct candidates.
pub fn select_pair(set: &CandidateSet) -> Result<(usize, usize), SamplingError> {
    if set.candidates.len() < 2 {
        return Err(SamplingError::InsufficientDiversity(set.candidates.len()));
    }
    let key_asc = |a: &Candidate, b: &Candidate| {
        a.penalty
            .partial_cmp(&b.penalty)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                b.quality
                    .partial_cmp(&a.quality)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    };
    let chosen = set
        .candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| key_asc(a, b).then_with(|| a.text.cmp(&b.text)))
        .map(|(i, _)| i)
        .expect("non-empty");
    let rejected = set
        .candidates
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| key_asc(a, b).then_with(|| b.text.cmp(&a.text)))
        .map(|(i, _)| i)
        .expect("non-empty");
    debug_assert_ne!(chosen, rejected);
    Ok((chosen, rejected))
}

/// Keep a line for training iff it sampled diversely enough and the pair's
/// penalty gap is informative. Both thresholds are inclusive.
pub fn diversity_filter(dedup_count: usize, penalty_gap: f64, eps1: usize, eps2: f64) -> bool {
    dedup_count >= eps1 && penalty_gap >= eps2
}

/// Sample k candidates for one line under an explicit prefix.
pub fn sample_line_candidates(
    policy: &PolicyParams,
    prefix: &[u32],
    line: &LinePair,
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    seed: u64,
) -> Result<CandidateSet, SamplingError> {
    if k < 2 {
        return Err(SamplingError::BadK(k));
    }
    let mut sampler = PrefixSampler::new(policy, prefix)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    sample_candidates_with(policy, &mut sampler, line, 0, k, cfg, ctx, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn sample_candidates_with(
    policy: &PolicyParams,
    sampler: &mut PrefixSampler,
    line: &LinePair,
    line_index: usize,
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    rng: &mut ChaCha12Rng,
) -> Result<CandidateSet, SamplingError> {
    let close = policy.vocab.close_paren();
    let mut raw = Vec::with_capacity(k);
    for _ in 0..k {
        let tokens = sampler.sample_segment(cfg, close, rng)?;
        let text = policy.vocab.decode(&tokens);
        let duration = ctx.duration_of_ids(&tokens);
        let quality = quality_of(&ctx.scorers, &line.source, &text);
        raw.push(ScoredCandidate {
            text,
            tokens,
            duration,
            quality,
        });
    }
    Ok(filter_and_score(line_index, raw, line.dur_s))
}

/// A candidate bound into a sampled-dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub text: String,
    pub tokens: Vec<u32>,
    pub duration: f64,
    pub quality: f64,
    pub penalty: f64,
}

impl From<Candidate> for CandidateInfo {
    fn from(c: Candidate) -> Self {
        Self {
            text: c.text,
            tokens: c.tokens,
            duration: c.duration,
            quality: c.quality,
            penalty: c.penalty,
        }
    }
}

/// Per-line sampling outcome. Every line records the chosen continuation —
/// it always extends the prefix chain, retained or not; `rejected` is
/// present when a pair was selectable, and `retained` marks lines that pass
/// the diversity filter and feed training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSample {
    pub line_index: usize,
    pub dur_s: f64,
    pub dedup_count: usize,
    pub chosen: CandidateInfo,
    pub rejected: Option<CandidateInfo>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentSample {
    pub prompt_id: String,
    pub prompt: Vec<u32>,
    pub lines: Vec<LineSample>,
}

/// One training pair with its materialized prefix. The prefix ends with the
/// open paren; the segment is the bare target tokens.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub line_index: usize,
    pub prefix: Vec<u32>,
    pub chosen: CandidateInfo,
    pub rejected: CandidateInfo,
    pub penalty_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SampledDataset {
    pub documents: Vec<DocumentSample>,
    /// Total segment-sampling calls issued (cost accounting).
    pub segment_samples: usize,
}

impl DocumentSample {
    /// Prefix for line i: prompt, then each earlier line rendered with its
    /// chosen continuation, then the i-th source and the open paren.
    pub fn prefix_for_line(&self, vocab: &Vocabulary, doc: &Document, i: usize) -> Vec<u32> {
        let mut prefix = self.prompt.clone();
        for j in 0..i {
            push_line(&mut prefix, vocab, doc, j, &self.lines[j].chosen.tokens);
        }
        prefix.extend(
            vocab
                .encode_text(&doc.lines[i].source)
                .expect("sources encode"),
        );
        prefix.push(vocab.open_paren());
        prefix
    }

    pub fn retained_pairs(&self, vocab: &Vocabulary, doc: &Document) -> Vec<PreferencePair> {
        let mut prefix = self.prompt.clone();
        let mut out = Vec::new();
        for (i, line) in self.lines.iter().enumerate() {
            if line.retained {
                let mut p = prefix.clone();
                p.extend(
                    vocab
                        .encode_text(&doc.lines[i].source)
                        .expect("sources encode"),
                );
                p.push(vocab.open_paren());
                let rejected = line.rejected.clone().expect("retained lines have a pair");
                out.push(PreferencePair {
                    prompt_id: self.prompt_id.clone(),
                    line_index: i,
                    prefix: p,
                    chosen: line.chosen.clone(),
                    rejected: rejected.clone(),
                    penalty_gap: rejected.penalty - line.chosen.penalty,
                });
            }
            push_line(&mut prefix, vocab, doc, i, &line.chosen.tokens);
        }
        out
    }
}

impl SampledDataset {
    pub fn retained_pairs(&self, vocab: &Vocabulary, docs: &[Document]) -> Vec<PreferencePair> {
        let by_id: BTreeMap<&str, &Document> =
            docs.iter().map(|d| (d.prompt_id.as_str(), d)).collect();
        self.documents
            .iter()
            .filter_map(|ds| {
                by_id
                    .get(ds.prompt_id.as_str())
                    .map(|doc| ds.retained_pairs(vocab, doc))
            })
            .flatten()
            .collect()
    }

    pub fn retained_line_count(&self) -> usize {
        self.documents
            .iter()
            .map(|d| d.lines.iter().filter(|l| l.retained).count())
            .sum()
    }

    pub fn line_count(&self) -> usize {
        self.documents.iter().map(|d| d.lines.len()).sum()
    }

    /// Penalties of the chosen translations over retained lines — the
    /// alignment-bound sample.
    pub fn chosen_penalties(&self) -> Vec<f64> {
        self.documents
            .iter()
            .flat_map(|d| {
                d.lines
                    .iter()
                    .filter(|l| l.retained)
                    .map(|l| l.chosen.penalty)
            })
            .collect()
    }

    /// (dur_s, chosen duration) over retained lines, for bound metric rows.
    pub fn chosen_durations(&self) -> Vec<(f64, f64)> {
        self.documents
            .iter()
            .flat_map(|d| {
                d.lines
                    .iter()
                    .filter(|l| l.retained)
                    .map(|l| (l.dur_s, l.chosen.duration))
            })
            .collect()
    }

    pub fn alignment_bound(&self) -> Result<f64, crate::duration::DurationError> {
        crate::duration::alignment_bound(&self.chosen_penalties())
    }
}

/// Append "source ( target ) \n" for line j to a token prefix.
fn push_line(prefix: &mut Vec<u32>, vocab: &Vocabulary, doc: &Document, j: usize, target: &[u32]) {
    prefix.extend(
        vocab
            .encode_text(&doc.lines[j].source)
            .expect("sources encode"),
    );
    prefix.push(vocab.open_paren());
    prefix.extend_from_slice(target);
    prefix.push(vocab.close_paren());
    prefix.push(vocab.newline());
}

/// Thresholds for pair retention.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiversityThresholds {
    pub eps1: usize,
    pub eps2: f64,
}

impl Default for DiversityThresholds {
    fn default() -> Self {
        Self { eps1: 4, eps2: 0.08 }
    }
}

/// Segment-wise preference sampling over the query split.
///
/// Lines dropped by the diversity filter still contribute their chosen
/// continuation to the prefix chain; only training-pair retention is gated.
/// Documents sample independently on per-document RNG streams and merge in
/// document order, so results are identical at any worker count.
pub fn sspo_sample(
    policy: &PolicyParams,
    query: &[Document],
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    thresholds: DiversityThresholds,
    seed: u64,
) -> Result<SampledDataset, SamplingError> {
    if k < 2 {
        return Err(SamplingError::BadK(k));
    }
    let documents: Vec<DocumentSample> = query
        .par_iter()
        .enumerate()
        .map(|(doc_idx, doc)| sample_document(policy, doc, doc_idx, k, cfg, ctx, thresholds, seed))
        .collect::<Result<_, SamplingError>>()?;
    let segment_samples = query.iter().map(|d| d.lines.len()).sum::<usize>() * k;
    Ok(SampledDataset {
        documents,
        segment_samples,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_document(
    policy: &PolicyParams,
    doc: &Document,
    doc_idx: usize,
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    thresholds: DiversityThresholds,
    seed: u64,
) -> Result<DocumentSample, SamplingError> {
    let prompt = encode_prompt(&policy.vocab, doc)?;
    let mut sampler = PrefixSampler::new(policy, &prompt)?;
    let mut lines = Vec::with_capacity(doc.lines.len());
    for (i, line) in doc.lines.iter().enumerate() {
        let mut src = policy.vocab.encode_text(&line.source)?;
        src.push(policy.vocab.open_paren());
        sampler.extend(&src)?;

        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(
            seed,
            &[doc_idx as u64, i as u64, PASS_CHOSEN],
        ));
        let set = sample_candidates_with(policy, &mut sampler, line, i, k, cfg, ctx, &mut rng)?;

        let line_sample = match select_pair(&set) {
            Ok((c, r)) => {
                let chosen = set.candidates[c].clone();
                let rejected = set.candidates[r].clone();
                let gap = rejected.penalty - chosen.penalty;
                LineSample {
                    line_index: i,
                    dur_s: line.dur_s,
                    dedup_count: set.dedup_count,
                    retained: diversity_filter(set.dedup_count, gap, thresholds.eps1, thresholds.eps2),
                    chosen: chosen.into(),
                    rejected: Some(rejected.into()),
                }
            }
            Err(_) => LineSample {
                line_index: i,
                dur_s: line.dur_s,
                dedup_count: set.dedup_count,
                retained: false,
                chosen: set.candidates[0].clone().into(),
                rejected: None,
            },
        };

        let mut tail = line_sample.chosen.tokens.clone();
        tail.push(policy.vocab.close_paren());
        tail.push(policy.vocab.newline());
        sampler.extend(&tail)?;
        lines.push(line_sample);
    }
    Ok(DocumentSample {
        prompt_id: doc.prompt_id.clone(),
        prompt,
        lines,
    })
}

/// A whole-response preference pair for vanilla DPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub prompt_id: String,
    pub prompt: Vec<u32>,
    pub chosen_tokens: Vec<u32>,
    pub rejected_tokens: Vec<u32>,
    pub chosen_penalty_sum: f64,
    pub rejected_penalty_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResponsePairSet {
    pub pairs: Vec<ResponsePair>,
    pub segment_samples: usize,
    /// Responses dropped because some line failed to parse.
    pub unparseable: usize,
    /// Documents skipped for lack of two distinct rankable responses.
    pub skipped_documents: usize,
}

/// Sum of per-line penalties of a fully well-formed response; None when any
/// line fails the format (such responses are excluded from ranking).
fn response_penalty_sum(text: &str, doc: &Document, ctx: &SamplingContext) -> Option<f64> {
    let (resp, flags) = corpus::parse_response(text, doc);
    if !flags.iter().all(|f| *f) {
        return None;
    }
    let mut sum = 0.0;
    for (i, (_, target)) in resp.entries.iter().enumerate() {
        let dur_t = ctx.duration_oracle.duration_of_text(target).ok()?;
        sum += penalty_unchecked(doc.lines[i].dur_s, dur_t);
    }
    Some(sum)
}

/// Min/max-sum selection among rankable responses; ties by index order.
fn select_response_pair(scored: &[(String, f64)]) -> Option<(usize, usize)> {
    if scored.len() < 2 {
        return None;
    }
    let min = scored
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))?
        .0;
    let max = scored
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))?
        .0;
    if min == max {
        return None;
    }
    Some((min, max))
}

/// Coarse-grained sampling: k complete responses per prompt, ranked by the
/// sum of per-line penalties.
pub fn coarse_sample(
    policy: &PolicyParams,
    query: &[Document],
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    seed: u64,
) -> Result<ResponsePairSet, SamplingError> {
    if k < 2 {
        return Err(SamplingError::BadK(k));
    }
    let per_doc: Vec<(Option<ResponsePair>, usize)> = query
        .par_iter()
        .enumerate()
        .map(|(doc_idx, doc)| -> Result<_, SamplingError> {
            let prompt = encode_prompt(&policy.vocab, doc)?;
            let mut sampler = PrefixSampler::new(policy, &prompt)?;
            let budget = corpus::response_token_budget(doc);
            let mut rng =
                ChaCha12Rng::seed_from_u64(stream_seed(seed, &[doc_idx as u64, PASS_CHOSEN]));
            let mut responses: Vec<(String, Vec<u32>)> = Vec::with_capacity(k);
            for _ in 0..k {
                let tokens = sampler.generate(cfg, policy.vocab.eos(), budget, &mut rng)?;
                let text = policy.vocab.decode(&tokens);
                responses.push((text, tokens));
            }
            // Dedup identical responses; all-identical documents are skipped.
            let mut seen = BTreeSet::new();
            responses.retain(|(text, _)| seen.insert(text.clone()));

            let mut unparseable = 0usize;
            let mut scored: Vec<(String, f64)> = Vec::new();
            let mut tokens_by_text: BTreeMap<String, Vec<u32>> = BTreeMap::new();
            for (text, tokens) in responses {
                match response_penalty_sum(&text, doc, ctx) {
                    Some(sum) => {
                        scored.push((text.clone(), sum));
                        tokens_by_text.insert(text, tokens);
                    }
                    None => unparseable += 1,
                }
            }
            let pair = select_response_pair(&scored).map(|(c, r)| ResponsePair {
                prompt_id: doc.prompt_id.clone(),
                prompt,
                chosen_tokens: tokens_by_text[&scored[c].0].clone(),
                rejected_tokens: tokens_by_text[&scored[r].0].clone(),
                chosen_penalty_sum: scored[c].1,
                rejected_penalty_sum: scored[r].1,
            });
            Ok((pair, unparseable))
        })
        .collect::<Result<_, _>>()?;

    let mut out = ResponsePairSet::default();
    for (pair, unparseable) in per_doc {
        out.unparseable += unparseable;
        match pair {
            Some(p) => out.pairs.push(p),
            None => out.skipped_documents += 1,
        }
    }
    Ok(out)
}

/// Fine-grained sampling: two segment-wise passes per document. The first
/// pass extends with per-line minimum-penalty picks on the same RNG streams
/// as [`sspo_sample`] (so the chosen chains agree under a shared seed); the
/// second extends with maximum-penalty picks.
pub fn fine_sample(
    policy: &PolicyParams,
    query: &[Document],
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    seed: u64,
) -> Result<ResponsePairSet, SamplingError> {
    if k < 2 {
        return Err(SamplingError::BadK(k));
    }
    let per_doc: Vec<Option<ResponsePair>> = query
        .par_iter()
        .enumerate()
        .map(|(doc_idx, doc)| -> Result<_, SamplingError> {
            let prompt = encode_prompt(&policy.vocab, doc)?;
            let chosen = fine_pass(policy, doc, doc_idx, &prompt, k, cfg, ctx, seed, false)?;
            let rejected = fine_pass(policy, doc, doc_idx, &prompt, k, cfg, ctx, seed, true)?;
            if chosen.0 == rejected.0 {
                return Ok(None);
            }
            Ok(Some(ResponsePair {
                prompt_id: doc.prompt_id.clone(),
                prompt,
                chosen_tokens: chosen.0,
                rejected_tokens: rejected.0,
                chosen_penalty_sum: chosen.1,
                rejected_penalty_sum: rejected.1,
            }))
        })
        .collect::<Result<_, _>>()?;

    let mut out = ResponsePairSet {
        segment_samples: 2 * query.iter().map(|d| d.lines.len()).sum::<usize>() * k,
        ..Default::default()
    };
    for pair in per_doc {
        match pair {
            Some(p) => out.pairs.push(p),
            None => out.skipped_documents += 1,
        }
    }
    Ok(out)
}

/// One segment-wise pass building a full response from per-line extreme
/// picks. `pick_max` builds the maximum-penalty chain.
#[allow(clippy::too_many_arguments)]
fn fine_pass(
    policy: &PolicyParams,
    doc: &Document,
    doc_idx: usize,
    prompt: &[u32],
    k: usize,
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    seed: u64,
    pick_max: bool,
) -> Result<(Vec<u32>, f64), SamplingError> {
    let mut sampler = PrefixSampler::new(policy, prompt)?;
    let mut response = Vec::new();
    let mut penalty_sum = 0.0;
    let pass = if pick_max { PASS_REJECTED } else { PASS_CHOSEN };
    for (i, line) in doc.lines.iter().enumerate() {
        let mut src = policy.vocab.encode_text(&line.source)?;
        src.push(policy.vocab.open_paren());
        sampler.extend(&src)?;
        response.extend_from_slice(&src);

        let mut rng =
            ChaCha12Rng::seed_from_u64(stream_seed(seed, &[doc_idx as u64, i as u64, pass]));
        let set = sample_candidates_with(policy, &mut sampler, line, i, k, cfg, ctx, &mut rng)?;
        let pick = match select_pair(&set) {
            Ok((c, r)) => {
                if pick_max {
                    set.candidates[r].clone()
                } else {
                    set.candidates[c].clone()
                }
            }
            Err(_) => set.candidates[0].clone(),
        };
        penalty_sum += pick.penalty;

        let mut tail = pick.tokens.clone();
        tail.push(policy.vocab.close_paren());
        tail.push(policy.vocab.newline());
        sampler.extend(&tail)?;
        response.extend_from_slice(&tail);
    }
    Ok((response, penalty_sum))
}

/// One PPO rollout step: the sampled action for a line, its reward, and
/// what the later updates need — prefix features, the recorded value, and
/// the behavior policy's log-probability at rollout time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub line_index: usize,
    pub prefix_len: usize,
    pub action: Vec<u32>,
    pub reward: f64,
    pub value: f64,
    pub features: Vec<f64>,
    pub old_logp: f64,
    pub delta: f64,
    pub advantage: f64,
    /// GAE value target (raw advantage + rollout value), fixed at GAE time.
    pub value_target: f64,
}

/// A full-document rollout; `tokens` is the prompt plus every line rendered
/// with its sampled continuation, so `tokens[..prefix_len]` is each step's
/// prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub steps: Vec<TrajectoryStep>,
}

/// Roll out one sampled continuation per line, rewarding duration
/// consistency with -penalty. Prefixes extend with the sampled tokens.
pub fn ppo_rollout<F>(
    policy: &PolicyParams,
    query: &[Document],
    cfg: &SamplerConfig,
    ctx: &SamplingContext,
    value_fn: F,
    seed: u64,
) -> Result<Vec<Trajectory>, SamplingError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    query
        .par_iter()
        .enumerate()
        .map(|(doc_idx, doc)| -> Result<Trajectory, SamplingError> {
            let prompt = encode_prompt(&policy.vocab, doc)?;
            let mut sampler = PrefixSampler::new(policy, &prompt)?;
            let mut tokens = prompt.clone();
            let mut steps = Vec::with_capacity(doc.lines.len());
            for (i, line) in doc.lines.iter().enumerate() {
                let mut src = policy.vocab.encode_text(&line.source)?;
                src.push(policy.vocab.open_paren());
                sampler.extend(&src)?;
                tokens.extend_from_slice(&src);

                let features = sampler.prefix_features().to_vec();
                let value = value_fn(&features);
                let prefix_len = tokens.len();

                let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(
                    seed,
                    &[doc_idx as u64, i as u64, PASS_CHOSEN],
                ));
                let (action, old_logp) =
                    sampler.sample_segment_scored(cfg, policy.vocab.close_paren(), &mut rng)?;
                let duration = ctx.duration_of_ids(&action);
                let reward = -penalty_unchecked(line.dur_s, duration);

                let mut tail = action.clone();
                tail.push(policy.vocab.close_paren());
                tail.push(policy.vocab.newline());
                sampler.extend(&tail)?;
                tokens.extend_from_slice(&tail);

                steps.push(TrajectoryStep {
                    line_index: i,
                    prefix_len,
                    action,
                    reward,
                    value,
                    features,
                    old_logp,
                    delta: 0.0,
                    advantage: 0.0,
                    value_target: 0.0,
                });
            }
            Ok(Trajectory {
                prompt_id: doc.prompt_id.clone(),
                tokens,
                steps,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence: one record per sampled line.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LineRecord {
    prompt_id: String,
    line_index: usize,
    prefix_hash: String,
    dur_s: f64,
    dedup_count: usize,
    retained: bool,
    chosen: CandidateInfo,
    rejected: Option<CandidateInfo>,
}

fn hash_tokens(tokens: &[u32]) -> String {
    let mut hasher = Sha256::new();
    for t in tokens {
        hasher.update(t.to_le_bytes());
    }
    let out = hasher.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn write_sampled(
    path: &Path,
    sampled: &SampledDataset,
    vocab: &Vocabulary,
    docs: &[Document],
) -> Result<(), SamplingError> {
    let by_id: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.prompt_id.as_str(), d)).collect();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ds in &sampled.documents {
        let doc = by_id
            .get(ds.prompt_id.as_str())
            .ok_or_else(|| SamplingError::Mismatch(ds.prompt_id.clone()))?;
        for (i, line) in ds.lines.iter().enumerate() {
            let rec = LineRecord {
                prompt_id: ds.prompt_id.clone(),
                line_index: i,
                prefix_hash: hash_tokens(&ds.prefix_for_line(vocab, doc, i)),
                dur_s: line.dur_s,
                dedup_count: line.dedup_count,
                retained: line.retained,
                chosen: line.chosen.clone(),
                rejected: line.rejected.clone(),
            };
            serde_json::to_writer(&mut file, &rec)?;
            file.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_sampled(
    path: &Path,
    vocab: &Vocabulary,
    docs: &[Document],
) -> Result<SampledDataset, SamplingError> {
    let by_id: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.prompt_id.as_str(), d)).collect();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut documents: Vec<DocumentSample> = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineRecord = serde_json::from_str(&line)?;
        let needs_new = documents
            .last()
            .map(|d| d.prompt_id != rec.prompt_id)
            .unwrap_or(true);
        if needs_new {
            let doc = by_id
                .get(rec.prompt_id.as_str())
                .ok_or_else(|| SamplingError::Mismatch(rec.prompt_id.clone()))?;
            let prompt = encode_prompt(vocab, doc)?;
            documents.push(DocumentSample {
                prompt_id: rec.prompt_id.clone(),
                prompt,
                lines: Vec::new(),
            });
        }
        let ds = documents.last_mut().expect("just ensured");
        if rec.line_index != ds.lines.len() {
            return Err(SamplingError::Mismatch(format!(
                "{}: line {} out of order",
                rec.prompt_id, rec.line_index
            )));
        }
        ds.lines.push(LineSample {
            line_index: rec.line_index,
            dur_s: rec.dur_s,
            dedup_count: rec.dedup_count,
            retained: rec.retained,
            chosen: rec.chosen,
            rejected: rec.rejected,
        });
    }
    Ok(SampledDataset {
        documents,
        segment_samples: 0,
    })
}
