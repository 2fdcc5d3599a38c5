//! Synthetic dubbing-translation task: corpus generation, the interleaved
//! "source(target)" response format, its parser, and dataset files.
//!
//! "Translation" here is per-token synonym substitution with optional
//! function-word insertions. Every source token owns a set of target
//! synonyms whose spoken durations span a wide ratio, so picking the right
//! synonym per token is what duration alignment has to learn. The scheme is
//! deliberately simple enough that quality and duration have exact oracles.

use crate::duration::DurationOracle;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Schema version stamped into every dataset record.
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Context budget the corpus must fit (prompt plus worst-case response).
pub const CONTEXT_WINDOW: usize = 1024;

// Special tokens of the text format. The parens and the newline carry the
// response structure; the angle-bracket markers carry the prompt structure.
pub const TOK_BOS: &str = "<bos>";
pub const TOK_EOS: &str = "<eos>";
pub const TOK_NL: &str = "\n";
pub const TOK_OPEN: &str = "(";
pub const TOK_CLOSE: &str = ")";
pub const TOK_TASK: &str = "<task>";
pub const TOK_TERM: &str = "<term>";
pub const TOK_LINES: &str = "<lines>";
pub const TOK_GO: &str = "<go>";

pub const SPECIAL_TOKENS: [&str; 9] = [
    TOK_BOS, TOK_EOS, TOK_NL, TOK_OPEN, TOK_CLOSE, TOK_TASK, TOK_TERM, TOK_LINES, TOK_GO,
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid task spec: {0}")]
    Config(String),
    #[error("document needs {needed} tokens but the context window is {budget}")]
    Capacity { budget: usize, needed: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

/// Parameters of the synthetic task generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    /// Number of distinct source tokens.
    pub source_vocab_size: usize,
    /// Valid target phrasings per source token.
    pub synonym_set_size: usize,
    /// Seed for the token-duration table (independent of document sampling).
    pub duration_table_seed: u64,
    /// Tokens per line, inclusive range.
    pub line_length_range: (usize, usize),
    /// Lines per document.
    pub lines_per_document: usize,
    /// Documents in the demonstration + query pool.
    pub total_documents: usize,
    /// Fraction of the pool held out as the query split.
    pub query_fraction: f64,
    /// Extra documents generated as the held-out test split.
    pub test_documents: usize,
    /// Terminology pins per document.
    pub terminology_per_document: usize,
    /// Number of neutral function words available for insertion.
    pub function_word_count: usize,
    /// Probability that a reference line carries a function-word insertion
    /// (a second insertion happens with the squared probability).
    pub fw_insertion_prob: f64,
    /// Per-line pause of the duration oracle, seconds.
    pub pause: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            source_vocab_size: 40,
            synonym_set_size: 6,
            duration_table_seed: 17,
            line_length_range: (2, 2),
            lines_per_document: 10,
            total_documents: 1000,
            query_fraction: 0.03,
            test_documents: 50,
            terminology_per_document: 3,
            function_word_count: 4,
            fw_insertion_prob: 0.0,
            pause: 0.1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.synonym_set_size < 2 {
            return Err(CorpusError::Config(format!(
                "synonym_set_size must be >= 2, got {}",
                self.synonym_set_size
            )));
        }
        let (lo, hi) = self.line_length_range;
        if lo == 0 || lo > hi {
            return Err(CorpusError::Config(format!(
                "line_length_range must satisfy 1 <= min <= max, got ({lo}, {hi})"
            )));
        }
        // Documents draw source tokens without replacement so that every
        // token is unambiguous within one prompt.
        let worst_case = self.lines_per_document * hi;
        if worst_case > self.source_vocab_size {
            return Err(CorpusError::Config(format!(
                "source_vocab_size {} cannot cover {} distinct tokens per document",
                self.source_vocab_size, worst_case
            )));
        }
        if !(0.0..=0.5).contains(&self.query_fraction) {
            return Err(CorpusError::Config(format!(
                "query_fraction must be in [0, 0.5], got {}",
                self.query_fraction
            )));
        }
        if self.total_documents == 0 || self.lines_per_document == 0 {
            return Err(CorpusError::Config(
                "total_documents and lines_per_document must be positive".into(),
            ));
        }
        if self.pause <= 0.0 {
            return Err(CorpusError::Config("pause must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fw_insertion_prob)
            || (self.fw_insertion_prob > 0.0 && self.function_word_count == 0)
        {
            return Err(CorpusError::Config(
                "fw_insertion_prob must be in [0, 1] and needs function words".into(),
            ));
        }
        Ok(())
    }

    pub fn source_token(&self, i: usize) -> String {
        format!("s{i:02}")
    }

    pub fn target_token(&self, i: usize, j: usize) -> String {
        format!("t{i:02}x{j}")
    }

    pub fn function_word(&self, j: usize) -> String {
        format!("fw{j}")
    }
}

/// One source line with its reference translation and both durations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinePair {
    pub source: String,
    pub reference: String,
    pub dur_s: f64,
    pub dur_t: f64,
}

/// One prompt: an ordered set of lines plus a terminology table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub prompt_id: String,
    pub lines: Vec<LinePair>,
    pub terminology: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct DatasetSplit {
    pub demonstration: Vec<Document>,
    pub query: Vec<Document>,
    pub test: Vec<Document>,
}

/// Ground truth the quality oracle scores against: the full synonym set per
/// source token, plus the neutral function words.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QualityKey {
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub function_words: Vec<String>,
}

/// Parsed response: ordered (source line, target line) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FormattedResponse {
    pub entries: Vec<(String, String)>,
}

impl FormattedResponse {
    /// Render entries back to text, one "source(target)" per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (src, tgt) in &self.entries {
            out.push_str(src);
            out.push('(');
            out.push_str(tgt);
            out.push(')');
            out.push('\n');
        }
        out
    }
}

/// Split text into format tokens: parentheses and newlines are tokens of
/// their own, everything else splits on spaces.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' | '\n' => {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
            }
            c => word.push(c),
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Inverse of [`tokenize_text`] for token streams this crate produces:
/// words are space-separated, structural tokens glue directly.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for tok in tokens {
        match tok.as_str() {
            TOK_NL | TOK_OPEN | TOK_CLOSE => out.push_str(tok),
            _ => {
                let needs_space = matches!(out.chars().last(), Some(c) if c != '\n' && c != '(');
                if needs_space {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}

/// Generate the synthetic task: splits, duration table, and quality key.
/// Deterministic for a fixed (spec, seed).
pub fn generate_task(
    spec: &SyntheticTaskSpec,
    seed: u64,
) -> Result<(DatasetSplit, DurationOracle, QualityKey), CorpusError> {
    spec.validate()?;

    let (oracle, key) = build_duration_table(spec);

    let query_n = (spec.total_documents as f64 * spec.query_fraction).floor() as usize;
    let demo_n = spec.total_documents - query_n;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let make_docs = |count: usize, start_id: usize, rng: &mut ChaCha12Rng| {
        (0..count)
            .map(|i| generate_document(spec, &oracle, &key, start_id + i, rng))
            .collect::<Vec<_>>()
    };
    let demonstration = make_docs(demo_n, 0, &mut rng);
    let query = make_docs(query_n, demo_n, &mut rng);
    let test = make_docs(spec.test_documents, spec.total_documents, &mut rng);

    Ok((
        DatasetSplit {
            demonstration,
            query,
            test,
        },
        oracle,
        key,
    ))
}

/// Duration table: source tokens get a base duration; each synonym's
/// duration is the base scaled by a ratio from a grid spanning well past
/// the required 1.5x min-to-max spread, so every set contains both a
/// near-match and clear over/undershoots.
fn build_duration_table(spec: &SyntheticTaskSpec) -> (DurationOracle, QualityKey) {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.duration_table_seed);
    let mut table = BTreeMap::new();
    let mut synonyms = BTreeMap::new();

    for tok in SPECIAL_TOKENS {
        table.insert(tok.to_string(), 0.01);
    }

    let m = spec.synonym_set_size;
    for i in 0..spec.source_vocab_size {
        let src = spec.source_token(i);
        let base = rng.gen_range(0.25..0.55);
        table.insert(src.clone(), base);
        let mut set = Vec::with_capacity(m);
        for j in 0..m {
            let grid = if m == 1 {
                1.0
            } else {
                0.75 + 0.60 * j as f64 / (m - 1) as f64
            };
            let ratio = grid + rng.gen_range(-0.02..0.02);
            let tgt = spec.target_token(i, j);
            table.insert(tgt.clone(), base * ratio);
            set.push(tgt);
        }
        synonyms.insert(src, set);
    }

    let mut function_words = Vec::with_capacity(spec.function_word_count);
    for j in 0..spec.function_word_count {
        let fw = spec.function_word(j);
        table.insert(fw.clone(), rng.gen_range(0.06..0.14));
        function_words.push(fw);
    }

    (
        DurationOracle::new(table, spec.pause),
        QualityKey {
            synonyms,
            function_words,
        },
    )
}

fn generate_document(
    spec: &SyntheticTaskSpec,
    oracle: &DurationOracle,
    key: &QualityKey,
    id: usize,
    rng: &mut ChaCha12Rng,
) -> Document {
    let n = spec.lines_per_document;
    let (lo, hi) = spec.line_length_range;

    // Draw distinct source tokens for the whole document.
    let mut pool: Vec<usize> = (0..spec.source_vocab_size).collect();
    pool.shuffle(rng);
    let mut cursor = 0;

    let line_lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    let doc_sources: Vec<Vec<String>> = line_lengths
        .iter()
        .map(|&len| {
            let toks = pool[cursor..cursor + len]
                .iter()
                .map(|&i| spec.source_token(i))
                .collect();
            cursor += len;
            toks
        })
        .collect();

    // Terminology: pin a few of the document's source tokens to one synonym.
    let mut used: Vec<&String> = doc_sources.iter().flatten().collect();
    used.shuffle(rng);
    let mut terminology = BTreeMap::new();
    for src in used.iter().take(spec.terminology_per_document) {
        let set = &key.synonyms[*src];
        let pick = set[rng.gen_range(0..set.len())].clone();
        terminology.insert((*src).clone(), pick);
    }

    let lines = doc_sources
        .iter()
        .map(|src_toks| {
            let mut tgt_toks: Vec<String> = src_toks
                .iter()
                .map(|s| match terminology.get(s) {
                    Some(pinned) => pinned.clone(),
                    None => {
                        let set = &key.synonyms[s];
                        set[rng.gen_range(0..set.len())].clone()
                    }
                })
                .collect();
            // Optional neutral function words vary the duration without
            // touching quality.
            let u: f64 = rng.gen();
            let p = spec.fw_insertion_prob;
            let inserts = if u < p * p {
                2
            } else if u < p {
                1
            } else {
                0
            };
            for _ in 0..inserts {
                let fw = key.function_words[rng.gen_range(0..key.function_words.len())].clone();
                let pos = rng.gen_range(0..=tgt_toks.len());
                tgt_toks.insert(pos, fw);
            }
            let source = src_toks.join(" ");
            let reference = tgt_toks.join(" ");
            let dur_s = oracle.duration_of_text(&source).expect("generated tokens");
            let dur_t = oracle
                .duration_of_text(&reference)
                .expect("generated tokens");
            LinePair {
                source,
                reference,
                dur_s,
                dur_t,
            }
        })
        .collect();

    Document {
        prompt_id: format!("doc{id:05}"),
        lines,
        terminology,
    }
}

/// Render a document's prompt. The terminology block is elided when empty.
pub fn render_prompt(doc: &Document) -> Result<String, CorpusError> {
    let mut out = String::new();
    out.push_str(TOK_TASK);
    out.push('\n');
    for (src, tgt) in &doc.terminology {
        out.push_str(TOK_TERM);
        out.push(' ');
        out.push_str(src);
        out.push(' ');
        out.push_str(tgt);
        out.push('\n');
    }
    out.push_str(TOK_LINES);
    out.push('\n');
    for line in &doc.lines {
        out.push_str(&line.source);
        out.push('\n');
    }
    out.push_str(TOK_GO);
    out.push('\n');

    let needed = tokenize_text(&out).len() + 1 + response_token_budget(doc);
    if needed > CONTEXT_WINDOW {
        return Err(CorpusError::Capacity {
            budget: CONTEXT_WINDOW,
            needed,
        });
    }
    Ok(out)
}

/// Upper bound on response tokens for a document (the reference response
/// plus slack for format tokens and the terminator).
pub fn response_token_budget(doc: &Document) -> usize {
    let per_line: usize = doc
        .lines
        .iter()
        .map(|l| {
            tokenize_text(&l.source).len() + tokenize_text(&l.reference).len() + 2 /* parens */ + 1
            /* newline */ + 4 /* slack */
        })
        .sum();
    per_line + 1
}

/// The reference response of a document in the interleaved format.
pub fn reference_response(doc: &Document) -> FormattedResponse {
    FormattedResponse {
        entries: doc
            .lines
            .iter()
            .map(|l| (l.source.clone(), l.reference.clone()))
            .collect(),
    }
}

/// Parse raw response text against a document.
///
/// Line `i` is efficient iff physical line `i` has the exact shape
/// "source(target)" with `source` equal to the document's i-th source line.
/// Malformed or missing lines are flagged false and kept as best-effort
/// entries; nothing is dropped silently.
pub fn parse_response(text: &str, doc: &Document) -> (FormattedResponse, Vec<bool>) {
    let physical: Vec<&str> = text.lines().collect();
    let n = doc.lines.len();
    let mut entries = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for i in 0..n {
        let raw = physical.get(i).copied().unwrap_or("");
        match split_formatted_line(raw) {
            Some((src, tgt)) => {
                let efficient = src == doc.lines[i].source;
                entries.push((src.to_string(), tgt.to_string()));
                flags.push(efficient);
            }
            None => {
                entries.push((raw.to_string(), String::new()));
                flags.push(false);
            }
        }
    }
    (FormattedResponse { entries }, flags)
}

/// Split one "source(target)" line. Exactly one '(' and a trailing ')'.
fn split_formatted_line(line: &str) -> Option<(&str, &str)> {
    let line = line.trim_end();
    let open = line.find('(')?;
    if !line.ends_with(')') || line.len() < open + 2 {
        return None;
    }
    let src = &line[..open];
    let tgt = &line[open + 1..line.len() - 1];
    if src.is_empty() || tgt.contains('(') || tgt.contains(')') {
        return None;
    }
    Some((src, tgt))
}

// ---------------------------------------------------------------------------
// Dataset files: one document per line, self-describing records.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DocumentRecord {
    schema_version: u32,
    prompt_id: String,
    lines: Vec<LinePair>,
    terminology: BTreeMap<String, String>,
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in docs {
        let rec = DocumentRecord {
            schema_version: DATASET_SCHEMA_VERSION,
            prompt_id: doc.prompt_id.clone(),
            lines: doc.lines.clone(),
            terminology: doc.terminology.clone(),
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line)?;
        if rec.schema_version != DATASET_SCHEMA_VERSION {
            return Err(CorpusError::Config(format!(
                "dataset schema version {} != expected {}",
                rec.schema_version, DATASET_SCHEMA_VERSION
            )));
        }
        docs.push(Document {
            prompt_id: rec.prompt_id,
            lines: rec.lines,
            terminology: rec.terminology,
        });
    }
    Ok(docs)
}

pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    write_documents(&dir.join("demonstration.jsonl"), &split.demonstration)?;
    write_documents(&dir.join("query.jsonl"), &split.query)?;
    write_documents(&dir.join("test.jsonl"), &split.test)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit, CorpusError> {
    Ok(DatasetSplit {
        demonstration: read_documents(&dir.join("demonstration.jsonl"))?,
        query: read_documents(&dir.join("query.jsonl"))?,
        test: read_documents(&dir.join("test.jsonl"))?,
    })
}
