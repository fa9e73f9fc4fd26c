//! Parallel-corpus ingestion, normalization, grouping, and synthetic data.
//!
//! A corpus is a list of [`SentencePair`]s. For splitting, pairs are grouped
//! by their source sentence into [`ParallelGroup`]s, the unit over which the
//! splitter reasons about spelling variation. The synthetic generator produces
//! corpora whose target-side variants are derived from the source by a
//! prefix-free character code, so an exact rule-based inverse exists and can
//! serve as an oracle in tests.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Where a sentence pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Rup,
    Dakshina,
    Synthetic,
    Other,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Origin::Rup => "rup",
            Origin::Dakshina => "dakshina",
            Origin::Synthetic => "synthetic",
            Origin::Other => "other",
        };
        f.write_str(s)
    }
}

/// One aligned sentence pair. `source` is the source-script side (first TSV
/// column), `target` the target-script rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    #[serde(default = "default_origin")]
    pub origin: Origin,
    #[serde(default = "default_line_no")]
    pub line_no: usize,
}

fn default_origin() -> Origin {
    Origin::Other
}

fn default_line_no() -> usize {
    1
}

impl SentencePair {
    /// Builds a pair from already-normalized text.
    pub fn new(source: impl Into<String>, target: impl Into<String>, origin: Origin, line_no: usize) -> Self {
        Self { source: source.into(), target: target.into(), origin, line_no }
    }
}

/// One source sentence together with every distinct target-side rendering of
/// it. Groups are the unit of split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelGroup {
    /// Normalized source text; the grouping key.
    pub source: String,
    /// Distinct target renderings, in first-occurrence order.
    pub variants: Vec<String>,
}

impl ParallelGroup {
    pub fn variant_count(&self) -> usize {
        self.variants.len()
    }
}

/// Supported on-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

/// A row that could not be parsed, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedRow {
    pub line_no: usize,
    pub reason: String,
}

/// Ingestion output: the parsed pairs plus every malformed row encountered.
/// Malformed rows are reported, never silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    pub pairs: Vec<SentencePair>,
    pub malformed: Vec<MalformedRow>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus at {0} contains no valid sentence pairs")]
    EmptyCorpus(String),
    #[error("invalid synthesis config: {0}")]
    InvalidSynthConfig(String),
    #[error("group count {got} is below the {needed} required for the default split sizes")]
    TooFewGroupsForSplit { got: usize, needed: usize },
}

/// Canonicalizes raw text: NFC composition, control characters removed,
/// whitespace runs collapsed to single spaces, ends trimmed. Total and
/// idempotent; empty output is legal and caught downstream.
pub fn normalize(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars().filter(|c| !c.is_control() || c.is_whitespace()) {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    out.nfc().collect()
}

/// Reads a corpus file. TSV rows are `source<TAB>target`; JSONL rows are
/// objects with string fields `source` and `target` plus optional `origin`.
/// Every row is normalized; rows that fail to parse (or normalize to empty
/// fields) are collected into the report with their line numbers.
pub fn ingest(path: &Path, format: CorpusFormat) -> Result<IngestReport, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut malformed = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
        if line.is_empty() {
            continue;
        }
        match parse_row(&line, format) {
            Ok((source, target, origin)) => {
                let source = normalize(&source);
                let target = normalize(&target);
                if source.is_empty() || target.is_empty() {
                    malformed.push(MalformedRow { line_no, reason: "empty field after normalization".into() });
                } else {
                    pairs.push(SentencePair { source, target, origin, line_no });
                }
            }
            Err(reason) => malformed.push(MalformedRow { line_no, reason }),
        }
    }

    if pairs.is_empty() {
        return Err(CorpusError::EmptyCorpus(path.display().to_string()));
    }
    Ok(IngestReport { pairs, malformed })
}

fn parse_row(line: &str, format: CorpusFormat) -> Result<(String, String, Origin), String> {
    match format {
        CorpusFormat::Tsv => {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(format!("expected 2 tab-separated fields, found {}", fields.len()));
            }
            Ok((fields[0].to_string(), fields[1].to_string(), Origin::Other))
        }
        CorpusFormat::Jsonl => {
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
            let source = value
                .get("source")
                .and_then(|v| v.as_str())
                .ok_or_else(|| "missing string field \"source\"".to_string())?;
            let target = value
                .get("target")
                .and_then(|v| v.as_str())
                .ok_or_else(|| "missing string field \"target\"".to_string())?;
            let origin = match value.get("origin").and_then(|v| v.as_str()) {
                Some("rup") => Origin::Rup,
                Some("dakshina") => Origin::Dakshina,
                Some("synthetic") => Origin::Synthetic,
                _ => Origin::Other,
            };
            Ok((source.to_string(), target.to_string(), origin))
        }
    }
}

/// Writes pairs in TSV form (`source<TAB>target<LF>`, UTF-8, no header).
pub fn emit_tsv(path: &Path, pairs: &[SentencePair]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}\t{}", p.source, p.target).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    }
    Ok(())
}

/// Writes pairs as JSONL with `source`, `target`, and `origin` fields.
pub fn emit_jsonl(path: &Path, pairs: &[SentencePair]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let row = serde_json::json!({ "source": p.source, "target": p.target, "origin": p.origin });
        writeln!(w, "{row}").map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    }
    Ok(())
}

/// Groups pairs by exact normalized source text. Variants are deduplicated
/// in first-occurrence order; groups keep the order in which their source
/// first appeared. The grouping is a partition: every distinct
/// (source, target) pair lands in exactly one group.
pub fn group_by_source(pairs: &[SentencePair]) -> Vec<ParallelGroup> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<ParallelGroup> = Vec::new();
    for pair in pairs {
        match index.get(pair.source.as_str()) {
            Some(&i) => {
                let group = &mut groups[i];
                if !group.variants.iter().any(|v| v == &pair.target) {
                    group.variants.push(pair.target.clone());
                }
            }
            None => {
                index.insert(pair.source.as_str(), groups.len());
                groups.push(ParallelGroup { source: pair.source.clone(), variants: vec![pair.target.clone()] });
            }
        }
    }
    groups
}

/// Flattens groups back to pairs, variants in group order.
pub fn ungroup(groups: &[ParallelGroup], origin: Origin) -> Vec<SentencePair> {
    let mut pairs = Vec::new();
    for g in groups {
        for v in &g.variants {
            let line_no = pairs.len() + 1;
            pairs.push(SentencePair::new(g.source.clone(), v.clone(), origin, line_no));
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

/// One source character and its permitted target renderings. The first
/// rendering is canonical; the rest are spelling variants. Across the whole
/// table the union of renderings is prefix-free, which is what makes the
/// target→source decoding exact.
#[derive(Debug, Clone)]
pub struct CharRule {
    pub source: char,
    pub renderings: &'static [&'static str],
}

/// Fixed consonants: one rendering each.
const FIXED_RULES: &[(char, &str)] = &[
    ('ک', "k"),
    ('ب', "b"),
    ('د', "d"),
    ('ت', "t"),
    ('م', "m"),
    ('ن', "n"),
    ('ل', "l"),
    ('ر', "r"),
    ('ہ', "h"),
    ('س', "s"),
    ('گ', "g"),
    ('پ', "p"),
    ('ج', "j"),
    ('ش', "x"),
    ('چ', "ch"),
    ('ز', "z"),
    ('ف', "f"),
    ('ا', "a"),
];

/// A spelling-variation rule: an alternative rendering for one source char.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationRule {
    pub source: char,
    pub rendering: &'static str,
}

/// The full pool of variation rules. `SynthConfig::variant_rule_count`
/// selects a seeded-random subset of these.
pub const VARIATION_RULE_POOL: &[VariationRule] = &[
    VariationRule { source: 'ی', rendering: "y" },
    VariationRule { source: 'ی', rendering: "ee" },
    VariationRule { source: 'و', rendering: "w" },
    VariationRule { source: 'و', rendering: "oo" },
    VariationRule { source: 'ے', rendering: "ei" },
];

/// Canonical renderings of the variation-capable characters.
const VOWEL_CANONICAL: &[(char, &str)] = &[('ی', "i"), ('و', "u"), ('ے', "ey")];

/// Configuration for [`generate_synthetic`]. Generation is a pure function
/// of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of distinct source sentences to produce.
    pub group_count: usize,
    /// Upper bound on variants per group, in `[1, 10]`.
    pub max_variants: usize,
    pub seed: u64,
    /// Words per sentence (inclusive range).
    pub sentence_len_range: (usize, usize),
    /// How many rules from [`VARIATION_RULE_POOL`] to activate.
    pub variant_rule_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            group_count: 1000,
            max_variants: 6,
            seed: 0,
            sentence_len_range: (2, 4),
            variant_rule_count: VARIATION_RULE_POOL.len(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.group_count == 0 {
            return Err(CorpusError::InvalidSynthConfig("group_count must be positive".into()));
        }
        if self.max_variants == 0 || self.max_variants > 10 {
            return Err(CorpusError::InvalidSynthConfig(format!(
                "max_variants must be in [1, 10], got {}",
                self.max_variants
            )));
        }
        if self.sentence_len_range.0 == 0 || self.sentence_len_range.0 > self.sentence_len_range.1 {
            return Err(CorpusError::InvalidSynthConfig(format!(
                "bad sentence_len_range {:?}",
                self.sentence_len_range
            )));
        }
        if self.max_variants > 1 && self.variant_rule_count == 0 {
            return Err(CorpusError::InvalidSynthConfig(
                "variant_rule_count must be positive when max_variants > 1".into(),
            ));
        }
        Ok(())
    }

    /// Minimum group count needed to run the default full-scale split
    /// (3,000 singleton eval groups + 6,000 multi-variant eval groups,
    /// with headroom for the training set).
    pub const DEFAULT_SPLIT_MIN_GROUPS: usize = 6000;

    /// Signals (rather than guesses) that this corpus is too small for the
    /// default split sizes. Callers that intend to run the full split should
    /// check this before generating.
    pub fn validate_for_default_split(&self) -> Result<(), CorpusError> {
        self.validate()?;
        if self.group_count < Self::DEFAULT_SPLIT_MIN_GROUPS {
            return Err(CorpusError::TooFewGroupsForSplit {
                got: self.group_count,
                needed: Self::DEFAULT_SPLIT_MIN_GROUPS,
            });
        }
        Ok(())
    }
}

/// The rule table active for one generation run: canonical renderings plus
/// the selected variation rules. Provides the forward (source→variant)
/// sampling and the exact inverse (variant→source) decoding.
#[derive(Debug, Clone)]
pub struct RuleTable {
    /// renderings[i] lists the permitted renderings of alphabet char i;
    /// index 0 is canonical.
    alphabet: Vec<char>,
    renderings: Vec<Vec<&'static str>>,
}

impl RuleTable {
    /// Builds a table from an explicit set of active variation rules.
    pub fn with_rules(active: &[VariationRule]) -> Self {
        let mut alphabet = Vec::new();
        let mut renderings: Vec<Vec<&'static str>> = Vec::new();
        for &(ch, r) in FIXED_RULES {
            alphabet.push(ch);
            renderings.push(vec![r]);
        }
        for &(ch, canonical) in VOWEL_CANONICAL {
            let mut rs = vec![canonical];
            rs.extend(active.iter().filter(|r| r.source == ch).map(|r| r.rendering));
            alphabet.push(ch);
            renderings.push(rs);
        }
        Self { alphabet, renderings }
    }

    /// Seeded-random selection of `count` rules from the pool.
    pub fn seeded(seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
        let mut pool: Vec<VariationRule> = VARIATION_RULE_POOL.to_vec();
        // partial Fisher-Yates: the first `count` entries are the selection
        let count = count.min(pool.len());
        for i in 0..count {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        Self::with_rules(&pool[..count])
    }

    fn char_index(&self, ch: char) -> Option<usize> {
        self.alphabet.iter().position(|&c| c == ch)
    }

    /// Number of distinct variants a source sentence admits under the active
    /// rules, saturating at `cap`.
    pub fn variant_capacity(&self, source: &str, cap: usize) -> usize {
        let mut capacity = 1usize;
        for ch in source.chars().filter(|c| *c != ' ') {
            if let Some(i) = self.char_index(ch) {
                capacity = capacity.saturating_mul(self.renderings[i].len());
                if capacity >= cap {
                    return cap;
                }
            }
        }
        capacity
    }

    /// Renders a source sentence with every character mapped to its
    /// canonical rendering.
    pub fn render_canonical(&self, source: &str) -> String {
        self.render_with(source, |_| 0)
    }

    /// Renders a source sentence choosing a rendering per occurrence via `pick`.
    fn render_with(&self, source: &str, mut pick: impl FnMut(usize) -> usize) -> String {
        let mut out = String::new();
        for ch in source.chars() {
            if ch == ' ' {
                out.push(' ');
            } else if let Some(i) = self.char_index(ch) {
                let options = &self.renderings[i];
                let k = if options.len() > 1 { pick(options.len()) } else { 0 };
                out.push_str(options[k.min(options.len() - 1)]);
            }
        }
        out
    }

    /// Exact inverse of [`Self::render_with`]: decodes a variant back to its
    /// source sentence by greedy prefix matching. Returns `None` when the
    /// text is not in the image of the code.
    pub fn invert(&self, variant: &str) -> Option<String> {
        let mut out = String::new();
        for word in variant.split(' ') {
            if !out.is_empty() {
                out.push(' ');
            }
            let mut rest = word;
            'outer: while !rest.is_empty() {
                for (i, options) in self.renderings.iter().enumerate() {
                    for r in options {
                        if let Some(tail) = rest.strip_prefix(r) {
                            out.push(self.alphabet[i]);
                            rest = tail;
                            continue 'outer;
                        }
                    }
                }
                return None;
            }
        }
        Some(out)
    }
}

/// Deterministically generates a parallel corpus with controlled variant
/// structure: `group_count` distinct source sentences, each with `k`
/// target-side variants where `k` spans `1..=max_variants` with at least 30%
/// singletons and at least 30% multi-variant groups.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<SentencePair>, CorpusError> {
    config.validate()?;
    let table = RuleTable::seeded(config.seed, config.variant_rule_count);
    generate_with_table(config, &table)
}

/// Like [`generate_synthetic`] but with an explicit rule table, which lets
/// callers construct corpora over disjoint variation rules (two synthetic
/// "domains").
pub fn generate_with_table(config: &SynthConfig, table: &RuleTable) -> Result<Vec<SentencePair>, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = std::collections::HashSet::with_capacity(config.group_count);
    let mut pairs = Vec::new();

    for _ in 0..config.group_count {
        let k = sample_variant_count(&mut rng, config.max_variants);
        let source = sample_source(&mut rng, config, table, k, &mut seen);
        let variants = sample_variants(&mut rng, table, &source, k);
        for v in variants {
            let line_no = pairs.len() + 1;
            pairs.push(SentencePair::new(source.clone(), v, Origin::Synthetic, line_no));
        }
    }
    Ok(pairs)
}

/// Draws the variants-per-group count: 35% singletons, the rest uniform over
/// `2..=max_variants`.
fn sample_variant_count(rng: &mut ChaCha8Rng, max_variants: usize) -> usize {
    if max_variants == 1 || rng.gen_range(0..100) < 35 {
        1
    } else {
        rng.gen_range(2..=max_variants)
    }
}

fn sample_source(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    table: &RuleTable,
    wanted_variants: usize,
    seen: &mut std::collections::HashSet<String>,
) -> String {
    loop {
        let words = rng.gen_range(config.sentence_len_range.0..=config.sentence_len_range.1);
        let mut sentence = String::new();
        for w in 0..words {
            if w > 0 {
                sentence.push(' ');
            }
            let word_len = rng.gen_range(2..=5);
            for _ in 0..word_len {
                let i = rng.gen_range(0..table.alphabet.len());
                sentence.push(table.alphabet[i]);
            }
        }
        // A multi-variant group needs enough variable positions to admit
        // `wanted_variants` distinct renderings; pad with variable chars if not.
        let variable: Vec<char> = table
            .alphabet
            .iter()
            .zip(&table.renderings)
            .filter(|(_, rs)| rs.len() > 1)
            .map(|(c, _)| *c)
            .collect();
        if !variable.is_empty() {
            while table.variant_capacity(&sentence, wanted_variants) < wanted_variants {
                sentence.push(variable[rng.gen_range(0..variable.len())]);
            }
        } else if wanted_variants > 1 {
            // no active rules can support multi-variant groups
            continue;
        }
        if seen.insert(sentence.clone()) {
            return sentence;
        }
    }
}

fn sample_variants(rng: &mut ChaCha8Rng, table: &RuleTable, source: &str, k: usize) -> Vec<String> {
    let mut variants = vec![table.render_canonical(source)];
    let mut guard = 0usize;
    while variants.len() < k && guard < 10_000 {
        guard += 1;
        let candidate = table.render_with(source, |n| rng.gen_range(0..n));
        if !variants.contains(&candidate) {
            variants.push(candidate);
        }
    }
    variants
}
