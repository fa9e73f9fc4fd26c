//! Variation-aware, leakage-free corpus splitting.
//!
//! A split assigns whole [`ParallelGroup`]s to train/validation/test so that
//! no source sentence (or any of its target-side variants) appears in more
//! than one subset. Validation and test each take a fixed count of singleton
//! groups plus a fixed count of multi-variant groups drawn from a variant-count
//! band; the full eval sets carry every variant of every selected group, and
//! the small eval sets carry exactly one seeded-randomly chosen variant per
//! group. [`audit`] re-derives the integrity findings from the split contents
//! themselves.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{group_by_source, Origin, ParallelGroup, SentencePair};

/// Split sizing. Defaults mirror the reference corpus construction: 1,500
/// singleton sources per eval set, 3,000 multi-variant groups per eval set
/// drawn from the 2–10 variant band, small eval sets of 4,500 pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub unique_val: usize,
    pub unique_test: usize,
    pub multi_val_groups: usize,
    pub multi_test_groups: usize,
    /// Inclusive variant-count band for eval-eligible multi-variant groups.
    /// Groups above the band stay in train.
    pub multi_band: (usize, usize),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            unique_val: 1500,
            unique_test: 1500,
            multi_val_groups: 3000,
            multi_test_groups: 3000,
            multi_band: (2, 10),
            seed: 0,
        }
    }
}

impl SplitConfig {
    /// Size of the small validation set: one pair per selected group.
    pub fn small_val_size(&self) -> usize {
        self.unique_val + self.multi_val_groups
    }

    /// Size of the small test set: one pair per selected group.
    pub fn small_test_size(&self) -> usize {
        self.unique_test + self.multi_test_groups
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        if self.multi_band.0 < 2 || self.multi_band.0 > self.multi_band.1 {
            return Err(SplitError::InvalidConfig(format!("bad multi_band {:?}", self.multi_band)));
        }
        Ok(())
    }
}

/// Which subset a group was assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SubsetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubsetTag::Train => "train",
            SubsetTag::Val => "val",
            SubsetTag::Test => "test",
        })
    }
}

/// A constructed split. Full eval sets contain every variant of every
/// selected group; small eval sets contain exactly one pair per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<SentencePair>,
    pub val_full: Vec<SentencePair>,
    pub test_full: Vec<SentencePair>,
    pub val_small: Vec<SentencePair>,
    pub test_small: Vec<SentencePair>,
    /// Source text → assigned subset, covering every input group.
    pub provenance: HashMap<String, SubsetTag>,
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid split config: {0}")]
    InvalidConfig(String),
    #[error("need {needed} singleton groups, corpus has {available}")]
    InsufficientSingletons { needed: usize, available: usize },
    #[error("need {needed} multi-variant groups in band {band:?}, corpus has {available}")]
    InsufficientMultiVariant { needed: usize, available: usize, band: (usize, usize) },
    #[error("duplicate group key: {0:?}")]
    DuplicateGroupKey(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad split manifest: {0}")]
    BadManifest(String),
    #[error("content digest mismatch for {0}")]
    DigestMismatch(String),
}

/// Builds the split. Selection is seeded-random and reproducible: singleton
/// groups are drawn first, then in-band multi-variant groups, validation
/// before test. Remaining groups (including any above the variant band)
/// form the training set.
pub fn build_split(groups: &[ParallelGroup], config: &SplitConfig) -> Result<CorpusSplit, SplitError> {
    config.validate()?;
    let mut keys = HashSet::with_capacity(groups.len());
    for g in groups {
        if !keys.insert(g.source.as_str()) {
            return Err(SplitError::DuplicateGroupKey(g.source.clone()));
        }
    }

    let singleton_idx: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.variant_count() == 1)
        .map(|(i, _)| i)
        .collect();
    let in_band_idx: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| (config.multi_band.0..=config.multi_band.1).contains(&g.variant_count()))
        .map(|(i, _)| i)
        .collect();

    let need_singletons = config.unique_val + config.unique_test;
    if singleton_idx.len() < need_singletons {
        return Err(SplitError::InsufficientSingletons { needed: need_singletons, available: singleton_idx.len() });
    }
    let need_multi = config.multi_val_groups + config.multi_test_groups;
    if in_band_idx.len() < need_multi {
        return Err(SplitError::InsufficientMultiVariant {
            needed: need_multi,
            available: in_band_idx.len(),
            band: config.multi_band,
        });
    }

    let mut rng = derived_rng(config.seed, "selection");
    let singletons = shuffled(&mut rng, singleton_idx);
    let in_band = shuffled(&mut rng, in_band_idx);

    let mut assignment: HashMap<usize, SubsetTag> = HashMap::new();
    for &i in &singletons[..config.unique_val] {
        assignment.insert(i, SubsetTag::Val);
    }
    for &i in &singletons[config.unique_val..need_singletons] {
        assignment.insert(i, SubsetTag::Test);
    }
    for &i in &in_band[..config.multi_val_groups] {
        assignment.insert(i, SubsetTag::Val);
    }
    for &i in &in_band[config.multi_val_groups..need_multi] {
        assignment.insert(i, SubsetTag::Test);
    }

    // assemble subsets in original corpus order
    let mut train = Vec::new();
    let mut val_groups = Vec::new();
    let mut test_groups = Vec::new();
    let mut provenance = HashMap::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let tag = assignment.get(&i).copied().unwrap_or(SubsetTag::Train);
        provenance.insert(g.source.clone(), tag);
        match tag {
            SubsetTag::Train => {
                for v in &g.variants {
                    let line_no = train.len() + 1;
                    train.push(SentencePair::new(g.source.clone(), v.clone(), Origin::Other, line_no));
                }
            }
            SubsetTag::Val => val_groups.push(g.clone()),
            SubsetTag::Test => test_groups.push(g.clone()),
        }
    }

    let flatten = |gs: &[ParallelGroup]| {
        let mut out = Vec::new();
        for g in gs {
            for v in &g.variants {
                let line_no = out.len() + 1;
                out.push(SentencePair::new(g.source.clone(), v.clone(), Origin::Other, line_no));
            }
        }
        out
    };
    let val_full = flatten(&val_groups);
    let test_full = flatten(&test_groups);
    let (val_small, test_small) = build_small_eval(&val_groups, &test_groups, config);

    Ok(CorpusSplit { train, val_full, test_full, val_small, test_small, provenance })
}

/// Reduces the selected eval groups to one pair each: singleton groups keep
/// their only variant, multi-variant groups get one variant chosen by the
/// seeded RNG.
pub fn build_small_eval(
    val_groups: &[ParallelGroup],
    test_groups: &[ParallelGroup],
    config: &SplitConfig,
) -> (Vec<SentencePair>, Vec<SentencePair>) {
    let mut rng = derived_rng(config.seed, "small-eval");
    let mut pick = |gs: &[ParallelGroup]| {
        let mut out = Vec::new();
        for g in gs {
            let v = if g.variant_count() == 1 { 0 } else { rng.gen_range(0..g.variant_count()) };
            let line_no = out.len() + 1;
            out.push(SentencePair::new(g.source.clone(), g.variants[v].clone(), Origin::Other, line_no));
        }
        out
    };
    let val_small = pick(val_groups);
    let test_small = pick(test_groups);
    (val_small, test_small)
}

fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn shuffled(rng: &mut ChaCha8Rng, mut v: Vec<usize>) -> Vec<usize> {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// A source sentence observed in more than one subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapViolation {
    pub source: String,
    pub subsets: Vec<SubsetTag>,
}

/// How a training sentence repeats an eval sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// Train sentence equals an eval sentence.
    Duplicate,
    /// Train sentence is a whole-word contiguous substring of an eval sentence.
    Substring,
    /// Train sentence contains an eval sentence as a whole-word contiguous substring.
    Superstring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialRepetitionHit {
    pub train_sentence: String,
    pub eval_sentence: String,
    pub relation: Relation,
}

/// Singleton/multi-variant group counts per subset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Findings of the four integrity checks. Findings are data; `passed`
/// summarizes them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    /// Check 1: sources appearing in more than one subset.
    pub overlap_violations: Vec<OverlapViolation>,
    /// Check 2: every variant of every eval group lands in its eval set.
    pub variation_inclusion_ok: bool,
    pub variation_violations: Vec<String>,
    /// Check 3: singleton / multi-variant group counts per subset.
    pub unique_counts: SubsetCounts,
    pub multi_counts: SubsetCounts,
    pub counts_ok: bool,
    /// Check 4: training sentences duplicating or partially repeating eval sentences.
    pub partial_repetition_hits: Vec<PartialRepetitionHit>,
    pub passed: bool,
}

/// Runs the four integrity checks against the split contents. When the
/// original grouped corpus is supplied, variation inclusion is verified
/// against it (every variant of every selected group must be present);
/// without it the check is limited to what the split itself records.
pub fn audit(split: &CorpusSplit, corpus: Option<&[ParallelGroup]>, config: &SplitConfig) -> AuditReport {
    let train_groups = group_by_source(&split.train);
    let val_groups = group_by_source(&split.val_full);
    let test_groups = group_by_source(&split.test_full);

    // Check 1: pairwise source-set disjointness.
    let mut seen: HashMap<&str, Vec<SubsetTag>> = HashMap::new();
    for (tag, gs) in [
        (SubsetTag::Train, &train_groups),
        (SubsetTag::Val, &val_groups),
        (SubsetTag::Test, &test_groups),
    ] {
        for g in gs {
            seen.entry(g.source.as_str()).or_default().push(tag);
        }
    }
    let mut overlap_violations: Vec<OverlapViolation> = seen
        .iter()
        .filter(|(_, tags)| tags.len() > 1)
        .map(|(s, tags)| OverlapViolation { source: s.to_string(), subsets: tags.clone() })
        .collect();
    overlap_violations.sort_by(|a, b| a.source.cmp(&b.source));

    // Check 2: variation inclusion.
    let mut variation_violations = Vec::new();
    for (tag, gs, small) in [
        (SubsetTag::Val, &val_groups, &split.val_small),
        (SubsetTag::Test, &test_groups, &split.test_small),
    ] {
        let by_source: HashMap<&str, &ParallelGroup> = gs.iter().map(|g| (g.source.as_str(), g)).collect();
        // small sets: exactly one pair per selected group, drawn from the full set
        let mut small_seen = HashSet::new();
        for p in small.iter() {
            if !small_seen.insert(p.source.as_str()) {
                variation_violations.push(format!("{tag}_small has more than one pair for source {:?}", p.source));
            }
            match by_source.get(p.source.as_str()) {
                Some(g) if g.variants.iter().any(|v| v == &p.target) => {}
                Some(_) => variation_violations
                    .push(format!("{tag}_small variant {:?} missing from {tag}_full for source {:?}", p.target, p.source)),
                None => variation_violations.push(format!("{tag}_small source {:?} missing from {tag}_full", p.source)),
            }
        }
        for g in gs.iter() {
            if !small_seen.contains(g.source.as_str()) {
                variation_violations.push(format!("{tag}_full source {:?} missing from {tag}_small", g.source));
            }
        }
        // against the original corpus: all variants of selected groups included
        if let Some(original) = corpus {
            for og in original {
                if split.provenance.get(&og.source) == Some(&tag) {
                    match by_source.get(og.source.as_str()) {
                        Some(g) => {
                            for v in &og.variants {
                                if !g.variants.contains(v) {
                                    variation_violations.push(format!(
                                        "variant {v:?} of {tag} source {:?} missing from {tag}_full",
                                        og.source
                                    ));
                                }
                            }
                        }
                        None => variation_violations
                            .push(format!("{tag} source {:?} from provenance missing from {tag}_full", og.source)),
                    }
                }
            }
        }
    }
    let variation_inclusion_ok = variation_violations.is_empty();

    // Check 3: balanced counts.
    let count = |gs: &[ParallelGroup], pred: &dyn Fn(usize) -> bool| gs.iter().filter(|g| pred(g.variant_count())).count();
    let is_single = |n: usize| n == 1;
    let is_multi = |n: usize| n >= 2;
    let unique_counts = SubsetCounts {
        train: count(&train_groups, &is_single),
        val: count(&val_groups, &is_single),
        test: count(&test_groups, &is_single),
    };
    let multi_counts = SubsetCounts {
        train: count(&train_groups, &is_multi),
        val: count(&val_groups, &is_multi),
        test: count(&test_groups, &is_multi),
    };
    let in_band = |n: usize| (config.multi_band.0..=config.multi_band.1).contains(&n);
    let counts_ok = unique_counts.val == config.unique_val
        && unique_counts.test == config.unique_test
        && multi_counts.val == config.multi_val_groups
        && multi_counts.test == config.multi_test_groups
        && val_groups.iter().all(|g| g.variant_count() == 1 || in_band(g.variant_count()))
        && test_groups.iter().all(|g| g.variant_count() == 1 || in_band(g.variant_count()))
        && split.val_small.len() == config.small_val_size()
        && split.test_small.len() == config.small_test_size();

    // Check 4: training-set integrity (exact duplicates and whole-word
    // substring containment in either direction).
    let eval_sources: Vec<&str> = val_groups.iter().chain(test_groups.iter()).map(|g| g.source.as_str()).collect();
    let partial_repetition_hits = partial_repetitions(&train_groups, &eval_sources);

    let passed = overlap_violations.is_empty() && variation_inclusion_ok && counts_ok && partial_repetition_hits.is_empty();
    AuditReport {
        overlap_violations,
        variation_inclusion_ok,
        variation_violations,
        unique_counts,
        multi_counts,
        counts_ok,
        partial_repetition_hits,
        passed,
    }
}

/// Indexed containment scan. Word windows of eval sentences are hashed once;
/// each train sentence is then checked with O(words²) lookups.
fn partial_repetitions(train_groups: &[ParallelGroup], eval_sources: &[&str]) -> Vec<PartialRepetitionHit> {
    let eval_set: HashMap<&str, usize> = eval_sources.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    // strict window text → eval sentences containing it as a whole-word substring
    let mut windows: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, e) in eval_sources.iter().enumerate() {
        let words: Vec<&str> = e.split(' ').collect();
        for start in 0..words.len() {
            for end in start + 1..=words.len() {
                if end - start == words.len() {
                    continue;
                }
                let w = words[start..end].join(" ");
                windows.entry(w).or_default().push(i);
            }
        }
    }

    let mut hits = Vec::new();
    for g in train_groups {
        let t = g.source.as_str();
        if eval_set.contains_key(t) {
            hits.push(PartialRepetitionHit {
                train_sentence: t.to_string(),
                eval_sentence: t.to_string(),
                relation: Relation::Duplicate,
            });
        }
        // train sentence is a strict whole-word substring of an eval sentence
        if let Some(idxs) = windows.get(t) {
            for &i in idxs {
                hits.push(PartialRepetitionHit {
                    train_sentence: t.to_string(),
                    eval_sentence: eval_sources[i].to_string(),
                    relation: Relation::Substring,
                });
            }
        }
        // train sentence strictly contains an eval sentence
        let words: Vec<&str> = t.split(' ').collect();
        let mut found: HashSet<usize> = HashSet::new();
        for start in 0..words.len() {
            for end in start + 1..=words.len() {
                if end - start == words.len() {
                    continue; // full window already handled as Duplicate
                }
                let w = words[start..end].join(" ");
                if let Some(&i) = eval_set.get(w.as_str()) {
                    if found.insert(i) {
                        hits.push(PartialRepetitionHit {
                            train_sentence: t.to_string(),
                            eval_sentence: w,
                            relation: Relation::Superstring,
                        });
                    }
                }
            }
        }
    }
    hits.sort_by(|a, b| (&a.train_sentence, &a.eval_sentence).cmp(&(&b.train_sentence, &b.eval_sentence)));
    hits
}

// ---------------------------------------------------------------------------
// Split manifest I/O
// ---------------------------------------------------------------------------

const MANIFEST_VERSION: u32 = 1;
const SUBSET_FILES: [(&str, fn(&CorpusSplit) -> &Vec<SentencePair>); 5] = [
    ("train.jsonl", |s| &s.train),
    ("val_full.jsonl", |s| &s.val_full),
    ("test_full.jsonl", |s| &s.test_full),
    ("val_small.jsonl", |s| &s.val_small),
    ("test_small.jsonl", |s| &s.test_small),
];

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    version: u32,
    config: SplitConfig,
    counts: HashMap<String, usize>,
    digests: HashMap<String, String>,
}

/// Writes the split as one JSONL file per subset plus a `split.json` header
/// recording config, seed, counts, and a SHA-256 digest of each subset file.
pub fn save_split(dir: &Path, split: &CorpusSplit, config: &SplitConfig) -> Result<(), SplitError> {
    fs::create_dir_all(dir).map_err(|e| SplitError::Io { path: dir.display().to_string(), source: e })?;
    let mut counts = HashMap::new();
    let mut digests = HashMap::new();
    for (name, get) in SUBSET_FILES {
        let path = dir.join(name);
        let mut buf = Vec::new();
        for p in get(split) {
            let row = serde_json::json!({ "source": p.source, "target": p.target });
            buf.extend_from_slice(row.to_string().as_bytes());
            buf.push(b'\n');
        }
        fs::write(&path, &buf).map_err(|e| SplitError::Io { path: path.display().to_string(), source: e })?;
        counts.insert(name.to_string(), get(split).len());
        digests.insert(name.to_string(), hex_digest(&buf));
    }
    let manifest = SplitManifest { version: MANIFEST_VERSION, config: config.clone(), counts, digests };
    let path = dir.join("split.json");
    let mut f = File::create(&path).map_err(|e| SplitError::Io { path: path.display().to_string(), source: e })?;
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(body.as_bytes()).map_err(|e| SplitError::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

/// Loads a split directory, verifying the per-file digests, and rebuilds
/// provenance from the subset contents. Returns the split together with the
/// config recorded at save time.
pub fn load_split(dir: &Path) -> Result<(CorpusSplit, SplitConfig), SplitError> {
    let manifest_path = dir.join("split.json");
    let body = fs::read_to_string(&manifest_path)
        .map_err(|e| SplitError::Io { path: manifest_path.display().to_string(), source: e })?;
    let manifest: SplitManifest =
        serde_json::from_str(&body).map_err(|e| SplitError::BadManifest(format!("split.json: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SplitError::BadManifest(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }

    let mut subsets: HashMap<&str, Vec<SentencePair>> = HashMap::new();
    for (name, _) in SUBSET_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| SplitError::Io { path: path.display().to_string(), source: e })?;
        match manifest.digests.get(name) {
            Some(d) if *d == hex_digest(&bytes) => {}
            _ => return Err(SplitError::DigestMismatch(name.to_string())),
        }
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(&bytes[..]).lines().enumerate() {
            let line = line.map_err(|e| SplitError::Io { path: path.display().to_string(), source: e })?;
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| SplitError::BadManifest(format!("{name}:{}: {e}", idx + 1)))?;
            let source = value.get("source").and_then(|v| v.as_str()).map(str::to_string);
            let target = value.get("target").and_then(|v| v.as_str()).map(str::to_string);
            match (source, target) {
                (Some(s), Some(t)) => pairs.push(SentencePair::new(s, t, Origin::Other, idx + 1)),
                _ => return Err(SplitError::BadManifest(format!("{name}:{}: missing source/target", idx + 1))),
            }
        }
        subsets.insert(name, pairs);
    }

    let train = subsets.remove("train.jsonl").unwrap();
    let val_full = subsets.remove("val_full.jsonl").unwrap();
    let test_full = subsets.remove("test_full.jsonl").unwrap();
    let val_small = subsets.remove("val_small.jsonl").unwrap();
    let test_small = subsets.remove("test_small.jsonl").unwrap();

    let mut provenance = HashMap::new();
    for (tag, pairs) in [
        (SubsetTag::Train, &train),
        (SubsetTag::Val, &val_full),
        (SubsetTag::Test, &test_full),
    ] {
        for p in pairs {
            provenance.entry(p.source.clone()).or_insert(tag);
        }
    }

    Ok((CorpusSplit { train, val_full, test_full, val_small, test_small, provenance }, manifest.config))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
