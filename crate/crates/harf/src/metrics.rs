//! Evaluation metrics: 4-gram corpus BLEU, character-level BLEU, and CHRF.
//!
//! All three are corpus-aggregated: n-gram statistics are summed over the
//! corpus before any ratio is taken (never sentence-averaged). BLEU and
//! Char-BLEU share one engine and differ only in tokenization — whitespace
//! tokens versus Unicode characters (spaces included). CHRF strips
//! whitespace entirely before extracting character n-grams, per that
//! metric's own convention. Scores live on the 0–100 scale, and metrics
//! score exactly the strings they receive; normalization happens upstream.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("hypothesis and reference counts differ: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
}

/// BLEU with its component statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuBreakdown {
    /// Modified n-gram precisions p1..pn.
    pub precisions: Vec<f64>,
    /// Orders that contribute to the geometric mean: those with at least one
    /// hypothesis n-gram in the corpus. Orders beyond every hypothesis
    /// length are skipped rather than zeroing the score, so identity
    /// corpora of short sentences still score 100.
    pub used_orders: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    /// Effective reference length: sum of per-sentence closest reference lengths.
    pub ref_len: usize,
    /// 0–100.
    pub score: f64,
}

/// CHRF with per-order statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChrfBreakdown {
    /// Per-order precision, aligned with orders 1..=max_order (0.0 where the
    /// order was skipped).
    pub precisions: Vec<f64>,
    pub recalls: Vec<f64>,
    /// Orders with at least one n-gram on either side; only these enter the mean.
    pub used_orders: Vec<usize>,
    pub beta: f64,
    /// 0–100.
    pub score: f64,
}

/// The three scores for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: BleuBreakdown,
    pub char_bleu: BleuBreakdown,
    pub chrf: ChrfBreakdown,
    pub items: usize,
}

/// Corpus BLEU over whitespace tokens; multi-reference clipping.
pub fn bleu_corpus(hyps: &[String], refs: &[Vec<String>], max_order: usize) -> Result<BleuBreakdown, MetricsError> {
    check_lengths(hyps.len(), refs.len())?;
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| word_tokens(h)).collect();
    let ref_tokens: Vec<Vec<Vec<String>>> =
        refs.iter().map(|rs| rs.iter().map(|r| word_tokens(r)).collect()).collect();
    Ok(bleu_from_tokens(&hyp_tokens, &ref_tokens, max_order))
}

/// Corpus BLEU over Unicode characters, spaces included.
pub fn char_bleu(hyps: &[String], refs: &[Vec<String>], max_order: usize) -> Result<BleuBreakdown, MetricsError> {
    check_lengths(hyps.len(), refs.len())?;
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| char_tokens(h)).collect();
    let ref_tokens: Vec<Vec<Vec<String>>> =
        refs.iter().map(|rs| rs.iter().map(|r| char_tokens(r)).collect()).collect();
    Ok(bleu_from_tokens(&hyp_tokens, &ref_tokens, max_order))
}

/// Sentence-level diagnostic BLEU with add-one smoothing on orders above 1.
/// Corpus scoring never smooths; this exists for per-example debugging only.
pub fn bleu_sentence(hyp: &str, refs: &[String], max_order: usize) -> f64 {
    let hyp_tokens = word_tokens(hyp);
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| word_tokens(r)).collect();
    let stats = sentence_stats(&hyp_tokens, &ref_tokens, max_order);
    let hyp_len = hyp_tokens.len();
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (matched, total) = stats.orders[n - 1];
        let (num, den) = if n == 1 { (matched as f64, total as f64) } else { ((matched + 1) as f64, (total + 1) as f64) };
        if den == 0.0 || num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let bp = brevity_penalty(hyp_len, stats.ref_len);
    100.0 * bp * (log_sum / max_order as f64).exp()
}

/// CHRF: character n-gram F-beta, orders 1..=max_order, whitespace removed
/// before extraction, single reference per hypothesis.
pub fn chrf(hyps: &[String], refs: &[String], max_order: usize, beta: f64) -> Result<ChrfBreakdown, MetricsError> {
    check_lengths(hyps.len(), refs.len())?;
    let mut matched = vec![0u64; max_order];
    let mut hyp_total = vec![0u64; max_order];
    let mut ref_total = vec![0u64; max_order];

    for (h, r) in hyps.iter().zip(refs) {
        let h_chars = chrf_chars(h);
        let r_chars = chrf_chars(r);
        for n in 1..=max_order {
            let h_counts = ngram_counts(&h_chars, n);
            let r_counts = ngram_counts(&r_chars, n);
            hyp_total[n - 1] += h_counts.values().sum::<u64>();
            ref_total[n - 1] += r_counts.values().sum::<u64>();
            for (gram, &c) in &h_counts {
                if let Some(&rc) = r_counts.get(gram) {
                    matched[n - 1] += c.min(rc);
                }
            }
        }
    }

    let mut precisions = vec![0.0; max_order];
    let mut recalls = vec![0.0; max_order];
    let mut used_orders = Vec::new();
    for n in 1..=max_order {
        let (m, ht, rt) = (matched[n - 1], hyp_total[n - 1], ref_total[n - 1]);
        if ht == 0 && rt == 0 {
            continue; // order absent on both sides; skipped
        }
        used_orders.push(n);
        precisions[n - 1] = if ht == 0 { 0.0 } else { m as f64 / ht as f64 };
        recalls[n - 1] = if rt == 0 { 0.0 } else { m as f64 / rt as f64 };
    }

    let score = if used_orders.is_empty() {
        // no character content on either side anywhere in the corpus
        if hyps.iter().zip(refs).all(|(h, r)| chrf_chars(h) == chrf_chars(r)) {
            100.0
        } else {
            0.0
        }
    } else {
        let p: f64 = used_orders.iter().map(|&n| precisions[n - 1]).sum::<f64>() / used_orders.len() as f64;
        let r: f64 = used_orders.iter().map(|&n| recalls[n - 1]).sum::<f64>() / used_orders.len() as f64;
        let denom = beta * beta * p + r;
        if denom == 0.0 {
            0.0
        } else {
            100.0 * (1.0 + beta * beta) * p * r / denom
        }
    };

    Ok(ChrfBreakdown { precisions, recalls, used_orders, beta, score })
}

/// BLEU, Char-BLEU (order 4), and CHRF (order 6, beta 2) over a
/// single-reference corpus.
pub fn metric_report(hyps: &[String], refs: &[String]) -> Result<MetricReport, MetricsError> {
    let multi: Vec<Vec<String>> = refs.iter().map(|r| vec![r.clone()]).collect();
    Ok(MetricReport {
        bleu: bleu_corpus(hyps, &multi, 4)?,
        char_bleu: char_bleu(hyps, &multi, 4)?,
        chrf: chrf(hyps, refs, 6, 2.0)?,
        items: hyps.len(),
    })
}

// ---------------------------------------------------------------------------
// Shared BLEU engine
// ---------------------------------------------------------------------------

fn check_lengths(hyps: usize, refs: usize) -> Result<(), MetricsError> {
    if hyps != refs {
        return Err(MetricsError::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(())
}

fn word_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn char_tokens(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}

fn chrf_chars(s: &str) -> Vec<String> {
    s.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

struct SentenceStats {
    /// (clipped matches, hypothesis n-gram count) per order.
    orders: Vec<(u64, u64)>,
    ref_len: usize,
}

fn sentence_stats(hyp: &[String], refs: &[Vec<String>], max_order: usize) -> SentenceStats {
    // closest reference length; ties break toward the shorter reference
    let ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - hyp.len() as i64).abs(), l as i64))
        .unwrap_or(0);

    let mut orders = Vec::with_capacity(max_order);
    for n in 1..=max_order {
        let h_counts = ngram_counts(hyp, n);
        let total: u64 = h_counts.values().sum();
        let ref_counts: Vec<HashMap<&[String], u64>> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let mut matched = 0u64;
        for (gram, &c) in &h_counts {
            let clip = ref_counts.iter().filter_map(|rc| rc.get(gram).copied()).max().unwrap_or(0);
            matched += c.min(clip);
        }
        orders.push((matched, total));
    }
    SentenceStats { orders, ref_len }
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn bleu_from_tokens(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], max_order: usize) -> BleuBreakdown {
    let mut matched = vec![0u64; max_order];
    let mut total = vec![0u64; max_order];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (h, rs) in hyps.iter().zip(refs) {
        let stats = sentence_stats(h, rs, max_order);
        hyp_len += h.len();
        ref_len += stats.ref_len;
        for n in 0..max_order {
            matched[n] += stats.orders[n].0;
            total[n] += stats.orders[n].1;
        }
    }

    let precisions: Vec<f64> =
        (0..max_order).map(|n| if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 }).collect();
    let used_orders: Vec<usize> = (1..=max_order).filter(|&n| total[n - 1] > 0).collect();
    let bp = brevity_penalty(hyp_len, ref_len);
    let score = if used_orders.is_empty() || used_orders.iter().any(|&n| precisions[n - 1] == 0.0) {
        0.0
    } else {
        let mean_log: f64 =
            used_orders.iter().map(|&n| precisions[n - 1].ln()).sum::<f64>() / used_orders.len() as f64;
        100.0 * bp * mean_log.exp()
    };
    BleuBreakdown { precisions, used_orders, brevity_penalty: bp, hyp_len, ref_len, score }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &str) -> String {
        v.to_string()
    }

    fn single_refs(rs: &[&str]) -> Vec<Vec<String>> {
        rs.iter().map(|r| vec![s(r)]).collect()
    }

    #[test]
    fn identity_scores_100() {
        let hyps = vec![s("kya haal hai"), s("sab theek")];
        assert!((bleu_corpus(&hyps, &single_refs(&["kya haal hai", "sab theek"]), 4).unwrap().score - 100.0).abs() < 1e-9);
        assert!((char_bleu(&hyps, &single_refs(&["kya haal hai", "sab theek"]), 4).unwrap().score - 100.0).abs() < 1e-9);
        assert!((chrf(&hyps, &hyps.clone(), 6, 2.0).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let hyps = vec![s("a b c d")];
        let refs = single_refs(&["e f g h"]);
        assert_eq!(bleu_corpus(&hyps, &refs, 4).unwrap().score, 0.0);
    }

    #[test]
    fn kya_vs_kia_char_breakdown() {
        // hyp chars k,y,a vs ref k,i,a: unigrams share {k, a}; no bigram overlap
        let b = char_bleu(&[s("kya")], &single_refs(&["kia"]), 4).unwrap();
        assert!((b.precisions[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(b.precisions[1], 0.0);
        assert_eq!(b.score, 0.0, "corpus mode does not smooth");
        assert_eq!(b.hyp_len, 3);
        assert_eq!(b.ref_len, 3);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn empty_hypothesis_chrf_is_zero() {
        let r = chrf(&[s("")], &[s("kuch")], 6, 2.0).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn length_mismatch_and_empty_are_errors() {
        assert!(matches!(
            bleu_corpus(&[s("a")], &single_refs(&["a", "b"]), 4),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(bleu_corpus(&[], &[], 4), Err(MetricsError::EmptyCorpus)));
    }

    #[test]
    fn sentence_bleu_smooths_higher_orders() {
        // corpus mode gives 0 (no 2-gram match); smoothed diagnostic does not
        let score = bleu_sentence("kya hai", &[s("kya tha")], 4);
        assert!(score > 0.0);
        let corpus = bleu_corpus(&[s("kya hai")], &single_refs(&["kya tha"]), 4).unwrap().score;
        assert_eq!(corpus, 0.0);
    }

    #[test]
    fn multi_reference_clipping_takes_the_max() {
        // "the the" against refs with one/two "the": clip rises to 2 once a
        // second reference repeats the word
        let one = bleu_corpus(&[s("the the")], &[vec![s("the cat")]], 1).unwrap();
        assert!((one.precisions[0] - 0.5).abs() < 1e-12);
        let multi = bleu_corpus(&[s("the the")], &[vec![s("the cat"), s("the the mat")]], 1).unwrap();
        assert!((multi.precisions[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        // hyp 2 tokens, ref 4 tokens, all hyp tokens match
        let b = bleu_corpus(&[s("a b")], &single_refs(&["a b c d"]), 2).unwrap();
        let expect_bp = (1.0f64 - 4.0 / 2.0).exp();
        assert!((b.brevity_penalty - expect_bp).abs() < 1e-12);
        assert!((b.score - 100.0 * expect_bp).abs() < 1e-9); // p1 = p2 = 1
    }

    #[test]
    fn chrf_skips_orders_absent_on_both_sides() {
        let r = chrf(&[s("ab")], &[s("ab")], 6, 2.0).unwrap();
        assert_eq!(r.used_orders, vec![1, 2]);
        assert!((r.score - 100.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn prop_identity_is_100(text in "[a-d ]{1,24}") {
            let trimmed = text.trim().to_string();
            prop_assume!(!trimmed.is_empty());
            let hyps = vec![trimmed.clone()];
            prop_assert!((char_bleu(&hyps, &[vec![trimmed.clone()]], 4).unwrap().score - 100.0).abs() < 1e-9);
            prop_assert!((chrf(&hyps, &[trimmed.clone()], 6, 2.0).unwrap().score - 100.0).abs() < 1e-9);
            if !word_tokens(&trimmed).is_empty() {
                prop_assert!((bleu_corpus(&hyps, &[vec![trimmed]], 4).unwrap().score - 100.0).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_permutation_invariance(
            pairs in proptest::collection::vec(("[a-e]{1,8} [a-e]{1,8}", "[a-e]{1,8} [a-e]{1,8}"), 2..8),
            seed in any::<u64>(),
        ) {
            let hyps: Vec<String> = pairs.iter().map(|(h, _)| h.clone()).collect();
            let refs: Vec<String> = pairs.iter().map(|(_, r)| r.clone()).collect();
            let mut order: Vec<usize> = (0..hyps.len()).collect();
            // cheap deterministic shuffle
            let mut state = seed | 1;
            for i in (1..order.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (state >> 33) as usize % (i + 1));
            }
            let hyps_p: Vec<String> = order.iter().map(|&i| hyps[i].clone()).collect();
            let refs_p: Vec<String> = order.iter().map(|&i| refs[i].clone()).collect();

            let a = char_bleu(&hyps, &refs.iter().map(|r| vec![r.clone()]).collect::<Vec<_>>(), 4).unwrap().score;
            let b = char_bleu(&hyps_p, &refs_p.iter().map(|r| vec![r.clone()]).collect::<Vec<_>>(), 4).unwrap().score;
            prop_assert!((a - b).abs() < 1e-9);
            let ca = chrf(&hyps, &refs, 6, 2.0).unwrap().score;
            let cb = chrf(&hyps_p, &refs_p, 6, 2.0).unwrap().score;
            prop_assert!((ca - cb).abs() < 1e-9);
        }

        #[test]
        fn prop_adding_a_reference_never_lowers_precision_numerators(
            hyp in "[a-d]{1,12}",
            r1 in "[a-d]{1,12}",
            r2 in "[a-d]{1,12}",
        ) {
            let one = char_bleu(&[hyp.clone()], &[vec![r1.clone()]], 3).unwrap();
            let two = char_bleu(&[hyp.clone()], &[vec![r1, r2]], 3).unwrap();
            for (p1, p2) in one.precisions.iter().zip(&two.precisions) {
                prop_assert!(p2 >= p1, "precision dropped: {p1} -> {p2}");
            }
        }

        #[test]
        fn prop_breaking_a_match_never_raises_char_bleu(
            base in "[a-d]{2,12}",
            pos in any::<prop::sample::Index>(),
        ) {
            let refs = vec![vec![base.clone()]];
            let before = char_bleu(&[base.clone()], &refs, 4).unwrap().score;
            let mut chars: Vec<char> = base.chars().collect();
            let i = pos.index(chars.len());
            chars[i] = 'z'; // not in the alphabet, breaks the match
            let edited: String = chars.into_iter().collect();
            let after = char_bleu(&[edited], &refs, 4).unwrap().score;
            prop_assert!(after <= before + 1e-9, "{before} -> {after}");
        }

        #[test]
        fn prop_chrf_is_whitespace_insensitive(
            text in "[a-e]{4,16}",
            cut in any::<prop::sample::Index>(),
        ) {
            let i = 1 + cut.index(text.len() - 2);
            let spaced = format!("{} {}", &text[..i], &text[i..]);
            let plain = chrf(&[text.clone()], &[text.clone()], 6, 2.0).unwrap().score;
            let inserted = chrf(&[spaced.clone()], &[spaced], 6, 2.0).unwrap().score;
            prop_assert!((plain - inserted).abs() < 1e-9);
        }
    }
}
