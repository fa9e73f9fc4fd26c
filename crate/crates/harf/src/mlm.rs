//! Masked-language-model pretraining.
//!
//! The objective is denoising seq2seq: the encoder reads the masked
//! sequence, the decoder reconstructs the original, and cross-entropy is
//! taken over all non-PAD target positions. Masking replaces exactly
//! `floor(rate × maskable)` positions with MASK, chosen uniformly without
//! replacement among character positions — special and language tokens are
//! never masked. Pretraining requires the selective freeze policy to be in
//! force before it starts.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentencePair;
use crate::model::{forward_backward, FreezePolicy, GradStore, Mode, ModelError, ModelState, OptimizerConfig};
use crate::tokenizer::{EncodedSequence, LangTag, VocabError, Vocabulary, MASK};

#[derive(Debug, Error)]
pub enum MlmError {
    #[error("invalid masking config: {0}")]
    InvalidConfig(String),
    #[error("pretraining requires the mlm freeze policy to be applied first")]
    FreezePolicyNotSet,
    #[error("cannot pretrain on an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Masking rate and seed. A rate of zero disables masking (the training
/// task degenerates to copying, which tests use as a sanity oracle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { mask_rate: 0.15, seed: 0 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MlmError> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(MlmError::InvalidConfig(format!("mask_rate {} outside [0, 1)", self.mask_rate)));
        }
        Ok(())
    }
}

/// Which sides of the parallel data become monolingual samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Target-script (romanized) text only.
    RomanOnly,
    /// Both sides as independent samples, doubling the corpus.
    RomanPlusUrdu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub corpus_mode: CorpusMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Language tag of the source (first-column) side.
    pub src_lang: LangTag,
    /// Language tag of the target (second-column) side.
    pub tgt_lang: LangTag,
    pub max_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_mode: CorpusMode::RomanPlusUrdu,
            epochs: 4,
            batch_size: 128,
            grad_accum_steps: 4,
            learning_rate: 1e-4,
            seed: 0,
            src_lang: LangTag::urdu(),
            tgt_lang: LangTag::roman_urdu(),
            max_len: 128,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), MlmError> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(MlmError::InvalidConfig("epochs, batch_size, grad_accum_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean reconstruction losses plus the checkpoints written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub samples_per_epoch: usize,
}

/// Replaces exactly `floor(rate × maskable)` character positions with MASK.
/// Labels carry the original id at masked positions and `None` elsewhere.
/// Deterministic given the config seed.
pub fn mask_tokens(
    seq: &EncodedSequence,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
) -> Result<(EncodedSequence, Vec<Option<u32>>), MlmError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(mask_tokens_with_rng(seq, vocab, cfg.mask_rate, &mut rng))
}

/// Pure per-sequence masking: the caller owns seed derivation (the
/// pretraining loop mixes epoch and sample index into the seed).
pub fn mask_tokens_with_rng(
    seq: &EncodedSequence,
    vocab: &Vocabulary,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> (EncodedSequence, Vec<Option<u32>>) {
    let first_char = vocab.first_char_id();
    let mut maskable: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id >= first_char)
        .map(|(i, _)| i)
        .collect();
    let k = (mask_rate * maskable.len() as f64).floor() as usize;

    // partial Fisher-Yates: the first k entries become the selection
    for i in 0..k {
        let j = rng.gen_range(i..maskable.len());
        maskable.swap(i, j);
    }
    let mut masked = seq.clone();
    let mut labels = vec![None; seq.ids.len()];
    for &pos in &maskable[..k] {
        labels[pos] = Some(seq.ids[pos]);
        masked.ids[pos] = MASK;
    }
    (masked, labels)
}

/// Expands parallel pairs into monolingual samples according to the corpus
/// mode. `RomanPlusUrdu` yields two samples per pair (target side first).
pub fn build_mlm_samples(pairs: &[SentencePair], mode: CorpusMode, src_lang: &LangTag, tgt_lang: &LangTag) -> Vec<(String, LangTag)> {
    let mut samples = Vec::new();
    for p in pairs {
        samples.push((p.target.clone(), tgt_lang.clone()));
        if mode == CorpusMode::RomanPlusUrdu {
            samples.push((p.source.clone(), src_lang.clone()));
        }
    }
    samples
}

/// Masked-reconstruction pretraining. The freeze policy must already be
/// `MlmPolicy`; a checkpoint is written per epoch when `out_dir` is given.
pub fn pretrain(
    m: &mut ModelState,
    vocab: &Vocabulary,
    pairs: &[SentencePair],
    cfg: &PretrainConfig,
    masking: &MaskingConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainRecord, MlmError> {
    cfg.validate()?;
    masking.validate()?;
    if m.freeze_policy() != FreezePolicy::MlmPolicy {
        return Err(MlmError::FreezePolicyNotSet);
    }
    if pairs.is_empty() {
        return Err(MlmError::EmptyCorpus);
    }

    let samples = build_mlm_samples(pairs, cfg.corpus_mode, &cfg.src_lang, &cfg.tgt_lang);
    let opt = OptimizerConfig { learning_rate: cfg.learning_rate, ..Default::default() };
    let mut record = PretrainRecord { epoch_losses: Vec::new(), checkpoints: Vec::new(), samples_per_epoch: samples.len() };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[0x5e_5e, epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss_sum = 0.0;
        let mut epoch_tokens = 0usize;
        let mut accum = GradStore::zeros_like(m);
        let mut micro_batches = 0usize;

        for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for &sample_idx in chunk {
                let (text, lang) = &samples[sample_idx];
                let original = vocab.encode(text, lang, cfg.max_len)?;
                let mut mask_rng =
                    ChaCha8Rng::seed_from_u64(mix(masking.seed, &[epoch as u64, sample_idx as u64]));
                let (masked, _labels) = mask_tokens_with_rng(&original, vocab, masking.mask_rate, &mut mask_rng);
                let (sum_loss, tokens) = forward_backward(m, &masked, &original, Mode::Train, &mut accum)?;
                epoch_loss_sum += sum_loss;
                epoch_tokens += tokens;
            }
            micro_batches += 1;
            let last = (chunk_idx + 1) * cfg.batch_size >= order.len();
            if micro_batches == cfg.grad_accum_steps || last {
                if accum.token_count > 0 {
                    m.step(&accum.mean(), &opt)?;
                }
                accum = GradStore::zeros_like(m);
                micro_batches = 0;
            }
        }

        record.epoch_losses.push(if epoch_tokens == 0 { 0.0 } else { epoch_loss_sum / epoch_tokens as f64 });
        if let Some(dir) = out_dir {
            let path = dir.join(format!("mlm_epoch{}.ckpt", epoch + 1));
            m.save_with_meta(&path, &[("phase", "mlm"), ("epoch", &(epoch + 1).to_string())])?;
            record.checkpoints.push(path);
        }
    }
    Ok(record)
}

/// splitmix64-style mixing of a seed with context words.
pub(crate) fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for &w in words {
        h ^= w.wrapping_mul(0xbf58476d1ce4e5b9);
        h = h.rotate_left(27).wrapping_mul(0x94d049bb133111eb);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Origin, SynthConfig};
    use crate::model::ModelConfig;

    fn vocab_and_seq(text: &str) -> (Vocabulary, EncodedSequence) {
        let pairs = vec![SentencePair::new("abcdefghij", "abcdefghij", Origin::Other, 1)];
        let langs = vec![LangTag::roman_urdu(), LangTag::urdu()];
        let vocab = Vocabulary::build(&pairs, &langs).unwrap();
        let seq = vocab.encode(text, &LangTag::roman_urdu(), 128).unwrap();
        (vocab, seq)
    }

    #[test]
    fn exact_mask_count() {
        let (vocab, seq) = vocab_and_seq(&"abcdefghij".repeat(10)); // 100 maskable chars
        let cfg = MaskingConfig { mask_rate: 0.15, seed: 3 };
        let (masked, labels) = mask_tokens(&seq, &vocab, &cfg).unwrap();
        let mask_count = masked.ids.iter().filter(|&&id| id == MASK).count();
        assert_eq!(mask_count, 15);
        assert_eq!(labels.iter().filter(|l| l.is_some()).count(), 15);
    }

    #[test]
    fn specials_are_never_masked() {
        let (vocab, seq) = vocab_and_seq("abc");
        let cfg = MaskingConfig { mask_rate: 0.9, seed: 1 };
        let (masked, labels) = mask_tokens(&seq, &vocab, &cfg).unwrap();
        for (i, &id) in seq.ids.iter().enumerate() {
            if vocab.is_special_or_lang(id) {
                assert_eq!(masked.ids[i], id, "special at {i} was altered");
                assert!(labels[i].is_none());
            }
        }
    }

    #[test]
    fn all_specials_yields_zero_masks() {
        let (vocab, _) = vocab_and_seq("a");
        let seq = vocab.encode("", &LangTag::urdu(), 8).unwrap();
        let (masked, labels) = mask_tokens(&seq, &vocab, &MaskingConfig::default()).unwrap();
        assert_eq!(masked.ids, seq.ids);
        assert!(labels.iter().all(Option::is_none));
    }

    #[test]
    fn floor_semantics_and_positional_uniformity() {
        // 7 maskable at rate 0.15 -> floor(1.05) = 1 mask; over many seeds
        // each position is hit roughly equally (chi-square sanity)
        let (vocab, seq) = vocab_and_seq("abcdefg");
        let mut counts = [0u64; 7];
        let trials = 10_000;
        for seed in 0..trials {
            let (masked, _) = mask_tokens(&seq, &vocab, &MaskingConfig { mask_rate: 0.15, seed }).unwrap();
            let positions: Vec<usize> =
                masked.ids.iter().enumerate().filter(|(_, &id)| id == MASK).map(|(i, _)| i).collect();
            assert_eq!(positions.len(), 1);
            counts[positions[0] - 1] += 1; // position 0 is the language token
        }
        let expected = trials as f64 / 7.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // df = 6, alpha = 0.001 critical value 22.46
        assert!(chi2 < 22.46, "chi2 {chi2} with counts {counts:?}");
    }

    #[test]
    fn masking_is_deterministic() {
        let (vocab, seq) = vocab_and_seq("abcdefghij");
        let cfg = MaskingConfig { mask_rate: 0.3, seed: 77 };
        let a = mask_tokens(&seq, &vocab, &cfg).unwrap();
        let b = mask_tokens(&seq, &vocab, &cfg).unwrap();
        assert_eq!(a.0.ids, b.0.ids);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn sample_construction_counts() {
        let pairs: Vec<SentencePair> =
            (0..5).map(|i| SentencePair::new(format!("s{i}"), format!("t{i}"), Origin::Other, i + 1)).collect();
        let roman = build_mlm_samples(&pairs, CorpusMode::RomanOnly, &LangTag::urdu(), &LangTag::roman_urdu());
        assert_eq!(roman.len(), 5);
        assert!(roman.iter().all(|(_, l)| *l == LangTag::roman_urdu()));
        let both = build_mlm_samples(&pairs, CorpusMode::RomanPlusUrdu, &LangTag::urdu(), &LangTag::roman_urdu());
        assert_eq!(both.len(), 10);
    }

    #[test]
    fn pretrain_requires_freeze_policy() {
        let pairs = generate_synthetic(&SynthConfig { group_count: 5, seed: 1, ..Default::default() }).unwrap();
        let langs = vec![LangTag::roman_urdu(), LangTag::urdu()];
        let vocab = Vocabulary::build(&pairs, &langs).unwrap();
        let mut m = ModelState::init(ModelConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 32,
            max_len: 64,
            dropout_rate: 0.0,
            seed: 0,
        })
        .unwrap();
        let err = pretrain(&mut m, &vocab, &pairs, &PretrainConfig { epochs: 1, max_len: 64, ..Default::default() }, &MaskingConfig::default(), None)
            .unwrap_err();
        assert!(matches!(err, MlmError::FreezePolicyNotSet));
    }

    #[test]
    fn copy_task_with_zero_masking_learns_fast() {
        // masking disabled: the denoising objective degenerates to copying,
        // which must drop below 0.1 loss within two epochs on a 500-sentence
        // corpus even with the early layers frozen
        let corpus = generate_synthetic(&SynthConfig {
            group_count: 420,
            max_variants: 2,
            seed: 9,
            sentence_len_range: (1, 2),
            variant_rule_count: 3,
        })
        .unwrap();
        let langs = vec![LangTag::roman_urdu(), LangTag::urdu()];
        let vocab = Vocabulary::build(&corpus, &langs).unwrap();
        let mut m = ModelState::init(ModelConfig {
            vocab_size: vocab.size(),
            d_model: 64,
            n_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 128,
            max_len: 24,
            dropout_rate: 0.0,
            seed: 4,
        })
        .unwrap();
        m.set_freeze(FreezePolicy::MlmPolicy).unwrap();
        let samples = build_mlm_samples(&corpus, CorpusMode::RomanOnly, &LangTag::urdu(), &LangTag::roman_urdu());
        assert!(samples.len() >= 500, "corpus has {} sentences", samples.len());
        let cfg = PretrainConfig {
            corpus_mode: CorpusMode::RomanOnly,
            epochs: 2,
            batch_size: 4,
            grad_accum_steps: 1,
            learning_rate: 5e-3,
            seed: 11,
            max_len: 24,
            ..Default::default()
        };
        let masking = MaskingConfig { mask_rate: 0.0, seed: 0 };
        let record = pretrain(&mut m, &vocab, &corpus, &cfg, &masking, None).unwrap();
        let last = *record.epoch_losses.last().unwrap();
        assert!(last < 0.1, "copy loss stayed at {last} ({:?})", record.epoch_losses);
    }

    #[test]
    fn frozen_tensors_do_not_move_during_pretraining() {
        let corpus = generate_synthetic(&SynthConfig { group_count: 30, seed: 2, ..Default::default() }).unwrap();
        let langs = vec![LangTag::roman_urdu(), LangTag::urdu()];
        let vocab = Vocabulary::build(&corpus, &langs).unwrap();
        let mut m = ModelState::init(ModelConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 32,
            max_len: 48,
            dropout_rate: 0.1,
            seed: 6,
        })
        .unwrap();
        m.set_freeze(FreezePolicy::MlmPolicy).unwrap();
        let frozen_before: Vec<(String, crate::tensor::Tensor)> = m
            .tensor_names()
            .iter()
            .filter(|n| m.is_frozen(n))
            .map(|n| (n.clone(), m.tensor(n).unwrap().clone()))
            .collect();
        assert!(!frozen_before.is_empty());

        let cfg = PretrainConfig { epochs: 1, batch_size: 8, max_len: 48, ..Default::default() };
        pretrain(&mut m, &vocab, &corpus, &cfg, &MaskingConfig::default(), None).unwrap();

        for (name, before) in &frozen_before {
            assert_eq!(m.tensor(name).unwrap(), before, "{name} moved");
        }
        assert!(m.step > 0);
    }
}
