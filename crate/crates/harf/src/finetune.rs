//! Two-phase supervised fine-tuning.
//!
//! Phase 1 trains on the primary parallel corpus; phase 2 reloads the
//! phase-1 checkpoint from a configured epoch and adapts on the secondary
//! corpus, evaluating every registered eval set at every epoch so the
//! adaptation/retention trade-off stays observable. The learning rate ramps
//! linearly over the first `warmup_ratio` of optimizer steps and then decays
//! linearly to zero. Gradient accumulation weights micro-batches by their
//! non-PAD token counts, making accumulated training exactly equivalent to
//! large-batch training.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentencePair;
use crate::metrics::{char_bleu, MetricsError};
use crate::mlm::mix;
use crate::model::{
    decode_greedy, forward_backward, GradStore, Mode, ModelError, ModelState, OptimizerConfig,
};
use crate::tokenizer::{LangTag, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid finetune config: {0}")]
    InvalidConfig(String),
    #[error("cannot train on empty data")]
    EmptyData,
    #[error("frozen parameters present; fine-tuning trains the full model")]
    FrozenParameters,
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Transliteration direction relative to the pair layout (`source` is the
/// first TSV column, conventionally the Urdu-script side).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// source → target (Urdu script → Roman).
    SrcToTgt,
    /// target → source (Roman → Urdu script).
    TgtToSrc,
}

impl Direction {
    /// (input text, reference output) of a pair under this direction.
    pub fn split_pair<'a>(&self, pair: &'a SentencePair) -> (&'a str, &'a str) {
        match self {
            Direction::SrcToTgt => (&pair.source, &pair.target),
            Direction::TgtToSrc => (&pair.target, &pair.source),
        }
    }

    /// (input language, output language) given the pair-side tags.
    pub fn langs<'a>(&self, src_lang: &'a LangTag, tgt_lang: &'a LangTag) -> (&'a LangTag, &'a LangTag) {
        match self {
            Direction::SrcToTgt => (src_lang, tgt_lang),
            Direction::TgtToSrc => (tgt_lang, src_lang),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub direction: Direction,
    pub phase1_epochs: usize,
    /// Phase 2 resumes from this phase-1 epoch's checkpoint.
    pub phase1_checkpoint_epoch: usize,
    pub phase2_epochs: usize,
    /// Epochs whose phase-2 scores are highlighted in reports.
    pub phase2_eval_epochs: Vec<usize>,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub src_lang: LangTag,
    pub tgt_lang: LangTag,
    pub max_len: usize,
    /// Stop a phase early once the first eval set reaches this Char-BLEU.
    pub early_stop_char_bleu: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            direction: Direction::TgtToSrc,
            phase1_epochs: 15,
            phase1_checkpoint_epoch: 5,
            phase2_epochs: 5,
            phase2_eval_epochs: vec![2, 5],
            batch_size: 64,
            grad_accum_steps: 4,
            learning_rate: 1e-5,
            warmup_ratio: 0.10,
            weight_decay: 0.02,
            seed: 0,
            src_lang: LangTag::urdu(),
            tgt_lang: LangTag::roman_urdu(),
            max_len: 128,
            early_stop_char_bleu: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.phase1_checkpoint_epoch > self.phase1_epochs {
            return Err(FinetuneError::InvalidConfig(format!(
                "phase1_checkpoint_epoch {} exceeds phase1_epochs {}",
                self.phase1_checkpoint_epoch, self.phase1_epochs
            )));
        }
        if let Some(&bad) = self.phase2_eval_epochs.iter().find(|&&e| e == 0 || e > self.phase2_epochs) {
            return Err(FinetuneError::InvalidConfig(format!(
                "phase2_eval_epoch {bad} outside 1..={}",
                self.phase2_epochs
            )));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.phase1_epochs == 0 {
            return Err(FinetuneError::InvalidConfig("batch_size, grad_accum_steps, phase1_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(FinetuneError::InvalidConfig(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        Ok(())
    }
}

/// Piecewise-linear learning-rate schedule: up to `peak` over the warmup
/// steps, then down to zero at the final step. Steps are 1-indexed; the
/// first step uses `peak / warmup_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: u64, warmup_ratio: f64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).round() as u64;
        Self { peak, total_steps, warmup_steps }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let step = step.min(self.total_steps);
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if self.total_steps == self.warmup_steps {
            self.peak
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

/// A named evaluation set.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub pairs: Vec<SentencePair>,
}

/// One completed epoch: training loss, per-set Char-BLEU, checkpoint path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub eval_char_bleu: Vec<(String, f64)>,
    pub checkpoint: Option<PathBuf>,
}

/// All epochs of one phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub phase: String,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRunRecord {
    pub fn char_bleu_at(&self, epoch: usize, set: &str) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == epoch)
            .and_then(|e| e.eval_char_bleu.iter().find(|(n, _)| n == set).map(|(_, s)| *s))
    }
}

/// Both phases of a schedule run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub phase1: TrainRunRecord,
    pub phase2: TrainRunRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Phase1,
    Phase2,
}

impl Phase {
    fn tag(&self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        }
    }
}

/// Greedy-decodes every pair's input and scores Char-BLEU against the
/// references. Evaluation is deterministic: repeated calls on the same
/// state yield identical scores.
pub fn evaluate_char_bleu(
    m: &ModelState,
    vocab: &Vocabulary,
    pairs: &[SentencePair],
    cfg: &FinetuneConfig,
) -> Result<f64, FinetuneError> {
    let (_, out_lang) = cfg.direction.langs(&cfg.src_lang, &cfg.tgt_lang);
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (input, reference) = cfg.direction.split_pair(pair);
        let (in_lang, _) = cfg.direction.langs(&cfg.src_lang, &cfg.tgt_lang);
        let src = vocab.encode(input, in_lang, cfg.max_len)?;
        hyps.push(decode_greedy(m, vocab, &src, out_lang, cfg.max_len)?);
        refs.push(vec![reference.to_string()]);
    }
    Ok(char_bleu(&hyps, &refs, 4)?.score)
}

/// Teacher-forced training for one phase: warmup/decay scheduling, gradient
/// accumulation, per-epoch evaluation and checkpointing.
pub fn train_phase(
    m: &mut ModelState,
    vocab: &Vocabulary,
    pairs: &[SentencePair],
    eval_sets: &[EvalSet],
    cfg: &FinetuneConfig,
    phase: Phase,
    out_dir: Option<&Path>,
) -> Result<TrainRunRecord, FinetuneError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(FinetuneError::EmptyData);
    }
    if m.tensor_names().iter().any(|n| m.is_frozen(n)) {
        return Err(FinetuneError::FrozenParameters);
    }
    let epochs = match phase {
        Phase::Phase1 => cfg.phase1_epochs,
        Phase::Phase2 => cfg.phase2_epochs,
    };
    let mut record = TrainRunRecord { phase: phase.tag().to_string(), epochs: Vec::new() };
    if epochs == 0 {
        return Ok(record);
    }

    let micro_batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_batches_per_epoch.div_ceil(cfg.grad_accum_steps) as u64;
    let schedule = LrSchedule::new(cfg.learning_rate, steps_per_epoch * epochs as u64, cfg.warmup_ratio);
    let base_opt = OptimizerConfig { weight_decay: cfg.weight_decay, ..Default::default() };
    let (in_lang, out_lang) = cfg.direction.langs(&cfg.src_lang, &cfg.tgt_lang);

    let mut step_idx: u64 = 0;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[phase_word(phase), epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        let mut accum = GradStore::zeros_like(m);
        let mut micro = 0usize;
        for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for &i in chunk {
                let (input, output) = cfg.direction.split_pair(&pairs[i]);
                let src = vocab.encode(input, in_lang, cfg.max_len)?;
                let tgt = vocab.encode(output, out_lang, cfg.max_len)?;
                let (sum_loss, tokens) = forward_backward(m, &src, &tgt, Mode::Train, &mut accum)?;
                loss_sum += sum_loss;
                token_sum += tokens;
            }
            micro += 1;
            let last = (chunk_idx + 1) * cfg.batch_size >= order.len();
            if micro == cfg.grad_accum_steps || last {
                if accum.token_count > 0 {
                    step_idx += 1;
                    let opt = base_opt.with_lr(schedule.lr_at(step_idx));
                    m.step(&accum.mean(), &opt)?;
                }
                accum = GradStore::zeros_like(m);
                micro = 0;
            }
        }

        let mut eval_scores = Vec::new();
        for set in eval_sets {
            eval_scores.push((set.name.clone(), evaluate_char_bleu(m, vocab, &set.pairs, cfg)?));
        }
        let checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("{}_epoch{}.ckpt", phase.tag(), epoch));
                m.save_with_meta(&path, &[("phase", phase.tag()), ("epoch", &epoch.to_string())])?;
                Some(path)
            }
            None => None,
        };
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(if token_sum == 0 { 0.0 } else { loss_sum / token_sum as f64 }),
            eval_char_bleu: eval_scores.clone(),
            checkpoint,
        });

        if let Some(target) = cfg.early_stop_char_bleu {
            if eval_scores.first().is_some_and(|(_, s)| *s >= target) {
                break;
            }
        }
    }
    Ok(record)
}

fn phase_word(phase: Phase) -> u64 {
    match phase {
        Phase::Phase1 => 0x1111,
        Phase::Phase2 => 0x2222,
    }
}

/// Runs the full schedule: phase 1 on the primary corpus, then phase 2 from
/// the configured phase-1 checkpoint on the secondary corpus. Phase 2 starts
/// with an epoch-0 record evaluating the reloaded checkpoint before any
/// step, and every epoch scores every eval set. On return `m` holds the
/// phase-2 final state.
pub fn run_schedule(
    m: &mut ModelState,
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    phase1_data: &[SentencePair],
    phase2_data: &[SentencePair],
    eval_sets: &[EvalSet],
    out_dir: &Path,
) -> Result<ScheduleRecord, FinetuneError> {
    cfg.validate()?;
    let phase1 = train_phase(m, vocab, phase1_data, eval_sets, cfg, Phase::Phase1, Some(out_dir))?;

    if cfg.phase2_epochs == 0 {
        return Ok(ScheduleRecord { phase1, phase2: TrainRunRecord { phase: "phase2".into(), epochs: Vec::new() } });
    }

    let ckpt = out_dir.join(format!("phase1_epoch{}.ckpt", cfg.phase1_checkpoint_epoch));
    if !ckpt.exists() {
        return Err(FinetuneError::MissingCheckpoint(ckpt.display().to_string()));
    }
    *m = ModelState::load(&ckpt)?;

    let mut epoch0_scores = Vec::new();
    for set in eval_sets {
        epoch0_scores.push((set.name.clone(), evaluate_char_bleu(m, vocab, &set.pairs, cfg)?));
    }
    let mut phase2 = train_phase(m, vocab, phase2_data, eval_sets, cfg, Phase::Phase2, Some(out_dir))?;
    phase2.epochs.insert(
        0,
        EpochRecord { epoch: 0, train_loss: None, eval_char_bleu: epoch0_scores, checkpoint: Some(ckpt) },
    );
    Ok(ScheduleRecord { phase1, phase2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, group_by_source, Origin, SynthConfig};
    use crate::model::FreezePolicy;
    use crate::model::ModelConfig;

    #[test]
    fn schedule_hits_the_contracted_points() {
        let s = LrSchedule::new(2.0, 1000, 0.10);
        assert_eq!(s.warmup_steps, 100);
        assert!((s.lr_at(50) - 1.0).abs() < 1e-12); // half warmup -> half peak
        assert!((s.lr_at(100) - 2.0).abs() < 1e-12); // warmup end -> peak
        assert!((s.lr_at(550) - 1.0).abs() < 1e-12); // halfway down
        assert!(s.lr_at(1000).abs() < 1e-12); // final step -> 0
        assert!((s.lr_at(1) - 2.0 / 100.0).abs() < 1e-15); // first step
    }

    #[test]
    fn schedule_without_warmup_decays_from_peak() {
        let s = LrSchedule::new(1.0, 10, 0.0);
        assert_eq!(s.warmup_steps, 0);
        assert!((s.lr_at(1) - 0.9).abs() < 1e-12);
        assert!(s.lr_at(10).abs() < 1e-12);
    }

    fn toy_setup(seed: u64) -> (Vec<SentencePair>, Vocabulary) {
        let pairs = generate_synthetic(&SynthConfig {
            group_count: 60,
            max_variants: 2,
            seed,
            sentence_len_range: (1, 2),
            variant_rule_count: 3,
        })
        .unwrap();
        let langs = vec![LangTag::roman_urdu(), LangTag::urdu()];
        let vocab = Vocabulary::build(&pairs, &langs).unwrap();
        (pairs, vocab)
    }

    fn toy_model(vocab: &Vocabulary, seed: u64) -> ModelState {
        ModelState::init(ModelConfig {
            vocab_size: vocab.size(),
            d_model: 32,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 64,
            max_len: 24,
            dropout_rate: 0.0,
            seed,
        })
        .unwrap()
    }

    fn toy_config() -> FinetuneConfig {
        FinetuneConfig {
            phase1_epochs: 2,
            phase1_checkpoint_epoch: 1,
            phase2_epochs: 2,
            phase2_eval_epochs: vec![1, 2],
            batch_size: 16,
            grad_accum_steps: 2,
            learning_rate: 3e-3,
            max_len: 24,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_parameters_are_rejected() {
        let (pairs, vocab) = toy_setup(3);
        let mut m = toy_model(&vocab, 1);
        m.set_freeze(FreezePolicy::MlmPolicy).unwrap();
        let err = train_phase(&mut m, &vocab, &pairs, &[], &toy_config(), Phase::Phase1, None).unwrap_err();
        assert!(matches!(err, FinetuneError::FrozenParameters));
    }

    #[test]
    fn empty_data_is_rejected() {
        let (_, vocab) = toy_setup(3);
        let mut m = toy_model(&vocab, 1);
        let err = train_phase(&mut m, &vocab, &[], &[], &toy_config(), Phase::Phase1, None).unwrap_err();
        assert!(matches!(err, FinetuneError::EmptyData));
    }

    #[test]
    fn grad_accumulation_equals_large_batch() {
        // 4 micro-batches of 4 pairs vs one batch of 16: token-weighted
        // accumulation must reproduce the large-batch mean gradient
        let (pairs, vocab) = toy_setup(5);
        let pairs = &pairs[..16];
        let cfg = toy_config();
        let mut m = toy_model(&vocab, 2);

        let encode = |p: &SentencePair| {
            let (input, output) = cfg.direction.split_pair(p);
            let (in_lang, out_lang) = cfg.direction.langs(&cfg.src_lang, &cfg.tgt_lang);
            (
                vocab.encode(input, in_lang, cfg.max_len).unwrap(),
                vocab.encode(output, out_lang, cfg.max_len).unwrap(),
            )
        };

        let mut big = GradStore::zeros_like(&m);
        for p in pairs {
            let (src, tgt) = encode(p);
            forward_backward(&mut m, &src, &tgt, Mode::Eval, &mut big).unwrap();
        }
        let big = big.mean();

        let mut accum = GradStore::zeros_like(&m);
        for chunk in pairs.chunks(4) {
            let mut micro = GradStore::zeros_like(&m);
            for p in chunk {
                let (src, tgt) = encode(p);
                forward_backward(&mut m, &src, &tgt, Mode::Eval, &mut micro).unwrap();
            }
            accum.add_assign(&micro);
        }
        let small = accum.mean();

        for name in m.tensor_names() {
            let a = big.get(&m, name).unwrap();
            let b = small.get(&m, name).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                let denom = x.abs().max(y.abs()).max(1e-12);
                assert!((x - y).abs() / denom < 1e-6, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn toy_task_reaches_high_char_bleu() {
        // rule-deterministic mapping: roman -> urdu is learnable quickly
        let (pairs, vocab) = toy_setup(7);
        let groups = group_by_source(&pairs);
        let train: Vec<SentencePair> = groups[..50]
            .iter()
            .flat_map(|g| g.variants.iter().map(|v| SentencePair::new(g.source.clone(), v.clone(), Origin::Synthetic, 1)))
            .collect();
        let held_out: Vec<SentencePair> = groups[50..]
            .iter()
            .map(|g| SentencePair::new(g.source.clone(), g.variants[0].clone(), Origin::Synthetic, 1))
            .collect();
        let mut m = toy_model(&vocab, 3);
        let cfg = FinetuneConfig {
            phase1_epochs: 40,
            phase1_checkpoint_epoch: 1,
            batch_size: 8,
            grad_accum_steps: 1,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            max_len: 24,
            early_stop_char_bleu: Some(99.0),
            ..Default::default()
        };
        let eval_sets = vec![EvalSet { name: "held_out".into(), pairs: held_out }];
        let record = train_phase(&mut m, &vocab, &train, &eval_sets, &cfg, Phase::Phase1, None).unwrap();
        let best = record
            .epochs
            .iter()
            .filter_map(|e| e.eval_char_bleu.first().map(|(_, s)| *s))
            .fold(0.0f64, f64::max);
        assert!(best >= 95.0, "char-bleu only reached {best}: {record:?}");
    }

    #[test]
    fn phase2_epoch0_matches_phase1_checkpoint_eval() {
        let (pairs, vocab) = toy_setup(11);
        let (phase1_data, rest) = pairs.split_at(pairs.len() / 2);
        let (phase2_data, eval_pairs) = rest.split_at(rest.len() / 2);
        let mut m = toy_model(&vocab, 4);
        let cfg = toy_config();
        let eval_sets = vec![EvalSet { name: "eval".into(), pairs: eval_pairs.to_vec() }];
        let dir = tempfile::tempdir().unwrap();

        let record = run_schedule(&mut m, &vocab, &cfg, phase1_data, phase2_data, &eval_sets, dir.path()).unwrap();

        // the phase-2 epoch-0 eval re-scores the phase-1 checkpoint epoch
        let at_ckpt = record.phase1.char_bleu_at(cfg.phase1_checkpoint_epoch, "eval").unwrap();
        let epoch0 = record.phase2.char_bleu_at(0, "eval").unwrap();
        assert!((at_ckpt - epoch0).abs() < 1e-12, "{at_ckpt} vs {epoch0}");
        assert_eq!(record.phase2.epochs.len(), cfg.phase2_epochs + 1);
        // every phase-2 epoch scored every eval set
        for e in &record.phase2.epochs {
            assert_eq!(e.eval_char_bleu.len(), eval_sets.len());
        }
    }

    #[test]
    fn phase2_zero_epochs_returns_phase1_result() {
        let (pairs, vocab) = toy_setup(13);
        let mut m = toy_model(&vocab, 5);
        let cfg = FinetuneConfig { phase2_epochs: 0, phase2_eval_epochs: vec![], ..toy_config() };
        let dir = tempfile::tempdir().unwrap();
        let record = run_schedule(&mut m, &vocab, &cfg, &pairs, &pairs, &[], dir.path()).unwrap();
        assert!(record.phase2.epochs.is_empty());
        assert_eq!(record.phase1.epochs.len(), cfg.phase1_epochs);
    }

    #[test]
    fn repeated_evaluation_is_identical() {
        let (pairs, vocab) = toy_setup(17);
        let m = toy_model(&vocab, 6);
        let cfg = toy_config();
        let a = evaluate_char_bleu(&m, &vocab, &pairs[..10], &cfg).unwrap();
        let b = evaluate_char_bleu(&m, &vocab, &pairs[..10], &cfg).unwrap();
        assert_eq!(a, b);
    }
}
