//! Small-scale verification against exactly enumerable joints.
//!
//! A [`ToyJoint`] is small enough to enumerate, so the Bayes-optimal
//! conditionals are available in closed form. Sampling with them and
//! comparing against the table checks the sampler end to end, and a trained
//! predictor can be scored against the same oracle.

mod joint;

use std::io::Write;

use serde::Serialize;

pub use joint::{
    oracle_forward, outcome_counts, synth_corpus, synth_labeled, tv_distance, Mixture, OracleModel, ToyJoint,
    MAX_OUTCOMES,
};

use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskRatioDist, MaskStrategy};
use crate::predictor::{fill_random_ids, LogitsModel, LogitsTensor, MaskValueMode, Predictor, PredictorConfig};
use crate::quantizer::{CalibrationStats, QuantizerSpec};
use crate::rng::SeededRng;
use crate::sampler::{generate_batch, SampleConfig};
use crate::tensor::{MaskTensor, TokenTensor};
use crate::trainer::{masked_ce_loss, train_on_corpus, Example, StepReport, TrainConfig, TrainState};

/// Streams of the protocol seed, one per independent consumer.
const STREAM_TRAIN_CORPUS: u64 = 10;
const STREAM_HELD_OUT: u64 = 11;
const STREAM_EVAL_MASKS: u64 = 12;
const STREAM_MASK_CHECK: u64 = 13;
const STREAM_SAMPLES: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub strategy: String,
    pub subject: String,
    /// Total variation between generated samples and the joint.
    pub tv: f64,
    /// Largest absolute per-level error of each slot's empirical marginal.
    pub marginal_errors: Vec<f64>,
    /// Mean masked cross-entropy per masked token on held-out data.
    pub nll: f64,
    /// Oracle cross-entropy on the same examples and masks.
    pub oracle_nll: f64,
    /// Argmax accuracy over masked tokens.
    pub accuracy: f64,
    pub samples: usize,
    pub steps: usize,
    pub model_calls: usize,
    /// Fraction of sampled training masks that respect the strategy's unit structure.
    pub structure_conformance: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "strategy,subject,tv,max_marginal_error,nll,oracle_nll,accuracy,samples,steps,model_calls,structure_conformance,config_hash";

    pub fn csv_row(&self) -> String {
        let max_err = self.marginal_errors.iter().cloned().fold(0.0, f64::max);
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.6},{}",
            self.strategy,
            self.subject,
            self.tv,
            max_err,
            self.nll,
            self.oracle_nll,
            self.accuracy,
            self.samples,
            self.steps,
            self.model_calls,
            self.structure_conformance,
            self.config_hash
        )
    }

    pub fn write_csv(reports: &[EvalReport], out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in reports {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_jsonl(reports: &[EvalReport], out: &mut impl Write) -> std::io::Result<()> {
        for r in reports {
            serde_json::to_writer(&mut *out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// What an ablation evaluates.
#[derive(Clone, Debug, PartialEq)]
pub enum Subject {
    /// Exact conditionals of the joint.
    Oracle,
    /// A predictor trained from scratch on draws from the joint.
    Train {
        predictor: PredictorConfig,
        train: TrainConfig,
        corpus_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub joint: ToyJoint,
    /// Generation steps; `None` uses one step per unit of the strategy.
    pub steps: Option<usize>,
    pub samples: usize,
    pub eval_examples: usize,
    /// Masks drawn to check structural conformance.
    pub mask_checks: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Protocol {
    pub fn new(joint: ToyJoint, seed: u64) -> Self {
        Protocol {
            joint,
            steps: None,
            samples: 10_000,
            eval_examples: 2_000,
            mask_checks: 1_000,
            sigma: crate::masking::DEFAULT_SIGMA,
            seed,
        }
    }
}

/// Masked NLL and argmax accuracy over `examples`, masks drawn with `strategy`.
///
/// Returns `(nll, accuracy)` where NLL is averaged per example (each example's
/// loss is itself a mean over its masked tokens) and accuracy over all masked tokens.
pub fn masked_metrics<F>(
    examples: &[Example],
    strategy: MaskStrategy,
    sigma: f64,
    rng: &mut SeededRng,
    mut logits_for: F,
) -> Result<(f64, f64)>
where
    F: FnMut(&TokenTensor, &MaskTensor, Option<usize>, &mut SeededRng) -> Result<LogitsTensor>,
{
    if examples.is_empty() {
        return Err(Error::InvalidInput("no evaluation examples".into()));
    }
    let dist = MaskRatioDist::new(sigma)?;
    let (mut nll, mut hits, mut total) = (0.0, 0usize, 0usize);
    for ex in examples {
        let mask = loop {
            let m = sample_mask(ex.tokens.shape(), dist.sample(rng), strategy, rng)?;
            if m.count_masked() > 0 {
                break m;
            }
        };
        let logits = logits_for(&ex.tokens, &mask, ex.class, rng)?;
        nll += masked_ce_loss(&logits, &ex.tokens, &mask)?;
        for idx in mask.masked_indices() {
            let slot = logits.slot(idx);
            let best = (0..slot.len()).fold(0, |b, k| if slot[k] > slot[b] { k } else { b });
            hits += (best == ex.tokens.get(idx) as usize) as usize;
            total += 1;
        }
    }
    Ok((nll / examples.len() as f64, hits as f64 / total as f64))
}

/// Per-slot `max_l |p̂(q_k = l) − p(q_k = l)|`.
pub fn marginal_errors(samples: &[TokenTensor], joint: &ToyJoint) -> Vec<f64> {
    let levels = joint.levels();
    let exact = joint.slot_marginals();
    let mut counts = vec![0u64; exact.len()];
    for q in samples {
        for (k, &id) in q.ids().iter().enumerate() {
            counts[k * levels + id as usize] += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    exact
        .chunks(levels)
        .zip(counts.chunks(levels))
        .map(|(p, c)| {
            p.iter()
                .zip(c)
                .map(|(&p, &c)| (c as f64 / n - p).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Whether every per-slot, per-level empirical frequency lies within
/// `z` binomial standard deviations of the exact marginal.
pub fn marginals_within(samples: &[TokenTensor], joint: &ToyJoint, z: f64) -> bool {
    let levels = joint.levels();
    let exact = joint.slot_marginals();
    let n = samples.len() as f64;
    let mut counts = vec![0u64; exact.len()];
    for q in samples {
        for (k, &id) in q.ids().iter().enumerate() {
            counts[k * levels + id as usize] += 1;
        }
    }
    exact.iter().zip(&counts).all(|(&p, &c)| {
        let sd = (p * (1.0 - p) / n).sqrt();
        (c as f64 / n - p).abs() <= z * sd + 1e-12
    })
}

/// Quantizer used to feed toy token tensors to a predictor.
pub fn toy_spec(joint: &ToyJoint) -> QuantizerSpec {
    let stats = CalibrationStats::uniform(joint.shape().d, -1.0, 1.0).expect("fixed range is valid");
    QuantizerSpec::new(joint.levels(), stats).expect("toy levels are valid")
}

fn examples_from(joint: &ToyJoint, n: usize, labelled: bool, rng: &mut SeededRng) -> Result<Vec<Example>> {
    if labelled {
        synth_labeled(joint, n, rng)
    } else {
        Ok(synth_corpus(joint, n, rng)?
            .into_iter()
            .map(|tokens| Example { tokens, class: None })
            .collect())
    }
}

/// Trains a predictor on `corpus_size` draws from `joint`, calling `on_step` after every step.
pub fn train_toy(
    joint: &ToyJoint,
    predictor: &PredictorConfig,
    train: &TrainConfig,
    corpus_size: usize,
    seed: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainState> {
    if predictor.shape != joint.shape() || predictor.levels != joint.levels() {
        return Err(Error::ShapeMismatch("predictor does not match the toy joint".into()));
    }
    let corpus = examples_from(
        joint,
        corpus_size,
        predictor.classes > 0,
        &mut SeededRng::with_stream(seed, STREAM_TRAIN_CORPUS),
    )?;
    let spec = toy_spec(joint);
    let mut state = TrainState::new(predictor.clone(), train)?;
    while state.step() < train.total_steps {
        let report = train_on_corpus(&corpus, &mut state, train, &spec)?;
        on_step(&report);
    }
    Ok(state)
}

fn config_hash(strategy: MaskStrategy, subject: &Subject, protocol: &Protocol) -> String {
    let canonical = format!("{strategy}|{subject:?}|{protocol:?}");
    format!("{:08x}", crc32fast::hash(canonical.as_bytes()))
}

/// Evaluates `subject` under masking granularity `strategy` on the protocol's joint.
///
/// Every strategy receives the same sample count and seeds. Generation
/// reveals whole units, so coarser strategies sample coupled slots jointly
/// from independent per-slot conditionals.
pub fn run_ablation(strategy: MaskStrategy, subject: &Subject, protocol: &Protocol) -> Result<EvalReport> {
    let joint = &protocol.joint;
    let shape = joint.shape();
    let units = strategy.unit_count(shape);
    let steps = protocol.steps.unwrap_or(units);
    if protocol.samples == 0 || protocol.eval_examples == 0 {
        return Err(Error::Config("samples and eval examples must be positive".into()));
    }

    let mut check_rng = SeededRng::with_stream(protocol.seed, STREAM_MASK_CHECK);
    let dist = MaskRatioDist::new(protocol.sigma)?;
    let mut conforming = 0usize;
    for _ in 0..protocol.mask_checks {
        let m = sample_mask(shape, dist.sample(&mut check_rng), strategy, &mut check_rng)?;
        conforming += strategy.conforms(&m) as usize;
    }
    let structure_conformance = if protocol.mask_checks == 0 {
        1.0
    } else {
        conforming as f64 / protocol.mask_checks as f64
    };

    let labelled = matches!(subject, Subject::Train { predictor, .. } if predictor.classes > 0);
    let held_out = examples_from(
        joint,
        protocol.eval_examples,
        labelled,
        &mut SeededRng::with_stream(protocol.seed, STREAM_HELD_OUT),
    )?;

    let oracle = OracleModel { joint };
    let trained = match subject {
        Subject::Oracle => None,
        Subject::Train {
            predictor,
            train,
            corpus_size,
        } => {
            let train = TrainConfig {
                strategy,
                sigma: protocol.sigma,
                ..train.clone()
            };
            let state = train_toy(joint, predictor, &train, *corpus_size, protocol.seed, |_| {})?;
            Some(Predictor::new(state.ema, toy_spec(joint))?)
        }
    };
    let model: &dyn LogitsModel = match &trained {
        Some(p) => p,
        None => &oracle,
    };

    // Model and oracle see identical masks: both evaluations replay the same stream.
    let random_fill = model.random_mask_fill();
    let (nll, accuracy) = masked_metrics(
        &held_out,
        strategy,
        protocol.sigma,
        &mut SeededRng::with_stream(protocol.seed, STREAM_EVAL_MASKS),
        |q, m, c, rng| {
            if random_fill {
                let mut input = q.clone();
                fill_random_ids(&mut input, m, rng);
                model.logits(&input, m, c)
            } else {
                model.logits(q, m, c)
            }
        },
    )?;
    let (oracle_nll, _) = masked_metrics(
        &held_out,
        strategy,
        protocol.sigma,
        &mut SeededRng::with_stream(protocol.seed, STREAM_EVAL_MASKS),
        |q, m, _, rng| {
            if random_fill {
                // Keep the mask stream aligned with the model pass.
                fill_random_ids(&mut q.clone(), m, rng);
            }
            oracle.logits(q, m, None)
        },
    )?;

    let cfg = SampleConfig {
        steps,
        strategy,
        seed: protocol.seed.wrapping_add(STREAM_SAMPLES),
        ..Default::default()
    };
    let generated = generate_batch(model, &cfg, protocol.samples)?;
    let model_calls = generated.iter().map(|(_, t)| t.model_calls).sum();
    let samples: Vec<TokenTensor> = generated.into_iter().map(|(q, _)| q).collect();
    let tv = tv_distance(&outcome_counts(&samples, joint), joint)?;

    Ok(EvalReport {
        strategy: strategy.name().to_string(),
        subject: if trained.is_some() { "trained" } else { "oracle" }.to_string(),
        tv,
        marginal_errors: marginal_errors(&samples, joint),
        nll,
        oracle_nll,
        accuracy,
        samples: protocol.samples,
        steps,
        model_calls,
        structure_conformance,
        config_hash: config_hash(strategy, subject, protocol),
    })
}

/// Oracle sampling TV at `steps` for the given sample count and seed.
pub fn oracle_tv(joint: &ToyJoint, steps: usize, samples: usize, seed: u64) -> Result<f64> {
    let cfg = SampleConfig {
        steps,
        seed,
        ..Default::default()
    };
    let generated = generate_batch(&OracleModel { joint }, &cfg, samples)?;
    let samples: Vec<TokenTensor> = generated.into_iter().map(|(q, _)| q).collect();
    tv_distance(&outcome_counts(&samples, joint), joint)
}

/// Whether a config uses the learned mask scalars (for reporting).
pub fn mask_mode_name(cfg: &PredictorConfig) -> String {
    match cfg.mask_mode {
        MaskValueMode::Learned => "learned".into(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_protocol() -> Protocol {
        Protocol {
            samples: 2_000,
            eval_examples: 200,
            mask_checks: 200,
            ..Protocol::new(ToyJoint::default_verification(), 3)
        }
    }

    #[test]
    fn oracle_report_is_reproducible() {
        let p = small_protocol();
        let a = run_ablation(MaskStrategy::PerElement, &Subject::Oracle, &p).unwrap();
        let b = run_ablation(MaskStrategy::PerElement, &Subject::Oracle, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.structure_conformance, 1.0);
        assert!((0.0..=1.0).contains(&a.tv));
        assert!((0.0..=1.0).contains(&a.accuracy));
        assert_eq!(a.nll, a.oracle_nll);
        assert_eq!(a.steps, 12);
        assert_eq!(a.model_calls, 12 * 2_000);
    }

    #[test]
    fn reports_render() {
        let r = run_ablation(MaskStrategy::PerDim, &Subject::Oracle, &small_protocol()).unwrap();
        assert_eq!(r.steps, 3);
        let mut csv = Vec::new();
        EvalReport::write_csv(&[r.clone()], &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("per-dim,oracle,"));
        let mut jl = Vec::new();
        EvalReport::write_jsonl(&[r], &mut jl).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&jl).unwrap();
        assert_eq!(v["strategy"], "per-dim");
    }

    #[test]
    fn hash_tracks_protocol() {
        let p = small_protocol();
        let q = Protocol { seed: 4, ..p.clone() };
        assert_ne!(
            config_hash(MaskStrategy::PerElement, &Subject::Oracle, &p),
            config_hash(MaskStrategy::PerElement, &Subject::Oracle, &q)
        );
    }

    #[test]
    fn exact_marginals_pass_the_band() {
        let j = ToyJoint::default_verification();
        let s = synth_corpus(&j, 20_000, &mut SeededRng::new(1)).unwrap();
        assert!(marginals_within(&s, &j, 4.0));
        let ones = vec![j.outcome_tokens(j.outcome_count() - 1); 100];
        assert!(!marginals_within(&ones, &j, 3.0));
    }
}
