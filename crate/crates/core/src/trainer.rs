//! Masked cross-entropy objective and the optimization loop.
//!
//! One training step draws a mask ratio per sample, masks the sample at the
//! configured granularity, predicts the masked slots, and applies a clipped
//! AdamW update followed by an EMA update of every parameter. Per-sample
//! forward/backward passes run in parallel; their gradients are reduced in
//! sample order so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskRatioDist, MaskStrategy};
use crate::predictor::{
    backward, backward_into, fill_random_ids, forward_batch, forward_cached, ops, Gradients, LogitsTensor, MaskValueMode,
    PredictorConfig, PredictorParams,
};
use crate::quantizer::QuantizerSpec;
use crate::rng::SeededRng;
use crate::tensor::{MaskTensor, TokenTensor};

/// Samples per gradient accumulation chunk.
const GRAD_CHUNK: usize = 16;

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: TokenTensor,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub ema_momentum: f64,
    pub sigma: f64,
    pub cond_dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(with = "strategy_serde")]
    pub strategy: MaskStrategy,
    pub seed: u64,
}

mod strategy_serde {
    use super::MaskStrategy;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &MaskStrategy, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<MaskStrategy, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            weight_decay: 0.05,
            clip_norm: 3.0,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 2048,
            ema_momentum: 0.9999,
            sigma: crate::masking::DEFAULT_SIGMA,
            cond_dropout: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            strategy: MaskStrategy::PerElement,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("sigma", self.sigma),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, v) in [
            ("ema_momentum", self.ema_momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "need 0 < total_steps and warmup_steps <= total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean over masked slots of the negative log-probability of the target level.
pub fn masked_ce_loss(logits: &LogitsTensor, targets: &TokenTensor, m: &MaskTensor) -> Result<f64> {
    masked_ce_loss_grad(logits, targets, m).map(|(loss, _)| loss)
}

/// Loss together with its gradient with respect to every logit.
pub fn masked_ce_loss_grad(
    logits: &LogitsTensor,
    targets: &TokenTensor,
    m: &MaskTensor,
) -> Result<(f64, Vec<f64>)> {
    if logits.shape() != targets.shape() || m.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {}, targets {} and mask {} must agree",
            logits.shape(),
            targets.shape(),
            m.shape()
        )));
    }
    if logits.levels() != targets.levels() {
        return Err(Error::ShapeMismatch(format!(
            "logits have L={} but targets L={}",
            logits.levels(),
            targets.levels()
        )));
    }
    let masked = m.masked_indices();
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    let levels = logits.levels();
    let inv = 1.0 / masked.len() as f64;
    let mut grad = vec![0.0; logits.scores().len()];
    let mut total = 0.0;
    for idx in masked {
        let slot = logits.slot(idx);
        let target = targets.get(idx) as usize;
        total += ops::log_sum_exp(slot) - slot[target];
        let probs = ops::softmax(slot, 1.0);
        let g = &mut grad[idx * levels..(idx + 1) * levels];
        for (k, (gk, pk)) in g.iter_mut().zip(probs).enumerate() {
            *gk = inv * (pk - if k == target { 1.0 } else { 0.0 });
        }
    }
    Ok((total * inv, grad))
}

/// Loss and parameter gradients for one fully prepared sample.
pub fn sample_loss_and_grads(
    params: &PredictorParams,
    spec: &QuantizerSpec,
    input: &TokenTensor,
    targets: &TokenTensor,
    m: &MaskTensor,
    class: Option<usize>,
) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward_cached(params, spec, input, m, class)?;
    let (loss, dscores) = masked_ce_loss_grad(&logits, targets, m)?;
    Ok((loss, backward(params, &cache, &dscores)))
}

/// One prepared training sample: model input, targets, mask and class.
pub type SampleRef<'a> = (&'a TokenTensor, &'a TokenTensor, &'a MaskTensor, Option<usize>);

/// Adds the summed gradients of `samples` into `grads` and returns the summed loss.
pub fn accumulate_batch(
    params: &PredictorParams,
    spec: &QuantizerSpec,
    samples: &[SampleRef<'_>],
    grads: &mut Gradients,
) -> Result<f64> {
    let items: Vec<_> = samples.iter().map(|&(input, _, m, class)| (input, m, class)).collect();
    let (logits, cache) = forward_batch(params, spec, &items)?;
    let mut loss = 0.0;
    let mut dscores = Vec::with_capacity(logits.iter().map(|l| l.scores().len()).sum());
    for (lg, &(_, targets, m, _)) in logits.iter().zip(samples) {
        let (l, d) = masked_ce_loss_grad(lg, targets, m)?;
        loss += l;
        dscores.extend(d);
    }
    backward_into(params, &cache, &dscores, grads);
    Ok(loss)
}

/// First and second moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &PredictorParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Decoupled AdamW update; parameters flagged without decay get none.
pub fn adamw_update(
    params: &mut PredictorParams,
    grads: &Gradients,
    opt: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.params_mut().iter_mut().enumerate() {
        let (g, m, v) = (&grads.0[k], &mut opt.m.0[k], &mut opt.v.0[k]);
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        for j in 0..p.data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= decay * p.data[j];
            p.data[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// `ema = momentum * ema + (1 - momentum) * params`.
pub fn ema_update(ema: &mut PredictorParams, params: &PredictorParams, momentum: f64) {
    for (e, p) in ema.params_mut().iter_mut().zip(params.params()) {
        for (ev, pv) in e.data.iter_mut().zip(&p.data) {
            *ev = momentum * *ev + (1.0 - momentum) * pv;
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: PredictorParams,
    pub ema: PredictorParams,
    pub opt: OptimizerState,
    pub rng: SeededRng,
}

impl TrainState {
    /// Fresh parameters; initialization and training draw from distinct streams of `seed`.
    pub fn new(predictor: PredictorConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = PredictorParams::init(predictor, &mut SeededRng::with_stream(cfg.seed, 1))?;
        Ok(TrainState {
            ema: params.clone(),
            opt: OptimizerState::new(&params),
            params,
            rng: SeededRng::with_stream(cfg.seed, 2),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

struct Prepared {
    input: TokenTensor,
    mask: MaskTensor,
    class: Option<usize>,
}

fn prepare(
    example: &Example,
    params: &PredictorParams,
    cfg: &TrainConfig,
    dist: &MaskRatioDist,
    rng: &mut SeededRng,
) -> Result<Prepared> {
    let shape = example.tokens.shape();
    let ratio = dist.sample(rng);
    let mask = sample_mask(shape, ratio, cfg.strategy, rng)?;
    if mask.count_masked() == 0 {
        return Err(Error::EmptyMask);
    }
    let class = match example.class {
        Some(c) if params.config().classes > 0 && !rng.bernoulli(cfg.cond_dropout) => Some(c),
        _ => None,
    };
    let mut input = example.tokens.clone();
    if params.config().mask_mode == MaskValueMode::RandomId {
        fill_random_ids(&mut input, &mask, rng);
    }
    Ok(Prepared { input, mask, class })
}

/// One optimization step on `batch`.
pub fn train_step(
    batch: &[Example],
    state: &mut TrainState,
    cfg: &TrainConfig,
    spec: &QuantizerSpec,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let dist = MaskRatioDist::new(cfg.sigma)?;
    let prepared = batch
        .iter()
        .map(|ex| prepare(ex, &state.params, cfg, &dist, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;

    // Fixed-size chunks accumulate sequentially and are reduced in order,
    // so the result does not depend on how many workers run them.
    let params = &state.params;
    let partials = prepared
        .par_chunks(GRAD_CHUNK)
        .zip(batch.par_chunks(GRAD_CHUNK))
        .map(|(ps, exs)| {
            let mut grads = params.zeros_like();
            let samples: Vec<SampleRef<'_>> =
                ps.iter().zip(exs).map(|(p, ex)| (&p.input, &ex.tokens, &p.mask, p.class)).collect();
            let loss = accumulate_batch(params, spec, &samples, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut parts = partials.into_iter();
    let (mut loss, mut grads) = parts.next().expect("batch is non-empty");
    for (l, g) in parts {
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    grads.scale(inv);
    let step = state.opt.step + 1;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }

    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    let lr = lr_at(step, cfg);
    adamw_update(&mut state.params, &grads, &mut state.opt, lr, cfg);
    ema_update(&mut state.ema, &state.params, cfg.ema_momentum);
    Ok(StepReport {
        step,
        loss,
        grad_norm,
        lr,
    })
}

/// Draws a batch (with replacement) from `corpus` and takes one step.
pub fn train_on_corpus(
    corpus: &[Example],
    state: &mut TrainState,
    cfg: &TrainConfig,
    spec: &QuantizerSpec,
) -> Result<StepReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let batch: Vec<Example> = (0..cfg.batch_size)
        .map(|_| corpus[state.rng.below(corpus.len())].clone())
        .collect();
    train_step(&batch, state, cfg, spec)
}

/// Held-out masked NLL: mean over examples of [`masked_ce_loss`], with masks
/// drawn from the training distribution by a dedicated generator.
pub fn masked_nll<F>(corpus: &[Example], cfg: &TrainConfig, seed: u64, mut logits_for: F) -> Result<f64>
where
    F: FnMut(&TokenTensor, &MaskTensor, Option<usize>) -> Result<LogitsTensor>,
{
    let dist = MaskRatioDist::new(cfg.sigma)?;
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    for ex in corpus {
        let ratio = dist.sample(&mut rng);
        let mask = sample_mask(ex.tokens.shape(), ratio, cfg.strategy, &mut rng)?;
        let logits = logits_for(&ex.tokens, &mask, ex.class)?;
        total += masked_ce_loss(&logits, &ex.tokens, &mask)?;
    }
    Ok(total / corpus.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::CalibrationStats;
    use crate::tensor::Shape3;

    fn shape1(levels: usize, scores: Vec<f64>) -> LogitsTensor {
        LogitsTensor::new(Shape3::new(1, 1, scores.len() / levels).unwrap(), levels, scores).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_levels() {
        let logits = shape1(4, vec![0.0; 4]);
        let t = TokenTensor::new(logits.shape(), 4, vec![2]).unwrap();
        let loss = masked_ce_loss(&logits, &t, &MaskTensor::full(logits.shape())).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let logits = shape1(2, vec![0.0, f64::NEG_INFINITY]);
        let t = TokenTensor::new(logits.shape(), 2, vec![0]).unwrap();
        let loss = masked_ce_loss(&logits, &t, &MaskTensor::full(logits.shape())).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mean_over_masked_slots() {
        // Slot 0: uniform over 2 (ln 2); slot 1: certain (0); slot 2 unmasked.
        let logits = shape1(2, vec![0.0, 0.0, 0.0, f64::NEG_INFINITY, 5.0, -5.0]);
        let t = TokenTensor::new(logits.shape(), 2, vec![1, 0, 1]).unwrap();
        let m = MaskTensor::from_indices(logits.shape(), &[0, 1]).unwrap();
        let loss = masked_ce_loss(&logits, &t, &m).unwrap();
        assert!((loss - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn unmasked_logits_do_not_affect_loss() {
        let t = TokenTensor::new(Shape3::new(1, 1, 2).unwrap(), 3, vec![1, 2]).unwrap();
        let m = MaskTensor::from_indices(t.shape(), &[0]).unwrap();
        let a = shape1(3, vec![0.1, 0.5, -0.2, 9.0, -3.0, 1.0]);
        let b = shape1(3, vec![0.1, 0.5, -0.2, -7.0, 2.0, 0.0]);
        assert_eq!(masked_ce_loss(&a, &t, &m).unwrap(), masked_ce_loss(&b, &t, &m).unwrap());
        let (_, g) = masked_ce_loss_grad(&a, &t, &m).unwrap();
        assert!(g[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logits = shape1(2, vec![0.0, 0.0]);
        let t = TokenTensor::new(logits.shape(), 2, vec![0]).unwrap();
        assert!(matches!(
            masked_ce_loss(&logits, &t, &MaskTensor::empty(logits.shape())),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            total_steps: 110,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10, &cfg), 5e-5);
        assert!(lr_at(110, &cfg).abs() < 1e-20);
        assert!((lr_at(5, &cfg) - 2.5e-5).abs() < 1e-20);
        assert!((lr_at(60, &cfg) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        let cfg = PredictorConfig {
            shape: Shape3::new(1, 1, 1).unwrap(),
            levels: 2,
            hidden: 2,
            blocks: 1,
            heads: 1,
            mlp_ratio: 1,
            classes: 0,
            mask_mode: MaskValueMode::Learned,
        };
        let params = PredictorParams::init(cfg, &mut SeededRng::new(0)).unwrap();
        let mut g = params.zeros_like();
        g.0[0][0] = 6.0;
        let before = clip_grad_norm(&mut g, 3.0);
        assert_eq!(before, 6.0);
        assert!((g.global_norm() - 3.0).abs() < 1e-12);
        let mut small = params.zeros_like();
        small.0[0][0] = 1.0;
        clip_grad_norm(&mut small, 3.0);
        assert_eq!(small.0[0][0], 1.0);
    }

    fn tiny(mode: MaskValueMode, classes: usize) -> PredictorConfig {
        PredictorConfig {
            shape: Shape3::new(2, 2, 3).unwrap(),
            levels: 2,
            hidden: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            classes,
            mask_mode: mode,
        }
    }

    #[test]
    fn no_decay_on_embeddings_norms_and_mask_scalars() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut params = PredictorParams::init(tiny(MaskValueMode::Learned, 2), &mut SeededRng::new(1)).unwrap();
        for p in params.params_mut() {
            p.data.iter_mut().for_each(|v| *v += 0.5);
        }
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let zero = params.zeros_like();
        adamw_update(&mut params, &zero, &mut opt, cfg.lr, &cfg);
        for (a, b) in before.params().iter().zip(params.params()) {
            let exempt = a.name.contains("embed") || a.name.contains("ln") || a.name == "mask_value" || a.name.ends_with("bias");
            assert_eq!(a.decay, !exempt, "{}", a.name);
            for (x, y) in a.data.iter().zip(&b.data) {
                if a.decay {
                    assert!((y - x * (1.0 - 0.05)).abs() < 1e-12);
                } else {
                    assert_eq!(x, y, "{}", a.name);
                }
            }
        }
    }

    #[test]
    fn ema_follows_definition() {
        let mut ema = PredictorParams::init(tiny(MaskValueMode::Learned, 0), &mut SeededRng::new(1)).unwrap();
        let params = PredictorParams::init(tiny(MaskValueMode::Learned, 0), &mut SeededRng::new(2)).unwrap();
        let prev = ema.clone();
        ema_update(&mut ema, &params, 0.9999);
        for ((e, p), q) in ema.params().iter().zip(params.params()).zip(prev.params()) {
            for ((ev, pv), qv) in e.data.iter().zip(&p.data).zip(&q.data) {
                assert!((ev - (0.9999 * qv + 0.0001 * pv)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mask_scalar_gets_no_gradient_without_masking() {
        let params = PredictorParams::init(tiny(MaskValueMode::Learned, 0), &mut SeededRng::new(3)).unwrap();
        let spec = QuantizerSpec::new(2, CalibrationStats::uniform(3, -1.0, 1.0).unwrap()).unwrap();
        let shape = params.config().shape;
        let t = TokenTensor::new(shape, 2, (0..12).map(|i| (i % 2) as u16).collect()).unwrap();
        // The loss needs a masked target but the input can be fully visible.
        let (logits, cache) = forward_cached(&params, &spec, &t, &MaskTensor::empty(shape), None).unwrap();
        let (_, dscores) = masked_ce_loss_grad(&logits, &t, &MaskTensor::full(shape)).unwrap();
        let g = backward(&params, &cache, &dscores);
        let idx = params.params().iter().position(|p| p.name == "mask_value").unwrap();
        assert!(g.0[idx].iter().all(|&v| v == 0.0));
        assert!(g.global_norm() > 0.0);
    }

    #[test]
    fn equal_seeds_give_identical_params() {
        let spec = QuantizerSpec::new(2, CalibrationStats::uniform(3, -1.0, 1.0).unwrap()).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_steps: 2,
            total_steps: 10,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        };
        let mut rng = SeededRng::new(0);
        let corpus: Vec<Example> = (0..16)
            .map(|k| Example {
                tokens: TokenTensor::new(
                    Shape3::new(2, 2, 3).unwrap(),
                    2,
                    (0..12).map(|_| rng.below(2) as u16).collect(),
                )
                .unwrap(),
                class: Some(k % 2),
            })
            .collect();
        let run = || {
            let mut st = TrainState::new(tiny(MaskValueMode::Learned, 2), &cfg).unwrap();
            for _ in 0..10 {
                train_on_corpus(&corpus, &mut st, &cfg, &spec).unwrap();
            }
            st
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
        assert_ne!(a.params, a.ema);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
