//! Iterative parallel generation.
//!
//! Generation starts from a fully masked tensor. Each step predicts every
//! masked slot, picks a uniformly random subset of masked units whose size
//! follows the cosine schedule, samples those slots from their predicted
//! categoricals and freezes them. After `T` steps nothing is masked.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masking::{cosine_schedule, select_unmask, MaskStrategy};
use crate::predictor::{categorical_probs, fill_random_ids, guided_logits, LogitsModel};
use crate::quantizer::{dequantize, QuantizerSpec};
use crate::rng::SeededRng;
use crate::tensor::{FeatureTensor, MaskTensor, TokenTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub temperature: f64,
    pub guidance: f64,
    pub class_id: Option<usize>,
    pub seed: u64,
    /// Granularity of the units revealed together at each step.
    pub strategy: MaskStrategy,
    /// Keep a copy of the partial tensor after every step.
    pub snapshots: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 256,
            temperature: 1.0,
            guidance: 1.0,
            class_id: None,
            seed: 0,
            strategy: MaskStrategy::PerElement,
            snapshots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub masked_before: usize,
    /// Linear indices frozen at this step, ascending.
    pub unmasked: Vec<usize>,
    pub snapshot: Option<TokenTensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Number of model evaluations performed.
    pub model_calls: usize,
}

impl Trajectory {
    /// `step,masked_count,unmasked_count` rows.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step,masked_count,unmasked_count")?;
        for s in &self.steps {
            writeln!(out, "{},{},{}", s.step, s.masked_before, s.unmasked.len())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

fn validate(model: &dyn LogitsModel, cfg: &SampleConfig) -> Result<()> {
    let units = cfg.strategy.unit_count(model.shape());
    if cfg.steps == 0 || cfg.steps > units {
        return Err(Error::Config(format!(
            "steps must lie in [1, {units}], got {}",
            cfg.steps
        )));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    if !cfg.guidance.is_finite() {
        return Err(Error::Config("guidance scale must be finite".into()));
    }
    if cfg.class_id.is_some() && !model.is_conditional() {
        return Err(Error::Config("class given to an unconditional model".into()));
    }
    Ok(())
}

/// Inverse-CDF draw from `probs`.
fn draw(probs: &[f64], rng: &mut SeededRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn generate(model: &dyn LogitsModel, cfg: &SampleConfig) -> Result<(TokenTensor, Trajectory)> {
    generate_with_rng(model, cfg, &mut SeededRng::new(cfg.seed))
}

/// [`generate`] drawing from a caller-owned generator; `cfg.seed` is ignored.
pub fn generate_with_rng(
    model: &dyn LogitsModel,
    cfg: &SampleConfig,
    rng: &mut SeededRng,
) -> Result<(TokenTensor, Trajectory)> {
    validate(model, cfg)?;
    let shape = model.shape();
    let units = cfg.strategy.unit_count(shape);
    let schedule = cosine_schedule(units, cfg.steps)?;
    let guided = cfg.class_id.is_some() && model.is_conditional() && cfg.guidance != 1.0;

    let mut q = TokenTensor::zeros(shape, model.levels())?;
    let mut mask = MaskTensor::full(shape);
    let mut masked_units: Vec<usize> = (0..units).collect();
    let mut traj = Trajectory::default();

    for (t, count) in schedule.unmask_counts().into_iter().enumerate() {
        let mut input = q.clone();
        if model.random_mask_fill() {
            fill_random_ids(&mut input, &mask, rng);
        }
        let mut logits = model.logits(&input, &mask, cfg.class_id)?;
        traj.model_calls += 1;
        if guided {
            let uncond = model.logits(&input, &mask, None)?;
            traj.model_calls += 1;
            logits = guided_logits(&logits, &uncond, cfg.guidance)?;
        }

        let chosen = select_unmask(&masked_units, count, rng)?;
        let mut slots: Vec<usize> = chosen
            .iter()
            .flat_map(|&u| cfg.strategy.unit_members(shape, u))
            .collect();
        slots.sort_unstable();
        let masked_before = mask.count_masked();
        for &idx in &slots {
            let probs = categorical_probs(logits.slot(idx), cfg.temperature)?;
            q.set(idx, draw(&probs, rng) as u16)?;
            mask.set(idx, false);
        }
        masked_units.retain(|u| chosen.binary_search(u).is_err());
        traj.steps.push(TrajectoryStep {
            step: t + 1,
            masked_before,
            unmasked: slots,
            snapshot: cfg.snapshots.then(|| q.clone()),
        });
    }
    debug_assert_eq!(mask.count_masked(), 0);
    Ok((q, traj))
}

/// `count` independent generations; job `k` uses stream `k` of `cfg.seed`.
pub fn generate_batch(
    model: &dyn LogitsModel,
    cfg: &SampleConfig,
    count: usize,
) -> Result<Vec<(TokenTensor, Trajectory)>> {
    (0..count)
        .into_par_iter()
        .map(|k| generate_with_rng(model, cfg, &mut SeededRng::with_stream(cfg.seed, k as u64)))
        .collect()
}

/// Continuous features for an external decoder.
pub fn decode_features(q: &TokenTensor, spec: &QuantizerSpec) -> Result<FeatureTensor> {
    dequantize(q, spec)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::predictor::LogitsTensor;
    use crate::tensor::Shape3;

    /// Fixed logits independent of the input; counts invocations.
    struct Constant {
        shape: Shape3,
        calls: AtomicUsize,
        conditional: bool,
    }

    impl LogitsModel for Constant {
        fn shape(&self) -> Shape3 {
            self.shape
        }
        fn levels(&self) -> usize {
            3
        }
        fn is_conditional(&self) -> bool {
            self.conditional
        }
        fn logits(&self, _q: &TokenTensor, _m: &MaskTensor, c: Option<usize>) -> Result<LogitsTensor> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let bias = if c.is_some() { 1.0 } else { 0.0 };
            let scores = (0..self.shape.total() * 3)
                .map(|k| if k % 3 == 0 { bias } else { 0.0 })
                .collect();
            LogitsTensor::new(self.shape, 3, scores)
        }
    }

    fn model(conditional: bool) -> Constant {
        Constant {
            shape: Shape3::new(2, 3, 4).unwrap(),
            calls: AtomicUsize::new(0),
            conditional,
        }
    }

    #[test]
    fn frozen_slots_never_change() {
        let m = model(false);
        let cfg = SampleConfig {
            steps: 7,
            seed: 4,
            snapshots: true,
            ..Default::default()
        };
        let (out, traj) = generate(&m, &cfg).unwrap();
        let mut frozen = vec![false; 24];
        for s in &traj.steps {
            for &idx in &s.unmasked {
                assert!(!frozen[idx]);
                frozen[idx] = true;
            }
            let snap = s.snapshot.as_ref().unwrap();
            for (idx, &f) in frozen.iter().enumerate() {
                if f {
                    assert_eq!(snap.get(idx), out.get(idx));
                }
            }
        }
        assert!(frozen.into_iter().all(|f| f));
        let counts: Vec<usize> = traj.steps.iter().map(|s| s.masked_before).collect();
        let curve = cosine_schedule(24, 7).unwrap();
        assert_eq!(counts, curve.masked_curve()[..7].to_vec());
    }

    #[test]
    fn call_count_is_steps_or_double_with_guidance() {
        let m = model(true);
        let cfg = SampleConfig {
            steps: 5,
            class_id: Some(0),
            ..Default::default()
        };
        assert_eq!(generate(&m, &cfg).unwrap().1.model_calls, 5);
        let cfg = SampleConfig { guidance: 3.0, ..cfg };
        assert_eq!(generate(&m, &cfg).unwrap().1.model_calls, 10);
        assert_eq!(m.calls.load(Ordering::Relaxed), 15);
    }

    #[test]
    fn rejects_bad_configs() {
        let m = model(false);
        for cfg in [
            SampleConfig { steps: 0, ..Default::default() },
            SampleConfig { steps: 25, ..Default::default() },
            SampleConfig { steps: 4, temperature: 0.0, ..Default::default() },
            SampleConfig { steps: 4, class_id: Some(1), ..Default::default() },
            SampleConfig { steps: 5, strategy: MaskStrategy::PerDim, ..Default::default() },
        ] {
            assert!(generate(&m, &cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let m = model(false);
        let cfg = SampleConfig { steps: 6, seed: 11, ..Default::default() };
        assert_eq!(generate(&m, &cfg).unwrap(), generate(&m, &cfg).unwrap());
        let batch = generate_batch(&m, &cfg, 4).unwrap();
        assert_eq!(batch, generate_batch(&m, &cfg, 4).unwrap());
        assert_ne!(batch[0].0, batch[1].0);
    }

    #[test]
    fn per_spatial_units_reveal_whole_positions() {
        let m = model(false);
        let cfg = SampleConfig {
            steps: 3,
            strategy: MaskStrategy::PerSpatial,
            ..Default::default()
        };
        let (_, traj) = generate(&m, &cfg).unwrap();
        for s in &traj.steps {
            assert_eq!(s.unmasked.len() % 4, 0);
        }
    }

    #[test]
    fn trajectory_csv() {
        let m = model(false);
        let cfg = SampleConfig { steps: 2, ..Default::default() };
        let (_, traj) = generate(&m, &cfg).unwrap();
        let mut out = Vec::new();
        traj.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,masked_count,unmasked_count");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,24,"));
    }
}
