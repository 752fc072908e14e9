//! Self-check suites behind `cubediff verify`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{self, marginals_within, oracle_tv, run_ablation, OracleModel, Protocol, Subject, ToyJoint};
use crate::masking::{cosine_schedule, sample_mask, MaskStrategy};
use crate::predictor::{forward, fill_random_ids, MaskValueMode, PredictorConfig, PredictorParams};
use crate::quantizer::{dequantize, quantize, CalibrationStats, QuantizerSpec};
use crate::rng::SeededRng;
use crate::sampler::{generate_batch, SampleConfig};
use crate::tensor::{FeatureTensor, MaskTensor, Shape3, TokenTensor};
use crate::trainer::{masked_ce_loss, sample_loss_and_grads};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Quantizer,
    Schedule,
    Oracle,
    Gradcheck,
    Ablation,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Quantizer,
        Suite::Schedule,
        Suite::Oracle,
        Suite::Gradcheck,
        Suite::Ablation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Quantizer => "quantizer",
            Suite::Schedule => "schedule",
            Suite::Oracle => "oracle",
            Suite::Gradcheck => "gradcheck",
            Suite::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "[{tag}] {}/{}: {}", self.suite, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Sizes of the randomized checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub quantizer_cases: usize,
    pub oracle_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            quantizer_cases: 2_000,
            oracle_samples: 100_000,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    match suite {
        Suite::Quantizer => quantizer_suite(opts),
        Suite::Schedule => schedule_suite(opts),
        Suite::Oracle => oracle_suite(opts),
        Suite::Gradcheck => gradcheck_suite(opts),
        Suite::Ablation => ablation_suite(opts),
    }
}

fn random_shape(rng: &mut SeededRng, max: (usize, usize, usize)) -> Shape3 {
    Shape3::new(1 + rng.below(max.0), 1 + rng.below(max.1), 1 + rng.below(max.2)).expect("positive extents")
}

fn random_spec(d: usize, levels: usize, rng: &mut SeededRng) -> QuantizerSpec {
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..d)
        .map(|_| {
            let lo = rng.uniform() * 8.0 - 4.0;
            (lo, lo + 0.1 + rng.uniform() * 6.0)
        })
        .unzip();
    QuantizerSpec::new(levels, CalibrationStats::new(lo, hi, 0).expect("non-degenerate")).expect("valid levels")
}

fn quantizer_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Quantizer,
        checks: Vec::new(),
    };
    let mut rng = SeededRng::with_stream(opts.seed, 100);
    let mut idem_fail = 0;
    let mut bound_fail = 0;
    let mut worst = 0.0f64;
    for _ in 0..opts.quantizer_cases {
        let shape = random_shape(&mut rng, (6, 6, 16));
        let levels = [2, 4, 8, 16][rng.below(4)];
        let spec = random_spec(shape.d, levels, &mut rng);
        let ids = (0..shape.total()).map(|_| rng.below(levels) as u16).collect();
        let q = TokenTensor::new(shape, levels, ids)?;
        if quantize(&dequantize(&q, &spec)?, &spec)? != q {
            idem_fail += 1;
        }
        let values: Vec<f32> = (0..shape.total())
            .map(|k| {
                let dim = k % shape.d;
                let (lo, hi) = (spec.stats().lo[dim], spec.stats().hi[dim]);
                (lo + rng.uniform() * (hi - lo)) as f32
            })
            .collect();
        let z = FeatureTensor::new(shape, values)?;
        let back = dequantize(&quantize(&z, &spec)?, &spec)?;
        for (k, (&a, &b)) in z.values().iter().zip(back.values()).enumerate() {
            let half = spec.bin_width(k % shape.d) / 2.0;
            let err = (a as f64 - b as f64).abs();
            // Dequantized values are stored as f32.
            let slack = (b as f64).abs() * f32::EPSILON as f64;
            worst = worst.max(err / half);
            if err > half + slack {
                bound_fail += 1;
            }
        }
    }
    report.check(
        "idempotence",
        idem_fail == 0,
        format!("{idem_fail} of {} round trips changed ids", opts.quantizer_cases),
    );
    report.check(
        "half-bin-bound",
        bound_fail == 0,
        format!("{bound_fail} violations; worst error {worst:.4} half-bins"),
    );
    Ok(report)
}

fn schedule_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Schedule,
        checks: Vec::new(),
    };
    let mut rng = SeededRng::with_stream(opts.seed, 101);
    let mut failures = Vec::new();
    for _ in 0..100 {
        let n = 1 + rng.below(100_000);
        let t = 1 + rng.below(n);
        let s = cosine_schedule(n, t)?;
        let curve = s.masked_curve();
        let sum: usize = s.unmask_counts().iter().sum();
        let ok = sum == n
            && curve[0] == n
            && curve[t] == 0
            && curve.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            failures.push(format!("(N={n}, T={t})"));
        }
    }
    report.check(
        "conservation",
        failures.is_empty(),
        if failures.is_empty() {
            "100 random (N, T): sums, endpoints and monotonicity hold".into()
        } else {
            format!("failed for {}", failures.join(", "))
        },
    );
    Ok(report)
}

fn oracle_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Oracle,
        checks: Vec::new(),
    };
    let joint = ToyJoint::default_verification();

    // Chain rule: revealing slots one at a time in random order with the
    // oracle conditionals multiplies out to the joint probability.
    let mut rng = SeededRng::with_stream(opts.seed, 102);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let q = joint.sample(&mut rng);
        let mut order: Vec<usize> = (0..q.ids().len()).collect();
        for k in (1..order.len()).rev() {
            order.swap(k, rng.below(k + 1));
        }
        let mut mask = MaskTensor::full(joint.shape());
        let mut logp = 0.0;
        for &idx in &order {
            let c = joint.conditionals(&q, &mask)?;
            logp += c[idx * joint.levels() + q.get(idx) as usize].ln();
            mask.set(idx, false);
        }
        let exact = joint.probs()[joint.outcome_index(&q)].ln();
        worst = worst.max((logp - exact).abs());
    }
    report.check(
        "chain-consistency",
        worst < 1e-6,
        format!("max |log p_chain - log p| = {worst:.2e}"),
    );

    let cfg = SampleConfig {
        steps: joint.shape().total(),
        seed: opts.seed,
        ..Default::default()
    };
    let samples: Vec<TokenTensor> = generate_batch(&OracleModel { joint: &joint }, &cfg, opts.oracle_samples)?
        .into_iter()
        .map(|(q, _)| q)
        .collect();
    let tv = harness::tv_distance(&harness::outcome_counts(&samples, &joint), &joint)?;
    report.check(
        "tv",
        tv <= 0.05,
        format!("TV = {tv:.4} over {} samples at T = N (limit 0.05)", opts.oracle_samples),
    );
    report.check(
        "marginals",
        marginals_within(&samples, &joint, 3.0),
        "every per-slot marginal within 3 sigma".into(),
    );
    Ok(report)
}

/// Largest relative error between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// The predictor used by the gradient check.
pub fn gradcheck_config(mask_mode: MaskValueMode) -> PredictorConfig {
    PredictorConfig {
        shape: Shape3::new(2, 2, 3).expect("static shape"),
        levels: 2,
        hidden: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 2,
        mask_mode,
    }
}

/// Compares every parameter gradient of the masked loss against
/// `(f(p + h) - f(p - h)) / 2h`, relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(config: PredictorConfig, seed: u64) -> Result<GradCheck> {
    let mut rng = SeededRng::new(seed);
    let mut params = PredictorParams::init(config.clone(), &mut rng)?;
    // Move gains, biases and mask scalars off their initial constants so
    // every path carries a generic gradient.
    for p in params.params_mut() {
        for v in p.data.iter_mut() {
            *v += 0.3 * rng.standard_normal();
        }
    }
    let spec = QuantizerSpec::new(
        config.levels,
        CalibrationStats::uniform(config.shape.d, -1.0, 1.0)?,
    )?;
    let ids = (0..config.shape.total()).map(|_| rng.below(config.levels) as u16).collect();
    let targets = TokenTensor::new(config.shape, config.levels, ids)?;
    let mask = sample_mask(config.shape, 0.6, MaskStrategy::PerElement, &mut rng)?;
    let mut input = targets.clone();
    if config.mask_mode == MaskValueMode::RandomId {
        fill_random_ids(&mut input, &mask, &mut rng);
    }
    let class = (config.classes > 0).then_some(1);

    let (_, grads) = sample_loss_and_grads(&params, &spec, &input, &targets, &mask, class)?;
    let loss_at = |p: &PredictorParams| -> Result<f64> {
        masked_ce_loss(&forward(p, &spec, &input, &mask, class)?, &targets, &mask)
    };
    let h = 1e-5;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for pi in 0..params.params().len() {
        for k in 0..params.params()[pi].data.len() {
            let orig = params.params()[pi].data[k];
            params.params_mut()[pi].data[k] = orig + h;
            let up = loss_at(&params)?;
            params.params_mut()[pi].data[k] = orig - h;
            let down = loss_at(&params)?;
            params.params_mut()[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.0[pi][k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{k}]", params.params()[pi].name);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn gradcheck_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Gradcheck,
        checks: Vec::new(),
    };
    for mode in [MaskValueMode::Learned, MaskValueMode::Fixed(0.0), MaskValueMode::RandomId] {
        let g = gradient_check(gradcheck_config(mode), opts.seed)?;
        report.check(
            &format!("mask-{}", mode.to_string().split(':').next().unwrap_or("fixed")),
            g.max_rel_error < 1e-3,
            format!(
                "max relative error {:.2e} at {} over {} scalars",
                g.max_rel_error, g.worst_param, g.checked
            ),
        );
    }
    Ok(report)
}

fn ablation_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Ablation,
        checks: Vec::new(),
    };
    let protocol = Protocol {
        samples: (opts.oracle_samples / 5).max(1_000),
        eval_examples: 1_000,
        ..Protocol::new(ToyJoint::default_verification(), opts.seed)
    };
    let mut tvs = Vec::new();
    for strategy in MaskStrategy::ALL {
        let r = run_ablation(strategy, &Subject::Oracle, &protocol)?;
        report.check(
            &format!("{strategy}-structure"),
            r.structure_conformance == 1.0,
            format!("{:.1}% of masks conform", 100.0 * r.structure_conformance),
        );
        tvs.push((strategy, r.tv));
    }
    let tv_of = |s: MaskStrategy| tvs.iter().find(|(t, _)| *t == s).map(|(_, v)| *v).unwrap_or(f64::NAN);
    let (elem, dim) = (tv_of(MaskStrategy::PerElement), tv_of(MaskStrategy::PerDim));
    report.check(
        "per-dim-worse",
        dim > elem,
        format!("TV per-dim {dim:.4} vs per-element {elem:.4}"),
    );
    // Coarse steps lose joint structure: one-shot generation is measurably worse.
    let one = oracle_tv(&protocol.joint, 1, protocol.samples, opts.seed)?;
    report.check(
        "parallel-degradation",
        one > elem,
        format!("TV at T=1 {one:.4} vs T=N {elem:.4}"),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn quick_suites_pass() {
        let opts = VerifyOptions {
            quantizer_cases: 200,
            ..Default::default()
        };
        for s in [Suite::Quantizer, Suite::Schedule, Suite::Gradcheck] {
            let r = run_suite(s, &opts).unwrap();
            assert!(r.passed(), "{r}");
        }
    }
}
