use crate::error::{Error, Result};
use crate::predictor::{LogitsModel, LogitsTensor};
use crate::rng::SeededRng;
use crate::tensor::{MaskTensor, Shape3, TokenTensor};
use crate::trainer::Example;

/// Largest outcome table the harness will enumerate.
pub const MAX_OUTCOMES: usize = 1 << 20;

/// Template patterns mixed with independent per-slot corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub templates: Vec<Vec<u16>>,
    pub weights: Vec<f64>,
    /// Probability that a slot deviates from its template (to a uniformly chosen other level).
    pub corruption: f64,
}

/// Explicit joint distribution over every `L^N` token configuration.
///
/// Outcome `o` assigns level `(o / L^k) % L` to linear slot `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyJoint {
    shape: Shape3,
    levels: usize,
    probs: Vec<f64>,
    strides: Vec<usize>,
    mixture: Option<Mixture>,
}

impl ToyJoint {
    pub fn from_table(shape: Shape3, levels: usize, probs: Vec<f64>) -> Result<Self> {
        let n = shape.total();
        if levels < 2 {
            return Err(Error::InvalidInput("toy joint needs at least 2 levels".into()));
        }
        let size = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(levels).filter(|&s| s <= MAX_OUTCOMES));
        let size = size.ok_or_else(|| {
            Error::InvalidInput(format!("{levels}^{n} outcomes exceed the 2^20 enumeration limit"))
        })?;
        if probs.len() != size {
            return Err(Error::ShapeMismatch(format!(
                "table needs {size} entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
        }
        let strides = (0..n).map(|k| levels.pow(k as u32)).collect();
        Ok(ToyJoint {
            shape,
            levels,
            probs,
            strides,
            mixture: None,
        })
    }

    pub fn template_mixture(shape: Shape3, levels: usize, mixture: Mixture) -> Result<Self> {
        let n = shape.total();
        if mixture.templates.is_empty() || mixture.templates.len() != mixture.weights.len() {
            return Err(Error::InvalidInput("need one weight per template".into()));
        }
        if mixture.templates.iter().any(|t| t.len() != n || t.iter().any(|&v| v as usize >= levels)) {
            return Err(Error::InvalidInput("template does not fit the shape or levels".into()));
        }
        if !(0.0..1.0).contains(&mixture.corruption) {
            return Err(Error::InvalidInput("corruption must lie in [0, 1)".into()));
        }
        let wsum: f64 = mixture.weights.iter().sum();
        let keep = 1.0 - mixture.corruption;
        let flip = mixture.corruption / (levels - 1) as f64;
        let size = (0..n)
            .try_fold(1usize, |acc, _| acc.checked_mul(levels).filter(|&s| s <= MAX_OUTCOMES))
            .ok_or_else(|| Error::InvalidInput("too many outcomes".into()))?;
        let mut probs = vec![0.0; size];
        let mut digits = vec![0u16; n];
        for (o, p) in probs.iter_mut().enumerate() {
            decode_into(o, levels, &mut digits);
            for (t, &w) in mixture.templates.iter().zip(&mixture.weights) {
                let agree = digits.iter().zip(t).filter(|(a, b)| a == b).count() as i32;
                *p += (w / wsum) * keep.powi(agree) * flip.powi(n as i32 - agree);
            }
        }
        // Renormalize away floating-point drift.
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let mut joint = Self::from_table(shape, levels, probs)?;
        joint.mixture = Some(Mixture {
            weights: mixture.weights.iter().map(|w| w / wsum).collect(),
            ..mixture
        });
        Ok(joint)
    }

    /// Shape (2,2,3), two levels, four templates coupled across positions
    /// and dimensions, 5% corruption.
    pub fn default_verification() -> Self {
        let shape = Shape3::new(2, 2, 3).expect("static shape");
        let patterns: [fn(usize, usize, usize) -> bool; 4] = [
            |_, _, _| false,
            |_, _, _| true,
            |x, y, i| (x + y + i) % 2 == 1,
            |x, y, i| (x + 2 * y + i) % 3 == 0,
        ];
        let templates = patterns
            .iter()
            .map(|f| {
                (0..shape.total())
                    .map(|idx| {
                        let (x, y, i) = shape.coords(idx);
                        f(x, y, i) as u16
                    })
                    .collect()
            })
            .collect();
        Self::template_mixture(
            shape,
            2,
            Mixture {
                templates,
                weights: vec![0.25; 4],
                corruption: 0.05,
            },
        )
        .expect("default joint is valid")
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mixture(&self) -> Option<&Mixture> {
        self.mixture.as_ref()
    }

    pub fn outcome_count(&self) -> usize {
        self.probs.len()
    }

    pub fn outcome_index(&self, q: &TokenTensor) -> usize {
        q.ids()
            .iter()
            .zip(&self.strides)
            .map(|(&id, &s)| id as usize * s)
            .sum()
    }

    pub fn outcome_tokens(&self, o: usize) -> TokenTensor {
        let mut ids = vec![0u16; self.shape.total()];
        decode_into(o, self.levels, &mut ids);
        TokenTensor::new(self.shape, self.levels, ids).expect("outcome decodes to a valid tensor")
    }

    /// `P(q_k = l)` for every slot `k`, flattened `[N, L]`.
    pub fn slot_marginals(&self) -> Vec<f64> {
        let n = self.shape.total();
        let mut out = vec![0.0; n * self.levels];
        let mut digits = vec![0u16; n];
        for (o, &p) in self.probs.iter().enumerate() {
            decode_into(o, self.levels, &mut digits);
            for (k, &dgt) in digits.iter().enumerate() {
                out[k * self.levels + dgt as usize] += p;
            }
        }
        out
    }

    /// Exact conditional marginals of every masked slot given the visible ones.
    ///
    /// Returns `[N, L]` probabilities; visible slots hold a delta on their id.
    pub fn conditionals(&self, q: &TokenTensor, m: &MaskTensor) -> Result<Vec<f64>> {
        if q.shape() != self.shape || m.shape() != self.shape || q.levels() != self.levels {
            return Err(Error::ShapeMismatch(format!(
                "joint is {} x {}, query is {} x {}",
                self.shape,
                self.levels,
                q.shape(),
                q.levels()
            )));
        }
        let levels = self.levels;
        let mut base = 0usize;
        let mut free = Vec::new();
        for (k, &id) in q.ids().iter().enumerate() {
            if m.is_masked(k) {
                free.push(self.strides[k]);
            } else {
                base += id as usize * self.strides[k];
            }
        }
        let combos = levels.pow(free.len() as u32);
        let mut marg = vec![0.0; free.len() * levels];
        let mut digits = vec![0usize; free.len()];
        let mut offset = 0usize;
        let mut z = 0.0;
        for _ in 0..combos {
            let p = self.probs[base + offset];
            if p > 0.0 {
                z += p;
                for (j, &dgt) in digits.iter().enumerate() {
                    marg[j * levels + dgt] += p;
                }
            }
            // Odometer increment over the free slots.
            for (j, dgt) in digits.iter_mut().enumerate() {
                *dgt += 1;
                offset += free[j];
                if *dgt < levels {
                    break;
                }
                offset -= levels * free[j];
                *dgt = 0;
            }
        }
        if z <= 0.0 {
            return Err(Error::ZeroSupport);
        }
        let mut out = vec![0.0; self.shape.total() * levels];
        let mut j = 0;
        for (k, &id) in q.ids().iter().enumerate() {
            let slot = &mut out[k * levels..(k + 1) * levels];
            if m.is_masked(k) {
                for (s, &v) in slot.iter_mut().zip(&marg[j * levels..(j + 1) * levels]) {
                    *s = v / z;
                }
                j += 1;
            } else {
                slot[id as usize] = 1.0;
            }
        }
        Ok(out)
    }

    /// Inverse-CDF sampling over the enumerated table.
    pub fn sample(&self, rng: &mut SeededRng) -> TokenTensor {
        self.outcome_tokens(self.sample_index(rng))
    }

    fn sample_index(&self, rng: &mut SeededRng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (o, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return o;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn decode_into(mut o: usize, levels: usize, digits: &mut [u16]) {
    for d in digits.iter_mut() {
        *d = (o % levels) as u16;
        o /= levels;
    }
}

/// Bayes-optimal predictor: logits are log exact conditionals.
pub fn oracle_forward(q: &TokenTensor, m: &MaskTensor, joint: &ToyJoint) -> Result<LogitsTensor> {
    let probs = joint.conditionals(q, m)?;
    let scores = probs.into_iter().map(f64::ln).collect();
    LogitsTensor::new(joint.shape, joint.levels, scores)
}

/// [`oracle_forward`] behind the [`LogitsModel`] interface.
#[derive(Clone, Copy, Debug)]
pub struct OracleModel<'a> {
    pub joint: &'a ToyJoint,
}

impl LogitsModel for OracleModel<'_> {
    fn shape(&self) -> Shape3 {
        self.joint.shape
    }

    fn levels(&self) -> usize {
        self.joint.levels
    }

    fn is_conditional(&self) -> bool {
        false
    }

    fn logits(&self, q: &TokenTensor, m: &MaskTensor, _class_id: Option<usize>) -> Result<LogitsTensor> {
        oracle_forward(q, m, self.joint)
    }
}

/// `n` i.i.d. draws from the joint.
pub fn synth_corpus(joint: &ToyJoint, n: usize, rng: &mut SeededRng) -> Result<Vec<TokenTensor>> {
    if n == 0 {
        return Err(Error::InvalidInput("corpus size must be at least 1".into()));
    }
    // Cumulative table with binary search; same draw as `ToyJoint::sample`.
    let mut cdf = Vec::with_capacity(joint.probs.len());
    let mut acc = 0.0;
    for &p in &joint.probs {
        acc += p;
        cdf.push(acc);
    }
    let last = joint.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    Ok((0..n)
        .map(|_| {
            let u = rng.uniform();
            let o = cdf.partition_point(|&c| c <= u).min(last);
            joint.outcome_tokens(o)
        })
        .collect())
}

/// Mixture draws labelled with their template index.
pub fn synth_labeled(joint: &ToyJoint, n: usize, rng: &mut SeededRng) -> Result<Vec<Example>> {
    let mix = joint
        .mixture
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("labelled sampling needs a template mixture".into()))?;
    let levels = joint.levels;
    Ok((0..n)
        .map(|_| {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut class = mix.weights.len() - 1;
            for (k, &w) in mix.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    class = k;
                    break;
                }
            }
            let ids = mix.templates[class]
                .iter()
                .map(|&t| {
                    if rng.bernoulli(mix.corruption) {
                        let other = rng.below(levels - 1) as u16;
                        if other >= t {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        t
                    }
                })
                .collect();
            Example {
                tokens: TokenTensor::new(joint.shape, levels, ids).expect("template ids are valid"),
                class: Some(class),
            }
        })
        .collect())
}

/// Half the L1 distance between empirical frequencies and the joint.
pub fn tv_distance(counts: &[u64], joint: &ToyJoint) -> Result<f64> {
    if counts.len() != joint.probs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} counts for {} outcomes",
            counts.len(),
            joint.probs.len()
        )));
    }
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let tv = counts
        .iter()
        .zip(&joint.probs)
        .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    Ok(tv.clamp(0.0, 1.0))
}

/// Outcome histogram of a sample set.
pub fn outcome_counts(samples: &[TokenTensor], joint: &ToyJoint) -> Vec<u64> {
    let mut counts = vec![0u64; joint.outcome_count()];
    for q in samples {
        counts[joint.outcome_index(q)] += 1;
    }
    counts
}
