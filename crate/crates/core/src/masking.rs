//! Mask-ratio sampling, mask materialization and the cosine unmasking schedule.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{MaskTensor, Shape3};

/// Default spread of the mask-ratio distribution.
pub const DEFAULT_SIGMA: f64 = 0.10;

/// Gaussian with mean 1.0 and spread `sigma`, truncated to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRatioDist {
    sigma: f64,
}

impl MaskRatioDist {
    pub const MU: f64 = 1.0;

    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        Ok(MaskRatioDist { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Rejection sampling from the untruncated normal.
    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        loop {
            let r = Self::MU + self.sigma * rng.standard_normal();
            if (0.0..=1.0).contains(&r) {
                return r;
            }
        }
    }
}

impl Default for MaskRatioDist {
    fn default() -> Self {
        MaskRatioDist {
            sigma: DEFAULT_SIGMA,
        }
    }
}

pub fn sample_ratio(dist: &MaskRatioDist, rng: &mut SeededRng) -> f64 {
    dist.sample(rng)
}

/// Granularity at which entries are masked together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum MaskStrategy {
    /// Each `(x, y, i)` entry independently.
    #[default]
    PerElement,
    /// All `d` entries of a spatial position together.
    PerSpatial,
    /// All `h * w` entries of a dimension together.
    PerDim,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [
        MaskStrategy::PerElement,
        MaskStrategy::PerSpatial,
        MaskStrategy::PerDim,
    ];

    /// Number of independently maskable units.
    pub fn unit_count(&self, shape: Shape3) -> usize {
        match self {
            MaskStrategy::PerElement => shape.total(),
            MaskStrategy::PerSpatial => shape.spatial(),
            MaskStrategy::PerDim => shape.d,
        }
    }

    /// Linear indices covered by unit `unit`.
    pub fn unit_members(&self, shape: Shape3, unit: usize) -> Vec<usize> {
        match self {
            MaskStrategy::PerElement => vec![unit],
            MaskStrategy::PerSpatial => (unit * shape.d..(unit + 1) * shape.d).collect(),
            MaskStrategy::PerDim => (0..shape.spatial()).map(|p| p * shape.d + unit).collect(),
        }
    }

    /// Unit that owns linear index `idx`.
    pub fn unit_of(&self, shape: Shape3, idx: usize) -> usize {
        match self {
            MaskStrategy::PerElement => idx,
            MaskStrategy::PerSpatial => idx / shape.d,
            MaskStrategy::PerDim => idx % shape.d,
        }
    }

    /// True when every unit is either fully masked or fully visible.
    pub fn conforms(&self, mask: &MaskTensor) -> bool {
        let shape = mask.shape();
        (0..self.unit_count(shape)).all(|u| {
            let members = self.unit_members(shape, u);
            let first = mask.is_masked(members[0]);
            members.iter().all(|&idx| mask.is_masked(idx) == first)
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::PerElement => "per-element",
            MaskStrategy::PerSpatial => "per-spatial",
            MaskStrategy::PerDim => "per-dim",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-element" | "element" => Ok(MaskStrategy::PerElement),
            "per-spatial" | "spatial" => Ok(MaskStrategy::PerSpatial),
            "per-dim" | "dim" => Ok(MaskStrategy::PerDim),
            other => Err(Error::Config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

/// `floor(ratio * units)`, saturating to `units`.
pub fn masked_units(ratio: f64, units: usize) -> usize {
    ((ratio * units as f64).floor() as usize).min(units)
}

/// Uniformly chooses `count` distinct values from `0..n` (partial Fisher-Yates).
fn choose_distinct(n: usize, count: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for k in 0..count {
        let j = k + rng.below(n - k);
        pool.swap(k, j);
    }
    pool.truncate(count);
    pool
}

pub fn sample_mask(
    shape: Shape3,
    ratio: f64,
    strategy: MaskStrategy,
    rng: &mut SeededRng,
) -> Result<MaskTensor> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("ratio must lie in [0, 1], got {ratio}")));
    }
    let units = strategy.unit_count(shape);
    let mut mask = MaskTensor::empty(shape);
    for unit in choose_distinct(units, masked_units(ratio, units), rng) {
        for idx in strategy.unit_members(shape, unit) {
            mask.set(idx, true);
        }
    }
    Ok(mask)
}

/// Per-step unmask counts of the cosine schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmaskSchedule {
    /// `masked[t]` entries remain masked after step `t`; `masked[0] == N`.
    masked: Vec<usize>,
}

impl UnmaskSchedule {
    pub fn steps(&self) -> usize {
        self.masked.len() - 1
    }

    pub fn total(&self) -> usize {
        self.masked[0]
    }

    /// Masked count after each step, starting with `N` at `t = 0`.
    pub fn masked_curve(&self) -> &[usize] {
        &self.masked
    }

    /// `u[t]` for `t = 1..=T`.
    pub fn unmask_counts(&self) -> Vec<usize> {
        self.masked.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

/// Cosine schedule over `n` units and `steps` iterations.
///
/// The curve is `ceil(n * cos(pi/2 * t/T))` clamped so that every step
/// reveals at least one unit; with `steps == n` each step reveals exactly one.
pub fn cosine_schedule(n: usize, steps: usize) -> Result<UnmaskSchedule> {
    if n == 0 {
        return Err(Error::InvalidInput("schedule needs at least one token".into()));
    }
    if steps == 0 || steps > n {
        return Err(Error::InvalidInput(format!(
            "steps must lie in [1, {n}], got {steps}"
        )));
    }
    let mut masked = Vec::with_capacity(steps + 1);
    masked.push(n);
    for t in 1..steps {
        let raw = (n as f64 * (FRAC_PI_2 * t as f64 / steps as f64).cos()).ceil() as usize;
        let prev = masked[t - 1];
        masked.push(raw.clamp(steps - t, prev - 1));
    }
    masked.push(0);
    Ok(UnmaskSchedule { masked })
}

/// Uniform subset of `count` entries of `masked_indices`, returned ascending.
pub fn select_unmask(
    masked_indices: &[usize],
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if count > masked_indices.len() {
        return Err(Error::NotEnoughMasked {
            requested: count,
            available: masked_indices.len(),
        });
    }
    let mut chosen: Vec<usize> = choose_distinct(masked_indices.len(), count, rng)
        .into_iter()
        .map(|k| masked_indices[k])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize, d: usize) -> Shape3 {
        Shape3::new(h, w, d).unwrap()
    }

    #[test]
    fn tiny_sigma_concentrates_at_one() {
        let dist = MaskRatioDist::new(1e-9).unwrap();
        let mut rng = SeededRng::new(0);
        for _ in 0..1000 {
            assert!((dist.sample(&mut rng) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn samples_stay_in_unit_interval() {
        let mut rng = SeededRng::new(9);
        for sigma in [0.01, 0.1, 0.5, 2.0, 10.0] {
            let dist = MaskRatioDist::new(sigma).unwrap();
            for _ in 0..10_000 {
                let r = dist.sample(&mut rng);
                assert!((0.0..=1.0).contains(&r));
            }
        }
        assert!(MaskRatioDist::new(0.0).is_err());
    }

    #[test]
    fn full_and_empty_masks() {
        let s = shape(2, 2, 2);
        let mut rng = SeededRng::new(1);
        for strategy in MaskStrategy::ALL {
            assert_eq!(sample_mask(s, 1.0, strategy, &mut rng).unwrap().count_masked(), 8);
            assert_eq!(sample_mask(s, 0.0, strategy, &mut rng).unwrap().count_masked(), 0);
        }
    }

    #[test]
    fn per_spatial_half() {
        let s = shape(2, 2, 4);
        let mut rng = SeededRng::new(5);
        let m = sample_mask(s, 0.5, MaskStrategy::PerSpatial, &mut rng).unwrap();
        assert_eq!(m.count_masked(), 8);
        assert!(MaskStrategy::PerSpatial.conforms(&m));
        let positions = (0..4).filter(|p| m.is_masked(p * 4)).count();
        assert_eq!(positions, 2);
    }

    #[test]
    fn per_dim_structure() {
        let s = shape(3, 2, 5);
        let mut rng = SeededRng::new(6);
        let m = sample_mask(s, 0.6, MaskStrategy::PerDim, &mut rng).unwrap();
        assert_eq!(m.count_masked(), 3 * 6);
        assert!(MaskStrategy::PerDim.conforms(&m));
    }

    #[test]
    fn rejects_bad_ratio() {
        let mut rng = SeededRng::new(0);
        assert!(sample_mask(shape(1, 1, 1), 1.5, MaskStrategy::PerElement, &mut rng).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_schedule(100, 1).unwrap().unmask_counts(), vec![100]);
        let two = cosine_schedule(100, 2).unwrap();
        assert_eq!(two.masked_curve(), &[100, 71, 0]);
        assert_eq!(two.unmask_counts(), vec![29, 71]);
        let eight = cosine_schedule(8, 8).unwrap().unmask_counts();
        assert_eq!(eight.iter().sum::<usize>(), 8);
        assert!(eight.iter().all(|&u| u >= 1));
    }

    #[test]
    fn schedule_errors() {
        assert!(cosine_schedule(5, 6).is_err());
        assert!(cosine_schedule(5, 0).is_err());
        assert!(cosine_schedule(0, 1).is_err());
    }

    #[test]
    fn select_unmask_edges() {
        let mut rng = SeededRng::new(2);
        let set = [3, 9, 11, 20];
        assert_eq!(select_unmask(&set, 4, &mut rng).unwrap(), set.to_vec());
        assert!(select_unmask(&set, 0, &mut rng).unwrap().is_empty());
        assert!(matches!(
            select_unmask(&set, 5, &mut rng),
            Err(Error::NotEnoughMasked { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn select_unmask_uniformity() {
        let mut rng = SeededRng::new(77);
        let set = [0usize, 1, 2, 3];
        let mut hits = [0usize; 4];
        let trials = 100_000;
        for _ in 0..trials {
            for idx in select_unmask(&set, 2, &mut rng).unwrap() {
                hits[idx] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / trials as f64;
            assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn per_element_cardinality_exact(h in 1usize..6, w in 1usize..6, d in 1usize..9,
                                             ratio in 0.0f64..=1.0, seed in any::<u64>()) {
                let s = shape(h, w, d);
                let mut rng = SeededRng::new(seed);
                let m = sample_mask(s, ratio, MaskStrategy::PerElement, &mut rng).unwrap();
                prop_assert_eq!(m.count_masked(), (ratio * s.total() as f64).floor() as usize);
            }

            #[test]
            fn schedule_conserves(n in 1usize..5000, frac in 0.0f64..1.0) {
                let steps = 1 + ((n - 1) as f64 * frac) as usize;
                let sched = cosine_schedule(n, steps).unwrap();
                let curve = sched.masked_curve();
                prop_assert_eq!(curve[0], n);
                prop_assert_eq!(*curve.last().unwrap(), 0);
                prop_assert!(curve.windows(2).all(|w| w[0] > w[1]));
                prop_assert_eq!(sched.unmask_counts().iter().sum::<usize>(), n);
            }
        }
    }
}
