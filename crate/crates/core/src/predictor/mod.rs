//! Bidirectional masked-token predictor and the logits utilities around it.

mod model;
pub(crate) mod ops;
mod params;

pub use model::{backward, backward_into, embed_input, fill_random_ids, forward_batch, forward_cached, ForwardCache};
pub use params::{Gradients, MaskValueMode, Param, PredictorConfig, PredictorParams};

use crate::error::{Error, Result};
use crate::quantizer::QuantizerSpec;
use crate::tensor::{MaskTensor, Shape3, TokenTensor};

/// `h * w * d * L` unnormalized scores, level index innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsTensor {
    shape: Shape3,
    levels: usize,
    scores: Vec<f64>,
}

impl LogitsTensor {
    pub fn new(shape: Shape3, levels: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != shape.total() * levels {
            return Err(Error::ShapeMismatch(format!(
                "logits for {shape} x {levels} need {} scores, got {}",
                shape.total() * levels,
                scores.len()
            )));
        }
        Ok(LogitsTensor {
            shape,
            levels,
            scores,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Scores of slot `idx`.
    pub fn slot(&self, idx: usize) -> &[f64] {
        &self.scores[idx * self.levels..(idx + 1) * self.levels]
    }

    pub fn slot_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.scores[idx * self.levels..(idx + 1) * self.levels]
    }
}

/// `uncond + scale * (cond - uncond)`.
pub fn guided_logits(cond: &LogitsTensor, uncond: &LogitsTensor, scale: f64) -> Result<LogitsTensor> {
    if cond.shape != uncond.shape || cond.levels != uncond.levels {
        return Err(Error::ShapeMismatch(format!(
            "guidance needs matching logits, got {} x {} and {} x {}",
            cond.shape, cond.levels, uncond.shape, uncond.levels
        )));
    }
    let scores = cond
        .scores
        .iter()
        .zip(&uncond.scores)
        .map(|(&c, &u)| u + scale * (c - u))
        .collect();
    LogitsTensor::new(cond.shape, cond.levels, scores)
}

/// Tempered softmax over one slot's logits.
pub fn categorical_probs(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(ops::softmax(logits, temperature))
}

/// Anything that maps a partially masked token tensor to per-slot logits.
pub trait LogitsModel: Sync {
    fn shape(&self) -> Shape3;

    fn levels(&self) -> usize;

    /// Whether `class_id` is meaningful (a null class exists for guidance).
    fn is_conditional(&self) -> bool;

    /// Whether masked slots must hold fresh random ids before each call.
    fn random_mask_fill(&self) -> bool {
        false
    }

    fn logits(&self, q: &TokenTensor, m: &MaskTensor, class_id: Option<usize>) -> Result<LogitsTensor>;
}

/// Trained parameters bound to the quantizer that dequantizes their inputs.
#[derive(Clone, Debug)]
pub struct Predictor {
    params: PredictorParams,
    spec: QuantizerSpec,
}

impl Predictor {
    pub fn new(params: PredictorParams, spec: QuantizerSpec) -> Result<Self> {
        let cfg = params.config();
        if spec.levels() != cfg.levels || spec.d() != cfg.shape.d {
            return Err(Error::ShapeMismatch(format!(
                "quantizer (L={}, d={}) does not match predictor (L={}, d={})",
                spec.levels(),
                spec.d(),
                cfg.levels,
                cfg.shape.d
            )));
        }
        Ok(Predictor { params, spec })
    }

    pub fn params(&self) -> &PredictorParams {
        &self.params
    }

    pub fn spec(&self) -> &QuantizerSpec {
        &self.spec
    }

    pub fn forward(&self, q: &TokenTensor, m: &MaskTensor, class_id: Option<usize>) -> Result<LogitsTensor> {
        forward(&self.params, &self.spec, q, m, class_id)
    }
}

impl LogitsModel for Predictor {
    fn shape(&self) -> Shape3 {
        self.params.config().shape
    }

    fn levels(&self) -> usize {
        self.params.config().levels
    }

    fn is_conditional(&self) -> bool {
        self.params.config().classes > 0
    }

    fn random_mask_fill(&self) -> bool {
        self.params.config().mask_mode == MaskValueMode::RandomId
    }

    fn logits(&self, q: &TokenTensor, m: &MaskTensor, class_id: Option<usize>) -> Result<LogitsTensor> {
        self.forward(q, m, class_id)
    }
}

pub fn forward(
    params: &PredictorParams,
    spec: &QuantizerSpec,
    q: &TokenTensor,
    m: &MaskTensor,
    class_id: Option<usize>,
) -> Result<LogitsTensor> {
    forward_cached(params, spec, q, m, class_id).map(|(logits, _)| logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::CalibrationStats;
    use crate::rng::SeededRng;

    fn predictor(shape: Shape3, levels: usize, classes: usize) -> Predictor {
        let cfg = PredictorConfig {
            shape,
            levels,
            hidden: 16,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            classes,
            mask_mode: MaskValueMode::Learned,
        };
        let params = PredictorParams::init(cfg, &mut SeededRng::new(11)).unwrap();
        let spec = QuantizerSpec::new(levels, CalibrationStats::uniform(shape.d, -1.0, 1.0).unwrap()).unwrap();
        Predictor::new(params, spec).unwrap()
    }

    fn random_tokens(shape: Shape3, levels: usize, seed: u64) -> TokenTensor {
        let mut rng = SeededRng::new(seed);
        let ids = (0..shape.total()).map(|_| rng.below(levels) as u16).collect();
        TokenTensor::new(shape, levels, ids).unwrap()
    }

    #[test]
    fn logits_shape_contract() {
        let shape = Shape3::new(4, 4, 8).unwrap();
        let p = predictor(shape, 4, 0);
        let q = random_tokens(shape, 4, 1);
        let out = p.forward(&q, &MaskTensor::full(shape), None).unwrap();
        assert_eq!(out.scores().len(), 4 * 4 * 8 * 4);
    }

    #[test]
    fn forward_is_deterministic() {
        let shape = Shape3::new(2, 3, 5).unwrap();
        let p = predictor(shape, 4, 3);
        let q = random_tokens(shape, 4, 2);
        let m = crate::masking::sample_mask(shape, 0.5, Default::default(), &mut SeededRng::new(3)).unwrap();
        let a = p.forward(&q, &m, Some(1)).unwrap();
        let b = p.forward(&q, &m, Some(1)).unwrap();
        assert!(a.scores().iter().zip(b.scores()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_invalid_class() {
        let shape = Shape3::new(2, 2, 2).unwrap();
        let p = predictor(shape, 2, 3);
        let q = random_tokens(shape, 2, 0);
        let m = MaskTensor::full(shape);
        assert!(p.forward(&q, &m, Some(3)).is_err());
        assert!(p.forward(&q, &m, Some(2)).is_ok());
        assert!(p.forward(&q, &m, None).is_ok());
    }

    #[test]
    fn swapping_positions_and_embeddings_swaps_outputs() {
        let shape = Shape3::new(2, 2, 3).unwrap();
        let p = predictor(shape, 4, 0);
        let q = random_tokens(shape, 4, 5);
        let m = MaskTensor::from_indices(shape, &[0, 4, 10]).unwrap();
        let base = p.forward(&q, &m, None).unwrap();

        let (s1, s2) = (0usize, 3usize);
        let d = shape.d;
        let mut q_ids = q.ids().to_vec();
        let mut flags = m.flags().to_vec();
        for i in 0..d {
            q_ids.swap(s1 * d + i, s2 * d + i);
            flags.swap(s1 * d + i, s2 * d + i);
        }
        let mut params = p.params().clone();
        let hid = params.config().hidden;
        let pos = &mut params.get_mut("pos_embed").unwrap().data;
        for k in 0..hid {
            pos.swap(s1 * hid + k, s2 * hid + k);
        }
        let swapped = Predictor::new(params, p.spec().clone()).unwrap();
        let out = swapped
            .forward(
                &TokenTensor::new(shape, 4, q_ids).unwrap(),
                &MaskTensor::new(shape, flags).unwrap(),
                None,
            )
            .unwrap();

        let width = d * 4;
        let perm = |s: usize| if s == s1 { s2 } else if s == s2 { s1 } else { s };
        for s in 0..shape.spatial() {
            let a = &base.scores()[perm(s) * width..(perm(s) + 1) * width];
            let b = &out.scores()[s * width..(s + 1) * width];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guidance_examples() {
        let shape = Shape3::new(1, 1, 1).unwrap();
        let cond = LogitsTensor::new(shape, 1, vec![2.0]).unwrap();
        let uncond = LogitsTensor::new(shape, 1, vec![1.0]).unwrap();
        assert_eq!(guided_logits(&cond, &uncond, 3.0).unwrap().scores(), &[4.0]);
        assert_eq!(guided_logits(&cond, &uncond, 1.0).unwrap(), cond);
        assert_eq!(guided_logits(&cond, &uncond, 0.0).unwrap(), uncond);
        let other = LogitsTensor::new(shape, 2, vec![0.0, 0.0]).unwrap();
        assert!(guided_logits(&cond, &other, 1.0).is_err());
    }

    #[test]
    fn guidance_at_unit_scale_keeps_argmax() {
        let shape = Shape3::new(2, 2, 3).unwrap();
        let p = predictor(shape, 4, 2);
        let q = random_tokens(shape, 4, 8);
        let m = MaskTensor::full(shape);
        let cond = p.forward(&q, &m, Some(0)).unwrap();
        let uncond = p.forward(&q, &m, None).unwrap();
        let mixed = guided_logits(&cond, &uncond, 1.0).unwrap();
        let argmax = |s: &[f64]| {
            s.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        };
        for idx in 0..shape.total() {
            assert_eq!(argmax(mixed.slot(idx)), argmax(cond.slot(idx)));
        }
    }

    #[test]
    fn categorical_examples() {
        let p = categorical_probs(&[0.3; 4], 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let p = categorical_probs(&[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let p = categorical_probs(&[1.0, 1.5, 0.2], 1e-4).unwrap();
        assert!(p[1] > 1.0 - 1e-9);
        let p = categorical_probs(&[1000.0, -1000.0, 0.0], 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(categorical_probs(&[0.0], 0.0).is_err());
    }
}
