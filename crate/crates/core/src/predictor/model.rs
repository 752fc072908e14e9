//! Forward and backward passes of the bidirectional predictor.
//!
//! Each spatial position is one transformer token: its `d` dequantized
//! scalars (mask value where masked) are projected to the hidden width, so
//! the attention sequence length is `h * w` for any `d`.

use crate::error::{Error, Result};
use crate::quantizer::QuantizerSpec;
use crate::rng::SeededRng;
use crate::tensor::{MaskTensor, TokenTensor};

use super::ops::{self, AttentionCache, LayerNormCache};
use super::params::{Gradients, MaskValueMode, PredictorParams};
use super::LogitsTensor;

fn check_inputs(
    q: &TokenTensor,
    m: &MaskTensor,
    spec: &QuantizerSpec,
    params: &PredictorParams,
) -> Result<()> {
    let cfg = params.config();
    if q.shape() != cfg.shape || m.shape() != cfg.shape {
        return Err(Error::ShapeMismatch(format!(
            "predictor expects {}, got tokens {} and mask {}",
            cfg.shape,
            q.shape(),
            m.shape()
        )));
    }
    if q.levels() != cfg.levels || spec.levels() != cfg.levels {
        return Err(Error::ShapeMismatch(format!(
            "predictor expects L={}, got tokens L={} and quantizer L={}",
            cfg.levels,
            q.levels(),
            spec.levels()
        )));
    }
    if spec.d() != cfg.shape.d {
        return Err(Error::ShapeMismatch(format!(
            "quantizer d={} but predictor d={}",
            spec.d(),
            cfg.shape.d
        )));
    }
    Ok(())
}

/// Input vectors, flattened `[h * w, d]`.
///
/// Visible slots carry their bin-center value. Masked slots carry the mask
/// value of the configured mode; in `RandomId` mode the caller has already
/// written random ids into the masked slots (see [`fill_random_ids`]).
pub fn embed_input(
    q: &TokenTensor,
    m: &MaskTensor,
    spec: &QuantizerSpec,
    params: &PredictorParams,
) -> Result<Vec<f64>> {
    check_inputs(q, m, spec, params)?;
    let d = q.shape().d;
    let mask_values = params.data(params.layout.mask);
    let mode = params.config().mask_mode;
    Ok(q.ids()
        .iter()
        .enumerate()
        .map(|(idx, &id)| {
            let dim = idx % d;
            if !m.is_masked(idx) {
                return spec.dequantize_scalar(id, dim);
            }
            match mode {
                MaskValueMode::Learned => mask_values[dim],
                MaskValueMode::Fixed(v) => v,
                MaskValueMode::RandomId => spec.dequantize_scalar(id, dim),
            }
        })
        .collect())
}

/// Overwrites every masked slot with a uniformly random level.
pub fn fill_random_ids(q: &mut TokenTensor, m: &MaskTensor, rng: &mut SeededRng) {
    let levels = q.levels();
    for idx in m.masked_indices() {
        q.set(idx, rng.below(levels) as u16)
            .expect("random id below levels");
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    attn: Vec<AttentionCache>,
    o: Vec<f64>,
    ln2: LayerNormCache,
    c: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

/// Activations retained for the backward pass. Samples of a batch are
/// stacked along the row axis.
pub struct ForwardCache {
    batch: usize,
    embed: Vec<f64>,
    class_rows: Vec<Option<usize>>,
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    n: Vec<f64>,
    h1: Vec<f64>,
    g1: Vec<f64>,
    masked: Vec<bool>,
}

fn class_row(params: &PredictorParams, class_id: Option<usize>) -> Result<Option<usize>> {
    let classes = params.config().classes;
    match (classes, class_id) {
        (0, None) => Ok(None),
        (0, Some(c)) => Err(Error::InvalidInput(format!(
            "class {c} given to an unconditional predictor"
        ))),
        (n, Some(c)) if c >= n => Err(Error::InvalidInput(format!(
            "class {c} out of range for {n} classes"
        ))),
        (_, Some(c)) => Ok(Some(c)),
        // Null-class row, used for guidance and condition dropout.
        (n, None) => Ok(Some(n)),
    }
}

pub fn forward_cached(
    params: &PredictorParams,
    spec: &QuantizerSpec,
    q: &TokenTensor,
    m: &MaskTensor,
    class_id: Option<usize>,
) -> Result<(LogitsTensor, ForwardCache)> {
    let (mut logits, cache) = forward_batch(params, spec, &[(q, m, class_id)])?;
    Ok((logits.pop().expect("one sample"), cache))
}

/// Forward pass over several samples at once; each weight matrix is
/// streamed once per batch instead of once per sample.
pub fn forward_batch(
    params: &PredictorParams,
    spec: &QuantizerSpec,
    items: &[(&TokenTensor, &MaskTensor, Option<usize>)],
) -> Result<(Vec<LogitsTensor>, ForwardCache)> {
    let cfg = params.config();
    let l = &params.layout;
    let (seq, d, hid, heads) = (cfg.shape.spatial(), cfg.shape.d, cfg.hidden, cfg.heads);
    let mlp = hid * cfg.mlp_ratio;
    let batch = items.len();
    let rows = batch * seq;

    let mut embed = Vec::with_capacity(rows * d);
    let mut class_rows = Vec::with_capacity(batch);
    let mut masked = Vec::with_capacity(batch * cfg.shape.total());
    for &(q, m, class_id) in items {
        embed.extend(embed_input(q, m, spec, params)?);
        class_rows.push(class_row(params, class_id)?);
        masked.extend_from_slice(m.flags());
    }

    let mut x = ops::linear(&embed, rows, d, params.data(l.in_w), params.data(l.in_b));
    let pos = params.data(l.pos);
    for (xs, row) in x.chunks_exact_mut(seq * hid).zip(&class_rows) {
        for (v, p) in xs.iter_mut().zip(pos) {
            *v += p;
        }
        if let (Some(row), Some(ci)) = (*row, l.class) {
            let emb = &params.data(ci)[row * hid..(row + 1) * hid];
            for r in 0..seq {
                for (v, e) in xs[r * hid..(r + 1) * hid].iter_mut().zip(emb) {
                    *v += e;
                }
            }
        }
    }

    let mut blocks = Vec::with_capacity(l.blocks.len());
    for b in &l.blocks {
        let x_in = x;
        let (a, ln1) = ops::layer_norm(&x_in, rows, params.data(b.ln1_g), params.data(b.ln1_b));
        let qkv = ops::linear(&a, rows, hid, params.data(b.qkv_w), params.data(b.qkv_b));
        let mut o = Vec::with_capacity(rows * hid);
        let mut attn = Vec::with_capacity(batch);
        for sample in qkv.chunks_exact(seq * 3 * hid) {
            let (os, cache) = ops::attention(sample, seq, hid, heads);
            o.extend(os);
            attn.push(cache);
        }
        let proj = ops::linear(&o, rows, hid, params.data(b.out_w), params.data(b.out_b));
        let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let (c, ln2) = ops::layer_norm(&x_mid, rows, params.data(b.ln2_g), params.data(b.ln2_b));
        let f = ops::linear(&c, rows, hid, params.data(b.fc1_w), params.data(b.fc1_b));
        let g = ops::gelu(&f);
        let mo = ops::linear(&g, rows, mlp, params.data(b.fc2_w), params.data(b.fc2_b));
        x = x_mid.iter().zip(&mo).map(|(a, b)| a + b).collect();
        blocks.push(BlockCache {
            ln1,
            a,
            qkv,
            attn,
            o,
            ln2,
            c,
            f,
            g,
        });
    }

    let (n, lnf) = ops::layer_norm(&x, rows, params.data(l.lnf_g), params.data(l.lnf_b));
    let h1 = ops::linear(&n, rows, hid, params.data(l.head1_w), params.data(l.head1_b));
    let g1 = ops::gelu(&h1);
    let scores = ops::linear(&g1, rows, hid, params.data(l.head2_w), params.data(l.head2_b));
    let logits = scores
        .chunks_exact(cfg.shape.total() * cfg.levels)
        .map(|s| LogitsTensor::new(cfg.shape, cfg.levels, s.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let cache = ForwardCache {
        batch,
        embed,
        class_rows,
        blocks,
        lnf,
        n,
        h1,
        g1,
        masked,
    };
    Ok((logits, cache))
}

/// Gradients of a scalar objective given `dscores = d objective / d logits`.
pub fn backward(params: &PredictorParams, cache: &ForwardCache, dscores: &[f64]) -> Gradients {
    let mut grads = params.zeros_like();
    backward_into(params, cache, dscores, &mut grads);
    grads
}

/// [`backward`] adding into an existing gradient buffer. For a batched
/// cache, `dscores` holds the samples' score gradients back to back and the
/// gradients are summed over samples.
pub fn backward_into(params: &PredictorParams, cache: &ForwardCache, dscores: &[f64], grads: &mut Gradients) {
    let cfg = params.config();
    let l = &params.layout;
    let (d, hid, heads) = (cfg.shape.d, cfg.hidden, cfg.heads);
    let spatial = cfg.shape.spatial();
    let seq = cache.batch * spatial;
    let mlp = hid * cfg.mlp_ratio;
    let g = &mut grads.0;

    let dg1 = split_two(g, l.head2_w, l.head2_b, |dw, db| {
        ops::linear_backward(&cache.g1, dscores, seq, hid, params.data(l.head2_w), dw, db)
    });
    let dh1 = ops::gelu_backward(&cache.h1, &dg1);
    let dn = split_two(g, l.head1_w, l.head1_b, |dw, db| {
        ops::linear_backward(&cache.n, &dh1, seq, hid, params.data(l.head1_w), dw, db)
    });
    let mut dx = split_two(g, l.lnf_g, l.lnf_b, |dg, db| {
        ops::layer_norm_backward(&cache.lnf, &dn, params.data(l.lnf_g), dg, db)
    });

    for (b, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
        // x = x_mid + mlp(ln2(x_mid))
        let dgate = split_two(g, b.fc2_w, b.fc2_b, |dw, db| {
            ops::linear_backward(&bc.g, &dx, seq, mlp, params.data(b.fc2_w), dw, db)
        });
        let df = ops::gelu_backward(&bc.f, &dgate);
        let dc = split_two(g, b.fc1_w, b.fc1_b, |dw, db| {
            ops::linear_backward(&bc.c, &df, seq, hid, params.data(b.fc1_w), dw, db)
        });
        let dmid_ln = split_two(g, b.ln2_g, b.ln2_b, |dg, db| {
            ops::layer_norm_backward(&bc.ln2, &dc, params.data(b.ln2_g), dg, db)
        });
        let dmid: Vec<f64> = dx.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();

        // x_mid = x_in + proj(attn(ln1(x_in)))
        let do_ = split_two(g, b.out_w, b.out_b, |dw, db| {
            ops::linear_backward(&bc.o, &dmid, seq, hid, params.data(b.out_w), dw, db)
        });
        let mut dqkv = Vec::with_capacity(bc.qkv.len());
        for ((qkv, attn), dout) in bc.qkv.chunks_exact(spatial * 3 * hid).zip(&bc.attn).zip(do_.chunks_exact(spatial * hid)) {
            dqkv.extend(ops::attention_backward(qkv, attn, dout, spatial, hid, heads));
        }
        let da = split_two(g, b.qkv_w, b.qkv_b, |dw, db| {
            ops::linear_backward(&bc.a, &dqkv, seq, hid, params.data(b.qkv_w), dw, db)
        });
        let din_ln = split_two(g, b.ln1_g, b.ln1_b, |dg, db| {
            ops::layer_norm_backward(&bc.ln1, &da, params.data(b.ln1_g), dg, db)
        });
        dx = dmid.iter().zip(&din_ln).map(|(a, b)| a + b).collect();
    }

    for (dxs, row) in dx.chunks_exact(spatial * hid).zip(&cache.class_rows) {
        for (gp, v) in g[l.pos].iter_mut().zip(dxs) {
            *gp += v;
        }
        if let (Some(row), Some(ci)) = (*row, l.class) {
            let grow = &mut g[ci][row * hid..(row + 1) * hid];
            for r in 0..spatial {
                for (gv, v) in grow.iter_mut().zip(&dxs[r * hid..(r + 1) * hid]) {
                    *gv += v;
                }
            }
        }
    }
    let dembed = split_two(g, l.in_w, l.in_b, |dw, db| {
        ops::linear_backward(&cache.embed, &dx, seq, d, params.data(l.in_w), dw, db)
    });
    if cfg.mask_mode == MaskValueMode::Learned {
        let gm = &mut g[l.mask];
        for (idx, (&masked, &de)) in cache.masked.iter().zip(&dembed).enumerate() {
            if masked {
                gm[idx % d] += de;
            }
        }
    }
}

/// Runs `f` with mutable access to two distinct gradient buffers.
fn split_two<R>(
    g: &mut [Vec<f64>],
    a: usize,
    b: usize,
    f: impl FnOnce(&mut [f64], &mut [f64]) -> R,
) -> R {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    f(&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::params::PredictorConfig;
    use crate::quantizer::CalibrationStats;
    use crate::tensor::Shape3;

    fn setup(mode: MaskValueMode) -> (PredictorParams, QuantizerSpec, TokenTensor) {
        let shape = Shape3::new(2, 2, 4).unwrap();
        let cfg = PredictorConfig {
            shape,
            levels: 4,
            hidden: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            classes: 0,
            mask_mode: mode,
        };
        let mut rng = SeededRng::new(4);
        let mut params = PredictorParams::init(cfg, &mut rng).unwrap();
        params
            .get_mut("mask_value")
            .unwrap()
            .data
            .copy_from_slice(&[0.3, -0.2, 0.7, 1.1]);
        let spec = QuantizerSpec::new(4, CalibrationStats::uniform(4, -1.0, 1.0).unwrap()).unwrap();
        let ids = (0..shape.total()).map(|_| rng.below(4) as u16).collect();
        (params, spec, TokenTensor::new(shape, 4, ids).unwrap())
    }

    #[test]
    fn embed_without_mask_is_dequantized() {
        let (params, spec, q) = setup(MaskValueMode::Learned);
        let e = embed_input(&q, &MaskTensor::empty(q.shape()), &spec, &params).unwrap();
        let deq = crate::quantizer::dequantize(&q, &spec).unwrap();
        for (a, b) in e.iter().zip(deq.values()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
        assert_eq!(e.len(), q.shape().spatial() * q.shape().d);
    }

    #[test]
    fn embed_fixed_zero_when_fully_masked() {
        let (params, spec, q) = setup(MaskValueMode::Fixed(0.0));
        let e = embed_input(&q, &MaskTensor::full(q.shape()), &spec, &params).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_substitution_is_local() {
        let (params, spec, q) = setup(MaskValueMode::Learned);
        let shape = q.shape();
        let base = embed_input(&q, &MaskTensor::empty(shape), &spec, &params).unwrap();
        let idx = shape.flat_index(0, 0, 3).unwrap();
        let m = MaskTensor::from_indices(shape, &[idx]).unwrap();
        let e = embed_input(&q, &m, &spec, &params).unwrap();
        for (k, (a, b)) in base.iter().zip(&e).enumerate() {
            if k == idx {
                assert_eq!(*b, 1.1);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn embed_rejects_shape_mismatch() {
        let (params, spec, _) = setup(MaskValueMode::Learned);
        let other = TokenTensor::zeros(Shape3::new(1, 2, 4).unwrap(), 4).unwrap();
        let m = MaskTensor::empty(other.shape());
        assert!(embed_input(&other, &m, &spec, &params).is_err());
    }

    #[test]
    fn random_fill_touches_only_masked() {
        let (_, _, q) = setup(MaskValueMode::RandomId);
        let m = MaskTensor::from_indices(q.shape(), &[1, 6, 9]).unwrap();
        let mut filled = q.clone();
        fill_random_ids(&mut filled, &m, &mut SeededRng::new(1));
        for idx in 0..q.shape().total() {
            if !m.is_masked(idx) {
                assert_eq!(filled.get(idx), q.get(idx));
            }
        }
    }

    #[test]
    fn unconditional_rejects_class() {
        let (params, spec, q) = setup(MaskValueMode::Learned);
        let m = MaskTensor::full(q.shape());
        assert!(forward_cached(&params, &spec, &q, &m, Some(0)).is_err());
    }

    #[test]
    fn batched_pass_equals_per_sample_accumulation() {
        let (params, spec, q) = setup(MaskValueMode::Learned);
        let shape = q.shape();
        let mut rng = SeededRng::new(8);
        let tokens: Vec<TokenTensor> = (0..5)
            .map(|_| TokenTensor::new(shape, 4, (0..shape.total()).map(|_| rng.below(4) as u16).collect()).unwrap())
            .collect();
        let masks: Vec<MaskTensor> = (0..5)
            .map(|k| MaskTensor::from_indices(shape, &(0..shape.total()).filter(|i| (i + k) % 3 != 0).collect::<Vec<_>>()).unwrap())
            .collect();
        let items: Vec<_> = tokens.iter().zip(&masks).map(|(q, m)| (q, m, None)).collect();
        let (logits, cache) = forward_batch(&params, &spec, &items).unwrap();
        let dscores: Vec<f64> = (0..logits.len() * shape.total() * 4).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect();
        let mut batched = params.zeros_like();
        backward_into(&params, &cache, &dscores, &mut batched);

        let mut sequential = params.zeros_like();
        let per = shape.total() * 4;
        for (k, (q, m)) in tokens.iter().zip(&masks).enumerate() {
            let (l, c) = forward_cached(&params, &spec, q, m, None).unwrap();
            assert_eq!(l.scores(), logits[k].scores());
            backward_into(&params, &c, &dscores[k * per..(k + 1) * per], &mut sequential);
        }
        assert_eq!(batched, sequential);
    }
}
