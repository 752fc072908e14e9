use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Shape3;

/// What a masked slot feeds into the input projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskValueMode {
    /// One trainable scalar per dimension.
    Learned,
    /// The same constant for every dimension.
    Fixed(f64),
    /// The bin center of a freshly drawn random level.
    RandomId,
}

impl fmt::Display for MaskValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskValueMode::Learned => f.write_str("learned"),
            MaskValueMode::Fixed(v) => write!(f, "fixed:{v}"),
            MaskValueMode::RandomId => f.write_str("random"),
        }
    }
}

impl FromStr for MaskValueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(MaskValueMode::Learned),
            "random" => Ok(MaskValueMode::RandomId),
            "fixed" => Ok(MaskValueMode::Fixed(0.0)),
            _ => match s.strip_prefix("fixed:") {
                Some(v) => v
                    .parse()
                    .map(MaskValueMode::Fixed)
                    .map_err(|_| Error::Config(format!("bad fixed mask value {v:?}"))),
                None => Err(Error::Config(format!("unknown mask mode {s:?}"))),
            },
        }
    }
}

impl Serialize for MaskValueMode {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MaskValueMode {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(de)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub shape: Shape3,
    pub levels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of classes; 0 means unconditional.
    pub classes: usize,
    pub mask_mode: MaskValueMode,
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("block count must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be >= 1".into()));
        }
        if let MaskValueMode::Fixed(v) = self.mask_mode {
            if !v.is_finite() {
                return Err(Error::Config("fixed mask value must be finite".into()));
            }
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

/// Indices of each parameter inside [`PredictorParams::params`].
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub in_w: usize,
    pub in_b: usize,
    pub pos: usize,
    pub class: Option<usize>,
    pub mask: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head1_w: usize,
    pub head1_b: usize,
    pub head2_w: usize,
    pub head2_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    params: Vec<(Param, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, decay: bool, init: Init) -> usize {
        let len = shape.iter().product();
        self.params.push((
            Param {
                name,
                shape,
                data: vec![0.0; len],
                decay,
            },
            init,
        ));
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.push(name, vec![fan_in, fan_out], true, Init::Normal(std))
    }

    fn vector(&mut self, name: String, len: usize, init: Init) -> usize {
        self.push(name, vec![len], false, init)
    }
}

fn build(config: &PredictorConfig) -> (Vec<(Param, Init)>, Layout) {
    let (d, hid) = (config.shape.d, config.hidden);
    let mlp = hid * config.mlp_ratio;
    let out = d * config.levels;
    let mut b = Builder { params: Vec::new() };
    let in_w = b.weight("input.weight".into(), d, hid);
    let in_b = b.vector("input.bias".into(), hid, Init::Zeros);
    let pos = b.push("pos_embed".into(), vec![config.shape.spatial(), hid], false, Init::Normal(0.02));
    let class = (config.classes > 0).then(|| {
        b.push(
            "class_embed".into(),
            vec![config.classes + 1, hid],
            false,
            Init::Normal(0.02),
        )
    });
    let mask = b.vector("mask_value".into(), d, Init::Zeros);
    let blocks = (0..config.blocks)
        .map(|k| BlockLayout {
            ln1_g: b.vector(format!("blocks.{k}.ln1.gain"), hid, Init::Ones),
            ln1_b: b.vector(format!("blocks.{k}.ln1.bias"), hid, Init::Zeros),
            qkv_w: b.weight(format!("blocks.{k}.attn.qkv.weight"), hid, 3 * hid),
            qkv_b: b.vector(format!("blocks.{k}.attn.qkv.bias"), 3 * hid, Init::Zeros),
            out_w: b.weight(format!("blocks.{k}.attn.out.weight"), hid, hid),
            out_b: b.vector(format!("blocks.{k}.attn.out.bias"), hid, Init::Zeros),
            ln2_g: b.vector(format!("blocks.{k}.ln2.gain"), hid, Init::Ones),
            ln2_b: b.vector(format!("blocks.{k}.ln2.bias"), hid, Init::Zeros),
            fc1_w: b.weight(format!("blocks.{k}.mlp.fc1.weight"), hid, mlp),
            fc1_b: b.vector(format!("blocks.{k}.mlp.fc1.bias"), mlp, Init::Zeros),
            fc2_w: b.weight(format!("blocks.{k}.mlp.fc2.weight"), mlp, hid),
            fc2_b: b.vector(format!("blocks.{k}.mlp.fc2.bias"), hid, Init::Zeros),
        })
        .collect();
    let layout = Layout {
        in_w,
        in_b,
        pos,
        class,
        mask,
        blocks,
        lnf_g: b.vector("final_ln.gain".into(), hid, Init::Ones),
        lnf_b: b.vector("final_ln.bias".into(), hid, Init::Zeros),
        head1_w: b.weight("head.fc1.weight".into(), hid, hid),
        head1_b: b.vector("head.fc1.bias".into(), hid, Init::Zeros),
        head2_w: b.weight("head.fc2.weight".into(), hid, out),
        head2_b: b.vector("head.fc2.bias".into(), out, Init::Zeros),
    };
    (b.params, layout)
}

/// All learnable state of the predictor.
#[derive(Clone, Debug)]
pub struct PredictorParams {
    config: PredictorConfig,
    params: Vec<Param>,
    pub(crate) layout: Layout,
}

impl PartialEq for PredictorParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl PredictorParams {
    pub fn init(config: PredictorConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (raw, layout) = build(&config);
        let params = raw
            .into_iter()
            .map(|(mut p, init)| {
                match init {
                    Init::Zeros => {}
                    Init::Ones => p.data.fill(1.0),
                    Init::Normal(std) => p.data.iter_mut().for_each(|v| *v = std * rng.standard_normal()),
                }
                p
            })
            .collect();
        Ok(PredictorParams {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds parameters from stored tensors, checking names and shapes.
    pub fn from_tensors(config: PredictorConfig, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        config.validate()?;
        let (raw, layout) = build(&config);
        if raw.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                raw.len(),
                tensors.len()
            )));
        }
        let params = raw
            .into_iter()
            .zip(tensors)
            .map(|((mut p, _), (name, shape, data))| {
                if p.name != name || p.shape != shape || data.len() != p.data.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {name} {shape:?} does not match expected {} {:?}",
                        p.name, p.shape
                    )));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("parameter {name} is not finite")));
                }
                p.data = data;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        Ok(PredictorParams {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        &self.params[idx].data
    }

    /// Zeroed buffers matching every parameter tensor.
    pub fn zeros_like(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }
}

/// Per-parameter buffers aligned with [`PredictorParams::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
