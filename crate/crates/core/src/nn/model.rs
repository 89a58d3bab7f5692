//! Model topologies and constructors.

use super::arcface::{cosine_logits, MarginConfig};
use super::graph::{Graph, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::perturb::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    EncoderDecoderSkip,
    ConvClassifier,
}

/// Declarative layer layout of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    /// U-Net-like: `levels` stride-2 downsamplings, nearest upsampling back,
    /// additive skips at every resolution. With `identity_skip` the input is
    /// added to the output (requires `in_channels == out_channels`).
    EncoderDecoder {
        in_channels: usize,
        out_channels: usize,
        base_width: usize,
        levels: usize,
        identity_skip: bool,
    },
    /// `conv-relu-avgpool` stages, global average pool, linear embedding.
    Classifier {
        in_channels: usize,
        widths: Vec<usize>,
        embedding_dim: usize,
    },
}

impl ModelSpec {
    pub fn topology(&self) -> Topology {
        match self {
            ModelSpec::EncoderDecoder { .. } => Topology::EncoderDecoderSkip,
            ModelSpec::Classifier { .. } => Topology::ConvClassifier,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ModelSpec::EncoderDecoder { in_channels, .. } | ModelSpec::Classifier { in_channels, .. } => {
                *in_channels
            }
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        match self {
            ModelSpec::EncoderDecoder { levels, .. } => 1 << levels,
            ModelSpec::Classifier { widths, .. } => 1 << widths.len(),
        }
    }

    /// `(name, shape, fan_in)` of every parameter in construction order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9));
            out.push((format!("{name}.bias"), vec![cout], 0));
        };
        match self {
            ModelSpec::EncoderDecoder {
                in_channels,
                out_channels,
                base_width,
                levels,
                ..
            } => {
                let width = |l: usize| base_width << l;
                conv("enc0.a".into(), *in_channels, width(0));
                conv("enc0.b".into(), width(0), width(0));
                for l in 1..=*levels {
                    conv(format!("enc{l}.down"), width(l - 1), width(l));
                    conv(format!("enc{l}.b"), width(l), width(l));
                }
                for l in (1..=*levels).rev() {
                    conv(format!("dec{l}.up"), width(l), width(l - 1));
                    conv(format!("dec{l}.fuse"), width(l - 1), width(l - 1));
                }
                conv("out".into(), width(0), *out_channels);
            }
            ModelSpec::Classifier {
                in_channels,
                widths,
                embedding_dim,
            } => {
                let mut cin = *in_channels;
                for (i, &w) in widths.iter().enumerate() {
                    conv(format!("stage{i}"), cin, w);
                    cin = w;
                }
                out.push(("embed.weight".into(), vec![*embedding_dim, cin], cin));
                out.push(("embed.bias".into(), vec![*embedding_dim], 0));
            }
        }
        out
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSpec::EncoderDecoder {
                in_channels,
                out_channels,
                base_width,
                levels,
                identity_skip,
            } => write!(
                f,
                "encdec;in={in_channels};out={out_channels};base={base_width};levels={levels};skip={}",
                *identity_skip as u8
            ),
            ModelSpec::Classifier {
                in_channels,
                widths,
                embedding_dim,
            } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "classifier;in={in_channels};widths={};emb={embedding_dim}", w.join("/"))
            }
        }
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad model spec {s:?}"));
        let mut parts = s.split(';');
        let kind = parts.next().ok_or_else(bad)?;
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> { fields.get(k).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        match kind {
            "encdec" => Ok(ModelSpec::EncoderDecoder {
                in_channels: num("in")?,
                out_channels: num("out")?,
                base_width: num("base")?,
                levels: num("levels")?,
                identity_skip: num("skip")? != 0,
            }),
            "classifier" => Ok(ModelSpec::Classifier {
                in_channels: num("in")?,
                widths: fields
                    .get("widths")
                    .ok_or_else(bad)?
                    .split('/')
                    .map(|w| w.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
                embedding_dim: num("emb")?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) weights and zero biases.
fn init_params(spec: &ModelSpec, seed: u64) -> ParamStore {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    for (i, (name, shape, fan_in)) in spec.param_layout().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut r = rng.fork(i as u64);
            (0..n).map(|_| ((r.unit() * 2.0 - 1.0) * bound) as f32).collect()
        };
        store.push(name, Tensor::new(&shape, data).expect("layout shape"));
    }
    store
}

/// A parameterised differentiable network.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    input_scale: f32,
}

impl Model {
    pub fn new(spec: ModelSpec, init_seed: u64) -> Result<Self> {
        if let ModelSpec::EncoderDecoder {
            in_channels,
            out_channels,
            identity_skip: true,
            ..
        } = &spec
        {
            if in_channels != out_channels {
                return Err(Error::invalid("identity skip needs equal input and output channels"));
            }
        }
        let params = init_params(&spec, init_seed);
        Ok(Self {
            spec,
            params,
            input_scale: 1.0,
        })
    }

    /// Rebuild from a spec and an existing parameter set (shapes are validated).
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "model expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(params.params()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            spec,
            params,
            input_scale: 1.0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn topology(&self) -> Topology {
        self.spec.topology()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Fixed multiplier applied to inputs before the first layer.
    pub fn input_scale(&self) -> f32 {
        self.input_scale
    }

    pub fn set_input_scale(&mut self, scale: f32) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("input scale must be positive, got {scale}")));
        }
        self.input_scale = scale;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        !self.params.is_trainable()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => {
                return Err(Error::invalid(format!(
                    "model input must be (B, C, H, W), got {shape:?}"
                )))
            }
        };
        if c != self.spec.in_channels() {
            return Err(Error::invalid(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels()
            )));
        }
        let m = self.spec.spatial_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "spatial size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph, idx: &mut usize, x: Var, stride: usize) -> Result<Var> {
        let w = g.param(&self.params, *idx);
        let b = g.param(&self.params, *idx + 1);
        *idx += 2;
        g.conv2d(x, w, b, stride)
    }

    /// Record the forward pass of this model on `input` into `g`.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        let input = if self.input_scale == 1.0 {
            input
        } else {
            g.scale(input, self.input_scale)
        };
        let mut idx = 0;
        match &self.spec {
            ModelSpec::EncoderDecoder {
                levels,
                identity_skip,
                ..
            } => {
                let mut skips = Vec::with_capacity(levels + 1);
                let h = self.conv(g, &mut idx, input, 1)?;
                let h = g.relu(h);
                let h = self.conv(g, &mut idx, h, 1)?;
                let mut h = g.relu(h);
                skips.push(h);
                for _ in 1..=*levels {
                    let d = self.conv(g, &mut idx, h, 2)?;
                    let d = g.relu(d);
                    let d = self.conv(g, &mut idx, d, 1)?;
                    h = g.relu(d);
                    skips.push(h);
                }
                for l in (1..=*levels).rev() {
                    let u = self.conv(g, &mut idx, h, 1)?;
                    let u = g.relu(u);
                    let u = g.upsample2x(u)?;
                    let u = g.add(u, skips[l - 1])?;
                    let u = self.conv(g, &mut idx, u, 1)?;
                    h = g.relu(u);
                }
                let out = self.conv(g, &mut idx, h, 1)?;
                if *identity_skip {
                    g.add(out, input)
                } else {
                    Ok(out)
                }
            }
            ModelSpec::Classifier { widths, .. } => {
                let mut h = input;
                for _ in widths {
                    let c = self.conv(g, &mut idx, h, 1)?;
                    let c = g.relu(c);
                    h = g.avgpool2(c)?;
                }
                let pooled = g.global_avgpool(h)?;
                let w = g.param(&self.params, idx);
                let b = g.param(&self.params, idx + 1);
                g.linear(pooled, w, b)
            }
        }
    }

    /// Forward pass without keeping the graph.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Class-weight matrix and margin settings for angular-margin training.
#[derive(Clone, Debug)]
pub struct ArcFaceHead {
    params: ParamStore,
    pub margin: MarginConfig,
}

impl ArcFaceHead {
    pub fn new(class_count: usize, embedding_dim: usize, margin: MarginConfig, seed: u64) -> Result<Self> {
        if class_count == 0 || embedding_dim == 0 {
            return Err(Error::invalid("head needs at least one class and one dimension"));
        }
        margin.validate()?;
        let mut rng = SplitMix64::new(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
        let bound = (6.0 / embedding_dim as f64).sqrt();
        let data = (0..class_count * embedding_dim)
            .map(|_| ((rng.unit() * 2.0 - 1.0) * bound) as f32)
            .collect();
        let mut params = ParamStore::new();
        params.push("head.weight", Tensor::new(&[class_count, embedding_dim], data)?);
        Ok(Self { params, margin })
    }

    pub fn from_params(params: ParamStore, margin: MarginConfig) -> Result<Self> {
        match params.params() {
            [p] if p.value.shape().len() == 2 => Ok(Self { params, margin }),
            _ => Err(Error::invalid("head checkpoint must hold one 2-D weight")),
        }
    }

    pub fn class_count(&self) -> usize {
        self.params.get(0).value.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.get(0).value.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.params.get(0).value
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn weight_var(&self, g: &mut Graph) -> Var {
        g.param(&self.params, 0)
    }

    /// Index of the most similar class weight for each embedding row.
    pub fn predict(&self, emb: &Tensor) -> Result<Vec<usize>> {
        let cos = cosine_logits(emb, self.weight())?;
        let n = self.class_count();
        Ok(cos
            .data()
            .chunks_exact(n)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Desk-scale generator: `C → C` encoder–decoder with skips and an identity
/// path from input to output, so a zero residual branch regenerates exactly.
pub fn build_generator(channels: usize, base_width: usize, seed: u64) -> Result<Model> {
    if channels != 12 && channels != 192 {
        return Err(Error::invalid(format!(
            "generator supports 12 or 192 channels, got {channels}"
        )));
    }
    if base_width == 0 {
        return Err(Error::invalid("base width must be positive"));
    }
    Model::new(
        ModelSpec::EncoderDecoder {
            in_channels: channels,
            out_channels: channels,
            base_width,
            levels: 3,
            identity_skip: true,
        },
        seed,
    )
}

pub const RECOGNIZER_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Four `conv-relu-pool` stages, global pooling and a linear embedding, plus
/// the matching margin head.
pub fn build_recognizer(
    in_channels: usize,
    embedding_dim: usize,
    class_count: usize,
    margin: MarginConfig,
    seed: u64,
) -> Result<(Model, ArcFaceHead)> {
    if ![3, 12, 192].contains(&in_channels) {
        return Err(Error::invalid(format!(
            "recognizer input must have 3, 12 or 192 channels, got {in_channels}"
        )));
    }
    if embedding_dim == 0 || class_count == 0 {
        return Err(Error::invalid("embedding dim and class count must be positive"));
    }
    let model = Model::new(
        ModelSpec::Classifier {
            in_channels,
            widths: RECOGNIZER_WIDTHS.to_vec(),
            embedding_dim,
        },
        seed,
    )?;
    let head = ArcFaceHead::new(class_count, embedding_dim, margin, seed.wrapping_add(1))?;
    Ok((model, head))
}

/// The attacker's `3 → 3` encoder–decoder: one level deeper and wider than the generator.
pub fn build_recovery(seed: u64) -> Model {
    Model::new(
        ModelSpec::EncoderDecoder {
            in_channels: 3,
            out_channels: 3,
            base_width: 24,
            levels: 4,
            identity_skip: false,
        },
        seed,
    )
    .expect("static recovery spec is valid")
}
