use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, OptimizerState, OCR_MAGIC};
use crate::ctc;
use crate::nn::graph::{conv_out_dims, log_softmax_rows};
use crate::nn::params::{he_bound, uniform, xavier_bound};
use crate::nn::{ConvGeom, Graph, Params, Real, Tensor, Var};

use super::charset::Charset;
use super::input::PreparedLine;
use super::mask::{sample_span_mask, SpanMask};
use super::OcrError;

const LN_EPS: f64 = 1e-5;

/// One convolution of the feature extractor. Every layer except the last is
/// followed by a ReLU; residual layers add their input to the activated
/// output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub residual: bool,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { out_channels, kernel, stride, pad, residual: false }
    }

    pub const fn residual(channels: usize) -> Self {
        Self { out_channels: channels, kernel: (3, 3), stride: (1, 1), pad: (1, 1), residual: true }
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom { stride: self.stride, pad: self.pad }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}x{}:s{}x{}:p{}x{}",
            self.out_channels, self.kernel.0, self.kernel.1, self.stride.0, self.stride.1, self.pad.0, self.pad.1
        )?;
        if self.residual {
            f.write_str(":res")?;
        }
        Ok(())
    }
}

fn pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl FromStr for ConvSpec {
    type Err = String;

    /// `out:KHxKW[:sSHxSW][:pPHxPW][:res]`, e.g. `64:3x3:s2x1:p1x1`.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad conv layer {s:?}");
        let mut parts = s.trim().split(':');
        let out = parts.next().and_then(|p| p.trim().parse().ok()).ok_or_else(bad)?;
        let kernel = parts.next().and_then(pair).ok_or_else(bad)?;
        let mut spec = ConvSpec::new(out, kernel, (1, 1), (0, 0));
        for p in parts {
            let p = p.trim();
            if p == "res" {
                spec.residual = true;
            } else if let Some(v) = p.strip_prefix('s') {
                spec.stride = pair(v).ok_or_else(bad)?;
            } else if let Some(v) = p.strip_prefix('p') {
                spec.pad = pair(v).ok_or_else(bad)?;
            } else {
                return Err(bad());
            }
        }
        Ok(spec)
    }
}

/// Parses a comma-separated list of [`ConvSpec`]s.
pub fn parse_extractor(s: &str) -> Result<Vec<ConvSpec>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn format_extractor(layers: &[ConvSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Named extractor stacks. All reduce height `h` (a multiple of 16) to 1 and
/// width by 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorPreset {
    /// Six layers, 16→32→64→D.
    Standard,
    /// Six layers, 8→16→32→D; cheap enough for smoke-test training.
    Narrow,
    /// Ten layers with more residual stages.
    Deep,
}

impl FromStr for ExtractorPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(Self::Standard),
            "narrow" => Ok(Self::Narrow),
            "deep" => Ok(Self::Deep),
            other => Err(format!("unknown extractor preset {other:?}")),
        }
    }
}

impl ExtractorPreset {
    pub fn layers(self, height: usize, token_dim: usize) -> Vec<ConvSpec> {
        let down = |c| ConvSpec::new(c, (3, 3), (2, 2), (1, 1));
        let tall = |c| ConvSpec::new(c, (3, 3), (2, 1), (1, 1));
        let collapse = ConvSpec::new(token_dim, ((height / 16).max(1), 3), (1, 1), (0, 1));
        match self {
            Self::Standard => vec![down(16), down(32), down(64), ConvSpec::residual(64), tall(64), collapse],
            Self::Narrow => vec![down(8), down(16), down(32), ConvSpec::residual(32), tall(32), collapse],
            Self::Deep => vec![
                down(16),
                ConvSpec::residual(16),
                down(32),
                ConvSpec::residual(32),
                down(64),
                ConvSpec::residual(64),
                ConvSpec::residual(64),
                tall(64),
                ConvSpec::residual(64),
                collapse,
            ],
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OcrConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Horizontal pixels per token.
    pub projection: usize,
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `token_dim`.
    pub ff_mult: usize,
    pub extractor: Vec<ConvSpec>,
}

impl Default for OcrConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 512,
            projection: 8,
            token_dim: 128,
            blocks: 4,
            heads: 4,
            ff_mult: 4,
            extractor: ExtractorPreset::Standard.layers(64, 128),
        }
    }
}

impl OcrConfig {
    /// Small configuration used for smoke-test training: D=64, 2 blocks.
    pub fn toy() -> Self {
        Self { token_dim: 64, blocks: 2, heads: 4, extractor: ExtractorPreset::Narrow.layers(64, 64), ..Self::default() }
    }

    pub fn tokens(&self) -> usize {
        self.input_width / self.projection
    }

    pub fn validate(&self) -> Result<(), OcrError> {
        let fail = |m: String| Err(OcrError::Architecture(m));
        if self.token_dim == 0 || self.token_dim % 2 != 0 {
            return fail(format!("token dimension {} must be even and positive", self.token_dim));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return fail(format!("{} heads do not divide token dimension {}", self.heads, self.token_dim));
        }
        if self.projection == 0 || self.input_width % self.projection != 0 {
            return fail(format!("input width {} is not a multiple of projection {}", self.input_width, self.projection));
        }
        let Some(last) = self.extractor.last() else {
            return fail("empty feature extractor".into());
        };
        if last.out_channels != self.token_dim {
            return fail(format!("extractor ends with {} channels, expected {}", last.out_channels, self.token_dim));
        }
        let (mut c, mut h, mut w) = (1, self.input_height, self.input_width);
        for (i, l) in self.extractor.iter().enumerate() {
            if l.stride.0 == 0 || l.stride.1 == 0 || h + 2 * l.pad.0 < l.kernel.0 || w + 2 * l.pad.1 < l.kernel.1 {
                return fail(format!("conv layer {i} ({l}) does not fit a {h}x{w} input"));
            }
            let (nh, nw) = conv_out_dims(h, w, l.kernel.0, l.kernel.1, l.geom());
            if l.residual && (l.out_channels != c || nh != h || nw != w) {
                return fail(format!("residual conv layer {i} ({l}) changes shape"));
            }
            (c, h, w) = (l.out_channels, nh, nw);
        }
        if h != 1 || w != self.tokens() {
            return fail(format!("extractor output is {h}x{w}, expected 1x{}", self.tokens()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockSlots {
    ln1: Affine,
    qkv: Affine,
    proj: Affine,
    ln2: Affine,
    ff1: Affine,
    ff2: Affine,
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    conv: Vec<Affine>,
    blocks: Vec<BlockSlots>,
    mask_token: usize,
    norm: Affine,
    head: Affine,
}

/// Randomness consumed by one training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPlan {
    pub mask: Option<SpanMask>,
    /// Per block: keys hidden from every query.
    pub hidden: Vec<Vec<bool>>,
}

impl ForwardPlan {
    /// No span mask; only padding tokens are hidden.
    pub fn inference(tokens: usize, valid: usize, blocks: usize) -> Self {
        let pad: Vec<bool> = (0..tokens).map(|t| t >= valid).collect();
        Self { mask: None, hidden: vec![pad; blocks] }
    }

    /// Span mask over all tokens and, per block, `round(attn_ratio · tokens)`
    /// randomly hidden keys among the valid ones (at least one stays visible).
    pub fn sample(
        tokens: usize,
        valid: usize,
        blocks: usize,
        mask_ratio: f64,
        max_span: usize,
        attn_ratio: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, OcrError> {
        let mask = (mask_ratio > 0.0).then(|| sample_span_mask(tokens, mask_ratio, max_span, rng)).transpose()?;
        let mut plan = Self::inference(tokens, valid, blocks);
        plan.mask = mask;
        let k = ((attn_ratio * tokens as f64).round() as usize).min(valid.saturating_sub(1));
        if k > 0 {
            for hidden in &mut plan.hidden {
                for i in sample(rng, valid, k) {
                    hidden[i] = true;
                }
            }
        }
        Ok(plan)
    }
}

/// Per-frame log-probabilities and the number of frames covering content.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<R: Real> {
    pub logprobs: Tensor<R>,
    pub valid: usize,
}

impl Logits<f32> {
    pub fn as_f64(&self) -> Vec<f64> {
        self.logprobs.data().iter().map(|&v| v as f64).collect()
    }

    pub fn greedy(&self, charset: &Charset) -> String {
        let (t, c) = self.logprobs.dims2();
        let lp = self.as_f64();
        let m = ctc::LogProbs::new(&lp, t, c).expect("logits shape");
        charset.decode(ctc::greedy_decode(&m, self.valid).as_slice())
    }
}

/// Convolutional tokenizer, transformer encoder and CTC head.
#[derive(Clone, Debug, PartialEq)]
pub struct OcrModel<R: Real = f32> {
    config: OcrConfig,
    charset: Charset,
    params: Params<R>,
    slots: Slots,
}

fn conv_name(i: usize, part: &str) -> String {
    format!("conv{i}.{part}")
}

fn block_name(b: usize, layer: &str, part: &str) -> String {
    format!("block{b}.{layer}.{part}")
}

impl<R: Real> OcrModel<R> {
    /// Freshly initialized model.
    pub fn new(config: OcrConfig, charset: Charset, seed: u64) -> Result<Self, OcrError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut c_in = 1;
        for (i, l) in config.extractor.iter().enumerate() {
            let fan_in = c_in * l.kernel.0 * l.kernel.1;
            let shape = [l.out_channels, c_in, l.kernel.0, l.kernel.1];
            p.push(conv_name(i, "weight"), uniform(&mut rng, &shape, he_bound(fan_in)), true);
            p.push(conv_name(i, "bias"), Tensor::zeros(&[l.out_channels]), false);
            c_in = l.out_channels;
        }
        let d = config.token_dim;
        let ff = d * config.ff_mult;
        let linear = |p: &mut Params<R>, rng: &mut ChaCha8Rng, name: String, din: usize, dout: usize| {
            p.push(format!("{name}.weight"), uniform(rng, &[din, dout], xavier_bound(din, dout)), true);
            p.push(format!("{name}.bias"), Tensor::zeros(&[dout]), false);
        };
        let norm = |p: &mut Params<R>, name: String| {
            p.push(format!("{name}.gamma"), Tensor::full(&[d], R::one()), false);
            p.push(format!("{name}.beta"), Tensor::zeros(&[d]), false);
        };
        for b in 0..config.blocks {
            norm(&mut p, format!("block{b}.ln1"));
            linear(&mut p, &mut rng, format!("block{b}.qkv"), d, 3 * d);
            linear(&mut p, &mut rng, format!("block{b}.proj"), d, d);
            norm(&mut p, format!("block{b}.ln2"));
            linear(&mut p, &mut rng, format!("block{b}.ff1"), d, ff);
            linear(&mut p, &mut rng, format!("block{b}.ff2"), ff, d);
        }
        p.push("mask_token", uniform(&mut rng, &[d], 0.02), false);
        norm(&mut p, "norm".into());
        linear(&mut p, &mut rng, "head".into(), d, charset.classes());
        Self::from_parts(config, charset, p)
    }

    /// Assembles a model from existing parameters, checking names and shapes.
    pub fn from_parts(config: OcrConfig, charset: Charset, params: Params<R>) -> Result<Self, OcrError> {
        config.validate()?;
        let d = config.token_dim;
        let ff = d * config.ff_mult;
        let find = |name: String, shape: &[usize]| -> Result<usize, OcrError> {
            let i = params.index_of(&name).ok_or_else(|| OcrError::Architecture(format!("missing parameter {name}")))?;
            let got = params.get(i).value.shape();
            if got != shape {
                return Err(OcrError::Architecture(format!("parameter {name} has shape {got:?}, expected {shape:?}")));
            }
            Ok(i)
        };
        let mut conv = Vec::new();
        let mut c_in = 1;
        for (i, l) in config.extractor.iter().enumerate() {
            conv.push(Affine {
                w: find(conv_name(i, "weight"), &[l.out_channels, c_in, l.kernel.0, l.kernel.1])?,
                b: find(conv_name(i, "bias"), &[l.out_channels])?,
            });
            c_in = l.out_channels;
        }
        let lin = |b: usize, n: &str, din: usize, dout: usize| -> Result<Affine, OcrError> {
            Ok(Affine { w: find(block_name(b, n, "weight"), &[din, dout])?, b: find(block_name(b, n, "bias"), &[dout])? })
        };
        let ln = |b: usize, n: &str| -> Result<Affine, OcrError> {
            Ok(Affine { w: find(block_name(b, n, "gamma"), &[d])?, b: find(block_name(b, n, "beta"), &[d])? })
        };
        let mut blocks = Vec::new();
        for b in 0..config.blocks {
            blocks.push(BlockSlots {
                ln1: ln(b, "ln1")?,
                qkv: lin(b, "qkv", d, 3 * d)?,
                proj: lin(b, "proj", d, d)?,
                ln2: ln(b, "ln2")?,
                ff1: lin(b, "ff1", d, ff)?,
                ff2: lin(b, "ff2", ff, d)?,
            });
        }
        let slots = Slots {
            conv,
            blocks,
            mask_token: find("mask_token".into(), &[d])?,
            norm: Affine { w: find("norm.gamma".into(), &[d])?, b: find("norm.beta".into(), &[d])? },
            head: Affine { w: find("head.weight".into(), &[d, charset.classes()])?, b: find("head.bias".into(), &[charset.classes()])? },
        };
        if params.len() != 2 * config.extractor.len() + 12 * config.blocks + 5 {
            return Err(OcrError::Architecture("unexpected extra parameters".into()));
        }
        Ok(Self { config, charset, params, slots })
    }

    pub fn config(&self) -> &OcrConfig {
        &self.config
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn params(&self) -> &Params<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<R> {
        &mut self.params
    }

    pub fn mask_token(&self) -> &Tensor<R> {
        &self.params.get(self.slots.mask_token).value
    }

    pub fn cast<S: Real>(&self) -> OcrModel<S> {
        OcrModel { config: self.config.clone(), charset: self.charset.clone(), params: self.params.cast(), slots: self.slots.clone() }
    }

    fn vars(&self, g: &mut Graph<R>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable { g.param(i, &p.value) } else { g.input(p.value.clone()) })
            .collect()
    }

    fn graph_tokens(&self, g: &mut Graph<R>, v: &[Var], pixels: &Tensor<f32>) -> Result<Var, OcrError> {
        if pixels.shape().len() != 3 || pixels.shape()[0] != 1 {
            return Err(OcrError::Shape(format!("expected [1, H, W] input, got {:?}", pixels.shape())));
        }
        let (_, h, w) = pixels.dims3();
        if h != self.config.input_height || w == 0 || w % self.config.projection != 0 {
            return Err(OcrError::Shape(format!(
                "input {h}x{w} must be {} rows and a multiple of {} columns",
                self.config.input_height, self.config.projection
            )));
        }
        let mut x = g.input(pixels.cast());
        let last = self.config.extractor.len() - 1;
        for (i, (l, a)) in self.config.extractor.iter().zip(&self.slots.conv).enumerate() {
            let mut y = g.conv2d(x, v[a.w], v[a.b], l.geom());
            if i != last {
                y = g.relu(y);
            }
            if l.residual {
                y = g.add(y, x);
            }
            x = y;
        }
        let (d, oh, t) = g.value(x).dims3();
        // structural guarantee: one token per `projection` columns, no extra tokens
        if oh != 1 || t != w / self.config.projection {
            return Err(OcrError::Shape(format!("extractor produced {oh}x{t} map for width {w}")));
        }
        let x = g.reshape(x, &[d, t]);
        Ok(g.transpose(x))
    }

    fn graph_encode(&self, g: &mut Graph<R>, v: &[Var], mut x: Var, hidden: &[Vec<bool>]) -> Result<Var, OcrError> {
        let (t, d) = g.value(x).dims2();
        if !g.value(x).all_finite() {
            return Err(OcrError::NonFinite);
        }
        if hidden.len() != self.config.blocks || hidden.iter().any(|h| h.len() != t) {
            return Err(OcrError::Shape("attention mask does not match blocks/tokens".into()));
        }
        x = g.add_const(x, &sinusoidal_positions::<R>(t, d)?);
        for (bs, hid) in self.slots.blocks.iter().zip(hidden) {
            let h = g.layer_norm(x, v[bs.ln1.w], v[bs.ln1.b], LN_EPS);
            let qkv = g.linear(h, v[bs.qkv.w], v[bs.qkv.b]);
            let a = g.attention(qkv, self.config.heads, hid);
            let a = g.linear(a, v[bs.proj.w], v[bs.proj.b]);
            x = g.add(x, a);
            let h = g.layer_norm(x, v[bs.ln2.w], v[bs.ln2.b], LN_EPS);
            let f = g.linear(h, v[bs.ff1.w], v[bs.ff1.b]);
            let f = g.gelu(f);
            let f = g.linear(f, v[bs.ff2.w], v[bs.ff2.b]);
            x = g.add(x, f);
        }
        Ok(x)
    }

    fn graph_head(&self, g: &mut Graph<R>, v: &[Var], x: Var) -> Var {
        let h = g.layer_norm(x, v[self.slots.norm.w], v[self.slots.norm.b], LN_EPS);
        let z = g.linear(h, v[self.slots.head.w], v[self.slots.head.b]);
        g.log_softmax(z)
    }

    fn graph_forward(&self, g: &mut Graph<R>, v: &[Var], line: &PreparedLine, plan: &ForwardPlan) -> Result<Var, OcrError> {
        let mut x = self.graph_tokens(g, v, &line.pixels)?;
        if let Some(mask) = &plan.mask {
            let t = g.value(x).dims2().0;
            if mask.masked.len() != t {
                return Err(OcrError::Shape(format!("span mask covers {} tokens, sequence has {t}", mask.masked.len())));
            }
            x = g.mask_rows(x, v[self.slots.mask_token], &mask.masked);
        }
        let x = self.graph_encode(g, v, x, &plan.hidden)?;
        Ok(self.graph_head(g, v, x))
    }

    /// Token sequence `[T, D]` of the convolutional extractor.
    pub fn extract_tokens(&self, line: &PreparedLine) -> Result<Tensor<R>, OcrError> {
        let mut g = Graph::new();
        let v = self.vars(&mut g, false);
        let x = self.graph_tokens(&mut g, &v, &line.pixels)?;
        Ok(g.value(x).clone())
    }

    /// Adds positions and runs the encoder blocks. `valid` tokens take part
    /// in attention; during training a further `round(attn_mask_ratio · T)`
    /// keys per block are hidden at random.
    pub fn encode(&self, tokens: &Tensor<R>, valid: usize, attn_mask_ratio: f64, rng: &mut impl Rng) -> Result<Tensor<R>, OcrError> {
        let (t, _) = tokens.dims2();
        let plan = ForwardPlan::sample(t, valid, self.config.blocks, 0.0, 1, attn_mask_ratio, rng)?;
        self.encode_with(tokens, &plan.hidden)
    }

    pub fn encode_with(&self, tokens: &Tensor<R>, hidden: &[Vec<bool>]) -> Result<Tensor<R>, OcrError> {
        let mut g = Graph::new();
        let v = self.vars(&mut g, false);
        let x = g.input(tokens.clone());
        let y = self.graph_encode(&mut g, &v, x, hidden)?;
        Ok(g.value(y).clone())
    }

    /// Log-probabilities under an explicit plan.
    pub fn forward_with(&self, line: &PreparedLine, plan: &ForwardPlan) -> Result<Logits<R>, OcrError> {
        let mut g = Graph::new();
        let v = self.vars(&mut g, false);
        let out = self.graph_forward(&mut g, &v, line, plan)?;
        Ok(Logits { logprobs: g.value(out).clone(), valid: line.valid_tokens })
    }

    /// Full forward pass. With `train` set, a span mask and random key hiding
    /// are drawn from `rng` with the given ratios; otherwise no masking.
    pub fn forward_logits(&self, line: &PreparedLine, train: Option<MaskingConfig>, rng: &mut impl Rng) -> Result<Logits<R>, OcrError> {
        let plan = self.plan(line, train, rng)?;
        self.forward_with(line, &plan)
    }

    pub fn plan(&self, line: &PreparedLine, train: Option<MaskingConfig>, rng: &mut impl Rng) -> Result<ForwardPlan, OcrError> {
        let t = line.pixels.shape()[2] / self.config.projection;
        Ok(match train {
            None => ForwardPlan::inference(t, line.valid_tokens, self.config.blocks),
            Some(m) => ForwardPlan::sample(t, line.valid_tokens, self.config.blocks, m.mask_ratio, m.max_span, m.attn_mask_ratio, rng)?,
        })
    }

    /// CTC loss of `target` and its gradient with respect to every parameter.
    /// Returns `None` when the target cannot be aligned to the valid frames.
    pub fn loss_and_grads(&self, line: &PreparedLine, target: &[usize], plan: &ForwardPlan) -> Result<Option<(f64, Vec<Tensor<R>>)>, OcrError> {
        let mut g = Graph::new();
        let v = self.vars(&mut g, true);
        let lp = self.graph_forward(&mut g, &v, line, plan)?;
        let Some(loss) = g.ctc_loss(lp, line.valid_tokens, target)? else {
            return Ok(None);
        };
        let value = g.value(loss).data()[0].as_f64();
        let grads = g
            .backward(loss, self.params.len())
            .into_iter()
            .zip(self.params.iter())
            .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        Ok(Some((value, grads)))
    }

    /// Best-path transcription of one line.
    pub fn transcribe(&self, line: &PreparedLine) -> Result<String, OcrError> {
        let logits = self.forward_with(line, &self.plan(line, None, &mut ChaCha8Rng::seed_from_u64(0))?)?;
        let (t, c) = logits.logprobs.dims2();
        let lp: Vec<f64> = logits.logprobs.data().iter().map(|v| v.as_f64()).collect();
        let m = ctc::LogProbs::new(&lp, t, c)?;
        Ok(self.charset.decode(ctc::greedy_decode(&m, logits.valid).as_slice()))
    }
}

/// Training-time masking ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub mask_ratio: f64,
    pub max_span: usize,
    pub attn_mask_ratio: f64,
}

impl OcrModel<f32> {
    pub fn to_checkpoint(&self, iteration: u64, optimizer: Option<OptimizerState>, extra_meta: &[(String, String)]) -> Checkpoint {
        let c = &self.config;
        let mut meta: Vec<(String, String)> = [
            ("input_height", c.input_height.to_string()),
            ("input_width", c.input_width.to_string()),
            ("projection", c.projection.to_string()),
            ("token_dim", c.token_dim.to_string()),
            ("blocks", c.blocks.to_string()),
            ("heads", c.heads.to_string()),
            ("ff_mult", c.ff_mult.to_string()),
            ("extractor", format_extractor(&c.extractor)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        meta.extend(extra_meta.iter().cloned());
        Checkpoint {
            magic: *OCR_MAGIC,
            meta,
            iteration,
            charset: self.charset.to_strings(),
            params: self.params.clone(),
            optimizer,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, OcrError> {
        if &ck.magic != OCR_MAGIC {
            return Err(OcrError::Checkpoint("not an OCR checkpoint".into()));
        }
        let num = |k: &str| ck.meta_parse::<usize>(k).map_err(|e| OcrError::Checkpoint(e.to_string()));
        let extractor = parse_extractor(ck.meta_value("extractor").unwrap_or_default()).map_err(OcrError::Checkpoint)?;
        let config = OcrConfig {
            input_height: num("input_height")?,
            input_width: num("input_width")?,
            projection: num("projection")?,
            token_dim: num("token_dim")?,
            blocks: num("blocks")?,
            heads: num("heads")?,
            ff_mult: num("ff_mult")?,
            extractor,
        };
        let charset = Charset::from_strings(&ck.charset)?;
        Self::from_parts(config, charset, ck.params.clone())
    }
}

/// Fixed sinusoidal position table: `(t, 2i) = sin(t / 10000^(2i/D))`,
/// `(t, 2i+1) = cos(t / 10000^(2i/D))`.
pub fn sinusoidal_positions<R: Real>(t: usize, d: usize) -> Result<Tensor<R>, OcrError> {
    if d % 2 != 0 {
        return Err(OcrError::OddDimension(d));
    }
    let mut out = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out.data_mut()[pos * d + 2 * i] = R::of(angle.sin());
            out.data_mut()[pos * d + 2 * i + 1] = R::of(angle.cos());
        }
    }
    Ok(out)
}

/// Replaces the rows flagged in `mask` with `mask_token`.
pub fn apply_mask<R: Real>(tokens: &Tensor<R>, mask: &SpanMask, mask_token: &Tensor<R>) -> Result<Tensor<R>, OcrError> {
    let (t, d) = tokens.dims2();
    if mask.masked.len() != t || mask_token.len() != d {
        return Err(OcrError::Shape(format!(
            "mask of {} positions and token of width {} for a {t}x{d} sequence",
            mask.masked.len(),
            mask_token.len()
        )));
    }
    let mut out = tokens.clone();
    for (r, &m) in mask.masked.iter().enumerate() {
        if m {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(mask_token.data());
        }
    }
    Ok(out)
}

/// Row-wise log-softmax, exposed for callers holding raw scores.
pub fn log_softmax<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    log_softmax_rows(x)
}
