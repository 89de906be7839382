//! U-Net predictor with a dilated bottleneck and a spatial self-attention
//! unit, mapping a raster to a predicted earliest occupancy map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::occupancy::EarliestOccupancyMap;
use crate::raster::{Channel, RasterImage};
use crate::tensor::{Graph, NormStats, ParamStore, Real, Shape, Var};

const NORM_EPS: f64 = 1e-5;

/// Final activation mapping logits to `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputHead {
    /// `T·σ(z)`, never reaching 0 or `T`.
    Sigmoid,
    /// `T·((1 + 2m)·σ(z) − m)`, clamped to `[0, T]` at inference so that
    /// exact 0 and `T` are reachable.
    Saturating { margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of encoder stages, each halving the resolution.
    pub depth: usize,
    pub dilation_rates: Vec<usize>,
    pub attention_enabled: bool,
    /// The horizon `T`.
    pub output_scale: f64,
    pub normalization: bool,
    pub head: OutputHead,
    /// Prediction the head bias is initialized to produce.
    pub initial_output: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: Channel::COUNT,
            base_channels: 8,
            depth: 2,
            dilation_rates: vec![2, 4, 8],
            attention_enabled: true,
            output_scale: 30.0,
            normalization: true,
            head: OutputHead::Saturating { margin: 0.05 },
            initial_output: 0.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be a nonempty list of positive integers".into()));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::Config("output scale must be positive".into()));
        }
        if !(0.0..=self.output_scale).contains(&self.initial_output) {
            return Err(Error::Config("initial output must lie in [0, output scale]".into()));
        }
        if let OutputHead::Saturating { margin } = self.head {
            if !(margin >= 0.0 && margin.is_finite()) {
                return Err(Error::Config("head margin must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Channels at encoder stage `i`; stage `depth` is the bottleneck.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Spatial sizes must be divisible by this.
    /// Head bias whose prediction is `initial_output`, kept off the
    /// sigmoid's flat tails.
    pub fn head_bias(&self) -> f64 {
        let f = self.initial_output / self.output_scale;
        let s = match self.head {
            OutputHead::Sigmoid => f,
            OutputHead::Saturating { margin } => (f + margin) / (1.0 + 2.0 * margin),
        };
        let s = s.clamp(1e-3, 1.0 - 1e-3);
        (s / (1.0 - s)).ln()
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by 2^depth = {m} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Every parameter tensor `(name, shape)` in construction order.
    pub fn parameter_layout(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Shape)>, name: String, cin: usize, cout: usize, k: usize, normed: bool| {
            out.push((format!("{name}.weight"), [cout, cin, k, k]));
            if normed && self.normalization {
                out.push((format!("{name}.norm.gamma"), [1, cout, 1, 1]));
                out.push((format!("{name}.norm.beta"), [1, cout, 1, 1]));
            } else {
                out.push((format!("{name}.bias"), [1, cout, 1, 1]));
            }
        };
        let mut cin = self.in_channels;
        for i in 0..self.depth {
            let c = self.stage_channels(i);
            conv(&mut out, format!("enc{i}.conv0"), cin, c, 3, true);
            conv(&mut out, format!("enc{i}.conv1"), c, c, 3, true);
            cin = c;
        }
        let cb = self.stage_channels(self.depth);
        for (j, _) in self.dilation_rates.iter().enumerate() {
            conv(&mut out, format!("bottleneck.conv{j}"), cin, cb, 3, true);
            cin = cb;
        }
        if self.attention_enabled {
            conv(&mut out, "attention.key".into(), cb, cb, 3, false);
            conv(&mut out, "attention.query".into(), cb, cb, 3, false);
        }
        for i in (0..self.depth).rev() {
            let c = self.stage_channels(i);
            conv(&mut out, format!("dec{i}.up"), self.stage_channels(i + 1), c, 1, false);
            conv(&mut out, format!("dec{i}.conv0"), 2 * c, c, 3, true);
            conv(&mut out, format!("dec{i}.conv1"), c, c, 3, true);
        }
        conv(&mut out, "head".into(), self.stage_channels(0), 1, 1, false);
        out
    }

    /// Names of the normalization layers, each owning running statistics.
    pub fn norm_layers(&self) -> Vec<(String, usize)> {
        if !self.normalization {
            return Vec::new();
        }
        self.parameter_layout()
            .into_iter()
            .filter_map(|(name, shape)| name.strip_suffix(".norm.gamma").map(|n| (n.to_string(), shape[1])))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.parameter_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Intermediate tensors of the attention unit.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTensors {
    pub key: Var,
    pub query: Var,
    /// `[n, 1, h, w]` spatial weights summing to one per sample.
    pub weights: Var,
    pub out: Var,
}

/// `F' = W ⊙ F + F` with `W = softmax_hw(Σ_c K·Q)`, `K` and `Q` single 3×3
/// convolutions of `F`.
pub fn attention_unit<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    key: (Var, Var),
    query: (Var, Var),
) -> Result<AttentionTensors> {
    let k = g.conv2d(features, key.0, Some(key.1), 1, 1, 1)?;
    let q = g.conv2d(features, query.0, Some(query.1), 1, 1, 1)?;
    if g.shape(k) != g.shape(features) || g.shape(q) != g.shape(features) {
        return Err(Error::Shape(format!(
            "attention branches {:?}/{:?} must match features {:?}",
            g.shape(k),
            g.shape(q),
            g.shape(features)
        )));
    }
    let kq = g.mul(k, q)?;
    let scores = g.channel_sum(kq);
    let weights = g.spatial_softmax(scores);
    let weighted = g.broadcast_mul(weights, features)?;
    let out = g.add(weighted, features)?;
    Ok(AttentionTensors { key: k, query: q, weights, out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked.
    Train,
    /// Running statistics, no gradients.
    Eval,
}

/// Result of [`Network::forward`].
pub struct Forward<T> {
    /// `[n, 1, h, w]` prediction.
    pub output: Var,
    /// One graph leaf per parameter, in store order.
    pub param_vars: Vec<Var>,
    pub attention: Option<AttentionTensors>,
    /// Per normalization layer: name, batch mean, batch variance.
    pub batch_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    /// `<layer>.running_mean` and `<layer>.running_var` per norm layer.
    pub buffers: ParamStore<T>,
}

impl<T: Real> Network<T> {
    /// He-normal weights, zero biases, unit norm scales.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_layout() {
            let n = shape.iter().product::<usize>();
            let values = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            } else if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else if name == "head.bias" {
                vec![T::lit(config.head_bias()); n]
            } else {
                vec![T::zero(); n]
            };
            params.insert(name, shape, values)?;
        }
        let mut buffers = ParamStore::new();
        for (layer, c) in config.norm_layers() {
            buffers.insert(format!("{layer}.running_mean"), [1, c, 1, 1], vec![T::zero(); c])?;
            buffers.insert(format!("{layer}.running_var"), [1, c, 1, 1], vec![T::one(); c])?;
        }
        Ok(Self { config, params, buffers })
    }

    /// Rebuilds a network from stored tensors, checking them against the
    /// layout implied by `config`.
    pub fn from_parts(config: NetConfig, params: ParamStore<T>, buffers: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!("{} parameters stored, config expects {}", params.len(), layout.len())));
        }
        for (i, (name, shape)) in layout.iter().enumerate() {
            let p = params.at(i);
            if &p.name != name || &p.shape != shape {
                return Err(Error::Shape(format!("parameter {i}: stored {} {:?}, expected {name} {shape:?}", p.name, p.shape)));
            }
        }
        for (layer, c) in config.norm_layers() {
            for suffix in ["running_mean", "running_var"] {
                let name = format!("{layer}.{suffix}");
                match buffers.get(&name) {
                    Some(b) if b.value.len() == c => {}
                    _ => return Err(Error::Shape(format!("missing or malformed buffer {name}"))),
                }
            }
        }
        Ok(Self { config, params, buffers })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Builds the forward pass for an `[n, in_channels, h, w]` input.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<Forward<T>> {
        let cfg = &self.config;
        let [_, c, h, w] = g.shape(input);
        if c != cfg.in_channels {
            return Err(Error::Shape(format!("input has {c} channels, network expects {}", cfg.in_channels)));
        }
        cfg.check_input(h, w)?;
        let train = mode == Mode::Train;
        let mut param_vars = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            param_vars.push(g.leaf(p.value.clone(), p.shape, train)?);
        }
        let mut ctx = Ctx { net: self, g, vars: &param_vars, train, batch_stats: Vec::new() };

        let mut x = input;
        let mut skips = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            x = ctx.conv_block(&format!("enc{i}.conv0"), x, 1)?;
            x = ctx.conv_block(&format!("enc{i}.conv1"), x, 1)?;
            skips.push(x);
            x = ctx.g.max_pool2(x)?;
        }
        for (j, &d) in cfg.dilation_rates.iter().enumerate() {
            x = ctx.conv_block(&format!("bottleneck.conv{j}"), x, d)?;
        }
        let mut attention = None;
        if cfg.attention_enabled {
            let key = (ctx.var("attention.key.weight"), ctx.var("attention.key.bias"));
            let query = (ctx.var("attention.query.weight"), ctx.var("attention.query.bias"));
            let a = attention_unit(ctx.g, x, key, query)?;
            x = a.out;
            attention = Some(a);
        }
        for i in (0..cfg.depth).rev() {
            // a 1×1 convolution commutes with nearest upsampling
            let (wt, b) = (ctx.var(&format!("dec{i}.up.weight")), ctx.var(&format!("dec{i}.up.bias")));
            x = ctx.g.conv2d(x, wt, Some(b), 1, 1, 0)?;
            x = ctx.g.upsample_nearest2(x);
            x = ctx.g.concat_channels(x, skips[i])?;
            x = ctx.conv_block(&format!("dec{i}.conv0"), x, 1)?;
            x = ctx.conv_block(&format!("dec{i}.conv1"), x, 1)?;
        }
        let (wt, b) = (ctx.var("head.weight"), ctx.var("head.bias"));
        let z = ctx.g.conv2d(x, wt, Some(b), 1, 1, 0)?;
        let s = ctx.g.sigmoid(z);
        let scale = T::lit(cfg.output_scale);
        let output = match cfg.head {
            OutputHead::Sigmoid => ctx.g.scale(s, scale),
            OutputHead::Saturating { margin } => {
                let a = ctx.g.scale(s, T::lit(1.0 + 2.0 * margin));
                let a = ctx.g.add_scalar(a, T::lit(-margin));
                let a = if train { a } else { ctx.g.clamp(a, T::zero(), T::one()) };
                ctx.g.scale(a, scale)
            }
        };
        let batch_stats = ctx.batch_stats;
        Ok(Forward { output, param_vars, attention, batch_stats })
    }

    /// Exponential moving average of the batch statistics into the running
    /// buffers: `r ← (1 − momentum)·r + momentum·batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<T>, Vec<T>)], momentum: f64) -> Result<()> {
        let mo = T::lit(momentum);
        for (layer, mean, var) in stats {
            for (suffix, values) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("{layer}.{suffix}");
                let buf = self.buffers.get_mut(&name).ok_or_else(|| Error::Shape(format!("no buffer {name}")))?;
                if buf.value.len() != values.len() {
                    return Err(Error::Shape(format!("{name}: {} statistics for {} channels", values.len(), buf.value.len())));
                }
                for (r, &b) in buf.value.iter_mut().zip(values) {
                    *r = (T::one() - mo) * *r + mo * b;
                }
            }
        }
        Ok(())
    }

    /// Inference on a batch of rasters.
    pub fn predict(&self, rasters: &[&RasterImage]) -> Result<Vec<EarliestOccupancyMap>> {
        let (values, shape) = batch_rasters(rasters)?;
        let mut g = Graph::new();
        let input = g.constant(values, shape)?;
        let fwd = self.forward(&mut g, input, Mode::Eval)?;
        let [n, _, h, w] = g.shape(fwd.output);
        let out = g.value(fwd.output);
        let horizon = self.config.output_scale.round() as usize;
        (0..n)
            .map(|i| {
                let data = out[i * h * w..(i + 1) * h * w].iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
                Ok(EarliestOccupancyMap::new(Grid::from_vec(h, w, data)?, horizon))
            })
            .collect()
    }
}

/// Stacks rasters into an `[n, channels, h, w]` tensor.
pub fn batch_rasters<T: Real>(rasters: &[&RasterImage]) -> Result<(Vec<T>, Shape)> {
    let first = rasters.first().ok_or(Error::Empty("raster batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut values = Vec::with_capacity(rasters.len() * c * h * w);
    for r in rasters {
        if (r.channels(), r.height(), r.width()) != (c, h, w) {
            return Err(Error::Shape(format!("raster {}x{} in a batch of {h}x{w}", r.height(), r.width())));
        }
        values.extend(r.as_slice().iter().map(|&v| T::lit(v as f64)));
    }
    Ok((values, [rasters.len(), c, h, w]))
}

struct Ctx<'a, 'g, T: Real> {
    net: &'a Network<T>,
    g: &'g mut Graph<T>,
    vars: &'a [Var],
    train: bool,
    batch_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Real> Ctx<'_, '_, T> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.net.params.position(name).unwrap_or_else(|| panic!("layout has no `{name}`"))]
    }

    /// 3×3 "same" convolution, normalization (or bias), ReLU.
    fn conv_block(&mut self, name: &str, x: Var, dilation: usize) -> Result<Var> {
        let wt = self.var(&format!("{name}.weight"));
        if !self.net.config.normalization {
            let b = self.var(&format!("{name}.bias"));
            let y = self.g.conv2d(x, wt, Some(b), 1, dilation, dilation)?;
            return Ok(self.g.relu(y));
        }
        let y = self.g.conv2d(x, wt, None, 1, dilation, dilation)?;
        let (gamma, beta) = (self.var(&format!("{name}.norm.gamma")), self.var(&format!("{name}.norm.beta")));
        let bn = if self.train {
            let out = self.g.batch_norm(y, gamma, beta, NormStats::Batch, T::lit(NORM_EPS))?;
            if let Some((mean, var)) = out.batch_stats {
                self.batch_stats.push((name.to_string(), mean, var));
            }
            out.out
        } else {
            let buffers = &self.net.buffers;
            let mean = &buffers.get(&format!("{name}.running_mean")).expect("buffer").value;
            let var = &buffers.get(&format!("{name}.running_var")).expect("buffer").value;
            self.g.batch_norm(y, gamma, beta, NormStats::Running { mean, var }, T::lit(NORM_EPS))?.out
        };
        Ok(self.g.relu(bn))
    }
}
