//! Conditional noise predictor: an encoder-decoder with skip connections,
//! group normalization, a sinusoidal time embedding and one self-attention
//! stage at the lowest resolution. The noisy state and the condition image
//! are concatenated along the channel axis at the input.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::EpsPredictor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::seed;
use crate::tensor::ImageTensor;

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub channel_multipliers: Vec<usize>,
    #[serde(default = "default_true")]
    pub attention: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 256,
            base_width: 32,
            depth: 3,
            time_embed_dim: 64,
            channel_multipliers: vec![1, 2, 2],
            attention: true,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &'static str, reason: String| Err(Error::param(field, reason));
        if self.image_channels == 0 {
            return err("image_channels", "must be positive".into());
        }
        if self.base_width == 0 {
            return err("base_width", "must be positive".into());
        }
        if self.depth == 0 {
            return err("depth", "must be at least 1".into());
        }
        if self.channel_multipliers.len() != self.depth {
            return err(
                "channel_multipliers",
                format!(
                    "{} entries for depth {}",
                    self.channel_multipliers.len(),
                    self.depth
                ),
            );
        }
        if self.channel_multipliers.contains(&0) {
            return err("channel_multipliers", "entries must be positive".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return err(
                "time_embed_dim",
                format!("{} is not a positive even number", self.time_embed_dim),
            );
        }
        let div = 1usize << (self.depth - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return err(
                "image_size",
                format!("{} not divisible by 2^(depth-1) = {div}", self.image_size),
            );
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Interleaved `[sin(t f0), cos(t f0), sin(t f1), ...]` with
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::param(
            "dim",
            format!("{dim} is not a positive even number"),
        ));
    }
    if t == 0 {
        return Err(Error::Index { t, max: usize::MAX });
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Largest of 8, 4, 2, 1 dividing `ch`.
fn norm_groups(ch: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| ch.is_multiple_of(*g))
        .unwrap()
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Option<Conv>,
    res: ResBlock,
}

#[derive(Debug, Clone)]
struct Layout {
    temb1: Dense,
    temb2: Dense,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

/// Named parameter arrays, registered in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> usize {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut seed::Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let vals = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params.push(name, shape, vals)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin, k, k], bound);
        let b = self.uniform(format!("{name}.bias"), vec![cout], bound);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Dense {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin], bound);
        let b = self.uniform(format!("{name}.bias"), vec![cout], bound);
        Dense { w, b }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        let gamma = self
            .params
            .push(format!("{name}.gamma"), vec![ch], vec![1.0; ch]);
        let beta = self
            .params
            .push(format!("{name}.beta"), vec![ch], vec![0.0; ch]);
        Norm {
            gamma,
            beta,
            groups: norm_groups(ch),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
            temb: self.dense(&format!("{name}.temb"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn attention(&mut self, name: &str, ch: usize) -> Attention {
        Attention {
            norm: self.norm(&format!("{name}.norm"), ch),
            q: self.dense(&format!("{name}.q"), ch, ch),
            k: self.dense(&format!("{name}.k"), ch, ch),
            v: self.dense(&format!("{name}.v"), ch, ch),
            out: self.dense(&format!("{name}.out"), ch, ch),
        }
    }
}

fn build_layout(cfg: &DenoiserConfig, rng: &mut seed::Rng) -> (Layout, ParamSet) {
    let mut b = Builder {
        params: ParamSet::new(),
        rng,
    };
    let widths = cfg.widths();
    let e = cfg.time_embed_dim;
    let temb1 = b.dense("temb.fc1", e, e);
    let temb2 = b.dense("temb.fc2", e, e);
    let conv_in = b.conv("conv_in", 2 * cfg.image_channels, widths[0], 3, 1);
    let mut down = Vec::with_capacity(cfg.depth);
    let mut ch = widths[0];
    for (l, &w) in widths.iter().enumerate() {
        let res = b.res(&format!("down{l}.res"), ch, w, e);
        ch = w;
        let down_conv =
            (l + 1 < cfg.depth).then(|| b.conv(&format!("down{l}.downsample"), w, w, 3, 2));
        down.push(DownLevel {
            res,
            down: down_conv,
        });
    }
    let mid1 = b.res("mid.res1", ch, ch, e);
    let attn = cfg.attention.then(|| b.attention("mid.attn", ch));
    let mid2 = b.res("mid.res2", ch, ch, e);
    let mut up = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let up_conv = (l + 1 < cfg.depth).then(|| b.conv(&format!("up{l}.upsample"), ch, ch, 3, 1));
        let res = b.res(&format!("up{l}.res"), ch + widths[l], widths[l], e);
        ch = widths[l];
        up.push(UpLevel { up: up_conv, res });
    }
    let norm_out = b.norm("norm_out", ch);
    let conv_out = b.conv("conv_out", ch, cfg.image_channels, 3, 1);
    let layout = Layout {
        temb1,
        temb2,
        conv_in,
        down,
        mid1,
        attn,
        mid2,
        up,
        norm_out,
        conv_out,
    };
    (layout, b.params)
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: Layout,
    params: ParamSet,
    pub mode: Mode,
}

/// Parameters of one denoiser placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Deterministic initialization from `config.seed`.
pub fn init_denoiser(config: &DenoiserConfig) -> Result<Denoiser> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let (layout, params) = build_layout(config, &mut rng);
    Ok(Denoiser {
        config: config.clone(),
        layout,
        params,
        mode: Mode::Eval,
    })
}

impl Denoiser {
    /// Rebuilds a denoiser around stored parameter values. Names and shapes
    /// must match the layout `config` produces.
    pub fn from_parts(
        config: &DenoiserConfig,
        named: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut d = init_denoiser(config)?;
        if named.len() != d.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} arrays stored, layout has {}",
                named.len(),
                d.params.len()
            )));
        }
        for (i, (name, shape, values)) in named.into_iter().enumerate() {
            if name != d.params.names[i]
                || shape != d.params.shapes[i]
                || values.len() != d.params.values[i].len()
            {
                return Err(Error::Checkpoint(format!(
                    "array {i} `{name}` {shape:?} does not match `{}` {:?}",
                    d.params.names[i], d.params.shapes[i]
                )));
            }
            d.params.values[i] = values;
        }
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn has_resampling_layers(&self) -> bool {
        self.layout.down.iter().any(|l| l.down.is_some())
            || self.layout.up.iter().any(|l| l.up.is_some())
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for ((name, shape), vals) in self
            .params
            .names
            .iter()
            .zip(&self.params.shapes)
            .zip(&self.params.values)
        {
            h.update(name.as_bytes());
            for d in shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .values
            .iter()
            .zip(&self.params.shapes)
            .map(|(v, s)| {
                if trainable {
                    g.param(v.clone(), s)
                } else {
                    g.constant(v.clone(), s)
                }
            })
            .collect();
        BoundParams(vars)
    }

    pub fn check_inputs(&self, x_t: &ImageTensor, c0: &ImageTensor) -> Result<()> {
        x_t.ensure_same_shape(c0, "predict_eps")?;
        let (c, h, w) = x_t.shape();
        let s = self.config.image_size;
        if c != self.config.image_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "input ({c}, {h}, {w}) vs configured ({}, {s}, {s})",
                self.config.image_channels
            )));
        }
        Ok(())
    }

    /// Graph-level forward pass; `x_t` and `c0` are `(C, H, W)` nodes.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x_t: Var,
        c0: Var,
        t: usize,
    ) -> Result<Var> {
        let l = &self.layout;
        let p = &p.0;
        let emb = time_embedding(t, self.config.time_embed_dim)?;
        let emb = g.constant(emb, &[self.config.time_embed_dim]);
        let temb = dense(g, p, &l.temb1, emb);
        let temb = g.silu(temb);
        let temb = dense(g, p, &l.temb2, temb);
        let temb = g.silu(temb);

        let input = g.concat_channels(x_t, c0);
        let mut h = conv(g, p, &l.conv_in, input);
        let mut skips = Vec::with_capacity(l.down.len());
        for level in &l.down {
            h = res_block(g, p, &level.res, h, temb);
            skips.push(h);
            if let Some(d) = &level.down {
                h = conv(g, p, d, h);
            }
        }
        h = res_block(g, p, &l.mid1, h, temb);
        if let Some(a) = &l.attn {
            h = attention(g, p, a, h);
        }
        h = res_block(g, p, &l.mid2, h, temb);
        for level in &l.up {
            if let Some(u) = &level.up {
                h = g.upsample2(h);
                h = conv(g, p, u, h);
            }
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip);
            h = res_block(g, p, &level.res, h, temb);
        }
        h = norm(g, p, &l.norm_out, h);
        h = g.silu(h);
        Ok(conv(g, p, &l.conv_out, h))
    }

    pub fn predict_eps(
        &self,
        x_t: &ImageTensor,
        c0: &ImageTensor,
        t: usize,
    ) -> Result<ImageTensor> {
        self.check_inputs(x_t, c0)?;
        let (c, h, w) = x_t.shape();
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x_t.as_slice().to_vec(), &[c, h, w]);
        let cv = g.constant(c0.as_slice().to_vec(), &[c, h, w]);
        let out = self.forward(&mut g, &p, xv, cv, t)?;
        ImageTensor::from_vec(c, h, w, g.value(out).to_vec())
    }
}

impl EpsPredictor for Denoiser {
    fn predict_eps(&self, x_t: &ImageTensor, c0: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Denoiser::predict_eps(self, x_t, c0, t)
    }
}

pub fn predict_eps(
    denoiser: &Denoiser,
    x_t: &ImageTensor,
    c0: &ImageTensor,
    t: usize,
) -> Result<ImageTensor> {
    denoiser.predict_eps(x_t, c0, t)
}

fn conv(g: &mut Graph, p: &[Var], c: &Conv, x: Var) -> Var {
    g.conv2d(x, p[c.w], Some(p[c.b]), c.stride, c.pad)
}

fn dense(g: &mut Graph, p: &[Var], d: &Dense, x: Var) -> Var {
    g.linear(x, p[d.w], p[d.b])
}

fn norm(g: &mut Graph, p: &[Var], n: &Norm, x: Var) -> Var {
    g.group_norm(x, p[n.gamma], p[n.beta], n.groups, GN_EPS)
}

fn res_block(g: &mut Graph, p: &[Var], r: &ResBlock, x: Var, temb: Var) -> Var {
    let h = norm(g, p, &r.norm1, x);
    let h = g.silu(h);
    let h = conv(g, p, &r.conv1, h);
    let shift = dense(g, p, &r.temb, temb);
    let h = g.add_channel(h, shift);
    let h = norm(g, p, &r.norm2, h);
    let h = g.silu(h);
    let h = conv(g, p, &r.conv2, h);
    let skip = match &r.skip {
        Some(s) => conv(g, p, s, x),
        None => x,
    };
    g.add(h, skip)
}

fn attention(g: &mut Graph, p: &[Var], a: &Attention, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let h = norm(g, p, &a.norm, x);
    let h = g.reshape(h, &[c, n]);
    let project = |g: &mut Graph, d: &Dense, h: Var| {
        let y = g.matmul(p[d.w], h);
        g.add_channel(y, p[d.b])
    };
    let q = project(g, &a.q, h);
    let k = project(g, &a.k, h);
    let v = project(g, &a.v, h);
    let qt = g.transpose(q);
    let scores = g.matmul(qt, k);
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let wt = g.transpose(weights);
    let mixed = g.matmul(v, wt);
    let out = project(g, &a.out, mixed);
    let out = g.reshape(out, &shape);
    g.add(x, out)
}
