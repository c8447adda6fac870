//! Denoiser U-Net with interchangeable product and convolution backbones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cosine_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::flops::{
    conv_flops, product_flops, FlopRow, LayerKind, ATTENTION_SOFTMAX_FLOPS, AXPBY_FLOPS,
    NORM_FLOPS, SILU_FLOPS,
};
use crate::fourier::Field;
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::tape::{Tape, Tensor, Var};

/// Feature mixer used inside residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Full-product layers `x * G(x)` with a pointwise bottleneck `G`.
    Product,
    /// 3x3 convolutions.
    Conv,
}

impl Backbone {
    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Product => "product",
            Backbone::Conv => "conv",
        }
    }
}

/// How the network head maps to the predicted noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The head output is the noise estimate.
    Epsilon,
    /// The head predicts a correction `r` to the condition image; the noise
    /// estimate is `(x - sqrt(ab_d) (c + r)) / sqrt(1 - ab_d)`.
    ConditionResidual,
}

/// Where attention blocks sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPlacement {
    pub last_down: bool,
    pub middle: bool,
    pub first_up: bool,
}

/// Architecture of the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channels of the noisy input and of the output.
    pub image_channels: usize,
    /// Channels of the conditioning image.
    pub condition_channels: usize,
    /// Width of the first level; must be even (it sizes the sinusoid).
    pub base_channels: usize,
    /// Width multiplier per level; the length is the number of down blocks.
    pub channel_mults: Vec<usize>,
    /// `r_C`: channel compression inside product layers.
    pub bottleneck_ratio: usize,
    pub attention: AttentionPlacement,
    pub backbone: Backbone,
    /// Width of the step embedding after its two-layer map.
    pub embed_dim: usize,
    /// Group-norm groups, reduced to `gcd(groups, C)` for narrow layers.
    pub norm_groups: usize,
    pub prediction: Prediction,
    /// Number of diffusion steps `D`.
    pub steps: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl DenoiserConfig {
    /// 2 down / middle / 2 up, base 8, attention in the middle only.
    pub fn toy() -> Self {
        Self {
            image_channels: 3,
            condition_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2],
            bottleneck_ratio: 4,
            attention: AttentionPlacement {
                last_down: false,
                middle: true,
                first_up: false,
            },
            backbone: Backbone::Product,
            embed_dim: 32,
            norm_groups: 8,
            prediction: Prediction::ConditionResidual,
            steps: 120,
        }
    }

    /// Three levels at 64/128/256 channels with attention in the last down
    /// block, the middle and the first up block.
    pub fn paper() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            attention: AttentionPlacement {
                last_down: true,
                middle: true,
                first_up: true,
            },
            embed_dim: 256,
            steps: 1080,
            ..Self::toy()
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_mults.len()
    }

    /// Widths of the down blocks.
    pub fn down_widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    /// Widths of the up blocks, deepest first.
    pub fn up_widths(&self) -> Vec<usize> {
        let ch = self.down_widths();
        let depth = ch.len();
        (0..depth)
            .map(|j| ch[(depth as isize - 2 - j as isize).max(0) as usize])
            .collect()
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        gcd(self.norm_groups, channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if ![1, 3].contains(&self.image_channels) || ![1, 3].contains(&self.condition_channels) {
            return bad("image and condition channels must be 1 or 3".into());
        }
        if self.prediction == Prediction::ConditionResidual
            && self.image_channels != self.condition_channels
        {
            return bad("condition_residual needs matching image and condition channels".into());
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be even and >= 2, got {}", self.base_channels));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive".into());
        }
        if self.bottleneck_ratio < 1 {
            return bad("bottleneck_ratio must be >= 1".into());
        }
        if self.backbone == Backbone::Product {
            for c in self.down_widths().into_iter().chain(self.up_widths()) {
                if c % self.bottleneck_ratio != 0 {
                    return bad(format!(
                        "bottleneck ratio {} does not divide width {c}",
                        self.bottleneck_ratio
                    ));
                }
            }
        }
        if self.embed_dim == 0 || self.norm_groups == 0 || self.steps == 0 {
            return bad("embed_dim, norm_groups and steps must be positive".into());
        }
        Ok(())
    }

    /// Inputs must halve cleanly at every level.
    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.depth();
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} must be a positive multiple of {f}"
            )));
        }
        Ok(())
    }
}

pub fn pointwise_params(c_in: usize, c_out: usize) -> usize {
    c_in * c_out + c_out
}

pub fn conv3x3_params(c_in: usize, c_out: usize) -> usize {
    9 * c_in * c_out + c_out
}

pub fn product_layer_params(c: usize, ratio: usize) -> usize {
    let mid = c / ratio;
    c * mid + mid + mid * c + c
}

/// Scalar parameter count, from layer shapes alone.
pub fn count_params(config: &DenoiserConfig) -> Result<usize> {
    config.validate()?;
    let e = config.embed_dim;
    let mixer = |c: usize| match config.backbone {
        Backbone::Product => product_layer_params(c, config.bottleneck_ratio),
        Backbone::Conv => conv3x3_params(c, c),
    };
    let norm = |c: usize| 2 * c;
    let res = |c: usize| norm(c) + 2 * mixer(c) + pointwise_params(e, c);
    let attn = |c: usize| {
        2 * norm(c) + 8 * pointwise_params(c, c)
            + pointwise_params(config.condition_channels, c)
            + pointwise_params(c, c)
    };
    let ch = config.down_widths();
    let up = config.up_widths();
    let depth = ch.len();
    let mut n = pointwise_params(config.base_channels, e) + pointwise_params(e, e);
    n += conv3x3_params(config.image_channels + config.condition_channels, ch[0]);
    for i in 0..depth {
        let next = if i + 1 < depth { ch[i + 1] } else { ch[i] };
        n += res(ch[i]) + pointwise_params(ch[i], next);
        if i == depth - 1 && config.attention.last_down {
            n += attn(ch[i]);
        }
    }
    n += res(ch[depth - 1]);
    if config.attention.middle {
        n += attn(ch[depth - 1]);
    }
    let mut prev = ch[depth - 1];
    for (j, &u) in up.iter().enumerate() {
        n += pointwise_params(prev, u) + pointwise_params(u + ch[depth - 1 - j], u) + res(u);
        if j == 0 && config.attention.first_up {
            n += attn(u);
        }
        prev = u;
    }
    n += norm(prev) + conv3x3_params(prev, config.image_channels);
    Ok(n)
}

/// Registers parameters, or only counts them when no store is attached.
struct Builder<'a> {
    store: Option<&'a mut ParamStore>,
    rng: ChaCha8Rng,
    next: usize,
    scalars: usize,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.scalars += shape.iter().product::<usize>();
        let id = match &mut self.store {
            Some(store) => store.add(name, shape, init, &mut self.rng),
            None => ParamId(self.next),
        };
        self.next += 1;
        id
    }

    fn pointwise(&mut self, name: &str, c_in: usize, c_out: usize) -> Pointwise {
        Pointwise {
            name: name.to_string(),
            w: self.add(format!("{name}.w"), &[c_out, c_in], Init::FanIn(c_in)),
            b: self.add(format!("{name}.b"), &[c_out], Init::FanIn(c_in)),
            c_in,
            c_out,
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, zero: bool) -> Conv {
        let (wi, bi) = if zero {
            (Init::Constant(0.0), Init::Constant(0.0))
        } else {
            (Init::FanIn(9 * c_in), Init::FanIn(9 * c_in))
        };
        Conv {
            name: name.to_string(),
            w: self.add(format!("{name}.w"), &[c_out, c_in, 3, 3], wi),
            b: self.add(format!("{name}.b"), &[c_out], bi),
            c_in,
            c_out,
        }
    }

    fn product(&mut self, name: &str, c: usize, ratio: usize) -> Product {
        let mid = c / ratio;
        Product {
            name: name.to_string(),
            w1: self.add(format!("{name}.w1"), &[mid, c], Init::FanIn(c)),
            b1: self.add(format!("{name}.b1"), &[mid], Init::FanIn(c)),
            w2: self.add(format!("{name}.w2"), &[c, mid], Init::FanIn(mid)),
            // Start near the identity modulation.
            b2: self.add(format!("{name}.b2"), &[c], Init::Constant(1.0)),
            c,
            mid,
        }
    }

    fn norm(&mut self, name: &str, c: usize, groups: usize) -> Norm {
        Norm {
            name: name.to_string(),
            gamma: self.add(format!("{name}.gamma"), &[c], Init::Constant(1.0)),
            beta: self.add(format!("{name}.beta"), &[c], Init::Constant(0.0)),
            c,
            groups,
        }
    }

    fn mixer(&mut self, name: &str, c: usize, cfg: &DenoiserConfig) -> Mixer {
        match cfg.backbone {
            Backbone::Product => Mixer::Product(self.product(name, c, cfg.bottleneck_ratio)),
            Backbone::Conv => Mixer::Conv(self.conv(name, c, c, false)),
        }
    }

    fn res(&mut self, name: &str, c: usize, cfg: &DenoiserConfig) -> ResBlock {
        ResBlock {
            name: name.to_string(),
            norm: self.norm(&format!("{name}.norm"), c, cfg.groups_for(c)),
            mix1: self.mixer(&format!("{name}.mix1"), c, cfg),
            emb: self.pointwise(&format!("{name}.emb"), cfg.embed_dim, c),
            mix2: self.mixer(&format!("{name}.mix2"), c, cfg),
        }
    }

    fn attn(&mut self, name: &str, c: usize, level: usize, cfg: &DenoiserConfig) -> AttnBlock {
        let g = cfg.groups_for(c);
        let p = |s: &str| format!("{name}.{s}");
        AttnBlock {
            name: name.to_string(),
            level,
            norm1: self.norm(&p("norm1"), c, g),
            q: self.pointwise(&p("q"), c, c),
            k: self.pointwise(&p("k"), c, c),
            v: self.pointwise(&p("v"), c, c),
            o: self.pointwise(&p("o"), c, c),
            ctx1: self.pointwise(&p("ctx1"), cfg.condition_channels, c),
            ctx2: self.pointwise(&p("ctx2"), c, c),
            norm2: self.norm(&p("norm2"), c, g),
            q2: self.pointwise(&p("q2"), c, c),
            k2: self.pointwise(&p("k2"), c, c),
            v2: self.pointwise(&p("v2"), c, c),
            o2: self.pointwise(&p("o2"), c, c),
        }
    }
}

#[derive(Clone, Debug)]
struct Pointwise {
    name: String,
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
}

impl Pointwise {
    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        t.set_scope(&self.name);
        let (w, b) = (t.param(self.w), t.param(self.b));
        t.pointwise(x, w, b)
    }

    fn rows(&self, h: usize, w: usize, out: &mut Vec<FlopRow>) {
        out.push(row(&self.name, LayerKind::Pointwise, self.c_in, self.c_out, h, w, {
            2 * (self.c_in * self.c_out * h * w) as u64
        }));
    }
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
}

impl Conv {
    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        t.set_scope(&self.name);
        let (w, b) = (t.param(self.w), t.param(self.b));
        t.conv3x3(x, w, b)
    }

    fn rows(&self, h: usize, w: usize, specific: bool, out: &mut Vec<FlopRow>) {
        let flops = conv_flops(self.c_in as u64, self.c_out as u64, h as u64, w as u64, 3);
        let mut r = row(&self.name, LayerKind::Conv, self.c_in, self.c_out, h, w, flops);
        r.backbone_specific = specific;
        out.push(r);
    }
}

#[derive(Clone, Debug)]
struct Product {
    name: String,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    c: usize,
    mid: usize,
}

impl Product {
    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        t.set_scope(&self.name);
        let (w1, b1, w2, b2) = (t.param(self.w1), t.param(self.b1), t.param(self.w2), t.param(self.b2));
        t.product(x, w1, b1, w2, b2)
    }

    fn rows(&self, h: usize, w: usize, out: &mut Vec<FlopRow>) -> Result<()> {
        let ratio = (self.c / self.mid) as u64;
        let flops = product_flops(self.c as u64, h as u64, w as u64, ratio)?;
        let mut r = row(&self.name, LayerKind::Product, self.c, self.c, h, w, flops);
        r.backbone_specific = true;
        out.push(r);
        out.push(row(
            &self.name,
            LayerKind::Activation,
            self.mid,
            self.mid,
            h,
            w,
            (SILU_FLOPS * self.mid * h * w) as u64,
        ));
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    Product(Product),
    Conv(Conv),
}

impl Mixer {
    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        match self {
            Mixer::Product(p) => p.forward(t, x),
            Mixer::Conv(c) => c.forward(t, x),
        }
    }

    fn rows(&self, h: usize, w: usize, out: &mut Vec<FlopRow>) -> Result<()> {
        match self {
            Mixer::Product(p) => p.rows(h, w, out),
            Mixer::Conv(c) => {
                c.rows(h, w, true, out);
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Norm {
    name: String,
    gamma: ParamId,
    beta: ParamId,
    c: usize,
    groups: usize,
}

impl Norm {
    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        t.set_scope(&self.name);
        let (g, b) = (t.param(self.gamma), t.param(self.beta));
        t.group_norm(x, g, b, self.groups)
    }

    fn rows(&self, h: usize, w: usize, out: &mut Vec<FlopRow>) {
        let n = self.c * h * w;
        out.push(row(&self.name, LayerKind::Norm, self.c, self.c, h, w, (NORM_FLOPS * n) as u64));
    }
}

fn row(name: &str, kind: LayerKind, c_in: usize, c_out: usize, h: usize, w: usize, flops: u64) -> FlopRow {
    FlopRow {
        name: name.to_string(),
        kind,
        c_in,
        c_out,
        h,
        w,
        flops,
        backbone_specific: false,
    }
}

fn silu_scoped(t: &mut Tape, scope: String, x: Var) -> Var {
    t.set_scope(scope);
    t.silu(x)
}

/// `x + mix2(silu(mix1(norm(x)) + emb(e)))`.
#[derive(Clone, Debug)]
struct ResBlock {
    name: String,
    norm: Norm,
    mix1: Mixer,
    emb: Pointwise,
    mix2: Mixer,
}

impl ResBlock {
    fn forward(&self, t: &mut Tape, x: Var, emb: Var) -> Var {
        let h = self.norm.forward(t, x);
        let h = self.mix1.forward(t, h);
        let e = self.emb.forward(t, emb);
        t.set_scope(format!("{}.emb_add", self.name));
        let h = t.add_channel(h, e);
        let h = silu_scoped(t, format!("{}.act", self.name), h);
        let h = self.mix2.forward(t, h);
        t.set_scope(format!("{}.residual", self.name));
        t.add(x, h)
    }

    fn rows(&self, h: usize, w: usize, out: &mut Vec<FlopRow>) -> Result<()> {
        let c = self.norm.c;
        let n = (c * h * w) as u64;
        self.norm.rows(h, w, out);
        self.mix1.rows(h, w, out)?;
        self.emb.rows(1, 1, out);
        out.push(row(&format!("{}.emb_add", self.name), LayerKind::Elementwise, c, c, h, w, n));
        out.push(row(
            &format!("{}.act", self.name),
            LayerKind::Activation,
            c,
            c,
            h,
            w,
            SILU_FLOPS as u64 * n,
        ));
        self.mix2.rows(h, w, out)?;
        out.push(row(&format!("{}.residual", self.name), LayerKind::Elementwise, c, c, h, w, n));
        Ok(())
    }
}

/// Self-attention followed by cross-attention to an embedding of the
/// pooled condition image.
#[derive(Clone, Debug)]
struct AttnBlock {
    name: String,
    /// Number of 2x poolings between the input resolution and this block.
    level: usize,
    norm1: Norm,
    q: Pointwise,
    k: Pointwise,
    v: Pointwise,
    o: Pointwise,
    ctx1: Pointwise,
    ctx2: Pointwise,
    norm2: Norm,
    q2: Pointwise,
    k2: Pointwise,
    v2: Pointwise,
    o2: Pointwise,
}

impl AttnBlock {
    fn forward(&self, t: &mut Tape, x: Var, cond: Var) -> Var {
        let h = self.norm1.forward(t, x);
        let (q, k, v) = (self.q.forward(t, h), self.k.forward(t, h), self.v.forward(t, h));
        t.set_scope(format!("{}.self", self.name));
        let a = t.attention(q, k, v);
        let a = self.o.forward(t, a);
        t.set_scope(format!("{}.self_residual", self.name));
        let x = t.add(x, a);

        t.set_scope(format!("{}.pool", self.name));
        let mut ctx = cond;
        for _ in 0..self.level {
            ctx = t.avg_pool2(ctx);
        }
        let ctx = self.ctx1.forward(t, ctx);
        let ctx = silu_scoped(t, format!("{}.ctx_act", self.name), ctx);
        let ctx = self.ctx2.forward(t, ctx);

        let h = self.norm2.forward(t, x);
        let q = self.q2.forward(t, h);
        let (k, v) = (self.k2.forward(t, ctx), self.v2.forward(t, ctx));
        t.set_scope(format!("{}.cross", self.name));
        let a = t.attention(q, k, v);
        let a = self.o2.forward(t, a);
        t.set_scope(format!("{}.cross_residual", self.name));
        t.add(x, a)
    }

    fn rows(&self, h: usize, w: usize, full_h: usize, full_w: usize, out: &mut Vec<FlopRow>) {
        let c = self.norm1.c;
        let n = h * w;
        let attn = |name: String, m: usize| {
            row(&name, LayerKind::Attention, c, c, h, w, (4 * c * n * m + ATTENTION_SOFTMAX_FLOPS * n * m) as u64)
        };
        self.norm1.rows(h, w, out);
        for p in [&self.q, &self.k, &self.v] {
            p.rows(h, w, out);
        }
        out.push(attn(format!("{}.self", self.name), n));
        self.o.rows(h, w, out);
        out.push(row(&format!("{}.self_residual", self.name), LayerKind::Elementwise, c, c, h, w, (c * n) as u64));
        let cc = self.ctx1.c_in;
        let (mut ph, mut pw) = (full_h, full_w);
        let mut pool = 0u64;
        for _ in 0..self.level {
            pool += (cc * ph * pw) as u64;
            ph /= 2;
            pw /= 2;
        }
        if self.level > 0 {
            out.push(row(&format!("{}.pool", self.name), LayerKind::Elementwise, cc, cc, ph, pw, pool));
        }
        let m = ph * pw;
        self.ctx1.rows(ph, pw, out);
        out.push(row(
            &format!("{}.ctx_act", self.name),
            LayerKind::Activation,
            c,
            c,
            ph,
            pw,
            (SILU_FLOPS * c * m) as u64,
        ));
        self.ctx2.rows(ph, pw, out);
        self.norm2.rows(h, w, out);
        self.q2.rows(h, w, out);
        self.k2.rows(ph, pw, out);
        self.v2.rows(ph, pw, out);
        out.push(attn(format!("{}.cross", self.name), m));
        self.o2.rows(h, w, out);
        out.push(row(&format!("{}.cross_residual", self.name), LayerKind::Elementwise, c, c, h, w, (c * n) as u64));
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    res: ResBlock,
    attn: Option<AttnBlock>,
    pool_name: String,
    proj: Pointwise,
}

#[derive(Clone, Debug)]
struct UpBlock {
    upsample_name: String,
    proj: Pointwise,
    merge: Pointwise,
    res: ResBlock,
    attn: Option<AttnBlock>,
}

/// Layer graph of the denoiser. Holds parameter ids, not values.
#[derive(Clone, Debug)]
pub struct Unet {
    time1: Pointwise,
    time2: Pointwise,
    stem: Conv,
    downs: Vec<DownBlock>,
    mid: ResBlock,
    mid_attn: Option<AttnBlock>,
    ups: Vec<UpBlock>,
    head_norm: Norm,
    head: Conv,
}

impl Unet {
    fn build(cfg: &DenoiserConfig, b: &mut Builder) -> Result<Unet> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let ch = cfg.down_widths();
        let up = cfg.up_widths();
        let depth = ch.len();
        let time1 = b.pointwise("time.fc1", cfg.base_channels, e);
        let time2 = b.pointwise("time.fc2", e, e);
        let stem = b.conv("stem", cfg.image_channels + cfg.condition_channels, ch[0], false);
        let mut downs = Vec::with_capacity(depth);
        for i in 0..depth {
            let next = if i + 1 < depth { ch[i + 1] } else { ch[i] };
            let res = b.res(&format!("down{i}.res"), ch[i], cfg);
            let attn = (i == depth - 1 && cfg.attention.last_down)
                .then(|| b.attn(&format!("down{i}.attn"), ch[i], i, cfg));
            let proj = b.pointwise(&format!("down{i}.proj"), ch[i], next);
            downs.push(DownBlock {
                res,
                attn,
                pool_name: format!("down{i}.pool"),
                proj,
            });
        }
        let mid = b.res("mid.res", ch[depth - 1], cfg);
        let mid_attn = cfg
            .attention
            .middle
            .then(|| b.attn("mid.attn", ch[depth - 1], depth, cfg));
        let mut ups = Vec::with_capacity(depth);
        let mut prev = ch[depth - 1];
        for (j, &u) in up.iter().enumerate() {
            let skip = ch[depth - 1 - j];
            let proj = b.pointwise(&format!("up{j}.proj"), prev, u);
            let merge = b.pointwise(&format!("up{j}.merge"), u + skip, u);
            let res = b.res(&format!("up{j}.res"), u, cfg);
            let attn = (j == 0 && cfg.attention.first_up)
                .then(|| b.attn(&format!("up{j}.attn"), u, depth - 1 - j, cfg));
            ups.push(UpBlock {
                upsample_name: format!("up{j}.upsample"),
                proj,
                merge,
                res,
                attn,
            });
            prev = u;
        }
        let head_norm = b.norm("head.norm", prev, cfg.groups_for(prev));
        let head = b.conv("head.conv", prev, cfg.image_channels, true);
        Ok(Unet {
            time1,
            time2,
            stem,
            downs,
            mid,
            mid_attn,
            ups,
            head_norm,
            head,
        })
    }

    /// Layer graph and parameter count without allocating parameters.
    pub fn layout(cfg: &DenoiserConfig) -> Result<(Unet, usize)> {
        let mut b = Builder {
            store: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            next: 0,
            scalars: 0,
        };
        let net = Unet::build(cfg, &mut b)?;
        Ok((net, b.scalars))
    }

    /// Head output (before the prediction parameterization).
    fn forward(&self, cfg: &DenoiserConfig, t: &mut Tape, x: Var, d: usize, cond: Var) -> Var {
        t.set_scope("time.sinusoid");
        let s = t.leaf(sinusoid(d, cfg.base_channels));
        let e = self.time1.forward(t, s);
        let e = silu_scoped(t, "time.act1".into(), e);
        let e = self.time2.forward(t, e);
        let emb = silu_scoped(t, "time.act2".into(), e);

        t.set_scope("stem.concat");
        let xin = t.concat(x, cond);
        let mut h = self.stem.forward(t, xin);
        let mut skips = Vec::with_capacity(self.downs.len());
        for blk in &self.downs {
            h = blk.res.forward(t, h, emb);
            if let Some(a) = &blk.attn {
                h = a.forward(t, h, cond);
            }
            skips.push(h);
            t.set_scope(&blk.pool_name);
            h = t.avg_pool2(h);
            h = blk.proj.forward(t, h);
        }
        h = self.mid.forward(t, h, emb);
        if let Some(a) = &self.mid_attn {
            h = a.forward(t, h, cond);
        }
        for blk in &self.ups {
            t.set_scope(&blk.upsample_name);
            h = t.upsample2(h);
            h = blk.proj.forward(t, h);
            let skip = skips.pop().expect("one skip per level");
            h = t.concat(h, skip);
            h = blk.merge.forward(t, h);
            h = blk.res.forward(t, h, emb);
            if let Some(a) = &blk.attn {
                h = a.forward(t, h, cond);
            }
        }
        let h = self.head_norm.forward(t, h);
        let h = silu_scoped(t, "head.act".into(), h);
        self.head.forward(t, h)
    }

    /// Analytic per-layer FLOPs mirroring the forward pass.
    pub fn flop_rows(&self, cfg: &DenoiserConfig, height: usize, width: usize, out: &mut Vec<FlopRow>) -> Result<()> {
        let e = cfg.embed_dim;
        self.time1.rows(1, 1, out);
        out.push(row("time.act1", LayerKind::Activation, e, e, 1, 1, (SILU_FLOPS * e) as u64));
        self.time2.rows(1, 1, out);
        out.push(row("time.act2", LayerKind::Activation, e, e, 1, 1, (SILU_FLOPS * e) as u64));
        let (mut h, mut w) = (height, width);
        self.stem.rows(h, w, false, out);
        for blk in &self.downs {
            blk.res.rows(h, w, out)?;
            if let Some(a) = &blk.attn {
                a.rows(h, w, height, width, out);
            }
            let c = blk.proj.c_in;
            out.push(row(&blk.pool_name, LayerKind::Elementwise, c, c, h, w, (c * h * w) as u64));
            h /= 2;
            w /= 2;
            blk.proj.rows(h, w, out);
        }
        self.mid.rows(h, w, out)?;
        if let Some(a) = &self.mid_attn {
            a.rows(h, w, height, width, out);
        }
        for blk in &self.ups {
            h *= 2;
            w *= 2;
            blk.proj.rows(h, w, out);
            blk.merge.rows(h, w, out);
            blk.res.rows(h, w, out)?;
            if let Some(a) = &blk.attn {
                a.rows(h, w, height, width, out);
            }
        }
        self.head_norm.rows(h, w, out);
        let c = self.head_norm.c;
        out.push(row("head.act", LayerKind::Activation, c, c, h, w, (SILU_FLOPS * c * h * w) as u64));
        self.head.rows(h, w, false, out);
        if cfg.prediction == Prediction::ConditionResidual {
            let n = (cfg.image_channels * height * width) as u64;
            out.push(row(
                "prediction",
                LayerKind::Elementwise,
                cfg.image_channels,
                cfg.image_channels,
                height,
                width,
                n + AXPBY_FLOPS as u64 * n,
            ));
        }
        Ok(())
    }
}

/// `[sin(d f_k), cos(d f_k)]` with `f_k = 10000^(-k / half)`.
pub fn sinusoid(d: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; 2 * half];
    for k in 0..half {
        let a = d as f64 * (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = a.sin();
        v[half + k] = a.cos();
    }
    Tensor::vector(v)
}

/// A denoiser: architecture, parameters, and the schedule its output
/// parameterization reads.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    pub params: ParamStore,
    net: Unet,
    schedule: NoiseSchedule,
}

impl DenoiserModel {
    /// Freshly initialized model. The head is zero, so an `Epsilon` model
    /// predicts zero noise and a `ConditionResidual` model predicts the
    /// condition image as the clean estimate.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: Some(&mut params),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next: 0,
            scalars: 0,
        };
        let net = Unet::build(&config, &mut b)?;
        let schedule = cosine_schedule(config.steps)?;
        Ok(Self {
            config,
            params,
            net,
            schedule,
        })
    }

    /// Rebuilds a model around loaded parameters, checking every name and shape.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Format(format!(
                "config expects {} tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for id in fresh.params.ids() {
            let name = fresh.params.name(id);
            let other = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if other != id || params.shape(other) != fresh.params.shape(id) {
                return Err(Error::Format(format!(
                    "tensor `{name}`: expected shape {:?} at position {}, found {:?} at {}",
                    fresh.params.shape(id),
                    id.index(),
                    params.shape(other),
                    other.index()
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, x: &Field, d: usize, cond: &Field) -> Result<()> {
        let cfg = &self.config;
        if x.channels() != cfg.image_channels || cond.channels() != cfg.condition_channels {
            return Err(Error::Shape(format!(
                "expected {} input and {} condition channels, got {} and {}",
                cfg.image_channels,
                cfg.condition_channels,
                x.channels(),
                cond.channels()
            )));
        }
        if (x.height(), x.width()) != (cond.height(), cond.width()) {
            return Err(Error::Shape(format!(
                "input {}x{} vs condition {}x{}",
                x.height(),
                x.width(),
                cond.height(),
                cond.width()
            )));
        }
        cfg.check_input_size(x.height(), x.width())?;
        if d == 0 || d > cfg.steps {
            return Err(Error::Parameter(format!("step {d} outside 1..={}", cfg.steps)));
        }
        Ok(())
    }

    /// Records the noise prediction for `(x, d, cond)` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Field, d: usize, cond: &Field) -> Result<Var> {
        self.check_inputs(x, d, cond)?;
        tape.set_scope("input");
        let xv = tape.leaf(Tensor::from_field(x));
        let cv = tape.leaf(Tensor::from_field(cond));
        let head = self.net.forward(&self.config, tape, xv, d, cv);
        Ok(match self.config.prediction {
            Prediction::Epsilon => head,
            Prediction::ConditionResidual => {
                let ab = self.schedule.alpha_bar(d)?;
                let s = (1.0 - ab).sqrt();
                tape.set_scope("prediction");
                let x0 = tape.add(head, cv);
                tape.axpby(xv, 1.0 / s, x0, -ab.sqrt() / s)
            }
        })
    }

    /// Predicted noise `eps_hat(x, d, cond)`.
    pub fn forward(&self, x: &Field, d: usize, cond: &Field) -> Result<Field> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_on_tape(&mut tape, x, d, cond)?;
        tape.value(out).to_field()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::BackboneReport;
    use rand::{Rng, SeedableRng};

    fn tiny(backbone: Backbone, prediction: Prediction) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            embed_dim: 8,
            backbone,
            prediction,
            steps: 16,
            attention: AttentionPlacement {
                last_down: true,
                middle: true,
                first_up: true,
            },
            ..DenoiserConfig::toy()
        }
    }

    fn random_field(h: usize, w: usize, c: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn widths_follow_the_reference_layout() {
        let p = DenoiserConfig::paper();
        assert_eq!(p.down_widths(), [64, 128, 256]);
        assert_eq!(p.up_widths(), [128, 64, 64]);
        assert_eq!(DenoiserConfig::toy().up_widths(), [8, 8]);
    }

    #[test]
    fn layer_param_formulas() {
        assert_eq!(product_layer_params(64, 4), 2128);
        assert_eq!(conv3x3_params(64, 64), 36928);
    }

    #[test]
    fn count_matches_allocation() {
        for backbone in [Backbone::Product, Backbone::Conv] {
            for cfg in [tiny(backbone, Prediction::Epsilon), DenoiserConfig { backbone, ..DenoiserConfig::toy() }] {
                let m = DenoiserModel::new(cfg.clone(), 1).unwrap();
                assert_eq!(m.num_params(), count_params(&cfg).unwrap());
                assert_eq!(Unet::layout(&cfg).unwrap().1, m.num_params());
            }
        }
        let paper = DenoiserConfig::paper();
        let conv = DenoiserConfig {
            backbone: Backbone::Conv,
            ..paper.clone()
        };
        assert!(count_params(&paper).unwrap() < count_params(&conv).unwrap());
        assert_eq!(Unet::layout(&paper).unwrap().1, count_params(&paper).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::toy();
        c.bottleneck_ratio = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.backbone = Backbone::Conv;
        assert!(c.validate().is_ok());
        let mut c = DenoiserConfig::toy();
        c.base_channels = 7;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::toy();
        c.condition_channels = 1;
        assert!(c.validate().is_err());
        c.prediction = Prediction::Epsilon;
        assert!(c.validate().is_ok());
        assert!(DenoiserConfig::toy().check_input_size(30, 32).is_err());
    }

    #[test]
    fn zero_head_predicts_zero_noise() {
        let m = DenoiserModel::new(tiny(Backbone::Product, Prediction::Epsilon), 3).unwrap();
        let x = random_field(8, 8, 3, 1);
        let c = random_field(8, 8, 3, 2);
        let out = m.forward(&x, 5, &c).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn condition_residual_starts_at_the_condition() {
        // Zero head: eps_hat = (x - sqrt(ab) c) / sqrt(1 - ab), so the
        // implied clean estimate is exactly c.
        let m = DenoiserModel::new(tiny(Backbone::Product, Prediction::ConditionResidual), 3).unwrap();
        let x = random_field(8, 8, 3, 1);
        let c = random_field(8, 8, 3, 2);
        let ab = m.schedule().alpha_bar(7).unwrap();
        let eps = m.forward(&x, 7, &c).unwrap();
        let x0 = x.lincomb(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt()).unwrap();
        assert!(x0.max_abs_diff(&c) < 1e-12);
    }

    fn randomize(m: &mut DenoiserModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.params.ids().collect::<Vec<_>>() {
            for v in m.params.value_mut(id) {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_shape_preserving_and_step_aware() {
        for backbone in [Backbone::Product, Backbone::Conv] {
            let mut m = DenoiserModel::new(tiny(backbone, Prediction::Epsilon), 4).unwrap();
            randomize(&mut m, 5);
            let x = random_field(8, 16, 3, 1);
            let c = random_field(8, 16, 3, 2);
            let a = m.forward(&x, 3, &c).unwrap();
            let b = m.forward(&x, 3, &c).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), x.shape());
            let other = m.forward(&x, 9, &c).unwrap();
            assert!(other.max_abs_diff(&a) > 1e-9);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = DenoiserModel::new(tiny(Backbone::Product, Prediction::Epsilon), 4).unwrap();
        let x = random_field(8, 8, 3, 1);
        assert!(m.forward(&x, 0, &x).is_err());
        assert!(m.forward(&x, 17, &x).is_err());
        assert!(m.forward(&x, 1, &random_field(8, 16, 3, 1)).is_err());
        assert!(m.forward(&random_field(6, 6, 3, 1), 1, &random_field(6, 6, 3, 1)).is_err());
        assert!(m.forward(&x, 1, &random_field(8, 8, 1, 1)).is_err());
    }

    #[test]
    fn conv_receptive_field_is_local() {
        // Group-norm statistics spread a faint global change; beyond the
        // kernel reach only that remains.
        let cfg = DenoiserConfig {
            base_channels: 4,
            channel_mults: vec![1],
            embed_dim: 8,
            backbone: Backbone::Conv,
            prediction: Prediction::Epsilon,
            attention: AttentionPlacement::default(),
            steps: 8,
            ..DenoiserConfig::toy()
        };
        let mut m = DenoiserModel::new(cfg, 6).unwrap();
        randomize(&mut m, 7);
        let x = random_field(64, 64, 3, 1);
        let c = random_field(64, 64, 3, 2);
        let base = m.forward(&x, 2, &c).unwrap();
        let mut x2 = x.clone();
        x2.set(32, 32, 0, x.get(32, 32, 0) + 1.0);
        let moved = m.forward(&x2, 2, &c).unwrap();
        let (mut near, mut far) = (0.0f64, 0.0f64);
        for y in 0..64 {
            for xx in 0..64 {
                let diff = (0..3)
                    .map(|ch| (moved.get(y, xx, ch) - base.get(y, xx, ch)).abs())
                    .fold(0.0, f64::max);
                let dist = (y as isize - 32).abs().max((xx as isize - 32).abs());
                if dist > 14 {
                    far = far.max(diff);
                } else {
                    near = near.max(diff);
                }
            }
        }
        assert!(near > 0.0);
        assert!(far < 0.05 * near, "near {near} far {far}");
    }

    #[test]
    fn tape_flops_match_the_report() {
        for backbone in [Backbone::Product, Backbone::Conv] {
            for prediction in [Prediction::Epsilon, Prediction::ConditionResidual] {
                let cfg = tiny(backbone, prediction);
                let m = DenoiserModel::new(cfg.clone(), 0).unwrap();
                let mut tape = Tape::with_flop_counter(&m.params);
                let x = random_field(16, 8, 3, 1);
                m.forward_on_tape(&mut tape, &x, 2, &x).unwrap();
                let brute = tape.flops().unwrap().clone();
                let report = crate::flops::model_report(&cfg, 16, 8).unwrap();
                let rep: &BackboneReport = match backbone {
                    Backbone::Product => &report.product,
                    Backbone::Conv => &report.conv,
                };
                let analytic = rep.by_scope();
                let brute: std::collections::BTreeMap<_, _> =
                    brute.into_iter().filter(|(_, v)| *v > 0).collect();
                assert_eq!(analytic, brute, "{backbone:?} {prediction:?}");
            }
        }
    }
}
