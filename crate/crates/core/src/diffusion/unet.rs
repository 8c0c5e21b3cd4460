use serde::{Deserialize, Serialize};

use super::schedule::{mix, NoiseSchedule};
use crate::captioner::{TextEmbedder, TokenSeq, Vocabulary, DEFAULT_MAX_TOKENS};
use crate::dual_control::text_cross_attention;
use crate::dual_control::{
    append_kv, text_image_interact, ConditionBundle, CrossAttnIds, ReferenceKV,
};
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, ParamId, ParamStore, Real, Var};
use crate::synthset::Image;

pub const DEFAULT_TEXT_DIM: usize = 128;

/// Shape of the denoising UNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub view_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Resolution levels (0 = finest) with self-attention; `None` means the coarsest two.
    pub attention_levels: Option<Vec<usize>>,
    pub text_cross_attention: bool,
    pub time_embed_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    /// Reference pass, reference-role embedding and text interaction.
    pub dual_control: bool,
    /// Appends two normalized coordinate channels to the input.
    pub coord_channels: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            view_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: None,
            text_cross_attention: true,
            time_embed_dim: 128,
            heads: 4,
            groups: 8,
            text_len: DEFAULT_MAX_TOKENS,
            text_dim: DEFAULT_TEXT_DIM,
            vocab_size: Vocabulary::builtin().len(),
            dual_control: true,
            coord_channels: true,
        }
    }
}

impl DenoiserConfig {
    pub fn tile_size(&self) -> usize {
        2 * self.view_size
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn attention_levels(&self) -> Vec<usize> {
        match &self.attention_levels {
            Some(l) => l.clone(),
            None => {
                let n = self.levels();
                (n.saturating_sub(2)..n).collect()
            }
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.view_size == 0
            || self.base_channels == 0
            || self.time_embed_dim == 0
            || self.heads == 0
            || self.groups == 0
        {
            return bad(
                "view_size, base_channels, time_embed_dim, heads and groups must be at least 1"
                    .into(),
            );
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.time_embed_dim % 2 != 0 {
            return bad(format!(
                "time_embed_dim {} must be even",
                self.time_embed_dim
            ));
        }
        if self.text_len < 2 || self.text_dim == 0 || self.vocab_size < 3 {
            return bad("text_len must be at least 2, text_dim and vocab_size positive".into());
        }
        let down = 1usize << (self.levels() - 1);
        if self.view_size % down != 0 {
            return bad(format!(
                "view_size {} not divisible by {down}",
                self.view_size
            ));
        }
        for l in 0..self.levels() {
            let c = self.channels(l);
            if c % self.groups != 0 {
                return bad(format!(
                    "{c} channels at level {l} not divisible by {} groups",
                    self.groups
                ));
            }
        }
        for l in self.attention_levels() {
            if l >= self.levels() {
                return bad(format!("attention level {l} does not exist"));
            }
            if self.channels(l) % self.heads != 0 {
                return bad(format!(
                    "{} channels at level {l} not divisible by {} heads",
                    self.channels(l),
                    self.heads
                ));
            }
        }
        Ok(())
    }
}

struct ResIds {
    gn1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    temb: (ParamId, ParamId),
    gn2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
}

struct AttnIds {
    gn: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: (ParamId, ParamId),
    interact: Option<CrossAttnIds>,
    cross: Option<((ParamId, ParamId), CrossAttnIds)>,
}

struct LevelIds {
    res: ResIds,
    attn: Option<AttnIds>,
    resample: Option<(ParamId, ParamId)>,
}

struct Layout {
    text: TextEmbedder,
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    role: Option<ParamId>,
    conv_in: (ParamId, ParamId),
    down: Vec<LevelIds>,
    mid_res: ResIds,
    mid_attn: Option<AttnIds>,
    up: Vec<LevelIds>,
    out_gn: (ParamId, ParamId),
    out_conv: (ParamId, ParamId),
}

const GAIN: f64 = 1.732_050_807_568_877_2;

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    cfg: &'a DenoiserConfig,
    seed: u64,
}

impl<T: Real> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        gain: f64,
    ) -> (ParamId, ParamId) {
        let fan_in = c_in * k * k;
        (
            self.store.add(
                &format!("{name}.w"),
                &[c_out, c_in, k, k],
                Init::FanIn { fan_in, gain },
                self.seed,
            ),
            self.store
                .add(&format!("{name}.b"), &[c_out], Init::Zeros, self.seed),
        )
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        (
            self.store
                .add(&format!("{name}.gamma"), &[c], Init::Ones, self.seed),
            self.store
                .add(&format!("{name}.beta"), &[c], Init::Zeros, self.seed),
        )
    }

    fn lin(&mut self, name: &str, d_in: usize, d_out: usize) -> ParamId {
        self.store.add(
            name,
            &[d_out, d_in],
            Init::FanIn {
                fan_in: d_in,
                gain: GAIN,
            },
            self.seed,
        )
    }

    fn res(&mut self, name: &str, c_in: usize, c_out: usize) -> ResIds {
        let e = self.cfg.time_embed_dim;
        ResIds {
            gn1: self.norm(&format!("{name}.gn1"), c_in),
            conv1: self.conv(&format!("{name}.conv1"), c_in, c_out, 3, GAIN),
            temb: (
                self.lin(&format!("{name}.temb.w"), e, c_out),
                self.store
                    .add(&format!("{name}.temb.b"), &[c_out], Init::Zeros, self.seed),
            ),
            gn2: self.norm(&format!("{name}.gn2"), c_out),
            conv2: self.conv(&format!("{name}.conv2"), c_out, c_out, 3, GAIN),
            skip: (c_in != c_out).then(|| self.conv(&format!("{name}.skip"), c_in, c_out, 1, GAIN)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnIds {
        let d = self.cfg.text_dim;
        AttnIds {
            gn: self.norm(&format!("{name}.gn"), c),
            q: self.lin(&format!("{name}.q"), c, c),
            k: self.lin(&format!("{name}.k"), c, c),
            v: self.lin(&format!("{name}.v"), c, c),
            o: (
                self.lin(&format!("{name}.o.w"), c, c),
                self.store
                    .add(&format!("{name}.o.b"), &[c], Init::Zeros, self.seed),
            ),
            interact: self.cfg.dual_control.then(|| {
                CrossAttnIds::register(self.store, &format!("{name}.interact"), c, d, self.seed)
            }),
            cross: self.cfg.text_cross_attention.then(|| {
                let ln = self.norm(&format!("{name}.text.ln"), c);
                (
                    ln,
                    CrossAttnIds::register(self.store, &format!("{name}.text"), c, d, self.seed),
                )
            }),
        }
    }

    fn build(&mut self) -> Layout {
        let cfg = self.cfg;
        let e = cfg.time_embed_dim;
        let n = cfg.levels();
        let attn_levels = cfg.attention_levels();
        let text = TextEmbedder::register(
            self.store,
            "text",
            cfg.vocab_size,
            cfg.text_len,
            cfg.text_dim,
            self.seed,
        );
        let time1 = (
            self.lin("time.fc1.w", e, e),
            self.store.add("time.fc1.b", &[e], Init::Zeros, self.seed),
        );
        let time2 = (
            self.lin("time.fc2.w", e, e),
            self.store.add("time.fc2.b", &[e], Init::Zeros, self.seed),
        );
        let role = cfg.dual_control.then(|| {
            self.store
                .add("reference.role", &[e], Init::Normal(0.5), self.seed)
        });
        let in_ch = if cfg.coord_channels { 5 } else { 3 };
        let c0 = cfg.channels(0);
        let conv_in = self.conv("conv_in", in_ch, c0, 3, GAIN);
        let mut down = Vec::new();
        let mut prev = c0;
        for l in 0..n {
            let c = cfg.channels(l);
            let res = self.res(&format!("down.{l}.res"), prev, c);
            let attn = attn_levels
                .contains(&l)
                .then(|| self.attn(&format!("down.{l}.attn"), c));
            let resample =
                (l + 1 < n).then(|| self.conv(&format!("down.{l}.downsample"), c, c, 3, GAIN));
            down.push(LevelIds {
                res,
                attn,
                resample,
            });
            prev = c;
        }
        let mid_res = self.res("mid.res", prev, prev);
        let mid_attn = attn_levels
            .contains(&(n - 1))
            .then(|| self.attn("mid.attn", prev));
        let mut up = Vec::new();
        for l in (0..n).rev() {
            let c = cfg.channels(l);
            let res = self.res(&format!("up.{l}.res"), prev + c, c);
            let attn = attn_levels
                .contains(&l)
                .then(|| self.attn(&format!("up.{l}.attn"), c));
            let resample = (l > 0).then(|| self.conv(&format!("up.{l}.upsample"), c, c, 3, GAIN));
            up.push(LevelIds {
                res,
                attn,
                resample,
            });
            prev = c;
        }
        let out_gn = self.norm("out.gn", c0);
        let out_conv = self.conv("out.conv", c0, 3, 3, 0.5);
        Layout {
            text,
            time1,
            time2,
            role,
            conv_in,
            down,
            mid_res,
            mid_attn,
            up,
            out_gn,
            out_conv,
        }
    }
}

enum Mode<'a> {
    Main(Option<&'a [(Var, Var)]>),
    Reference,
}

struct Ctx<'a> {
    e: Var,
    mask: &'a [bool],
    temb: Var,
}

/// Sinusoidal timestep features, sines then cosines.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

fn coords(size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * size * size);
    let c = |i: usize| (2.0 * i as f64 + 1.0) / size as f64 - 1.0;
    for _row in 0..size {
        out.extend((0..size).map(c));
    }
    for row in 0..size {
        out.extend(std::iter::repeat_n(c(row), size));
    }
    out
}

/// Image in `[0, 1]` to a channel-first tensor in `[-1, 1]`.
pub fn image_to_signed(img: &Image) -> Vec<f32> {
    img.to_chw().iter().map(|&v| 2.0 * v - 1.0).collect()
}

/// Channel-first tensor in `[-1, 1]` to an image in `[0, 1]`, clamped.
pub fn signed_to_image(x: &[f32], size: usize) -> Image {
    let chw: Vec<f32> = x
        .iter()
        .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect();
    Image::from_chw(size, size, &chw)
}

/// Noisy tile plus its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Vec<f32>,
    pub t: usize,
}

/// Compact UNet over `2V x 2V` tiles with timestep and text conditioning and
/// an optional dual-control reference path sharing its weights.
pub struct Denoiser<T: Real> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Builder {
            store: &mut params,
            cfg: &config,
            seed,
        }
        .build();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        let mut d = Denoiser::<U>::new(self.config.clone(), 0).expect("validated config");
        d.params = self.params.cast();
        d
    }

    pub fn tile_size(&self) -> usize {
        self.config.tile_size()
    }

    pub fn text(&self) -> &TextEmbedder {
        &self.layout.text
    }

    /// Number of self-attention layers, which is also the `ReferenceKV` length.
    pub fn attention_layers(&self) -> usize {
        self.layout
            .down
            .iter()
            .chain(&self.layout.up)
            .filter(|l| l.attn.is_some())
            .count()
            + usize::from(self.layout.mid_attn.is_some())
    }

    pub fn embed_text(&self, g: &mut Graph<'_, T>, tokens: &TokenSeq) -> Result<Var> {
        if tokens.len() != self.config.text_len {
            return Err(Error::Domain(format!(
                "token sequence length {} != {}",
                tokens.len(),
                self.config.text_len
            )));
        }
        Ok(self.layout.text.forward(g, tokens))
    }

    fn time_embedding(&self, g: &mut Graph<'_, T>, t: usize, reference: bool) -> Var {
        let e = self.config.time_embed_dim;
        let feats = timestep_features(t, e).into_iter().map(T::lit).collect();
        let x = g.input(feats, &[1, e]);
        let (w1, b1) = (g.param(self.layout.time1.0), g.param(self.layout.time1.1));
        let h = g.linear(x, w1, Some(b1));
        let h = g.silu(h);
        let (w2, b2) = (g.param(self.layout.time2.0), g.param(self.layout.time2.1));
        let mut h = g.linear(h, w2, Some(b2));
        if reference {
            let role = g.param(self.layout.role.expect("reference pass needs dual control"));
            let role = g.reshape(role, &[1, e]);
            h = g.add(h, role);
        }
        g.silu(h)
    }

    fn conv(&self, g: &mut Graph<'_, T>, x: Var, ids: (ParamId, ParamId), stride: usize) -> Var {
        let (w, b) = (g.param(ids.0), g.param(ids.1));
        let k = g.shape(w)[2];
        g.conv2d(x, w, b, stride, k / 2)
    }

    fn gn(&self, g: &mut Graph<'_, T>, x: Var, ids: (ParamId, ParamId)) -> Var {
        let (gamma, beta) = (g.param(ids.0), g.param(ids.1));
        g.group_norm(x, gamma, beta, self.config.groups)
    }

    fn res(&self, g: &mut Graph<'_, T>, x: Var, ids: &ResIds, ctx: &Ctx) -> Var {
        let h = self.gn(g, x, ids.gn1);
        let h = g.silu(h);
        let h = self.conv(g, h, ids.conv1, 1);
        let (tw, tb) = (g.param(ids.temb.0), g.param(ids.temb.1));
        let tv = g.linear(ctx.temb, tw, Some(tb));
        let c = g.shape(tv)[1];
        let tv = g.reshape(tv, &[c]);
        let h = g.add_channel(h, tv);
        let h = self.gn(g, h, ids.gn2);
        let h = g.silu(h);
        let h = self.conv(g, h, ids.conv2, 1);
        let skip = match ids.skip {
            Some(s) => self.conv(g, x, s, 1),
            None => x,
        };
        g.add(h, skip)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        ids: &AttnIds,
        ctx: &Ctx,
        mode: &Mode,
        layer: &mut usize,
        captured: &mut Vec<(Var, Var)>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let heads = self.config.heads;
        let n = self.gn(g, x, ids.gn);
        let mut tok = g.to_tokens(n);
        if let (Mode::Reference, Some(inter)) = (mode, &ids.interact) {
            tok = text_image_interact(g, tok, ctx.e, ctx.mask, inter, heads);
        }
        let (wq, wk, wv) = (g.param(ids.q), g.param(ids.k), g.param(ids.v));
        let q = g.linear(tok, wq, None);
        let k = g.linear(tok, wk, None);
        let v = g.linear(tok, wv, None);
        let reference = match mode {
            Mode::Reference => {
                captured.push((k, v));
                None
            }
            Mode::Main(Some(kv)) if self.config.dual_control => {
                Some(*kv.get(*layer).ok_or_else(|| {
                    Error::Domain(format!(
                        "reference holds {} layers, layer {} requested",
                        kv.len(),
                        *layer
                    ))
                })?)
            }
            Mode::Main(_) => None,
        };
        *layer += 1;
        let a = append_kv(g, q, k, v, reference, reference.is_some(), heads)?;
        let (wo, bo) = (g.param(ids.o.0), g.param(ids.o.1));
        let o = g.linear(a, wo, Some(bo));
        let o = g.from_tokens(o, h, w);
        let mut x = g.add(x, o);
        if let Some((ln, cross)) = &ids.cross {
            let t = g.to_tokens(x);
            let (lg, lb) = (g.param(ln.0), g.param(ln.1));
            let t = g.layer_norm(t, lg, lb);
            let c = text_cross_attention(g, t, ctx.e, ctx.mask, cross, heads);
            let c = g.from_tokens(c, h, w);
            x = g.add(x, c);
        }
        Ok(x)
    }

    fn run(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        t: usize,
        e: Var,
        mask: &[bool],
        mode: Mode,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3
            || s[0] != 3
            || s[1] != s[2]
            || s[1] % (1 << (self.config.levels() - 1)) != 0
        {
            return Err(Error::Domain(format!("denoiser input has shape {s:?}")));
        }
        if g.shape(e) != [self.config.text_len, self.config.text_dim]
            || mask.len() != self.config.text_len
        {
            return Err(Error::Domain(
                "text embedding shape does not match the configuration".into(),
            ));
        }
        let reference = matches!(mode, Mode::Reference);
        let ctx = Ctx {
            e,
            mask,
            temb: self.time_embedding(g, t, reference),
        };
        let mut h = x;
        if self.config.coord_channels {
            let c = g.input(
                coords(s[1]).into_iter().map(T::lit).collect(),
                &[2, s[1], s[2]],
            );
            h = g.concat0(h, c);
        }
        h = self.conv(g, h, self.layout.conv_in, 1);
        let mut layer = 0;
        let mut captured = Vec::new();
        let mut skips = Vec::new();
        for lvl in &self.layout.down {
            h = self.res(g, h, &lvl.res, &ctx);
            if let Some(a) = &lvl.attn {
                h = self.attn(g, h, a, &ctx, &mode, &mut layer, &mut captured)?;
            }
            skips.push(h);
            if let Some(d) = lvl.resample {
                h = self.conv(g, h, d, 2);
            }
        }
        h = self.res(g, h, &self.layout.mid_res, &ctx);
        if let Some(a) = &self.layout.mid_attn {
            h = self.attn(g, h, a, &ctx, &mode, &mut layer, &mut captured)?;
        }
        for lvl in &self.layout.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat0(h, skip);
            h = self.res(g, h, &lvl.res, &ctx);
            if let Some(a) = &lvl.attn {
                h = self.attn(g, h, a, &ctx, &mode, &mut layer, &mut captured)?;
            }
            if let Some(u) = lvl.resample {
                h = g.upsample2x(h);
                h = self.conv(g, h, u, 1);
            }
        }
        if reference {
            return Ok((h, captured));
        }
        h = self.gn(g, h, self.layout.out_gn);
        h = g.silu(h);
        h = self.conv(g, h, self.layout.out_conv, 1);
        Ok((h, captured))
    }

    /// Noise prediction for a `[3, 2V, 2V]` tile. `reference` carries one
    /// key/value pair per self-attention layer; `None` disables appending.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Var,
        t: usize,
        e: Var,
        mask: &[bool],
        reference: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        Ok(self.run(g, x_t, t, e, mask, Mode::Main(reference))?.0)
    }

    /// Runs the shared network on an already noised reference view and
    /// returns the self-attention keys and values of every layer.
    pub fn reference_pass(
        &self,
        g: &mut Graph<'_, T>,
        ref_t: Var,
        t: usize,
        e: Var,
        mask: &[bool],
    ) -> Result<Vec<(Var, Var)>> {
        if !self.config.dual_control {
            return Err(Error::Config("reference pass requires dual control".into()));
        }
        Ok(self.run(g, ref_t, t, e, mask, Mode::Reference)?.1)
    }

    /// Full conditioned prediction: embeds the prompt and, when an image is
    /// present, noises it to `t` with `ref_eps` and runs the reference pass.
    pub fn conditioned_eps(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Var,
        t: usize,
        cond: &ConditionBundle,
        ref_eps: &[f32],
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        let e = self.embed_text(g, &cond.tokens)?;
        let mask = &cond.tokens.attention_mask;
        let kv = if cond.has_image && self.config.dual_control {
            let ref_t = self.noised_reference(&cond.ref_image, t, ref_eps, sched)?;
            let v = self.config.view_size;
            let r = g.input(
                ref_t.into_iter().map(|x| T::lit(x as f64)).collect(),
                &[3, v, v],
            );
            Some(self.reference_pass(g, r, t, e, mask)?)
        } else {
            None
        };
        self.forward(g, x_t, t, e, mask, kv.as_deref())
    }

    fn noised_reference(
        &self,
        img: &Image,
        t: usize,
        ref_eps: &[f32],
        sched: &NoiseSchedule,
    ) -> Result<Vec<f32>> {
        let v = self.config.view_size;
        if img.width != v || img.height != v {
            return Err(Error::Domain(format!(
                "reference image is {}x{}, expected {v}x{v}",
                img.width, img.height
            )));
        }
        sched.check_t(t)?;
        let x0 = image_to_signed(img);
        if ref_eps.len() != x0.len() {
            return Err(Error::Domain("reference noise has the wrong size".into()));
        }
        let ab = sched.alpha_bars[t];
        Ok(mix(&x0, ref_eps, ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Materialized reference keys and values for `ref_image` at timestep `t`.
    pub fn reference_forward(
        &self,
        ref_image: &Image,
        t: usize,
        tokens: &TokenSeq,
        sched: &NoiseSchedule,
        noise_seed: u64,
    ) -> Result<ReferenceKV> {
        let mut g = Graph::inference(&self.params);
        let v = self.config.view_size;
        let eps = super::standard_normal(noise_seed, 3 * v * v);
        let ref_t = self.noised_reference(ref_image, t, &eps, sched)?;
        let e = self.embed_text(&mut g, tokens)?;
        let r = g.input(
            ref_t.into_iter().map(|x| T::lit(x as f64)).collect(),
            &[3, v, v],
        );
        let kv = self.reference_pass(&mut g, r, t, e, &tokens.attention_mask)?;
        Ok(ReferenceKV::from_graph(&g, &kv, true))
    }

    /// Noise prediction for a latent state under a conditioning bundle.
    pub fn predict_eps(
        &self,
        state: &LatentState,
        cond: &ConditionBundle,
        sched: &NoiseSchedule,
        noise_seed: u64,
    ) -> Result<Vec<f32>> {
        let s = self.tile_size();
        if state.x.len() != 3 * s * s {
            return Err(Error::Domain(format!(
                "latent has {} values, expected {}",
                state.x.len(),
                3 * s * s
            )));
        }
        sched.check_t(state.t)?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(
            state.x.iter().map(|&v| T::lit(v as f64)).collect(),
            &[3, s, s],
        );
        let v = self.config.view_size;
        let ref_eps = super::standard_normal(noise_seed, 3 * v * v);
        let out = self.conditioned_eps(&mut g, x, state.t, cond, &ref_eps, sched)?;
        Ok(g.value(out).iter().map(|v| v.as_f64() as f32).collect())
    }
}

impl<T: Real> Denoiser<T> {
    /// [`Denoiser::predict_eps`] over a batch; sample `i` uses `noise_seeds[i]`.
    pub fn predict_eps_batch(
        &self,
        states: &[LatentState],
        conds: &[ConditionBundle],
        sched: &NoiseSchedule,
        noise_seeds: &[u64],
    ) -> Result<Vec<Vec<f32>>> {
        use rayon::prelude::*;
        if states.len() != conds.len() || states.len() != noise_seeds.len() {
            return Err(Error::Domain("batch inputs differ in length".into()));
        }
        (0..states.len())
            .into_par_iter()
            .map(|i| self.predict_eps(&states[i], &conds[i], sched, noise_seeds[i]))
            .collect()
    }
}
