//! Four-stage pyramid transformer with spatial-reduction attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{map_to_tokens, tokens_to_map, Conv2d, ConvSpec, Graph, Init, LayerNorm, Linear, NetError, ParamStore, Result};
use crate::tensor::{TensorError, Var};

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Desk,
    B1,
    B2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Desk => "desk",
            Variant::B1 => "b1",
            Variant::B2 => "b2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Variant::Desk),
            "b1" => Ok(Variant::B1),
            "b2" => Ok(Variant::B2),
            _ => Err(format!("unknown variant `{s}` (expected desk, b1 or b2)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_padding: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub sr_ratio: usize,
    pub mlp_ratio: f64,
}

impl StageConfig {
    /// Overlapping patch embedding geometry for a given stride: kernel 7 /
    /// padding 3 at stride 4, kernel `2s-1` / padding `s-1` otherwise.
    pub fn new(patch_stride: usize, embed_dim: usize, depth: usize, num_heads: usize, sr_ratio: usize, mlp_ratio: f64) -> Self {
        let (patch_kernel, patch_padding) = if patch_stride == 4 { (7, 3) } else { (2 * patch_stride - 1, patch_stride - 1) };
        Self { patch_kernel, patch_stride, patch_padding, embed_dim, depth, num_heads, sr_ratio, mlp_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(NetError::Config(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads)));
        }
        if self.sr_ratio == 0 || self.patch_stride == 0 || self.depth == 0 || self.mlp_ratio <= 0.0 {
            return Err(NetError::Config(format!("invalid stage config {self:?}")));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub attention_enabled: bool,
}

impl BackboneConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, attention_enabled: true }
    }

    pub fn stages(&self) -> Vec<StageConfig> {
        let (dims, depths, heads, mlp): ([usize; 4], [usize; 4], [usize; 4], [f64; 4]) = match self.variant {
            Variant::Desk => ([16, 32, 64, 128], [1, 1, 1, 1], [1, 2, 4, 8], [2.0; 4]),
            Variant::B1 => ([64, 128, 320, 512], [2, 2, 2, 2], [1, 2, 5, 8], [8.0, 8.0, 4.0, 4.0]),
            Variant::B2 => ([64, 128, 320, 512], [3, 4, 6, 3], [1, 2, 5, 8], [8.0, 8.0, 4.0, 4.0]),
        };
        let strides = [4, 2, 2, 2];
        let sr = [8, 4, 2, 1];
        (0..4).map(|i| StageConfig::new(strides[i], dims[i], depths[i], heads[i], sr[i], mlp[i])).collect()
    }

    pub fn out_channels(&self) -> [usize; 4] {
        let s = self.stages();
        [s[0].embed_dim, s[1].embed_dim, s[2].embed_dim, s[3].embed_dim]
    }
}

/// Stage outputs `F1..F4`, each `[N, C_i, ceil(H/s_i), ceil(W/s_i)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidFeatures {
    pub maps: [Var; 4],
}

/// Strided convolution followed by token layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_ch: usize, cfg: &StageConfig) -> Result<Self> {
        let spec = ConvSpec::new(in_ch, cfg.embed_dim, cfg.patch_kernel, cfg.patch_stride, cfg.patch_padding);
        Ok(Self { proj: Conv2d::new(store, init, &format!("{name}.proj"), spec)?, norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.embed_dim)? })
    }

    /// Returns tokens `[N, H'·W', C]` with `H' = ceil(H / stride)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, usize, usize)> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(TensorError::Dimension(format!("patch embedding needs a non-empty NCHW input, got {s:?}")).into());
        }
        let y = self.proj.forward(g, x)?;
        let ys = g.tape.shape(y).to_vec();
        let t = map_to_tokens(g, y)?;
        Ok((self.norm.forward(g, t)?, ys[2], ys[3]))
    }
}

/// Multi-head attention whose keys and values come from an R×R
/// strided-convolution reduction of the token map.
#[derive(Clone, Debug)]
pub struct SpatialReductionAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub dim: usize,
    pub sr_ratio: usize,
}

impl SpatialReductionAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &StageConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let sr = if cfg.sr_ratio > 1 {
            let spec = ConvSpec::new(d, d, cfg.sr_ratio, cfg.sr_ratio, 0);
            Some((Conv2d::new(store, init, &format!("{name}.sr"), spec)?, LayerNorm::new(store, &format!("{name}.sr_norm"), d)?))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, init, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, init, &format!("{name}.v"), d, d)?,
            proj: Linear::new(store, init, &format!("{name}.proj"), d, d)?,
            sr,
            heads: cfg.num_heads,
            dim: d,
            sr_ratio: cfg.sr_ratio,
        })
    }

    /// Key/value tokens: the map zero-padded at the bottom/right to a
    /// multiple of R, reduced, and normalized. Count is
    /// `ceil(H/R)·ceil(W/R)`.
    pub fn reduce(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let Some((conv, norm)) = &self.sr else { return Ok(x) };
        let r = self.sr_ratio;
        let map = tokens_to_map(g, x, h, w)?;
        let (ph, pw) = (h.div_ceil(r) * r - h, w.div_ceil(r) * r - w);
        let map = if ph + pw > 0 { g.tape.pad2d(map, [0, ph, 0, pw])? } else { map };
        let red = conv.forward(g, map)?;
        let t = map_to_tokens(g, red)?;
        norm.forward(g, t)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w || s[2] != self.dim {
            return Err(TensorError::Dimension(format!("attention input {s:?} does not match {h}×{w} tokens of width {}", self.dim)).into());
        }
        let (n, t, c) = (s[0], s[1], s[2]);
        let hd = c / self.heads;
        let q = self.q.forward(g, x)?;
        let q = g.tape.reshape(q, &[n, t, self.heads, hd])?;
        let q = g.tape.permute(q, &[0, 2, 1, 3])?;
        let kv = self.reduce(g, x, h, w)?;
        let tk = g.tape.shape(kv)[1];
        let k = self.k.forward(g, kv)?;
        let k = g.tape.reshape(k, &[n, tk, self.heads, hd])?;
        let k = g.tape.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(g, kv)?;
        let v = g.tape.reshape(v, &[n, tk, self.heads, hd])?;
        let v = g.tape.permute(v, &[0, 2, 1, 3])?;
        let scores = g.tape.matmul(q, k)?;
        let scores = g.tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.tape.softmax(scores)?;
        let out = g.tape.matmul(attn, v)?;
        let out = g.tape.permute(out, &[0, 2, 1, 3])?;
        let out = g.tape.reshape(out, &[n, t, c])?;
        self.proj.forward(g, out)
    }
}

/// linear → 3×3 depthwise conv on the token map → GELU → linear
#[derive(Clone, Debug)]
pub struct ConvFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl ConvFfn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden)?,
            dwconv: Conv2d::new(store, init, &format!("{name}.dwconv"), ConvSpec::depthwise(hidden, 3))?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.fc1.forward(g, x)?;
        let m = tokens_to_map(g, y, h, w)?;
        let m = self.dwconv.forward(g, m)?;
        let y = map_to_tokens(g, m)?;
        let y = g.tape.gelu(y)?;
        self.fc2.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: SpatialReductionAttention,
    pub norm2: LayerNorm,
    pub ffn: ConvFfn,
    pub attention_enabled: bool,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &StageConfig, attention_enabled: bool) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.embed_dim)?,
            attn: SpatialReductionAttention::new(store, init, &format!("{name}.attn"), cfg)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.embed_dim)?,
            ffn: ConvFfn::new(store, init, &format!("{name}.ffn"), cfg.embed_dim, cfg.hidden_dim())?,
            attention_enabled,
        })
    }

    /// `x + SRA(LN x)`, then `x + FFN(LN x)`. Without attention the first
    /// residual branch is skipped.
    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let mut x = x;
        if self.attention_enabled {
            let n = self.norm1.forward(g, x)?;
            let a = self.attn.forward(g, n, h, w)?;
            x = g.tape.add(x, a)?;
        }
        let n = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, n, h, w)?;
        Ok(g.tape.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub cfg: StageConfig,
}

impl Stage {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (mut t, h, w) = self.embed.forward(g, x)?;
        for b in &self.blocks {
            t = b.forward(g, t, h, w)?;
        }
        let t = self.norm.forward(g, t)?;
        tokens_to_map(g, t, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Stage>,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, sc) in cfg.stages().into_iter().enumerate() {
            sc.validate()?;
            let prefix = format!("{name}.stage{}", i + 1);
            let embed = PatchEmbed::new(store, init, &format!("{prefix}.patch_embed"), in_ch, &sc)?;
            let blocks = (0..sc.depth)
                .map(|b| EncoderBlock::new(store, init, &format!("{prefix}.block{b}"), &sc, cfg.attention_enabled))
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(store, &format!("{prefix}.norm"), sc.embed_dim)?;
            in_ch = sc.embed_dim;
            stages.push(Stage { embed, blocks, norm, cfg: sc });
        }
        Ok(Self { stages, cfg: cfg.clone() })
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<PyramidFeatures> {
        let s = g.tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] < 32 || s[3] < 32 {
            return Err(TensorError::Dimension(format!("backbone needs [N, 3, H≥32, W≥32], got {s:?}")).into());
        }
        let mut maps = Vec::with_capacity(4);
        let mut x = image;
        for st in &self.stages {
            x = st.forward(g, x)?;
            maps.push(x);
        }
        Ok(PyramidFeatures { maps: [maps[0], maps[1], maps[2], maps[3]] })
    }
}

/// Spatial size of each pyramid level for an `h × w` input.
pub fn pyramid_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    STAGE_STRIDES.map(|s| (h.div_ceil(s), w.div_ceil(s)))
}
