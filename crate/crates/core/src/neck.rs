//! Iterative deep aggregation of the pyramid into one stride-4 map.

use serde::{Deserialize, Serialize};

use crate::backbone::PyramidFeatures;
use crate::nn::{Conv2d, ConvSpec, Graph, Init, LayerNorm, NetError, ParamStore, Result};
use crate::tensor::{TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeckConfig {
    pub out_channels: usize,
    pub slice_channels: usize,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self { out_channels: 64, slice_channels: 64 }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slice_channels == 0 || self.out_channels < self.slice_channels {
            return Err(NetError::Config(format!(
                "neck out_channels {} must be at least slice_channels {}",
                self.out_channels, self.slice_channels
            )));
        }
        if self.out_channels < 64 {
            return Err(NetError::Config(format!("neck out_channels {} is below 64", self.out_channels)));
        }
        Ok(())
    }
}

/// 1×1 projection + channel norm + GELU for one pyramid level.
#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub proj: Vec<Projection>,
    /// `fuse[i]` merges level `i` with the upsampled deeper result.
    pub fuse: Vec<Conv2d>,
    pub cfg: NeckConfig,
}

impl Neck {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_channels: [usize; 4], cfg: &NeckConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.out_channels;
        let mut proj = Vec::new();
        for (i, &ch) in in_channels.iter().enumerate() {
            proj.push(Projection {
                conv: Conv2d::new(store, init, &format!("{name}.proj{}", i + 1), ConvSpec::new(ch, c, 1, 1, 0))?,
                norm: LayerNorm::new(store, &format!("{name}.proj{}_norm", i + 1), c)?,
            });
        }
        let fuse = (0..3)
            .map(|i| Conv2d::new(store, init, &format!("{name}.fuse{}", i + 1), ConvSpec::new(c, c, 3, 1, 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { proj, fuse, cfg: cfg.clone() })
    }

    /// Full-width aggregate `[N, out_channels, H1, W1]` at the stage-1 size.
    pub fn aggregate(&self, g: &mut Graph, feats: &PyramidFeatures) -> Result<Var> {
        let mut levels = Vec::with_capacity(4);
        for (p, &f) in self.proj.iter().zip(&feats.maps) {
            let y = p.conv.forward(g, f)?;
            let y = p.norm.forward_channels(g, y)?;
            levels.push(g.tape.gelu(y)?);
        }
        for i in 0..3 {
            let (a, b) = (g.tape.shape(levels[i]).to_vec(), g.tape.shape(levels[i + 1]).to_vec());
            if b[2] != a[2].div_ceil(2) || b[3] != a[3].div_ceil(2) || a[0] != b[0] {
                return Err(TensorError::Dimension(format!("pyramid level {} {:?} does not halve {:?}", i + 2, b, a)).into());
            }
        }
        let mut cur = levels[3];
        for i in (0..3).rev() {
            let s = g.tape.shape(levels[i]).to_vec();
            let up = g.tape.bilinear_resize(cur, s[2], s[3])?;
            let sum = g.tape.add(levels[i], up)?;
            let y = self.fuse[i].forward(g, sum)?;
            cur = g.tape.gelu(y)?;
        }
        Ok(cur)
    }

    /// Aggregate, resize to stride 4 of the input, keep the first
    /// `slice_channels` channels.
    pub fn forward(&self, g: &mut Graph, feats: &PyramidFeatures, input_hw: (usize, usize)) -> Result<Var> {
        let agg = self.aggregate(g, feats)?;
        let (th, tw) = (input_hw.0.div_ceil(4), input_hw.1.div_ceil(4));
        let s = g.tape.shape(agg).to_vec();
        let agg = if (s[2], s[3]) != (th, tw) { g.tape.bilinear_resize(agg, th, tw)? } else { agg };
        if self.cfg.slice_channels == self.cfg.out_channels {
            return Ok(agg);
        }
        Ok(g.tape.narrow(agg, 1, 0, self.cfg.slice_channels)?)
    }
}
