//! 2D and 3D detection heads, peak decoding and box recovery.
//!
//! Image coordinates are `(u, v) = (x, y)`: u grows to the right, v
//! downwards. Heatmap cell `(i, j)` (row, column) with zero offset decodes to
//! input pixel `(4j, 4i)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Box3D, CameraCalib, GeometryError};
use crate::nn::{Conv2d, ConvSpec, Graph, Init, Linear, NetError, ParamStore, Result};
use crate::tensor::{Tensor, TensorError, Var};

/// Output stride of the neck map.
pub const DOWN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    /// Hidden width of each 2D head.
    pub head_channels: usize,
    /// Width of the shared 3D trunk.
    pub trunk_channels: usize,
    pub roi_size: usize,
    pub angle_bins: usize,
    /// Mean `(h, w, l)` per class.
    pub size_priors: Vec<[f64; 3]>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            head_channels: 32,
            trunk_channels: 32,
            roi_size: 7,
            angle_bins: 12,
            size_priors: crate::kitti::ObjectClass::ALL.iter().map(|c| c.mean_dimensions()).collect(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.size_priors.len() != self.num_classes {
            return Err(NetError::Config(format!("{} size priors for {} classes", self.size_priors.len(), self.num_classes)));
        }
        if self.size_priors.iter().flatten().any(|v| *v <= 0.0) {
            return Err(NetError::Config("size priors must be positive".into()));
        }
        if self.head_channels == 0 || self.trunk_channels == 0 || self.roi_size == 0 || self.angle_bins < 2 {
            return Err(NetError::Config(format!("invalid head config {self:?}")));
        }
        Ok(())
    }
}

/// Heatmap logit bias at init; sigmoid(-2.19) ≈ 0.1.
pub const HEATMAP_BIAS: f64 = -2.19;
/// Weight std of the final 1×1 conv of each 2D head.
pub const OUTPUT_STD: f64 = 1e-3;

/// 3×3 conv → GELU → 1×1 conv.
#[derive(Clone, Debug)]
pub struct ConvHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl ConvHead {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_ch: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, init, &format!("{name}.0"), ConvSpec::new(in_ch, hidden, 3, 1, 1))?,
            out: Conv2d::new(store, init, &format!("{name}.1"), ConvSpec::new(hidden, out, 1, 1, 0))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.hidden.forward(g, x)?;
        let y = g.tape.gelu(y)?;
        self.out.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct Heads2D {
    pub heatmap: ConvHead,
    pub offset: ConvHead,
    pub size: ConvHead,
}

/// Graph handles of the 2D head outputs.
#[derive(Clone, Copy, Debug)]
pub struct Heads2DVars {
    /// Post-sigmoid confidences `[N, classes, h, w]`.
    pub heatmap: Var,
    /// `[N, 2, h, w]`, output-map pixels.
    pub offset2d: Var,
    /// `[N, 2, h, w]`, input pixels.
    pub size2d: Var,
}

impl Heads2D {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_ch: usize, cfg: &HeadConfig) -> Result<Self> {
        let heatmap = ConvHead::new(store, init, &format!("{name}.heatmap"), in_ch, cfg.head_channels, cfg.num_classes)?;
        store.get_mut(heatmap.out.bias).data_mut().iter_mut().for_each(|b| *b = HEATMAP_BIAS);
        let offset = ConvHead::new(store, init, &format!("{name}.offset2d"), in_ch, cfg.head_channels, 2)?;
        let size = ConvHead::new(store, init, &format!("{name}.size2d"), in_ch, cfg.head_channels, 2)?;
        for head in [&heatmap, &offset, &size] {
            let w = store.get_mut(head.out.weight);
            let fresh = init.normal(w.shape(), OUTPUT_STD);
            w.data_mut().copy_from_slice(fresh.data());
        }
        Ok(Self { heatmap, offset, size })
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Result<Heads2DVars> {
        let logits = self.heatmap.forward(g, f)?;
        Ok(Heads2DVars {
            heatmap: g.tape.sigmoid(logits)?,
            offset2d: self.offset.forward(g, f)?,
            size2d: self.size.forward(g, f)?,
        })
    }
}

/// A decoded heatmap peak.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection2D {
    pub class_id: usize,
    pub score: f64,
    /// `(u, v)` in input-image pixels.
    pub center: [f64; 2],
    /// `(w, h)` in input-image pixels.
    pub size: [f64; 2],
}

impl Detection2D {
    /// `[left, top, right, bottom]`, unclamped.
    pub fn bbox(&self) -> [f64; 4] {
        let [u, v] = self.center;
        let [w, h] = self.size;
        [u - w / 2.0, v - h / 2.0, u + w / 2.0, v + h / 2.0]
    }

    pub fn clamped_bbox(&self, image_size: (usize, usize)) -> [f64; 4] {
        let b = self.bbox();
        let (mh, mw) = (image_size.0 as f64, image_size.1 as f64);
        [b[0].clamp(0.0, mw), b[1].clamp(0.0, mh), b[2].clamp(0.0, mw), b[3].clamp(0.0, mh)]
    }
}

/// Local maxima of image `batch` under 3×3 suppression (ties survive), best
/// `k` at or above `threshold`, sorted by score with ties in
/// class-row-column order.
pub fn decode_heatmap_peaks(heatmap: &Tensor, offset2d: &Tensor, size2d: &Tensor, batch: usize, k: usize, threshold: f64) -> Vec<Detection2D> {
    let s = heatmap.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let hm = &heatmap.data()[batch * c * h * w..(batch + 1) * c * h * w];
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for cls in 0..c {
        let plane = &hm[cls * h * w..(cls + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                if v < threshold {
                    continue;
                }
                let mut is_max = true;
                'nb: for di in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for dj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        if plane[di * w + dj] > v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    peaks.push((v, cls, i, j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(k);
    let (od, sd) = (offset2d.data(), size2d.data());
    let at = |d: &[f64], ch: usize, i: usize, j: usize| d[((batch * 2 + ch) * h + i) * w + j];
    peaks
        .into_iter()
        .map(|(score, class_id, i, j)| Detection2D {
            class_id,
            score,
            center: [(j as f64 + at(od, 0, i, j)) * DOWN, (i as f64 + at(od, 1, i, j)) * DOWN],
            size: [at(sd, 0, i, j), at(sd, 1, i, j)],
        })
        .collect()
}

/// RoI-align crop `[C, r, r]` of the input-pixel box `[l, t, r, b]`.
pub fn roi_crop(g: &mut Graph, f: Var, batch: usize, bbox: [f64; 4], r: usize) -> Result<Var> {
    let fb = bbox.map(|v| v / DOWN);
    Ok(g.tape.roi_align(f, batch, fb, r)?)
}

/// Shared 3×3 trunk → GELU → global average pool → per-task linear layers.
#[derive(Clone, Debug)]
pub struct Heads3D {
    pub trunk: Conv2d,
    pub offset3d: Linear,
    pub angle: Linear,
    pub size3d: Linear,
    pub depth: Linear,
    pub num_classes: usize,
    pub bins: usize,
}

/// Graph handles for a batch of `R` RoIs.
#[derive(Clone, Copy, Debug)]
pub struct Heads3DVars {
    /// `[R, 2]`, pixels.
    pub offset3d: Var,
    /// `[R, B]`
    pub angle_logits: Var,
    /// `[R, B]`, radians.
    pub angle_residuals: Var,
    /// `[R, 3·classes]`, meters, added to the class prior.
    pub size_residuals: Var,
    /// `[R, 1]`, log standard deviation of h3d.
    pub h3d_log_sigma: Var,
    /// `[R, 1]`, meters.
    pub depth_bias: Var,
    /// `[R, 1]`, log standard deviation of the bias.
    pub depth_log_sigma: Var,
}

impl Heads3D {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_ch: usize, cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.trunk_channels;
        Ok(Self {
            trunk: Conv2d::new(store, init, &format!("{name}.trunk"), ConvSpec::new(in_ch, t, 3, 1, 1))?,
            offset3d: Linear::new(store, init, &format!("{name}.offset3d"), t, 2)?,
            angle: Linear::new(store, init, &format!("{name}.angle"), t, 2 * cfg.angle_bins)?,
            size3d: Linear::new(store, init, &format!("{name}.size3d"), t, 3 * cfg.num_classes + 1)?,
            depth: Linear::new(store, init, &format!("{name}.depth"), t, 2)?,
            num_classes: cfg.num_classes,
            bins: cfg.angle_bins,
        })
    }

    /// `rois` is `[R, C, r, r]`.
    pub fn forward(&self, g: &mut Graph, rois: Var) -> Result<Heads3DVars> {
        let s = g.tape.shape(rois).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!("3D heads need [R, C, r, r], got {s:?}")).into());
        }
        let y = self.trunk.forward(g, rois)?;
        let y = g.tape.gelu(y)?;
        let ys = g.tape.shape(y).to_vec();
        let y = g.tape.reshape(y, &[ys[0], ys[1], ys[2] * ys[3]])?;
        let pooled = g.tape.mean_lastdim(y)?;
        let b = self.bins;
        let nc = 3 * self.num_classes;
        let offset3d = self.offset3d.forward(g, pooled)?;
        let angle = self.angle.forward(g, pooled)?;
        let size = self.size3d.forward(g, pooled)?;
        let depth = self.depth.forward(g, pooled)?;
        Ok(Heads3DVars {
            offset3d,
            angle_logits: g.tape.narrow(angle, 1, 0, b)?,
            angle_residuals: g.tape.narrow(angle, 1, b, b)?,
            size_residuals: g.tape.narrow(size, 1, 0, nc)?,
            h3d_log_sigma: g.tape.narrow(size, 1, nc, 1)?,
            depth_bias: g.tape.narrow(depth, 1, 0, 1)?,
            depth_log_sigma: g.tape.narrow(depth, 1, 1, 1)?,
        })
    }
}

/// Plain values of the 3D heads for one RoI.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads3DOutput {
    pub offset3d: [f64; 2],
    pub angle_logits: Vec<f64>,
    pub angle_residuals: Vec<f64>,
    /// Decoded `(h, w, l)`: prior plus residual, kept positive.
    pub size3d: [f64; 3],
    pub h3d_log_sigma: f64,
    pub depth_bias: f64,
    pub depth_log_sigma: f64,
}

/// Smallest decoded dimension, meters.
pub const MIN_DIMENSION: f64 = 0.05;

impl Heads3DOutput {
    /// Reads row `i` of a head batch, using the residuals of `class_id`.
    pub fn from_vars(g: &Graph, v: &Heads3DVars, i: usize, class_id: usize, prior: [f64; 3]) -> Self {
        let row = |var: Var| -> Vec<f64> {
            let s = g.tape.shape(var);
            let w = s[1];
            g.tape.data(var)[i * w..(i + 1) * w].to_vec()
        };
        let res = row(v.size_residuals);
        let size3d = std::array::from_fn(|k| (prior[k] + res[3 * class_id + k]).max(MIN_DIMENSION));
        let off = row(v.offset3d);
        Self {
            offset3d: [off[0], off[1]],
            angle_logits: row(v.angle_logits),
            angle_residuals: row(v.angle_residuals),
            size3d,
            h3d_log_sigma: row(v.h3d_log_sigma)[0],
            depth_bias: row(v.depth_bias)[0],
            depth_log_sigma: row(v.depth_log_sigma)[0],
        }
    }
}

/// Splits an observation angle into `(bin, residual)`. Bin `b` is centered
/// at `b·2π/B`; the residual lies in `[-π/B, π/B)`.
pub fn encode_angle(alpha: f64, bins: usize) -> (usize, f64) {
    let per = 2.0 * PI / bins as f64;
    let a = alpha.rem_euclid(2.0 * PI);
    let shifted = (a + per / 2.0).rem_euclid(2.0 * PI);
    let bin = ((shifted / per).floor() as usize).min(bins - 1);
    (bin, shifted - (bin as f64 * per + per / 2.0))
}

pub fn decode_angle(bin: usize, residual: f64, bins: usize) -> f64 {
    bin as f64 * 2.0 * PI / bins as f64 + residual
}

/// Depth from the projection `f·h3d/h2d` plus a bias, with the two
/// uncertainties propagated as independent.
pub fn gup_depth(h3d_mu: f64, h3d_sigma: f64, h2d: f64, f: f64, bias_mu: f64, bias_sigma: f64) -> std::result::Result<(f64, f64), GeometryError> {
    if !(h2d > 0.0) {
        return Err(GeometryError::Degenerate(format!("2D height {h2d} must be positive")));
    }
    if !(f > 0.0 && h3d_mu > 0.0) {
        return Err(GeometryError::Degenerate(format!("focal {f} and 3D height {h3d_mu} must be positive")));
    }
    let mu = f * h3d_mu / h2d + bias_mu;
    let proj_sigma = f * h3d_sigma / h2d;
    Ok((mu, (proj_sigma * proj_sigma + bias_sigma * bias_sigma).sqrt()))
}

/// Smallest 2D height that is decoded; lower ones are dropped.
pub const MIN_BOX_HEIGHT: f64 = 1.0;

/// Final detection in camera coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection3D {
    pub class_id: usize,
    pub score: f64,
    /// Bottom-face center, meters.
    pub location: [f64; 3],
    /// `(h, w, l)`, meters.
    pub dimensions: [f64; 3],
    pub yaw: f64,
    pub depth_sigma: f64,
}

impl Detection3D {
    pub fn to_box3d(&self) -> Box3D {
        Box3D {
            location: self.location,
            dimensions: self.dimensions,
            yaw: self.yaw,
            class_id: self.class_id,
            score: Some(self.score),
        }
    }
}

/// Lifts a 2D detection to 3D. Fails for 2D heights at or below one pixel.
pub fn decode_box3d(det: &Detection2D, out: &Heads3DOutput, calib: &CameraCalib) -> std::result::Result<Detection3D, GeometryError> {
    let h2d = det.size[1];
    if !(h2d > MIN_BOX_HEIGHT) {
        return Err(GeometryError::Degenerate(format!("2D height {h2d:.3} px too small")));
    }
    let [h, w, l] = out.size3d;
    let (z, sigma) = gup_depth(h, out.h3d_log_sigma.exp(), h2d, calib.fv(), out.depth_bias, out.depth_log_sigma.exp())?;
    if !(z > 0.0) || !z.is_finite() {
        return Err(GeometryError::Degenerate(format!("depth {z} not in front of the camera")));
    }
    let u = det.center[0] + out.offset3d[0];
    let v = det.center[1] + out.offset3d[1];
    let c = calib.unproject(u, v, z);
    let bins = out.angle_logits.len();
    let bin = out
        .angle_logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > out.angle_logits[best] { i } else { best });
    let alpha = decode_angle(bin, out.angle_residuals[bin], bins);
    Ok(Detection3D {
        class_id: det.class_id,
        score: det.score * (-sigma).exp(),
        location: [c[0], c[1] + h / 2.0, c[2]],
        dimensions: [h, w, l],
        yaw: wrap_angle(alpha + c[0].atan2(c[2])),
        depth_sigma: sigma,
    })
}

/// Regression targets of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTargets {
    pub class_id: usize,
    /// Input-pixel `[l, t, r, b]` box the object is detected by.
    pub box2d: [f64; 4],
    pub center2d: [f64; 2],
    pub size2d: [f64; 2],
    /// Projected 3D center minus the 2D center, pixels.
    pub offset3d: [f64; 2],
    pub angle_bin: usize,
    pub angle_residual: f64,
    /// `(h, w, l)`, meters.
    pub dimensions: [f64; 3],
    /// Camera depth of the center, meters.
    pub depth: f64,
}

/// Encodes a box detected by `box2d` (clamped image envelope).
pub fn encode_object(b: &Box3D, box2d: [f64; 4], calib: &CameraCalib, bins: usize) -> std::result::Result<ObjectTargets, GeometryError> {
    let center = b.center();
    let proj = calib
        .project(center)
        .ok_or_else(|| GeometryError::Degenerate("object center behind the camera".into()))?;
    let center2d = [(box2d[0] + box2d[2]) / 2.0, (box2d[1] + box2d[3]) / 2.0];
    let alpha = wrap_angle(b.yaw - center[0].atan2(center[2]));
    let (angle_bin, angle_residual) = encode_angle(alpha, bins);
    Ok(ObjectTargets {
        class_id: b.class_id,
        box2d,
        center2d,
        size2d: [box2d[2] - box2d[0], box2d[3] - box2d[1]],
        offset3d: [proj[0] - center2d[0], proj[1] - center2d[1]],
        angle_bin,
        angle_residual,
        dimensions: b.dimensions,
        depth: center[2],
    })
}
