//! The assembled detector: backbone, neck, 2D heads and RoI-based 3D heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Variant};
use crate::geometry::CameraCalib;
use crate::heads::{decode_box3d, decode_heatmap_peaks, roi_crop, Detection2D, Detection3D, Heads2D, Heads2DVars, Heads3D, Heads3DOutput, HeadConfig};
use crate::losses::{total_loss, LossReport, TargetMaps, TaskWeights};
use crate::neck::{Neck, NeckConfig};
use crate::nn::{Graph, Init, NetError, ParamStore, Result};
use crate::tensor::{Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub attention_enabled: bool,
    pub neck: NeckConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, attention_enabled: bool) -> Self {
        Self { variant, attention_enabled, neck: NeckConfig::default(), heads: HeadConfig::default() }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { variant: self.variant, attention_enabled: self.attention_enabled }
    }
}

/// One RoI as a `[1, C, r, r]` batch row.
fn crop(g: &mut Graph, f: Var, batch: usize, bbox: [f64; 4], r: usize) -> Result<Var> {
    let c = roi_crop(g, f, batch, bbox, r)?;
    let s = g.tape.shape(c).to_vec();
    Ok(g.tape.reshape(c, &[1, s[0], s[1], s[2]])?)
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub heads2d: Heads2D,
    pub heads3d: Heads3D,
}

/// Peak decoding knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub k: usize,
    /// Minimum heatmap peak value.
    pub score_threshold: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { k: 50, score_threshold: 0.2 }
    }
}

/// Detections of one image plus the peaks that could not be lifted to 3D.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub peaks: Vec<Detection2D>,
    pub detections: Vec<Detection3D>,
    pub dropped: usize,
}

impl Detector {
    /// Registers all parameters under `backbone.`, `neck.`, `heads2d.` and
    /// `heads3d.`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.heads.validate()?;
        let mut init = Init::new(seed);
        let bcfg = cfg.backbone();
        let backbone = Backbone::new(store, &mut init, "backbone", &bcfg)?;
        let neck = Neck::new(store, &mut init, "neck", bcfg.out_channels(), &cfg.neck)?;
        let c = cfg.neck.slice_channels;
        let heads2d = Heads2D::new(store, &mut init, "heads2d", c, &cfg.heads)?;
        let heads3d = Heads3D::new(store, &mut init, "heads3d", c, &cfg.heads)?;
        Ok(Self { cfg: cfg.clone(), backbone, neck, heads2d, heads3d })
    }

    /// Stride-4 feature map of `[N, 3, H, W]` images.
    pub fn features(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let s = g.tape.shape(images).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!("images must be [N, 3, H, W], got {s:?}")).into());
        }
        let feats = self.backbone.forward(g, images)?;
        self.neck.forward(g, &feats, (s[2], s[3]))
    }

    /// Training loss; the 3D heads see RoIs cut at the ground-truth 2D boxes.
    pub fn loss(&self, g: &mut Graph, images: &Tensor, targets: &TargetMaps, weights: &TaskWeights) -> Result<LossReport> {
        let x = g.input(images.clone());
        let f = self.features(g, x)?;
        let h2d = self.heads2d.forward(g, f)?;
        let h3d = if targets.objects.is_empty() {
            None
        } else {
            let r = self.cfg.heads.roi_size;
            let crops = targets
                .objects
                .iter()
                .map(|o| crop(g, f, o.batch, o.targets.box2d, r))
                .collect::<Result<Vec<_>>>()?;
            let rois = g.tape.concat(&crops, 0)?;
            Some(self.heads3d.forward(g, rois)?)
        };
        total_loss(g, &h2d, h3d.as_ref(), targets, &self.cfg.heads.size_priors, weights)
    }

    /// 2D head outputs of a batch without gradient tracking.
    pub fn heads2d_values(&self, g: &mut Graph, images: &Tensor) -> Result<(Var, Heads2DVars)> {
        let x = g.input(images.clone());
        let f = self.features(g, x)?;
        Ok((f, self.heads2d.forward(g, f)?))
    }

    /// Full pipeline on one `[3, H, W]` image.
    pub fn detect(&self, store: &ParamStore, image: &Tensor, calib: &CameraCalib, opts: &DecodeOptions) -> Result<Inference> {
        let s = image.shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(TensorError::Dimension(format!("image must be [3, H, W], got {s:?}")).into());
        }
        if opts.k == 0 || !(0.0..1.0).contains(&opts.score_threshold) {
            return Err(NetError::Config(format!("need k ≥ 1 and threshold in [0, 1), got {} and {}", opts.k, opts.score_threshold)));
        }
        let (h, w) = (s[1], s[2]);
        let batch = image.reshape(&[1, 3, h, w])?;
        let mut g = Graph::new(store, false);
        let (f, h2d) = self.heads2d_values(&mut g, &batch)?;
        let peaks = decode_heatmap_peaks(
            g.tape.value(h2d.heatmap),
            g.tape.value(h2d.offset2d),
            g.tape.value(h2d.size2d),
            0,
            opts.k,
            opts.score_threshold,
        );
        let mut detections = Vec::new();
        let mut dropped = 0;
        let r = self.cfg.heads.roi_size;
        let usable: Vec<&Detection2D> = peaks
            .iter()
            .filter(|p| {
                let b = p.clamped_bbox((h, w));
                let ok = b[2] > b[0] && b[3] > b[1];
                dropped += usize::from(!ok);
                ok
            })
            .collect();
        if !usable.is_empty() {
            let crops = usable.iter().map(|p| crop(&mut g, f, 0, p.clamped_bbox((h, w)), r)).collect::<Result<Vec<_>>>()?;
            let rois = g.tape.concat(&crops, 0)?;
            let v = self.heads3d.forward(&mut g, rois)?;
            for (i, p) in usable.iter().enumerate() {
                let out = Heads3DOutput::from_vars(&g, &v, i, p.class_id, self.cfg.heads.size_priors[p.class_id]);
                match decode_box3d(p, &out, calib) {
                    Ok(d) => detections.push(d),
                    Err(e) => {
                        log::debug!("peak at ({:.1}, {:.1}) not lifted: {e}", p.center[0], p.center[1]);
                        dropped += 1;
                    }
                }
            }
        }
        Ok(Inference { peaks, detections, dropped })
    }
}
