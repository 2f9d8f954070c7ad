//! Target assignment, the nine loss terms and hierarchical task weighting.

use std::f64::consts::SQRT_2;

use crate::geometry::{Box3D, CameraCalib};
use crate::heads::{encode_object, Heads2DVars, Heads3DVars, ObjectTargets, DOWN};
use crate::nn::{Graph, NetError, Result};
use crate::tensor::{Tensor, Var};

/// Loss terms in summation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Heatmap,
    Offset2d,
    Size2d,
    Angle,
    W3d,
    L3d,
    H3d,
    Depth,
    Offset3d,
}

pub const NUM_TERMS: usize = 9;

impl Term {
    pub const ALL: [Term; NUM_TERMS] =
        [Term::Heatmap, Term::Offset2d, Term::Size2d, Term::Angle, Term::W3d, Term::L3d, Term::H3d, Term::Depth, Term::Offset3d];

    pub fn name(self) -> &'static str {
        match self {
            Term::Heatmap => "heatmap",
            Term::Offset2d => "offset2d",
            Term::Size2d => "size2d",
            Term::Angle => "angle",
            Term::W3d => "w3d",
            Term::L3d => "l3d",
            Term::H3d => "h3d",
            Term::Depth => "depth",
            Term::Offset3d => "offset3d",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// 1: 2D terms, 2: 3D attributes, 3: depth.
    pub fn tier(self) -> usize {
        match self {
            Term::Heatmap | Term::Offset2d | Term::Size2d => 1,
            Term::Depth => 3,
            _ => 2,
        }
    }
}

/// One object written into the target maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignedObject {
    pub batch: usize,
    /// `(row, col)` of the center cell.
    pub cell: (usize, usize),
    /// Fractional center within the cell, `(u, v)` order.
    pub offset2d: [f64; 2],
    pub targets: ObjectTargets,
    /// Vertical focal length of the image's camera.
    pub focal: f64,
}

/// Targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    /// `[N, classes, h, w]`, Gaussian-splatted, 1 at centers.
    pub heatmap: Tensor,
    pub objects: Vec<AssignedObject>,
    /// Objects skipped because their center is outside the image.
    pub skipped: usize,
}

impl TargetMaps {
    /// Mask over the `[N, 2, h, w]` regression maps: true at both channels
    /// of every object cell.
    pub fn regression_mask(&self) -> Vec<bool> {
        let s = self.heatmap.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let mut m = vec![false; n * 2 * h * w];
        for o in &self.objects {
            for ch in 0..2 {
                m[((o.batch * 2 + ch) * h + o.cell.0) * w + o.cell.1] = true;
            }
        }
        m
    }
}

/// CenterNet radius for a box of `h × w` output cells such that a box shifted
/// by the radius still overlaps with IoU ≥ `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let (a1, b1, c1) = (1.0, h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let (a2, b2, c2) = (4.0, 2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (4.0 * min_overlap, -2.0 * min_overlap * (h + w), (min_overlap - 1.0) * w * h);
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Max-combines a Gaussian of integer `radius` centered at `(row, col)`.
pub fn draw_gaussian(plane: &mut [f64], h: usize, w: usize, row: usize, col: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let p = &mut plane[y as usize * w + x as usize];
            *p = p.max(v);
        }
    }
}

/// Ground truth of one image: each box with the 2D box it is detected by.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageObjects {
    pub boxes: Vec<(Box3D, [f64; 4])>,
    pub calib: CameraCalib,
}

/// Builds target maps for a batch of `image_size` images.
pub fn assign_targets(images: &[ImageObjects], image_size: (usize, usize), num_classes: usize, bins: usize) -> TargetMaps {
    let (h, w) = (image_size.0.div_ceil(4), image_size.1.div_ceil(4));
    let mut heatmap = Tensor::zeros(&[images.len(), num_classes, h, w]);
    let mut objects = Vec::new();
    let mut skipped = 0;
    for (bi, img) in images.iter().enumerate() {
        for (b, box2d) in &img.boxes {
            let Ok(t) = encode_object(b, *box2d, &img.calib, bins) else {
                skipped += 1;
                continue;
            };
            let [u, v] = t.center2d;
            if b.class_id >= num_classes || !(u >= 0.0 && v >= 0.0 && u < image_size.1 as f64 && v < image_size.0 as f64) {
                log::debug!("skipping object centered at ({u:.1}, {v:.1}) outside the image");
                skipped += 1;
                continue;
            }
            let (cu, cv) = (u / DOWN, v / DOWN);
            let cell = ((cv.floor() as usize).min(h - 1), (cu.floor() as usize).min(w - 1));
            let radius = gaussian_radius(t.size2d[1] / DOWN, t.size2d[0] / DOWN, 0.7).max(0.0) as usize;
            let plane = &mut heatmap.data_mut()[(bi * num_classes + b.class_id) * h * w..][..h * w];
            draw_gaussian(plane, h, w, cell.0, cell.1, radius);
            objects.push(AssignedObject {
                batch: bi,
                cell,
                offset2d: [cu - cell.1 as f64, cv - cell.0 as f64],
                targets: t,
                focal: img.calib.fv(),
            });
        }
    }
    TargetMaps { heatmap, objects, skipped }
}

/// Penalty-reduced focal loss with α = 2, β = 4.
pub fn focal_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    Ok(g.tape.focal_loss(pred, gt, 2.0, 4.0)?)
}

fn zero(g: &mut Graph) -> Var {
    g.tape.constant(Tensor::scalar(0.0))
}

/// Mean of `|pred[i] - target|` over the selected flat indices; 0 with no
/// gradient when `idx` is empty.
pub fn l1_gathered(g: &mut Graph, pred: Var, idx: &[usize], target: &[f64]) -> Result<Var> {
    if idx.is_empty() {
        return Ok(zero(g));
    }
    let p = g.tape.gather(pred, idx)?;
    let t = g.tape.constant(Tensor::new(&[target.len()], target.to_vec())?);
    let d = g.tape.sub(p, t)?;
    let a = g.tape.abs(d)?;
    Ok(g.tape.mean(a)?)
}

/// Mean absolute error over masked cells; 0 when the mask is empty.
pub fn l1_masked(g: &mut Graph, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    let t: Vec<f64> = idx.iter().map(|&i| target.data()[i]).collect();
    l1_gathered(g, pred, &idx, &t)
}

/// Cross-entropy on the bin logits plus L1 on the ground-truth bin's
/// residual, averaged over rows. `logits` and `residuals` are `[R, B]`.
pub fn angle_loss(g: &mut Graph, logits: Var, residuals: Var, bin_gt: &[usize], residual_gt: &[f64]) -> Result<Var> {
    if bin_gt.is_empty() {
        return Ok(zero(g));
    }
    let b = g.tape.shape(logits)[1];
    let idx: Vec<usize> = bin_gt.iter().enumerate().map(|(r, &k)| r * b + k).collect();
    let lsm = g.tape.log_softmax(logits)?;
    let picked = g.tape.gather(lsm, &idx)?;
    let ce = g.tape.mean(picked)?;
    let ce = g.tape.scale(ce, -1.0)?;
    let reg = l1_gathered(g, residuals, &idx, residual_gt)?;
    Ok(g.tape.add(ce, reg)?)
}

/// Smallest σ admitted by the Laplacian likelihood.
pub const MIN_SIGMA: f64 = 1e-6;

/// `mean(√2/σ · |μ − d| + log σ)`; μ and σ are rank-1 of equal length.
pub fn laplacian_nll(g: &mut Graph, mu: Var, sigma: Var, target: &[f64]) -> Result<Var> {
    if target.is_empty() {
        return Ok(zero(g));
    }
    let sigma = g.tape.clamp_min(sigma, MIN_SIGMA)?;
    let t = g.tape.constant(Tensor::new(&[target.len()], target.to_vec())?);
    let d = g.tape.sub(mu, t)?;
    let a = g.tape.abs(d)?;
    let a = g.tape.scale(a, SQRT_2)?;
    let r = g.tape.div(a, sigma)?;
    let l = g.tape.log(sigma)?;
    let s = g.tape.add(r, l)?;
    Ok(g.tape.mean(s)?)
}

/// Depth likelihood; identical in form to [`laplacian_nll`].
pub fn depth_loss(g: &mut Graph, depth_mu: Var, depth_sigma: Var, depth_gt: &[f64]) -> Result<Var> {
    laplacian_nll(g, depth_mu, depth_sigma, depth_gt)
}

/// Per-term weights in [`Term::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights(pub [f64; NUM_TERMS]);

impl TaskWeights {
    pub fn ones() -> Self {
        Self([1.0; NUM_TERMS])
    }

    pub fn get(&self, t: Term) -> f64 {
        self.0[t.index()]
    }

    /// `(tier 1, tier 2, tier 3)` weights, taken from heatmap, angle and depth.
    pub fn tiers(&self) -> (f64, f64, f64) {
        (self.get(Term::Heatmap), self.get(Term::Angle), self.get(Term::Depth))
    }
}

/// Weighted total with the unweighted term values.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: Var,
    pub terms: [Var; NUM_TERMS],
    pub values: [f64; NUM_TERMS],
}

/// Attributes a numeric failure to `t`.
fn in_term<T>(t: Term, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        NetError::Tensor(source) => NetError::Term { term: t.name(), source },
        other => other,
    })
}

/// Column of per-object constants.
fn column(g: &mut Graph, v: Vec<f64>) -> Result<Var> {
    let n = v.len();
    Ok(g.tape.constant(Tensor::new(&[n], v)?))
}

/// Computes every term and `Σ w_t · L_t` in [`Term::ALL`] order. `h3d` rows
/// correspond to `targets.objects`.
pub fn total_loss(
    g: &mut Graph,
    h2d: &Heads2DVars,
    h3d: Option<&Heads3DVars>,
    targets: &TargetMaps,
    priors: &[[f64; 3]],
    weights: &TaskWeights,
) -> Result<LossReport> {
    let s = targets.heatmap.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let objs = &targets.objects;
    let m = objs.len();
    let map_idx = |o: &AssignedObject, ch: usize| ((o.batch * 2 + ch) * h + o.cell.0) * w + o.cell.1;

    let heatmap = in_term(Term::Heatmap, focal_loss(g, h2d.heatmap, &targets.heatmap))?;
    let idx2: Vec<usize> = objs.iter().flat_map(|o| [map_idx(o, 0), map_idx(o, 1)]).collect();
    let off_t: Vec<f64> = objs.iter().flat_map(|o| o.offset2d).collect();
    let offset2d = in_term(Term::Offset2d, l1_gathered(g, h2d.offset2d, &idx2, &off_t))?;
    let size_t: Vec<f64> = objs.iter().flat_map(|o| o.targets.size2d).collect();
    let size2d = in_term(Term::Size2d, l1_gathered(g, h2d.size2d, &idx2, &size_t))?;

    let [angle, w3d, l3d, h3d_term, depth, offset3d] = match h3d {
        Some(v) if m > 0 => {
            let nc = 3 * priors.len();
            let cls = |o: &AssignedObject| o.targets.class_id;
            let angle = in_term(
                Term::Angle,
                angle_loss(
                    g,
                    v.angle_logits,
                    v.angle_residuals,
                    &objs.iter().map(|o| o.targets.angle_bin).collect::<Vec<_>>(),
                    &objs.iter().map(|o| o.targets.angle_residual).collect::<Vec<_>>(),
                ),
            )?;
            let dim_idx = |k: usize| -> Vec<usize> { objs.iter().enumerate().map(|(r, o)| r * nc + 3 * cls(o) + k).collect() };
            let dim_res = |k: usize| -> Vec<f64> { objs.iter().map(|o| o.targets.dimensions[k] - priors[cls(o)][k]).collect() };
            let w3d = in_term(Term::W3d, l1_gathered(g, v.size_residuals, &dim_idx(1), &dim_res(1)))?;
            let l3d = in_term(Term::L3d, l1_gathered(g, v.size_residuals, &dim_idx(2), &dim_res(2)))?;

            let (h_mu, h_sigma, h3d_term) = in_term(Term::H3d, (|| {
                let h_res = g.tape.gather(v.size_residuals, &dim_idx(0))?;
                let prior_h = column(g, objs.iter().map(|o| priors[cls(o)][0]).collect())?;
                let h_mu = g.tape.add(h_res, prior_h)?;
                let h_ls = g.tape.reshape(v.h3d_log_sigma, &[m])?;
                let h_sigma = g.tape.exp(h_ls)?;
                let h_gt: Vec<f64> = objs.iter().map(|o| o.targets.dimensions[0]).collect();
                Ok((h_mu, h_sigma, laplacian_nll(g, h_mu, h_sigma, &h_gt)?))
            })())?;

            let depth = in_term(Term::Depth, (|| {
                let k = column(g, objs.iter().map(|o| o.focal / o.targets.size2d[1].max(1.0)).collect())?;
                let proj = g.tape.mul(h_mu, k)?;
                let bias = g.tape.reshape(v.depth_bias, &[m])?;
                let d_mu = g.tape.add(proj, bias)?;
                let ps = g.tape.mul(h_sigma, k)?;
                let ps2 = g.tape.mul(ps, ps)?;
                let b_ls = g.tape.reshape(v.depth_log_sigma, &[m])?;
                let bs = g.tape.exp(b_ls)?;
                let bs2 = g.tape.mul(bs, bs)?;
                let var = g.tape.add(ps2, bs2)?;
                let d_sigma = g.tape.sqrt(var)?;
                let d_gt: Vec<f64> = objs.iter().map(|o| o.targets.depth).collect();
                depth_loss(g, d_mu, d_sigma, &d_gt)
            })())?;

            let o3: Vec<f64> = objs.iter().flat_map(|o| o.targets.offset3d).collect();
            let offset3d = in_term(Term::Offset3d, l1_gathered(g, v.offset3d, &(0..2 * m).collect::<Vec<_>>(), &o3))?;
            [angle, w3d, l3d, h3d_term, depth, offset3d]
        }
        _ => std::array::from_fn(|_| zero(g)),
    };

    let terms = [heatmap, offset2d, size2d, angle, w3d, l3d, h3d_term, depth, offset3d];
    let values = terms.map(|t| g.tape.value(t).item());
    let mut total = g.tape.scale(terms[0], weights.0[0])?;
    for i in 1..NUM_TERMS {
        let wt = g.tape.scale(terms[i], weights.0[i])?;
        total = g.tape.add(total, wt)?;
    }
    Ok(LossReport { total, terms, values })
}

/// Knobs of the task-weighting schedule.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HtlConfig {
    /// Epochs over which tier-2/3 ramps grow linearly from 0 to 1.
    pub ramp_epochs: usize,
    /// Number of most recent epochs averaged as the recent loss.
    pub recent_window: usize,
    /// Relative drop of a pre-task loss that counts as fully trained; 1.0
    /// means the loss must vanish.
    pub target_drop: f64,
}

impl Default for HtlConfig {
    fn default() -> Self {
        Self { ramp_epochs: 5, recent_window: 1, target_drop: 1.0 }
    }
}

fn progress(history: &[[f64; NUM_TERMS]], pre: &[Term], cfg: &HtlConfig) -> f64 {
    let Some(first) = history.first() else { return 0.0 };
    let win = cfg.recent_window.max(1).min(history.len());
    let recent = &history[history.len() - win..];
    let mut acc = 0.0;
    for t in pre {
        let i = t.index();
        let init = first[i];
        let now = recent.iter().map(|r| r[i]).sum::<f64>() / win as f64;
        let f = if init > 0.0 { (1.0 - now / init) / cfg.target_drop } else { 1.0 };
        acc += f.clamp(0.0, 1.0);
    }
    acc / pre.len() as f64
}

fn raw_weights(epoch: usize, history: &[[f64; NUM_TERMS]], cfg: &HtlConfig) -> [f64; NUM_TERMS] {
    let ramp = if cfg.ramp_epochs == 0 { 1.0 } else { (epoch as f64 / cfg.ramp_epochs as f64).min(1.0) };
    let tier1: Vec<Term> = Term::ALL.into_iter().filter(|t| t.tier() == 1).collect();
    let tier12: Vec<Term> = Term::ALL.into_iter().filter(|t| t.tier() <= 2).collect();
    let p2 = progress(history, &tier1, cfg);
    let p3 = progress(history, &tier12, cfg);
    Term::ALL.map(|t| match t.tier() {
        1 => 1.0,
        2 => ramp * p2,
        _ => ramp * p3,
    })
}

/// Weights for `epoch` given the unweighted term values of epochs
/// `0..epoch` (`history[e]` is epoch `e`). Each weight is the running
/// maximum of its instantaneous value, so weights never decrease.
pub fn htl_weights(epoch: usize, history: &[[f64; NUM_TERMS]], cfg: &HtlConfig) -> TaskWeights {
    let mut w = [0.0f64; NUM_TERMS];
    w[..3].iter_mut().for_each(|v| *v = 1.0);
    let upto = epoch.min(history.len());
    for e in 0..=epoch {
        let r = raw_weights(e, &history[..e.min(upto)], cfg);
        for i in 0..NUM_TERMS {
            w[i] = w[i].max(r[i]);
        }
    }
    TaskWeights(w)
}
