//! Finite-difference verification of every differentiable op and of the
//! assembled desk-scale network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, EncoderBlock, StageConfig, Variant};
use crate::heads::{roi_crop, HeadConfig, Heads2D, Heads2DVars, Heads3D, Heads3DVars, ObjectTargets};
use crate::losses::{total_loss, AssignedObject, TargetMaps, TaskWeights};
use crate::neck::{Neck, NeckConfig};
use crate::nn::{check_param_grads_above, Graph, Init, NetError, ParamId, ParamStore};
use crate::tensor::{grad_check_params, GradCheckReport, OpKind, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Network-level samples whose analytic and numeric gradients both fall
/// below this are not scored; central differences at [`GRAD_EPS`] carry
/// about 1e-10 of absolute rounding noise.
pub const RESOLUTION_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Where the error peaked: a parameter name or input index, and element.
    pub worst: String,
    /// `(analytic, numeric)` there.
    pub worst_values: (f64, f64),
    pub checked: usize,
    pub skipped: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }

    fn from_report(name: &str, r: GradCheckReport, label: impl Fn(usize) -> String) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            worst: format!("{}[{}]", label(r.worst.0), r.worst.1),
            worst_values: r.worst_values,
            checked: r.checked,
            skipped: r.skipped,
        }
    }
}

/// Values in `±[0.2, 1)`, away from the kinks of abs/relu/clamp.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.random_range(0.2..1.0);
        if rng.random::<bool>() { u } else { -u }
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> crate::tensor::Result<Var> {
    let n = t.value(y).numel();
    let flat = t.reshape(y, &[n])?;
    let m = t.constant(Tensor::new(&[n], w.data()[..n].to_vec())?);
    let p = t.mul(flat, m)?;
    t.sum(p)
}

/// Probe inputs and the scalar function that exercises `kind`.
fn op_probe(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>) {
    let w = uniform(&[64], -1.0, 1.0, rng);
    let x = off_kink(&[3, 4], rng);
    use OpKind as K;
    macro_rules! unary {
        ($f:expr) => {{
            let f = $f;
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = f(t, v[0])?;
                weighted(t, y, &w)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>)
        }};
    }
    macro_rules! binary {
        ($b:expr, $f:expr) => {{
            let f = $f;
            (vec![x, $b], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = f(t, v[0], v[1])?;
                weighted(t, y, &w)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>)
        }};
    }
    let pos = uniform(&[3, 4], 0.5, 2.0, rng);
    let y = uniform(&[3, 4], -1.0, 1.0, rng);
    match kind {
        K::Leaf | K::Add => binary!(y, |t: &mut Tape, a, b| t.add(a, b)),
        K::Sub => binary!(y, |t: &mut Tape, a, b| t.sub(a, b)),
        K::Mul => binary!(y, |t: &mut Tape, a, b| t.mul(a, b)),
        K::Div => binary!(pos, |t: &mut Tape, a, b| t.div(a, b)),
        K::Scale => unary!(|t: &mut Tape, a| t.scale(a, -1.7)),
        K::AddScalar => unary!(|t: &mut Tape, a| {
            let s = t.add_scalar(a, 0.4)?;
            t.mul(s, s)
        }),
        K::Exp => unary!(|t: &mut Tape, a| t.exp(a)),
        K::Log => {
            let x = pos;
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.log(v[0])?;
                weighted(t, y, &w)
            }))
        }
        K::Abs => unary!(|t: &mut Tape, a| t.abs(a)),
        K::Sqrt => {
            let x = pos;
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sqrt(v[0])?;
                weighted(t, y, &w)
            }))
        }
        K::Sigmoid => unary!(|t: &mut Tape, a| t.sigmoid(a)),
        K::Relu => unary!(|t: &mut Tape, a| t.relu(a)),
        K::Gelu => unary!(|t: &mut Tape, a| t.gelu(a)),
        K::ClampMin => unary!(|t: &mut Tape, a| t.clamp_min(a, 0.0)),
        K::Sum => unary!(|t: &mut Tape, a| {
            let s = t.sum(a)?;
            t.exp(s)
        }),
        K::Mean => unary!(|t: &mut Tape, a| {
            let s = t.mean(a)?;
            t.exp(s)
        }),
        K::MeanLastDim => unary!(|t: &mut Tape, a| {
            let s = t.mean_lastdim(a)?;
            t.exp(s)
        }),
        K::Reshape => unary!(|t: &mut Tape, a| {
            let r = t.reshape(a, &[2, 6])?;
            t.narrow(r, 1, 1, 4)
        }),
        K::Permute => unary!(|t: &mut Tape, a| {
            let r = t.reshape(a, &[3, 2, 2])?;
            t.permute(r, &[2, 0, 1])
        }),
        K::Narrow => unary!(|t: &mut Tape, a| t.narrow(a, 1, 1, 2)),
        K::Concat => binary!(y, |t: &mut Tape, a, b| t.concat(&[a, b, a], 1)),
        K::Pad2d => unary!(|t: &mut Tape, a| {
            let r = t.reshape(a, &[1, 1, 3, 4])?;
            let p = t.pad2d(r, [1, 0, 2, 1])?;
            t.exp(p)
        }),
        K::MatMul => binary!(uniform(&[4, 2], -1.0, 1.0, rng), |t: &mut Tape, a, b| t.matmul(a, b)),
        K::AddBias => binary!(uniform(&[4], -1.0, 1.0, rng), |t: &mut Tape, a, b| {
            let s = t.add_bias(a, b, 1)?;
            t.exp(s)
        }),
        K::Conv2d => {
            let inputs = vec![
                uniform(&[1, 2, 4, 5], -1.0, 1.0, rng),
                uniform(&[4, 1, 3, 3], -1.0, 1.0, rng),
                uniform(&[4], -1.0, 1.0, rng),
            ];
            (inputs, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)?;
                weighted(t, y, &w)
            }))
        }
        K::Softmax => unary!(|t: &mut Tape, a| t.softmax(a)),
        K::LogSoftmax => unary!(|t: &mut Tape, a| t.log_softmax(a)),
        K::LayerNorm => {
            let inputs = vec![x, uniform(&[4], 0.5, 1.5, rng), uniform(&[4], -1.0, 1.0, rng)];
            (inputs, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted(t, y, &w)
            }))
        }
        K::Bilinear => unary!(|t: &mut Tape, a| {
            let r = t.reshape(a, &[1, 1, 3, 4])?;
            t.bilinear_resize(r, 5, 7)
        }),
        K::RoiAlign => unary!(|t: &mut Tape, a| {
            let r = t.reshape(a, &[1, 1, 3, 4])?;
            t.roi_align(r, 0, [0.3, 0.2, 3.7, 2.6], 3)
        }),
        K::Gather => unary!(|t: &mut Tape, a| t.gather(a, &[0, 5, 5, 11, 2])),
        K::FocalLoss => {
            let gt = Tensor::from_fn(&[3, 4], |i| if i == 5 { 1.0 } else { 0.1 * (i % 4) as f64 });
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = t.sigmoid(v[0])?;
                t.focal_loss(s, &gt, 2.0, 4.0)
            }))
        }
    }
}

/// One check per op kind, over every input element.
pub fn op_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<ComponentCheck>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &kind in OpKind::ALL.iter().filter(|&&k| k != OpKind::Leaf) {
        let (inputs, f) = op_probe(kind, &mut rng);
        let samples: Vec<(usize, usize)> = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
        let r = grad_check_params(|t, v| f(t, v), &inputs, GRAD_EPS, &samples, fault)?;
        out.push(ComponentCheck::from_report(kind.name(), r, |i| format!("input{i}")));
    }
    Ok(out)
}

fn sample(store: &ParamStore, ids: impl Iterator<Item = ParamId>, per: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let mut s = Vec::new();
    for id in ids {
        let n = store.get(id).numel();
        for _ in 0..per.min(n) {
            s.push((id, rng.random_range(0..n)));
        }
    }
    s
}

/// Weighted sum of a few seeded output elements.
fn probe(g: &mut Graph, x: Var, rng_seed: u64) -> Result<Var, NetError> {
    let n = g.tape.value(x).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let idx: Vec<usize> = (0..PROBE_TAPS.min(n)).map(|_| rng.random_range(0..n)).collect();
    let w = uniform(&[idx.len()], -1.0, 1.0, &mut rng);
    let flat = g.tape.reshape(x, &[n])?;
    let picked = g.tape.gather(flat, &idx)?;
    Ok(weighted(&mut g.tape, picked, &w)?)
}

const PROBE_TAPS: usize = 8;

/// Redraws every parameter at variance-preserving scale: weights uniform
/// with variance `1/fan_in`, norm gains around 1, other vectors around 0.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let is_gain = ["norm.weight", "norm1.weight", "norm2.weight"].iter().any(|s| store.name(id).ends_with(s));
        let t = store.get_mut(id);
        let shape = t.shape().to_vec();
        let a = match shape.len() {
            4 => (3.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt(),
            2 => (3.0 / shape[0] as f64).sqrt(),
            _ => 0.5,
        };
        let base = if is_gain { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = base + rng.random_range(-a..a));
    }
}

fn param_name(store: &ParamStore, index: usize) -> String {
    store.ids().nth(index).map_or_else(String::new, |id| store.name(id).to_string())
}

fn small_heads() -> HeadConfig {
    HeadConfig { head_channels: 8, trunk_channels: 8, roi_size: 3, ..HeadConfig::default() }
}

/// Encoder blocks, neck, heads, losses and the end-to-end desk network.
pub fn network_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<ComponentCheck>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let cfg = StageConfig::new(2, 8, 2, 2, 2, 2.0);
        let init = &mut Init::new(seed);
        let blocks: Vec<EncoderBlock> =
            (0..2).map(|i| EncoderBlock::new(&mut store, init, &format!("b{i}"), &cfg, true)).collect::<Result<_, _>>()?;
        randomize(&mut store, &mut rng);
        let x = uniform(&[1, 12, 8], -1.0, 1.0, &mut rng);
        let samples = sample(&store, store.ids(), 2, &mut rng);
        let r = check_param_grads_above(
            &store,
            |g| {
                let mut t = g.input(x.clone());
                for b in &blocks {
                    t = b.forward(g, t, 3, 4)?;
                }
                probe(g, t, seed)
            },
            GRAD_EPS,
            &samples,
            fault,
            RESOLUTION_FLOOR,
        )?;
        out.push(ComponentCheck::from_report("encoder_blocks", r, |i| param_name(&store, i)));
    }

    let mut store = ParamStore::new();
    let init = &mut Init::new(seed);
    let bb = Backbone::new(&mut store, init, "backbone", &BackboneConfig::new(Variant::Desk))?;
    let n_backbone = store.len();
    let neck = Neck::new(&mut store, init, "neck", bb.cfg.out_channels(), &NeckConfig::default())?;
    let n_neck = store.len();
    let hc = small_heads();
    let h2 = Heads2D::new(&mut store, init, "heads2d", 64, &hc)?;
    let h3 = Heads3D::new(&mut store, init, "heads3d", 64, &hc)?;
    randomize(&mut store, &mut rng);
    let img = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);

    let forward = |g: &mut Graph, heads: bool| -> Result<Var, NetError> {
        let x = g.input(img.clone());
        let f = bb.forward(g, x)?;
        let y = neck.forward(g, &f, (32, 32))?;
        if !heads {
            return probe(g, y, seed + 1);
        }
        let o = h2.forward(g, y)?;
        let roi = roi_crop(g, y, 0, [3.0, 5.0, 27.0, 30.0], hc.roi_size)?;
        let roi = g.tape.reshape(roi, &[1, 64, hc.roi_size, hc.roi_size])?;
        let o3 = h3.forward(g, roi)?;
        let mut acc = probe(g, o.heatmap, seed + 2)?;
        for (i, v) in [o.offset2d, o.size2d, o3.offset3d, o3.angle_logits, o3.angle_residuals, o3.size_residuals, o3.h3d_log_sigma, o3.depth_bias, o3.depth_log_sigma]
            .into_iter()
            .enumerate()
        {
            let p = probe(g, v, seed + 3 + i as u64)?;
            acc = g.tape.add(acc, p)?;
        }
        Ok(acc)
    };

    let neck_ids = (n_backbone..n_neck).filter_map(|i| store.ids().nth(i));
    let samples = sample(&store, neck_ids, 2, &mut rng);
    let r = check_param_grads_above(&store, |g| forward(g, false), GRAD_EPS, &samples, fault, RESOLUTION_FLOOR)?;
    out.push(ComponentCheck::from_report("neck", r, |i| param_name(&store, i)));

    let head_ids = store.ids().skip(n_neck);
    let samples = sample(&store, head_ids, 3, &mut rng);
    let r = check_param_grads_above(&store, |g| forward(g, true), GRAD_EPS, &samples, fault, RESOLUTION_FLOOR)?;
    out.push(ComponentCheck::from_report("heads", r, |i| param_name(&store, i)));

    let samples = sample(&store, store.ids().take(n_backbone), 1, &mut rng);
    let r = check_param_grads_above(&store, |g| forward(g, true), GRAD_EPS, &samples, fault, RESOLUTION_FLOOR)?;
    out.push(ComponentCheck::from_report("end_to_end", r, |i| param_name(&store, i)));

    out.push(loss_check(seed, fault)?);
    Ok(out)
}

/// All nine loss terms with respect to every head output.
fn loss_check(seed: u64, fault: Option<OpKind>) -> Result<ComponentCheck, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let (h, w, m) = (4, 5, 2);
    let priors = vec![[1.5, 1.6, 3.9], [1.7, 0.6, 0.8], [1.7, 0.6, 1.8]];
    let objects: Vec<AssignedObject> = (0..m)
        .map(|i| AssignedObject {
            batch: 0,
            cell: (1 + i, 2 * i + 1),
            offset2d: [0.3, 0.6],
            targets: ObjectTargets {
                class_id: i,
                box2d: [0.0, 0.0, 30.0, 40.0],
                center2d: [15.0, 20.0],
                size2d: [30.0, 40.0],
                offset3d: [1.0, -0.5],
                angle_bin: 3 + 4 * i,
                angle_residual: 0.1,
                dimensions: [1.5, 1.6, 3.6],
                depth: 8.0,
            },
            focal: 60.0,
        })
        .collect();
    let mut heat_gt = uniform(&[1, 3, h, w], 0.0, 0.6, &mut rng);
    for o in &objects {
        heat_gt.data_mut()[(o.targets.class_id * h + o.cell.0) * w + o.cell.1] = 1.0;
    }
    let targets = TargetMaps { heatmap: heat_gt, objects, skipped: 0 };
    let mut store = ParamStore::new();
    let shapes: [&[usize]; 10] = [&[1, 3, h, w], &[1, 2, h, w], &[1, 2, h, w], &[m, 2], &[m, 12], &[m, 12], &[m, 9], &[m, 1], &[m, 1], &[m, 1]];
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = if i == 0 { uniform(s, 0.1, 0.9, &mut rng) } else { uniform(s, -0.8, 0.8, &mut rng) };
            store.add(&format!("out{i}"), t)
        })
        .collect::<Result<_, _>>()?;
    let samples: Vec<_> = store.iter().flat_map(|(id, _, t)| (0..t.numel()).map(move |j| (id, j))).collect();
    let r = check_param_grads_above(
        &store,
        |g| {
            let p: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let h2 = Heads2DVars { heatmap: p[0], offset2d: p[1], size2d: p[2] };
            let h3 = Heads3DVars {
                offset3d: p[3],
                angle_logits: p[4],
                angle_residuals: p[5],
                size_residuals: p[6],
                h3d_log_sigma: p[7],
                depth_bias: p[8],
                depth_log_sigma: p[9],
            };
            Ok(total_loss(g, &h2, Some(&h3), &targets, &priors, &TaskWeights::ones())?.total)
        },
        GRAD_EPS,
        &samples,
        fault,
        0.0,
    )?;
    Ok(ComponentCheck::from_report("losses", r, |i| param_name(&store, i)))
}

/// Op checks followed by network checks.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<ComponentCheck>, NetError> {
    let mut all = op_checks(seed, fault)?;
    all.extend(network_checks(seed, fault)?);
    Ok(all)
}
