//! Adam training on synthetic scenes with the hierarchical task weights.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::CameraCalib;
use crate::kitti::LabelRecord;
use crate::losses::{assign_targets, htl_weights, HtlConfig, ImageObjects, Term, NUM_TERMS};
use crate::model::Detector;
use crate::nn::{Graph, NetError, ParamStore};
use crate::synth::{synth_scene_with, SynthConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {term} loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { term: &'static str, detail: String, epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Epochs at which the rate is multiplied by `decay`.
    pub decay_epochs: Vec<usize>,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1.25e-3, warmup_epochs: 5, decay_epochs: vec![90, 120], decay: 0.1, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8 }
    }
}

impl OptimConfig {
    /// Learning rate used throughout `epoch` (0-based): a half-cosine rise
    /// over the warmup epochs, then step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let warm = if epoch < self.warmup_epochs {
            0.5 * (1.0 - (PI * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64).cos())
        } else {
            1.0
        };
        let steps = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * warm * self.decay.powi(steps as i32)
    }
}

/// Adam state for every parameter of a store.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update with gradients `grads`; parameters without a gradient
    /// keep their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(crate::nn::ParamId, Vec<f64>)], lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(*id).data_mut();
            for j in 0..g.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Images with labels sharing one camera.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: (usize, usize),
    pub calib: CameraCalib,
    pub images: Vec<Tensor>,
    pub labels: Vec<Vec<LabelRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub num_images: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub max_objects: usize,
    pub synth: SynthConfig,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            num_images: 8,
            image_height: 64,
            image_width: 192,
            focal: 110.0,
            max_objects: 2,
            synth: SynthConfig { z_range: (8.0, 20.0), class_weights: [1.0, 0.0, 0.0], ..SynthConfig::default() },
        }
    }
}

impl ToySceneConfig {
    pub fn calib(&self) -> CameraCalib {
        CameraCalib::from_intrinsics(self.focal, self.image_width as f64 / 2.0, self.image_height as f64 / 2.0)
    }
}

/// Renders `cfg.num_images` scenes; image `i` uses seed `seed + i` and holds
/// between 1 and `max_objects` objects.
pub fn synth_dataset(cfg: &ToySceneConfig, seed: u64) -> Dataset {
    let calib = cfg.calib();
    let size = (cfg.image_height, cfg.image_width);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..cfg.num_images {
        let s = seed.wrapping_add(i as u64);
        let n = 1 + (s as usize % cfg.max_objects.max(1));
        let (img, lab) = synth_scene_with(&cfg.synth, s, n, &calib, size);
        images.push(img);
        labels.push(lab);
    }
    Dataset { image_size: size, calib, images, labels }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the listed images into `[B, 3, H, W]` with their targets.
    pub fn batch(&self, idx: &[usize], num_classes: usize, bins: usize) -> (Tensor, crate::losses::TargetMaps) {
        let (h, w) = self.image_size;
        let mut data = Vec::with_capacity(idx.len() * 3 * h * w);
        let mut objs = Vec::new();
        for &i in idx {
            data.extend_from_slice(self.images[i].data());
            let boxes = self.labels[i].iter().filter_map(|r| Some((r.to_box3d()?, r.bbox))).collect();
            objs.push(ImageObjects { boxes, calib: self.calib.clone() });
        }
        let images = Tensor::new(&[idx.len(), 3, h, w], data).expect("image sizes agree");
        (images, assign_targets(&objs, self.image_size, num_classes, bins))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub htl: HtlConfig,
    pub seed: u64,
}

/// Per-epoch means of the unweighted terms with the weights in force.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub terms: [f64; NUM_TERMS],
    pub weights: [f64; NUM_TERMS],
}

impl EpochRecord {
    pub fn weighted(&self, t: Term) -> f64 {
        self.terms[t.index()] * self.weights[t.index()]
    }
}

/// Trains in place; `on_epoch` sees each finished epoch.
pub fn train(
    det: &Detector,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config(format!(
            "need images, a positive batch size and epochs (got {}, {}, {})",
            data.len(),
            cfg.batch_size,
            cfg.epochs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(store);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut term_history: Vec<[f64; NUM_TERMS]> = Vec::new();
    let hc = &det.cfg.heads;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let weights = htl_weights(epoch, &term_history, &cfg.htl);
        let lr = cfg.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; NUM_TERMS];
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (images, targets) = data.batch(idx, hc.num_classes, hc.angle_bins);
            let grads = {
                let mut g = Graph::new(store, true);
                let rep = match det.loss(&mut g, &images, &targets, &weights) {
                    Ok(r) => r,
                    Err(NetError::Term { term, source: TensorError::Numeric(detail) }) => {
                        return Err(TrainError::NonFinite { term, detail, epoch, step });
                    }
                    Err(e) => return Err(e.into()),
                };
                for t in Term::ALL {
                    let v = rep.values[t.index()];
                    if !v.is_finite() {
                        return Err(TrainError::NonFinite { term: t.name(), detail: format!("value {v}"), epoch, step });
                    }
                    sums[t.index()] += v;
                }
                g.tape.backward(rep.total).map_err(NetError::from)?;
                g.param_grads()
            };
            adam.step(store, &grads, lr, &cfg.optim);
            batches += 1;
            step += 1;
        }
        let terms = sums.map(|s| s / batches as f64);
        term_history.push(terms);
        let rec = EpochRecord { epoch, lr, terms, weights: weights.0 };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// `epoch`, the nine terms, then the nine weights.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch");
    for t in Term::ALL {
        s.push(',');
        s.push_str(t.name());
    }
    for t in Term::ALL {
        s.push_str(",w_");
        s.push_str(t.name());
    }
    s.push('\n');
    for r in history {
        s.push_str(&r.epoch.to_string());
        for v in r.terms.iter().chain(&r.weights) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

